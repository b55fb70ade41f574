from ..landmarks.service import LandmarkService


_landmark_service = LandmarkService()

def get_landmark_service() -> LandmarkService:
    return _landmark_service
