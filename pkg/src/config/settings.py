import os

try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    pass


LOG_LEVEL = os.getenv("LANDMARKS_LOG_LEVEL", "INFO").upper()
DEFAULT_SEED = int(os.getenv("LANDMARKS_SEED", "0"))

DATA_DIR = os.getenv("LANDMARKS_DATA_DIR", "./data")
RUNS_DIR = os.getenv("LANDMARKS_RUNS_DIR", "./runs")

# Format constants, not configurable
CHECKPOINT_VERSION = 1
VOLUME_SUFFIX = ".f32raw"
SIDECAR_SUFFIX = ".json"
