import os
from pathlib import Path

from dotenv import load_dotenv
from pydantic import BaseModel, Field

# Repository root, used to resolve the bundled class map and weight matrix
PROJECT_ROOT = Path(__file__).resolve().parent.parent

DEFAULT_SEED = 20200


class Settings(BaseModel):
    seed: int = DEFAULT_SEED
    jobs: int = Field(default=1, ge=1)
    log_level: str = "INFO"
    class_map_path: Path = PROJECT_ROOT / "data" / "class_map.csv"
    weights_path: Path = PROJECT_ROOT / "data" / "weights.csv"


def load_settings(env_file: str = None) -> Settings:
    """
    Build settings from the environment, reading a .env file first if present.

    Args:
        env_file (str, optional): Explicit path to an environment file

    Returns:
        Settings: Validated settings
    """
    load_dotenv(dotenv_path=env_file, override=False)

    values = {}
    if os.getenv("ECG_SENET_SEED"):
        values["seed"] = int(os.environ["ECG_SENET_SEED"])
    if os.getenv("ECG_SENET_JOBS"):
        values["jobs"] = int(os.environ["ECG_SENET_JOBS"])
    if os.getenv("ECG_SENET_LOG_LEVEL"):
        values["log_level"] = os.environ["ECG_SENET_LOG_LEVEL"].upper()
    if os.getenv("ECG_SENET_CLASS_MAP"):
        values["class_map_path"] = Path(os.environ["ECG_SENET_CLASS_MAP"])
    if os.getenv("ECG_SENET_WEIGHTS"):
        values["weights_path"] = Path(os.environ["ECG_SENET_WEIGHTS"])

    return Settings(**values)
