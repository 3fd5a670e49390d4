# polarseg/config.py
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict
import logging

class Settings(BaseSettings):
    """
    Process settings loaded from environment variables or .env file.
    """
    model_config = SettingsConfigDict(env_file='.env', extra='ignore')

    LOG_LEVEL: str = "INFO"
    DEFAULT_SEED: int = 7
    OUTPUT_DIR: str = "runs"

    # AoLP arctangent argument order: 1/2*atan2(S1, S2) or 1/2*atan2(S2, S1)
    AOLP_CONVENTION: Literal["s1_s2", "s2_s1"] = "s1_s2"
    KERNEL_PARITY: Literal["even", "odd"] = "even"
    DEG_EPS_S0: float = 1e-12

    # thread pool size for sample loading and sharded evaluation
    EVAL_WORKERS: int = 1

settings = Settings()

# Configure logging
logging.basicConfig(level=settings.LOG_LEVEL,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger("polarseg")
