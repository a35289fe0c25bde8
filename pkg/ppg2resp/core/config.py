from pydantic_settings import BaseSettings
from pydantic import Field
from typing import Optional
from pathlib import Path

class Settings(BaseSettings):
    """Application settings"""

    # Output layout
    output_root: Path = Field(default=Path("runs"), alias="PPG2RESP_OUTPUT_ROOT")
    lock_file_name: str = ".ppg2resp.lock"
    config_echo_name: str = "config_echo.yaml"
    train_log_name: str = "train_log.jsonl"

    # Reproducibility
    default_seed: int = Field(default=0, alias="PPG2RESP_SEED")

    # Progress bars (tqdm) on long loops
    show_progress: bool = Field(default=True, alias="PPG2RESP_PROGRESS")

    # Logging
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")
    log_file: Optional[str] = Field(default=None, alias="LOG_FILE")

    # Signal pipeline defaults
    target_fs: float = 30.0
    lowpass_cutoff_hz: float = 1.0
    segment_s: float = 5.0
    eval_window_s: float = 60.0

    # Numerical tolerances
    grad_check_step: float = 1e-5
    grad_check_floor: float = 1e-4

    model_config = {
        "env_file": ".env",
        "case_sensitive": True,
        "extra": "ignore",
        "populate_by_name": True,
    }

    @property
    def logs_dir(self) -> Path:
        return self.output_root / "logs"

    @property
    def resolved_log_file(self) -> Path:
        if self.log_file:
            return Path(self.log_file)
        return self.logs_dir / "ppg2resp.log"

# Create settings instance (lazy initialization)
_settings = None

def get_settings() -> Settings:
    global _settings
    if _settings is None:
        _settings = Settings()
        # Ensure directories exist
        _settings.output_root.mkdir(parents=True, exist_ok=True)
        _settings.logs_dir.mkdir(parents=True, exist_ok=True)
    return _settings

def reset_settings() -> None:
    """Drop the cached instance so the next call re-reads the environment."""
    global _settings
    _settings = None
