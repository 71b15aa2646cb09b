"""Application configuration."""
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    # Logging
    log_level: str = "INFO"

    # Background subtraction: |frame - background| > threshold marks foreground
    fg_threshold: int = 25

    # Multi-task loss defaults
    huber_delta: float = 5.0
    count_loss_weight: float = 0.1

    # Gaussian ground truth kernels are cut at this many sigmas
    gaussian_truncate: float = 4.0

    # Thread pool used for restarts, CV folds and per-frame feature extraction
    max_workers: int = 4

    # Cross-validation
    cv_folds: int = 5

    # Synthetic scenes: cap on pairwise IoU within a lane
    max_iou: float = 0.3

    # Finite-difference gradient checks
    gradcheck_step: float = 1e-5
    gradcheck_tol: float = 1e-5
    gradcheck_points: int = 50

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


settings = Settings()
