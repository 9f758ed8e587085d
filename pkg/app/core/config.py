"""
Application configuration using Pydantic Settings.
"""
from pathlib import Path
from functools import lru_cache
from typing import Literal, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore"
    )

    # Logging
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"

    # Training defaults (Adam defaults follow the published method)
    default_lr: float = 1e-3
    default_batch_size: int = 128
    default_epochs: int = 30
    default_runs: int = 10
    default_seed: int = 0

    # Mark bounds: finishing / saturation level
    mark_lo: float = 0.0
    mark_hi: float = 1.0

    # Gradient check
    gradcheck_tolerance: float = 1e-4
    gradcheck_step: float = 1e-5
    gradcheck_floor: float = 1e-6
    gradcheck_samples_per_param: int = 6

    # Parallel runs within one experiment
    max_workers: int = 1

    # Server settings
    host: str = "0.0.0.0"
    port: int = 7860

    # Paths
    base_dir: Path = Path(__file__).parent.parent.parent
    data_dir: Path = base_dir / "data"
    mnist_dir: Path = data_dir / "mnist"
    strokes_dir: Path = data_dir / "strokes"
    results_dir: Path = data_dir / "results"

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        # Ensure the output directory exists
        self.results_dir.mkdir(parents=True, exist_ok=True)

    def idx_path(self, name: str) -> Optional[Path]:
        """Resolve an IDX file inside mnist_dir, plain or gzipped."""
        for candidate in (self.mnist_dir / name, self.mnist_dir / f"{name}.gz"):
            if candidate.exists():
                return candidate
        return None

    @property
    def mnist_files(self) -> dict[str, Optional[Path]]:
        """The four IDX files of the MNIST distribution."""
        return {
            "train_images": self.idx_path("train-images-idx3-ubyte"),
            "train_labels": self.idx_path("train-labels-idx1-ubyte"),
            "test_images": self.idx_path("t10k-images-idx3-ubyte"),
            "test_labels": self.idx_path("t10k-labels-idx1-ubyte"),
        }

    @property
    def stroke_samples_dir(self) -> Path:
        return self.strokes_dir / "samples"

    @property
    def stroke_labels_path(self) -> Path:
        return self.strokes_dir / "labels.txt"


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
