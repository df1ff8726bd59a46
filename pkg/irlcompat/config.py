from typing import Optional
from functools import lru_cache
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Library settings with environment variable support (IRLCOMPAT_*)."""
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="IRLCOMPAT_",
        extra="ignore",
        case_sensitive=False
    )

    # Numerical tolerances
    dp_tolerance: float = 1e-9
    simplex_tolerance: float = 1e-9
    materialize_tolerance: float = 1e-6
    support_eps: float = 1e-12
    expert_action_eps: float = 1e-12
    lp_margin_tol: float = 1e-9

    # Exploration constants
    beta_constant: float = 1.0  # c in beta = c*H*sqrt(d ln(1+tau) + ln(H/delta))
    bonus_constant: float = 1.0  # scales the Hoeffding bonus
    stop_constant: float = 1.0  # c_stop of the linear explorer
    bpi_reward_threshold: Optional[int] = None  # None -> max(1, floor(S / ln A))

    # Sampling / parallelism
    expert_block_size: int = 8192
    default_threads: int = 1

    # Logging configuration
    log_level: str = "INFO"
    log_format: str = "json"


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
