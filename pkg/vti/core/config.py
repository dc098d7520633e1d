"""
VTI Core Configuration
Handles every hyperparameter: defaults, VTI_* environment overrides and flat key=value files
"""

from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from vti.core.errors import ContractViolation, DatasetIOError, ParseError
from vti.schemas.config import GenerationConfig, NetworkConfig, SynthConfig, TrainConfig


class Settings(BaseSettings):
    """
    Application settings
    Every key has a default; VTI_<KEY> environment variables override them
    """

    # Data
    n: int = 2000
    seed: int = 7
    style_count: int = 3
    min_freq: int = 2
    image_size: int = 32

    # Network dimensions
    d_v: int = 64
    d_h: int = 64
    d_z: int = 64
    d_e: int = 64
    d_hidden: int = 64
    n_max: int = 7
    visual_head_dim: int = 8
    language_heads: int = 4
    transformer_layers: int = 2
    max_positions: int = 32
    visual_positional: bool = False
    inject_topic_each_step: bool = False
    shared_prior_mlp: bool = False
    deterministic_topics: bool = False

    # Training
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 30
    max_steps: int = 0
    patience: int = 5
    mc_samples: int = 1
    beta_max: float = 1.0
    anneal_cycles: int = 4
    anneal_ramp_ratio: float = 0.5
    dropout_rate: float = 0.5
    grad_clip: float = 5.0
    supervise_empty_slots: bool = True

    # Generation
    temperature: float = 0.7
    top_k: int = 5
    variants: int = 3
    rescoring_samples: int = 10
    max_sentence_len: int = 20

    # Logging
    log_level: str = "INFO"
    log_format: Literal["text", "json"] = "text"
    log_file: str | None = None

    model_config = SettingsConfigDict(
        env_prefix="VTI_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",  # unknown keys are rejected by parse_flat_config and load_settings
        case_sensitive=False,
    )

    @property
    def network_config(self) -> NetworkConfig:
        """Model dimensions (vocab_size is filled in once a vocabulary exists)"""
        return NetworkConfig(**self._pick(NetworkConfig))

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**self._pick(TrainConfig))

    @property
    def generation_config(self) -> GenerationConfig:
        return GenerationConfig(**self._pick(GenerationConfig))

    @property
    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self._pick(SynthConfig))

    def _pick(self, schema) -> dict[str, Any]:
        values = self.model_dump()
        return {name: values[name] for name in schema.model_fields if name in values}

    def to_flat_text(self) -> str:
        """Render the resolved configuration in the same key=value form load_settings reads"""
        lines = []
        for key, value in self.model_dump().items():
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


def parse_flat_config(text: str) -> dict[str, str]:
    """
    Parse key=value lines

    Blank lines and lines starting with '#' are ignored. Keys are lower-cased.

    Raises:
        ParseError: line without '='
        ContractViolation: unknown or repeated key
    """
    known = set(Settings.model_fields)
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        if key not in known:
            raise ContractViolation(f"unknown config key {key!r} (line {lineno})")
        if key in values:
            raise ContractViolation(f"duplicate config key {key!r} (line {lineno})")
        values[key] = value
    return values


def load_settings(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> Settings:
    """
    Build Settings from defaults, environment, an optional flat file and explicit overrides

    Args:
        path: key=value config file
        overrides: values that win over the file (CLI flags); None values are skipped

    Returns:
        Validated Settings
    """
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise DatasetIOError("config file not found", path)
        values.update(parse_flat_config(path.read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in Settings.model_fields:
            raise ContractViolation(f"unknown config key {key!r}")
        values[key] = value
    try:
        return Settings(**values)
    except ValidationError as e:
        raise ContractViolation(f"invalid configuration: {e}") from e


@lru_cache()
def get_settings() -> Settings:
    """
    Get cached settings instance (defaults + environment)
    Uses lru_cache to avoid re-reading the environment on every call
    """
    return Settings()
