"""
Configuration for the recommender

Process-level settings (logging, seed override, worker count) come from the
environment, optionally via a .env file. Hyperparameters live in RunConfig,
loaded from a flat ``key = value`` file.
"""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path
from typing import Any, Literal

import structlog
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigError

load_dotenv()

PROFILE_SEQ_LEN = {"shanghai": 200, "talkingdata": 100, "custom": 200}

# Cardinalities (|A|, |S|) used when a profile drives the synthetic generator
PROFILE_CATEGORIES = {"shanghai": (20, 17), "talkingdata": (30, 366)}


class Config:
    """Environment-driven process settings"""

    LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")
    LOG_FORMAT = os.environ.get("LOG_FORMAT", "console")
    REVAMP_SEED = os.environ.get("REVAMP_SEED")
    REVAMP_WORKERS = os.environ.get("REVAMP_WORKERS", "1")

    @classmethod
    def reload(cls) -> None:
        """Re-read the environment (tests and the CLI call this after changing env vars)"""
        cls.LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")
        cls.LOG_FORMAT = os.environ.get("LOG_FORMAT", "console")
        cls.REVAMP_SEED = os.environ.get("REVAMP_SEED")
        cls.REVAMP_WORKERS = os.environ.get("REVAMP_WORKERS", "1")

    @classmethod
    def workers(cls) -> int:
        """REVAMP_WORKERS as a thread count"""
        raw = (cls.REVAMP_WORKERS or "1").strip()
        if not raw.isdigit() or int(raw) < 1:
            raise ConfigError(f"REVAMP_WORKERS must be an integer >= 1, got {cls.REVAMP_WORKERS!r}")
        return int(raw)


def configure_logging(level: str | None = None, fmt: str | None = None) -> None:
    """Route structlog through stdlib logging with a console or JSON renderer"""
    level = (level or Config.LOG_LEVEL).upper()
    fmt = fmt or Config.LOG_FORMAT
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)

    renderer: Any
    if fmt == "json":
        renderer = structlog.processors.JSONRenderer(sort_keys=True)
    else:
        renderer = structlog.dev.ConsoleRenderer(colors=False)

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            renderer,
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )


def validate_startup_config() -> None:
    """Validate environment settings and set up logging"""
    Config.reload()
    if Config.LOG_FORMAT not in ("console", "json"):
        raise ConfigError(f"LOG_FORMAT must be 'console' or 'json', got {Config.LOG_FORMAT!r}")
    if Config.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigError(f"LOG_LEVEL not recognised: {Config.LOG_LEVEL!r}")
    if Config.REVAMP_SEED not in (None, "") and not Config.REVAMP_SEED.lstrip("-").isdigit():
        raise ConfigError(f"REVAMP_SEED must be an integer, got {Config.REVAMP_SEED!r}")
    Config.workers()
    configure_logging()


class RunConfig(BaseModel):
    """Every hyperparameter of a training/evaluation run

    Field aliases follow the symbols used in the model description
    (D, N, M_b, I_a, ...), so config files may use either spelling.
    """

    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    profile: Literal["shanghai", "talkingdata", "custom"] = "custom"

    dim: int = Field(64, alias="D", ge=1)
    seq_len: int | None = Field(None, alias="N", ge=1)
    num_blocks: int = Field(2, alias="M_b")
    heads: int = Field(1, ge=1)
    ffn_dim: int | None = Field(None, alias="D_ff", ge=1)
    clip_app: int = Field(64, alias="I_a")
    clip_poi: int = Field(64, alias="I_l")
    clip_time: int = Field(64, alias="I_t")

    gamma: float = 0.5
    kappa: float = 0.5
    l2: float = Field(0.002, alias="lambda", ge=0.0)

    lr_ei: float = Field(0.01, gt=0.0)
    lr_sr: float = Field(0.001, gt=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = Field(128, ge=1)
    batch_size_ei: int = Field(256, ge=1)
    epochs_ei: int = Field(50, ge=0)
    epochs_sr: int = Field(200, ge=0)
    ei_tolerance: float = Field(1e-5, ge=0.0)
    dropout: float = 0.2
    ln_eps: float = 1e-8
    seed: int = 42

    time_mode: Literal["clipped_quotient", "literal"] = "clipped_quotient"
    use_J: bool = True
    use_K: bool = True
    use_T: bool = True
    use_abs: bool = True

    eval_negatives: int = Field(100, ge=1)
    eval_workers: int = Field(1, ge=1)
    min_checkins: int = Field(5, ge=1)

    pretrained_dim: int = Field(768, ge=1)
    pretrained_path: str | None = None
    allow_fallback_vectors: bool = True
    mf_activation: Literal["relu", "identity"] = "relu"
    relative_kernel: Literal["bucketed", "dense"] = "bucketed"

    @field_validator("gamma", "kappa")
    @classmethod
    def unit_interval(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("must lie in [0, 1]")
        return v

    @field_validator("dropout")
    @classmethod
    def dropout_range(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        return v

    @field_validator("num_blocks")
    @classmethod
    def at_least_one_block(cls, v: int) -> int:
        if v < 1:
            raise ValueError("M_b >= 1 is required")
        return v

    @field_validator("clip_app", "clip_poi", "clip_time")
    @classmethod
    def clip_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("clip constants must be >= 1")
        return v

    @model_validator(mode="after")
    def resolve_profile(self) -> "RunConfig":
        if self.dim % self.heads:
            raise ValueError(f"D={self.dim} is not divisible by heads={self.heads}")
        if self.seq_len is None:
            object.__setattr__(self, "seq_len", PROFILE_SEQ_LEN[self.profile])
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", self.dim)
        return self

    def variant(self, **changes: Any) -> "RunConfig":
        """Copy with changes, re-running validation"""
        data = self.model_dump()
        data.update(changes)
        return build_run_config(data)

    def snapshot(self) -> dict[str, Any]:
        return self.model_dump(mode="json")


def build_run_config(values: dict[str, Any]) -> RunConfig:
    """Validate a mapping into a RunConfig, converting pydantic errors"""
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid run configuration: {problems}") from e


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` text; '#' starts a comment"""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _coerce(value: str) -> Any:
    if value.lower() in ("none", "null", ""):
        return None
    return value


def load_run_config(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    """Load a RunConfig from a config file plus keyword overrides

    REVAMP_SEED in the environment takes precedence over both.
    """
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        values.update({k: _coerce(v) for k, v in parse_config_text(text).items()})
    values.update({k: v for k, v in overrides.items() if v is not None})
    if Config.REVAMP_SEED not in (None, ""):
        values["seed"] = int(Config.REVAMP_SEED)
    return build_run_config(values)


def dump_run_config(config: RunConfig) -> str:
    """Render a RunConfig back into the flat config-file format"""
    lines = []
    for key, value in config.model_dump().items():
        if value is None:
            value = "none"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
