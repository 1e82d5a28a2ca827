import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.models.schemas import RunConfig
from app.utils.error_handler import ConfigError, ParseError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process settings read from VSFORMER_* environment variables"""
    model_config = SettingsConfigDict(env_prefix="VSFORMER_", env_file=".env", extra="ignore")

    # Logging
    LOG_LEVEL: str = "INFO"

    # Defaults for commands that are not given a value
    DEFAULT_SEED: int = 0
    OUTPUT_ROOT: str = "runs"

    # Thread pool size for batched inference and retrieval
    MAX_WORKERS: int = 4

    @property
    def show_progress(self) -> bool:
        """Progress bars only when INFO messages would be shown"""
        return logging.getLevelName(self.LOG_LEVEL.upper()) <= logging.INFO


# Create global settings instance
settings = Settings()


def parse_config_text(text: str) -> Dict[str, str]:
    """Parse flat `section.field=value` lines; `#` starts a comment"""
    values: Dict[str, str] = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got '{raw.strip()}'", line_number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError("empty key", line_number)
        if key in values:
            raise ParseError(f"duplicate key '{key}'", line_number)
        values[key] = value
    return values


def _nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"key '{key}' conflicts with scalar '{part}'")
            node = child
        node[parts[-1]] = value
    return nested


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_run_config(flat: Optional[Mapping[str, Any]] = None, base: Optional[RunConfig] = None) -> RunConfig:
    """Validate dotted overrides on top of `base` (or the defaults)"""
    data = base.model_dump(exclude_unset=True) if base is not None else {}
    data = _merge(data, _nest({k: v for k, v in (flat or {}).items() if v is not None}))
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from exc


def with_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    return build_run_config(overrides, base=cfg)


def load_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a config file (if any) and apply CLI overrides; flags win"""
    flat: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {path}")
        flat.update(parse_config_text(config_path.read_text()))
        logger.info(f"Loaded {len(flat)} config keys from {path}")
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_run_config(flat)


def dump_run_config(cfg: RunConfig) -> str:
    """Inverse of parse_config_text for every field"""
    lines = []

    def walk(prefix: str, value: Any):
        if isinstance(value, dict):
            for key in sorted(value):
                walk(f"{prefix}.{key}" if prefix else key, value[key])
        elif value is None:
            return
        elif isinstance(value, (list, tuple)):
            lines.append(f"{prefix}={','.join(str(v) for v in value)}")
        elif isinstance(value, bool):
            lines.append(f"{prefix}={'true' if value else 'false'}")
        else:
            lines.append(f"{prefix}={value}")

    walk("", cfg.model_dump())
    return "\n".join(lines) + "\n"
