"""
pipeline configuration
shared defaults, key-value config files and the exception hierarchy
"""

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, Mapping

TOOLKIT_VERSION = "1.0.0"

# grid and labeling defaults
GRID_MS = 500
HORIZON = 59
WARMUP = 59
WINDOW = 60
N_FEATURES = 13
N_CLASSES = 3
DEFAULT_FEE = 0.0001

# training defaults
BATCH_SIZE = 512
LEARNING_RATE = 0.0001
EARLY_STOP_PATIENCE = 10

# exchange-local segment starts; night segment belongs to the next trading day
SESSION_STARTS = ("23:00", "09:00", "10:30", "13:30")
TZ_OFFSET_HOURS = 8
DAY_ROLL = "18:00"

# class value -> index used by every model and file
LABEL_TO_INDEX = {-1: 0, 0: 1, 1: 2}
INDEX_TO_LABEL = {v: k for k, v in LABEL_TO_INDEX.items()}


class PipelineError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class ConfigError(PipelineError, ValueError):
    pass


class TickFileError(PipelineError):
    """Unreadable tick file, schema mismatch or out-of-order timestamps."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = f"{path}" if path is not None else "tick file"
        if line is not None:
            where += f", line {line}"
        super().__init__(f"{where}: {message}")


class SplitError(PipelineError, ValueError):
    pass


class ShapeMismatchError(PipelineError, ValueError):
    pass


class NonFiniteInputError(PipelineError, ValueError):
    pass


class TrainingDivergedError(PipelineError):
    def __init__(self, message: str, diagnostics: Mapping[str, Any]):
        self.diagnostics = dict(diagnostics)
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} ({details})")


class CheckpointMismatchError(PipelineError):
    pass


class InfeasibleRatioError(PipelineError, ValueError):
    def __init__(self, message: str, achievable: tuple[float, float]):
        self.achievable = achievable
        super().__init__(
            f"{message}; achievable minority share range is "
            f"[{achievable[0]:.4f}, {achievable[1]:.4f}]"
        )


def parse_time_of_day(text: str) -> int:
    """'HH:MM' or 'HH:MM:SS' -> milliseconds since midnight."""
    parts = text.strip().split(":")
    if len(parts) not in (2, 3):
        raise ConfigError(f"bad time of day: {text!r}")
    try:
        h, m = int(parts[0]), int(parts[1])
        s = int(parts[2]) if len(parts) == 3 else 0
    except ValueError as e:
        raise ConfigError(f"bad time of day: {text!r}") from e
    if not (0 <= h < 24 and 0 <= m < 60 and 0 <= s < 60):
        raise ConfigError(f"bad time of day: {text!r}")
    return ((h * 60 + m) * 60 + s) * 1000


@dataclasses.dataclass(frozen=True)
class SessionSchedule:
    """
    Segment starts in exchange-local time.

    Starts at or after ``day_roll`` open a night segment that is attached to
    the following trading day.
    """

    starts: tuple[str, ...] = SESSION_STARTS
    tz_offset_hours: float = TZ_OFFSET_HOURS
    day_roll: str = DAY_ROLL

    def __post_init__(self):
        if not self.starts:
            raise ConfigError("session schedule needs at least one segment start")
        clock = self.clock_starts_ms()
        if len(set(clock)) != len(clock):
            raise ConfigError(f"duplicate session starts: {self.starts}")

    @property
    def shift_ms(self) -> int:
        # local time + shift puts the day roll at clock midnight
        return 86_400_000 - parse_time_of_day(self.day_roll)

    @property
    def offset_ms(self) -> int:
        return int(round(self.tz_offset_hours * 3_600_000))

    def clock_starts_ms(self) -> list[int]:
        """Segment starts on the trading-day clock, sorted."""
        return sorted((parse_time_of_day(s) + self.shift_ms) % 86_400_000 for s in self.starts)


def read_key_value_file(path) -> dict[str, str]:
    """Read a flat ``key = value`` file; '#' starts a comment."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}, line {lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}, line {lineno}: empty key")
            values[key] = value.strip()
    return values


def write_key_value_file(path, values: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(values):
            f.write(f"{key} = {format_value(values[key])}\n")


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _coerce(text: Any, annotation: Any, key: str) -> Any:
    if not isinstance(text, str):
        return text
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)

    # X | None
    if origin in (typing.Union, types.UnionType):
        if text.strip().lower() in ("none", "null", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(text, inner[0], key)

    if origin is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        item_type = args[0] if args else str
        return tuple(_coerce(t, item_type, key) for t in items)

    try:
        if annotation is bool:
            lowered = text.strip().lower()
            if lowered in ("on", "true", "yes", "1"):
                return True
            if lowered in ("off", "false", "no", "0"):
                return False
            raise ValueError(text)
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from e
    return text.strip()


def config_from_mapping(cls, values: Mapping[str, Any], aliases: Mapping[str, str] | None = None):
    """Build dataclass ``cls`` from string values, coercing by field annotation."""
    aliases = aliases or {}
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        name = aliases.get(key, key).replace("-", "_")
        if name not in names:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        kwargs[name] = _coerce(value, hints[name], key)
    return cls(**kwargs)


def config_to_mapping(config) -> dict[str, Any]:
    return {f.name: getattr(config, f.name) for f in dataclasses.fields(config)}
