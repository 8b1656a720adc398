"""Experiment configuration: schema, loader and fingerprint.

Config files are flat ``key=value`` text in ``.env`` syntax (comments,
quotes and ``export`` prefixes work). Every key must appear in
``SCHEMA``; anything else is an error naming the line.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable

from dotenv.parser import parse_stream

from otafl.errors import ConfigError

ENV_OUTPUT_ROOT = "OTAFL_OUTPUT_ROOT"
ENV_MAX_WORKERS = "OTAFL_MAX_WORKERS"
DEFAULT_OUTPUT_ROOT = "artifacts"
DEFAULT_MAX_WORKERS = 4

CASES = ("I", "II")
TASKS = ("ridge", "classifier", "idx")
CHANNEL_MODES = ("static", "redraw")
STRATEGIES = ("normalized", "raw_conservative", "standardized", "ideal")


def output_root() -> Path:
    return Path(os.getenv(ENV_OUTPUT_ROOT, DEFAULT_OUTPUT_ROOT))


def max_workers() -> int:
    raw = os.getenv(ENV_MAX_WORKERS, "")
    try:
        return max(1, int(raw)) if raw else DEFAULT_MAX_WORKERS
    except ValueError as exc:
        raise ConfigError(f"{ENV_MAX_WORKERS} must be an integer, got {raw!r}") from exc


# ---------------------------------------------------------------------------
# Value parsers
# ---------------------------------------------------------------------------

def _choice(options: tuple[str, ...]) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        value = raw.strip()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {value!r}")
        return value
    return parse


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise ValueError(f"expected a positive integer, got {value}")
    return value


def _nonneg_int(raw: str) -> int:
    value = int(raw)
    if value < 0:
        raise ValueError(f"expected a non-negative integer, got {value}")
    return value


def _real(raw: str) -> float:
    """A finite real; ``pi`` expressions such as ``pi/3`` are accepted."""
    text = raw.strip().lower()
    if "pi" in text:
        num, _, den = text.partition("/")
        factor = num.replace("pi", "").replace("*", "").strip()
        value = (float(factor) if factor else 1.0) * math.pi / (float(den) if den else 1.0)
    elif text.startswith("sqrt(") and text.endswith(")"):
        value = math.sqrt(float(text[5:-1]))
    else:
        value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"expected a finite number, got {raw!r}")
    return value


def _positive_real(raw: str) -> float:
    value = _real(raw)
    if value <= 0:
        raise ValueError(f"expected a positive number, got {value}")
    return value


def _nonneg_real(raw: str) -> float:
    value = _real(raw)
    if value < 0:
        raise ValueError(f"expected a non-negative number, got {value}")
    return value


def _b_max(raw: str) -> tuple[float, ...]:
    values = tuple(_positive_real(part) for part in raw.split(",") if part.strip())
    if not values:
        raise ValueError("expected one or more positive numbers")
    return values


def _strategies(raw: str) -> tuple[str, ...]:
    names = tuple(part.strip() for part in raw.split(",") if part.strip())
    if not names:
        raise ValueError("expected at least one strategy")
    for name in names:
        _choice(STRATEGIES)(name)
    return names


def _seeds(raw: str) -> tuple[int, ...]:
    """``0-19``, ``1,5,9`` or a mix such as ``0-4,10``."""
    seeds: list[int] = []
    for part in (p.strip() for p in raw.split(",")):
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        if sep:
            start, stop = int(lo), int(hi)
            if stop < start:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(start, stop + 1))
        else:
            seeds.append(int(part))
    if not seeds or min(seeds) < 0:
        raise ValueError("expected non-negative seeds")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    return tuple(seeds)


def _optional(parser: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(raw: str) -> Any:
        return None if raw.strip() in ("", "none") else parser(raw)
    return parse


def _flag(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


@dataclass(frozen=True)
class ConfigField:
    name: str
    parser: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: tuple[ConfigField, ...] = (
    ConfigField("case", _choice(CASES), "I", "I: smooth loss, eta=1/t^p; II: strongly convex, constant eta"),
    ConfigField("task", _choice(TASKS), "ridge", "ridge | classifier | idx"),
    ConfigField("num_devices", _positive_int, 20, "number of devices K"),
    ConfigField("samples_per_device", _positive_int, 50, "synthetic samples per device"),
    ConfigField("dim", _positive_int, 10, "ridge feature dimension"),
    ConfigField("noise_std", _nonneg_real, 0.5, "ridge label noise"),
    ConfigField("ridge_coeff", _positive_real, 0.1, "ridge regularization"),
    ConfigField("dim_in", _positive_int, 8, "classifier input dimension"),
    ConfigField("hidden", _positive_int, 16, "classifier hidden width"),
    ConfigField("classes", _positive_int, 3, "classifier classes"),
    ConfigField("idx_images", _optional(str), None, "IDX image file for task=idx"),
    ConfigField("idx_labels", _optional(str), None, "IDX label file for task=idx"),
    ConfigField("idx_limit", _optional(_positive_int), None, "use the first n IDX samples"),
    ConfigField("skew", _nonneg_real, 0.0, "label skew of the partition, 0 (IID) to 1"),
    ConfigField("test_fraction", _nonneg_real, 0.2, "held-out share for test loss and accuracy"),
    ConfigField("task_seed", _nonneg_int, 0, "seed of the dataset, partition and channel"),
    ConfigField("warmup_rounds", _positive_int, 200, "rounds of the G warm-up"),
    ConfigField("channel_mean", _positive_real, 1e-5, "mean of the Rayleigh channel"),
    ConfigField("sigma2", _nonneg_real, 1e-7, "receiver noise variance"),
    ConfigField("channel_mode", _choice(CHANNEL_MODES), "static", "static | redraw each round"),
    ConfigField("b_max", _b_max, (math.sqrt(5.0),), "device gain limit, scalar or one per device"),
    ConfigField("theta_th", _nonneg_real, math.pi / 3, "angle cap, e.g. pi/3"),
    ConfigField("strategy", _strategies, ("normalized",), "comma-separated strategies"),
    ConfigField("p", _positive_real, 0.75, "Case I exponent, eta_t = 1/t^p"),
    ConfigField("eta", _positive_real, 0.01, "Case II constant learning rate"),
    ConfigField("target_s", _optional(_positive_real), None, "Case II contraction s = q_max"),
    ConfigField("target_eps", _optional(_positive_real), None, "Case II bias floor (default 0.1)"),
    ConfigField("delta_f", _optional(_positive_real), None, "Case I deltaF estimate (default F(w^1))"),
    ConfigField("rounds", _positive_int, 500, "training rounds T"),
    ConfigField("seeds", _seeds, tuple(range(20)), "run seeds, e.g. 0-19"),
    ConfigField("batch_size", _nonneg_int, 0, "mini-batch size, 0 for full local gradients"),
    ConfigField("compare_unoptimized", _flag, False, "also run b=b_max with matched a*sum(b)"),
    ConfigField("output_dir", _optional(str), None, f"output directory (default ${ENV_OUTPUT_ROOT})"),
)

FIELDS = {f.name: f for f in SCHEMA}
NOT_FINGERPRINTED = ("output_dir",)
DEFAULT_TARGET_EPS = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    case: str = "I"
    task: str = "ridge"
    num_devices: int = 20
    samples_per_device: int = 50
    dim: int = 10
    noise_std: float = 0.5
    ridge_coeff: float = 0.1
    dim_in: int = 8
    hidden: int = 16
    classes: int = 3
    idx_images: str | None = None
    idx_labels: str | None = None
    idx_limit: int | None = None
    skew: float = 0.0
    test_fraction: float = 0.2
    task_seed: int = 0
    warmup_rounds: int = 200
    channel_mean: float = 1e-5
    sigma2: float = 1e-7
    channel_mode: str = "static"
    b_max: tuple[float, ...] = (math.sqrt(5.0),)
    theta_th: float = math.pi / 3
    strategy: tuple[str, ...] = ("normalized",)
    p: float = 0.75
    eta: float = 0.01
    target_s: float | None = None
    target_eps: float | None = None
    delta_f: float | None = None
    rounds: int = 500
    seeds: tuple[int, ...] = tuple(range(20))
    batch_size: int = 0
    compare_unoptimized: bool = False
    output_dir: str | None = None

    def __post_init__(self) -> None:
        if self.case == "I" and not 0.5 < self.p < 1:
            raise ConfigError("Case I needs 1/2 < p < 1", key="p")
        if self.target_s is not None and self.target_eps is not None:
            raise ConfigError("give target_s or target_eps, not both", key="target_s")
        if self.target_s is not None and not 0 < self.target_s < 1:
            raise ConfigError("target_s must lie in (0, 1)", key="target_s")
        if self.case == "II" and self.task != "ridge":
            raise ConfigError("Case II needs the strongly convex ridge task", key="task")
        if len(self.b_max) not in (1, self.num_devices):
            raise ConfigError(
                f"b_max needs 1 or {self.num_devices} values, got {len(self.b_max)}", key="b_max")
        if not self.theta_th < math.pi / 2:
            raise ConfigError("theta_th must be below pi/2", key="theta_th")
        if self.skew > 1:
            raise ConfigError("skew must lie in [0, 1]", key="skew")
        if self.test_fraction >= 1:
            raise ConfigError("test_fraction must lie in [0, 1)", key="test_fraction")
        if self.task == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("task=idx needs idx_images and idx_labels", key="task")

    @property
    def case2_target(self) -> dict:
        if self.target_s is not None:
            return {"s": self.target_s}
        return {"eps": self.target_eps if self.target_eps is not None else DEFAULT_TARGET_EPS}

    def output_path(self) -> Path:
        return Path(self.output_dir) if self.output_dir else output_root()

    def to_dict(self) -> dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON of every field that shapes results."""
        data = {k: v for k, v in self.to_dict().items() if k not in NOT_FINGERPRINTED}
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def replace(self, **changes: Any) -> "ExperimentConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ExperimentConfig(**values)


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse config text; ``overrides`` are raw ``key -> value`` strings applied last."""
    values: dict[str, Any] = {}
    seen: dict[str, int] = {}
    for binding in parse_stream(io.StringIO(text)):
        line = binding.original.line
        if binding.error:
            raise ConfigError(f"cannot parse {binding.original.string.strip()!r}", line=line)
        if binding.key is None:
            continue
        key = binding.key.strip()
        if key not in FIELDS:
            raise ConfigError("unknown key", line=line, key=key)
        if key in seen:
            raise ConfigError(f"duplicate key (first on line {seen[key]})", line=line, key=key)
        seen[key] = line
        values[key] = _convert(key, binding.value or "", line)
    for key, raw in (overrides or {}).items():
        if key not in FIELDS:
            raise ConfigError("unknown key", key=key)
        values[key] = _convert(key, raw, None)
    return ExperimentConfig(**values)


def _convert(key: str, raw: str, line: int | None) -> Any:
    try:
        return FIELDS[key].parser(raw)
    except ValueError as exc:
        raise ConfigError(str(exc), line=line, key=key) from exc


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, overrides)


def describe_schema() -> str:
    """The schema as commented config text, one key per entry."""
    lines = []
    for f in SCHEMA:
        default = f.default
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        lines.append(f"# {f.help}")
        lines.append(f"{f.name}={'' if default is None else default}")
    return "\n".join(lines) + "\n"
