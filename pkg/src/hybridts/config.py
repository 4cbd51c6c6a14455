"""Experiment configuration and its ``key=value`` text format.

Every field is addressable with a dotted key::

    # comments and blank lines are ignored
    synth.n_surgeries=200
    lstm.layer_sizes=32,32
    gbt.learning_rate=0.02
    split.fractions=0.6,0.2,0.2
    lookbacks=30,60

Unknown keys and unparseable values raise :class:`ConfigError`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .features import EmaConfig, LabelConfig
from .gbt import GBTConfig
from .lstm import LSTMConfig
from .synthgen import SynthConfig

ALL_MODELS = (1, 2, 3, 4, 5, 6, 7)

# desk-scale learner settings used unless a config overrides them
DESK_LSTM = LSTMConfig(
    layer_sizes=(32, 32),
    learning_rate=0.01,
    batch_size=128,
    patience_epochs=20,
    max_epochs=50,
    negative_fraction=0.25,
    dtype="float32",
)
DESK_GBT = GBTConfig(max_rounds=300)


class ConfigError(ValueError):
    """Invalid configuration text or field value."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment's numbers.

    ``cohort_path``/``schema_path`` select a CSV cohort; when unset the
    cohort comes from ``synth``. Every LSTM in an experiment is trained on
    windows from the target-aligned sample set, which starts at minute
    ``max(lookbacks) - 1``; the methodology and ablation LSTMs use the
    longest lookback.
    """

    cohort_path: str | None = None
    schema_path: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    split_fractions: tuple[float, ...] = (0.6, 0.2, 0.2)
    split_seed: int = 0
    ema: EmaConfig = field(default_factory=EmaConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    lookbacks: tuple[int, ...] = (30, 60)
    lstm: LSTMConfig = DESK_LSTM
    gbt: GBTConfig = DESK_GBT
    ablation: tuple[int, ...] = ALL_MODELS
    output_dir: str = "out"

    def __post_init__(self) -> None:
        if (self.cohort_path is None) != (self.schema_path is None):
            raise ConfigError("data.cohort and data.schema must be given together")
        if len(self.split_fractions) != 3:
            raise ConfigError("split.fractions needs three values")
        if not self.lookbacks or any(L < 1 for L in self.lookbacks):
            raise ConfigError("lookbacks must be positive integers")
        if len(set(self.lookbacks)) != len(self.lookbacks):
            raise ConfigError("lookbacks must be distinct")
        if not self.ablation:
            raise ConfigError("select at least one ablation model")
        bad = [m for m in self.ablation if m not in ALL_MODELS]
        if bad:
            raise ConfigError(f"unknown ablation models {bad}")

    @property
    def lookback(self) -> int:
        return max(self.lookbacks)


_SECTIONS = {"synth": "synth", "ema": "ema", "label": "label", "lstm": "lstm", "gbt": "gbt"}
_TOP = {
    "data.cohort": "cohort_path",
    "data.schema": "schema_path",
    "split.fractions": "split_fractions",
    "split.seed": "split_seed",
    "lookbacks": "lookbacks",
    "ablation": "ablation",
    "output_dir": "output_dir",
}


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse_like(text: str, like: Any, key: str) -> Any:
    """Parse ``text`` into the type of the default value ``like``."""
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            parts = [p for p in (s.strip() for s in text.split(",")) if p]
            elem = like[0] if like else 0.0
            return tuple(_parse_like(p, elem, key) for p in parts)
        if like is None or isinstance(like, str):
            return None if text == "" and like is None else text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    raise ConfigError(f"{key}: unsupported field type {type(like).__name__}")


def _items(cfg: ExperimentConfig) -> list[tuple[str, Any]]:
    out = [(k, getattr(cfg, attr)) for k, attr in _TOP.items()]
    for prefix, attr in _SECTIONS.items():
        sub = getattr(cfg, attr)
        out.extend((f"{prefix}.{f.name}", getattr(sub, f.name)) for f in fields(sub))
    return out


def keys() -> list[str]:
    return [k for k, _ in _items(ExperimentConfig())]


def dumps(cfg: ExperimentConfig, include_output: bool = True) -> str:
    lines = [f"{k}={_format(v)}" for k, v in _items(cfg) if include_output or k != "output_dir"]
    return "\n".join(lines) + "\n"


def _resolve(key: str) -> tuple[str | None, str]:
    """``(section attribute or None, field name)`` for a dotted key."""
    if key in _TOP:
        return None, _TOP[key]
    prefix, _, name = key.partition(".")
    if prefix in _SECTIONS and name and name in {f.name for f in fields(getattr(ExperimentConfig(), _SECTIONS[prefix]))}:
        return _SECTIONS[prefix], name
    raise ConfigError(f"unknown config key {key!r}")


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``key=value`` lines on top of ``base`` (defaults when omitted).

    Assignments to one nested config are applied together, so line order
    never matters; each config then validates itself and validation errors
    surface as :class:`ConfigError`.
    """
    cfg = base or ExperimentConfig()
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        section, name = _resolve(key)
        like = getattr(cfg if section is None else getattr(cfg, section), name)
        if like is None:  # optional paths default to None
            like = ""
        target = top if section is None else nested.setdefault(section, {})
        if name in target:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        target[name] = _parse_like(value, like, key)
        if section is None and name in ("cohort_path", "schema_path") and target[name] == "":
            target[name] = None
    try:
        for section, changes in nested.items():
            top[section] = replace(getattr(cfg, section), **changes)
        return replace(cfg, **top)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"), base)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Route one seed to the generator, the split and both learners."""
    return replace(
        cfg,
        synth=replace(cfg.synth, seed=seed),
        split_seed=seed,
        lstm=replace(cfg.lstm, seed=seed),
        gbt=replace(cfg.gbt, seed=seed),
    )


def fingerprint(cfg: ExperimentConfig) -> str:
    """First 16 hex digits of the SHA-256 of the canonical dump, output_dir excluded."""
    return hashlib.sha256(dumps(cfg, include_output=False).encode("utf-8")).hexdigest()[:16]
