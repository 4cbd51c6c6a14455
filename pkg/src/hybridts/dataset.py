"""In-memory cohort model, CSV/schema I/O and surgery-level splitting.

A cohort is a list of surgeries sharing one channel schema. Every
time-series value carries an explicit presence flag; the value array holds
NaN where nothing was observed so that accidental use of a missing value
propagates loudly instead of silently looking like a measurement. Static
values use ``None`` as their missing sentinel.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TIME_SERIES = "time_series"
STATIC = "static"
_KINDS = (TIME_SERIES, STATIC)


class CohortFormatError(ValueError):
    """Raised when a cohort or schema file violates the file contract."""


@dataclass(frozen=True)
class Channel:
    name: str
    kind: str
    unit: str = ""

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"channel {self.name!r}: unknown kind {self.kind!r}")
        if not self.name or "," in self.name:
            raise ValueError(f"invalid channel name {self.name!r}")


@dataclass(frozen=True)
class ChannelSchema:
    """Ordered channel inventory with one designated target signal."""

    channels: tuple[Channel, ...]
    target: str

    def __post_init__(self) -> None:
        names = [c.name for c in self.channels]
        dupes = [n for n, k in Counter(names).items() if k > 1]
        if dupes:
            raise ValueError(f"duplicate channel names: {dupes}")
        if not self.time_series:
            raise ValueError("schema needs at least one time_series channel")
        if self.target not in self.time_series:
            raise ValueError(f"target {self.target!r} must be a time_series channel")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels)

    @property
    def time_series(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels if c.kind == TIME_SERIES)

    @property
    def statics(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels if c.kind == STATIC)

    def channel(self, name: str) -> Channel:
        for c in self.channels:
            if c.name == name:
                return c
        raise KeyError(name)


@dataclass(frozen=True)
class SurgeryRecord:
    """One surgery: static covariates plus minute-resolution series.

    ``series[name][t]`` is only meaningful where ``observed[name][t]`` is
    true; unobserved entries hold NaN.
    """

    surgery_id: str
    statics: Mapping[str, float | None]
    series: Mapping[str, np.ndarray]
    observed: Mapping[str, np.ndarray]
    duration_min: int

    def __post_init__(self) -> None:
        if self.duration_min < 0:
            raise ValueError("duration_min must be nonnegative")
        if set(self.series) != set(self.observed):
            raise ValueError(f"surgery {self.surgery_id}: series/observed keys differ")
        for name, values in self.series.items():
            mask = self.observed[name]
            if values.shape != (self.duration_min,) or mask.shape != (self.duration_min,):
                raise ValueError(
                    f"surgery {self.surgery_id}: channel {name!r} has length "
                    f"{values.shape[0]}, expected {self.duration_min}"
                )
            values.flags.writeable = False
            mask.flags.writeable = False

    @classmethod
    def from_arrays(
        cls,
        surgery_id: str,
        series: Mapping[str, Sequence[float]],
        statics: Mapping[str, float | None] | None = None,
        observed: Mapping[str, Sequence[bool]] | None = None,
    ) -> SurgeryRecord:
        """Build a record; NaN entries count as missing unless ``observed`` says otherwise."""
        vals: dict[str, np.ndarray] = {}
        obs: dict[str, np.ndarray] = {}
        duration = None
        for name, raw in series.items():
            v = np.array(raw, dtype=np.float64)
            m = ~np.isnan(v) if observed is None else np.array(observed[name], dtype=bool)
            v = np.where(m, v, np.nan)
            vals[name], obs[name] = v, m
            duration = v.shape[0] if duration is None else duration
        return cls(
            surgery_id=str(surgery_id),
            statics=dict(statics or {}),
            series=vals,
            observed=obs,
            duration_min=0 if duration is None else duration,
        )

    @property
    def is_complete(self) -> bool:
        return all(m.all() for m in self.observed.values()) and all(
            v is not None for v in self.statics.values()
        )


@dataclass
class LoadReport:
    """Counts collected while parsing a cohort CSV."""

    rows: int = 0
    unparseable: Counter = field(default_factory=Counter)
    missing: Counter = field(default_factory=Counter)
    ignored_columns: tuple[str, ...] = ()

    @property
    def total_missing(self) -> int:
        return sum(self.missing.values())


@dataclass(frozen=True)
class Cohort:
    schema: ChannelSchema
    surgeries: tuple[SurgeryRecord, ...]
    load_report: LoadReport | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        ids = [s.surgery_id for s in self.surgeries]
        dupes = [i for i, k in Counter(ids).items() if k > 1]
        if dupes:
            raise ValueError(f"duplicate surgery ids: {dupes[:5]}")
        ts, st = set(self.schema.time_series), set(self.schema.statics)
        for s in self.surgeries:
            if set(s.series) != ts or set(s.statics) != st:
                raise ValueError(f"surgery {s.surgery_id} does not conform to the schema")

    def __len__(self) -> int:
        return len(self.surgeries)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.surgery_id for s in self.surgeries)

    def subset(self, ids: Iterable[str]) -> Cohort:
        """Surgeries whose id is in ``ids``, in the cohort's own order."""
        keep = set(ids)
        return Cohort(self.schema, tuple(s for s in self.surgeries if s.surgery_id in keep))


# --------------------------------------------------------------------- schema I/O


def load_schema(path: str | Path) -> ChannelSchema:
    """Parse a ``key=value`` schema sidecar (``channel.<name>.kind``, ``target``)."""
    kinds: dict[str, str] = {}
    units: dict[str, str] = {}
    target = None
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CohortFormatError(f"{path}:{lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key == "target":
            target = value
        elif key.startswith("channel.") and key.count(".") >= 2:
            name, attr = key[len("channel."):].rsplit(".", 1)
            if attr == "kind":
                kinds[name] = value
            elif attr == "unit":
                units[name] = value
            else:
                raise CohortFormatError(f"{path}:{lineno}: unknown channel attribute {attr!r}")
        else:
            raise CohortFormatError(f"{path}:{lineno}: unknown key {key!r}")
    if target is None:
        raise CohortFormatError(f"{path}: no target= line")
    channels = tuple(Channel(n, k, units.get(n, "")) for n, k in kinds.items())
    return ChannelSchema(channels, target)


def save_schema(schema: ChannelSchema, path: str | Path) -> None:
    lines = []
    for c in schema.channels:
        lines.append(f"channel.{c.name}.kind={c.kind}")
        if c.unit:
            lines.append(f"channel.{c.name}.unit={c.unit}")
    lines.append(f"target={schema.target}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------- cohort CSV I/O


def _parse_number(text: str) -> float | None:
    """Return the float, ``None`` for an empty cell; raise on garbage."""
    text = text.strip()
    if not text:
        return None
    value = float(text)
    if math.isnan(value):
        return None
    return value


def load_cohort(path: str | Path, schema: ChannelSchema) -> Cohort:
    """Read a cohort CSV (``surgery_id,time_min,<channels...>``).

    Unparseable numeric cells become missing and are tallied in the
    returned cohort's ``load_report``.

    Raises:
        CohortFormatError: on missing required columns, duplicate
            ``(surgery_id, time_min)`` rows, non-contiguous minutes or
            conflicting static values.
    """
    report = LoadReport()
    groups: dict[str, dict[int, dict[str, float | None]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CohortFormatError(f"{path}: empty file") from None
        required = ["surgery_id", "time_min", *schema.names]
        absent = [c for c in required if c not in header]
        if absent:
            raise CohortFormatError(f"{path}: missing required columns {absent}")
        col = {name: header.index(name) for name in required}
        report.ignored_columns = tuple(h for h in header if h not in col)
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CohortFormatError(f"{path}:{lineno}: expected {len(header)} fields")
            sid = row[col["surgery_id"]].strip()
            try:
                t = int(row[col["time_min"]])
            except ValueError:
                raise CohortFormatError(f"{path}:{lineno}: bad time_min") from None
            rows = groups.setdefault(sid, {})
            if t in rows:
                raise CohortFormatError(f"{path}:{lineno}: duplicate row ({sid}, {t})")
            values: dict[str, float | None] = {}
            for name in schema.names:
                try:
                    values[name] = _parse_number(row[col[name]])
                except ValueError:
                    report.unparseable[name] += 1
                    values[name] = None
            rows[t] = values
            report.rows += 1

    surgeries = []
    for sid, rows in groups.items():
        times = sorted(rows)
        if times != list(range(len(times))):
            raise CohortFormatError(f"surgery {sid}: non-contiguous time index")
        series = {}
        for name in schema.time_series:
            col_vals = [rows[t][name] for t in times]
            report.missing[name] += sum(v is None for v in col_vals)
            series[name] = [np.nan if v is None else v for v in col_vals]
        statics: dict[str, float | None] = {}
        for name in schema.statics:
            seen = {rows[t][name] for t in times} - {None}
            if len(seen) > 1:
                raise CohortFormatError(f"surgery {sid}: conflicting values for static {name!r}")
            statics[name] = seen.pop() if seen else None
            report.missing[name] += statics[name] is None
        surgeries.append(SurgeryRecord.from_arrays(sid, series, statics))
    return Cohort(schema, tuple(surgeries), load_report=report)


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def save_cohort(cohort: Cohort, path: str | Path) -> None:
    """Write ``cohort`` as CSV; statics repeat on every row, missing cells are empty."""
    names = cohort.schema.names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["surgery_id", "time_min", *names])
        for s in cohort.surgeries:
            for t in range(s.duration_min):
                row = [s.surgery_id, str(t)]
                for name in names:
                    if name in s.statics:
                        row.append(_fmt(s.statics[name]))
                    elif s.observed[name][t]:
                        row.append(_fmt(s.series[name][t]))
                    else:
                        row.append("")
                writer.writerow(row)


# --------------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]
    seed: int

    def __post_init__(self) -> None:
        if self.train & self.validation or self.train & self.test or self.validation & self.test:
            raise ValueError("split partitions overlap")

    def partition(self, name: str) -> frozenset[str]:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]


def split_by_surgery(
    cohort: Cohort, fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0
) -> SplitAssignment:
    """Assign whole surgeries to train/validation/test.

    Partition sizes are the rounded fractions of the surgery count (the
    rounding remainder goes to train, and every partition keeps at least
    one surgery). The permutation depends only on the sorted id set and
    ``seed``, never on cohort order.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(cohort)
    if n < 3:
        raise ValueError("need at least 3 surgeries to split")
    n_val = max(1, round(fractions[1] * n))
    n_test = max(1, round(fractions[2] * n))
    while n - n_val - n_test < 1:
        if n_val >= n_test:
            n_val -= 1
        else:
            n_test -= 1
    ids = sorted(cohort.ids)
    perm = np.random.default_rng([seed, 0x5E11]).permutation(n)
    shuffled = [ids[i] for i in perm]
    n_train = n - n_val - n_test
    return SplitAssignment(
        train=frozenset(shuffled[:n_train]),
        validation=frozenset(shuffled[n_train:n_train + n_val]),
        test=frozenset(shuffled[n_train + n_val:]),
        seed=seed,
    )


# --------------------------------------------------------------------- statistics


@dataclass(frozen=True)
class ChannelSummary:
    count: int
    n_missing: int
    mean: float
    std: float

    @property
    def missing_fraction(self) -> float:
        total = self.count + self.n_missing
        return self.n_missing / total if total else 0.0

    @property
    def degenerate(self) -> bool:
        """True when the channel has no observed value at all."""
        return self.count == 0


def channel_values(cohort: Cohort, name: str) -> tuple[np.ndarray, int]:
    """Observed values of one channel across the cohort and the missing count."""
    if name in cohort.schema.statics:
        raw = [s.statics[name] for s in cohort.surgeries]
        vals = np.array([v for v in raw if v is not None], dtype=np.float64)
        return vals, len(raw) - vals.size
    parts = [s.series[name][s.observed[name]] for s in cohort.surgeries]
    vals = np.concatenate(parts) if parts else np.empty(0)
    total = sum(s.duration_min for s in cohort.surgeries)
    return vals, total - vals.size


def cohort_stats(cohort: Cohort) -> dict[str, ChannelSummary]:
    """Per-channel count, missing fraction, mean and population std.

    Channels without any observation get NaN mean/std and report
    ``degenerate``; that is not an error.
    """
    if not len(cohort):
        raise ValueError("cohort is empty")
    out = {}
    for name in cohort.schema.names:
        vals, n_missing = channel_values(cohort, name)
        if vals.size:
            mean = math.fsum(vals) / vals.size
            std = math.sqrt(math.fsum((vals - mean) ** 2) / vals.size)
        else:
            mean = std = math.nan
        out[name] = ChannelSummary(int(vals.size), int(n_missing), mean, std)
    return out
