"""Synthetic surgical cohorts with planted, recoverable structure.

Each surgery gets a mean-reverting SaO2 trace near 97 and a handful of
auxiliary vitals. A static risk score ``u = w.z + bias`` over the
standardized static covariates ``z`` sets how eventful a surgery is:
``logistic(u)`` scales both the rate of precursor bursts and the hazard of
spontaneous desaturation episodes.

A precursor burst is a ten-minute disturbance of SaO2 and ETCO2, either an
oscillation or a shallow sag. It turns into an episode
``precursor_lag_min`` (+/- ``precursor_jitter_min``) minutes later with a
probability that depends on the kind and on the statics in opposite
directions: ``logistic(+c.z)`` for oscillations and ``logistic(-c.z)`` for
sags. The two kinds convert equally often on average, so a model that only
sees SaO2 cannot do better than knowing a burst happened, while a model that
also sees the statics gains from knowing which kind it was.

Shortly before every episode ETCO2 drifts up, so auxiliary channels carry
short-horizon information that the target alone lacks. The non-episode
part of SaO2 is kept above the hypoxemia threshold, so every low value
belongs to a generated episode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter
from scipy.special import expit

from .dataset import STATIC, TIME_SERIES, Channel, ChannelSchema, Cohort, SurgeryRecord, save_cohort, save_schema
from .features import UNDEFINED, LabelConfig, label_cohort

TARGET = "sao2"
_AUX = (
    # name, unit, mean, stationary std
    ("etco2", "mmHg", 36.0, 2.0),
    ("hr", "bpm", 72.0, 6.0),
    ("map", "mmHg", 80.0, 7.0),
    ("rr", "1/min", 12.0, 1.5),
    ("temp", "degC", 36.4, 0.3),
)
_STATICS = (
    # name, unit, mean, std
    ("age", "years", 55.0, 15.0),
    ("weight", "kg", 80.0, 15.0),
    ("height", "cm", 170.0, 10.0),
    ("asa", "class", 2.5, 0.8),
)
_BASELINE_FLOOR = 92.5  # non-episode SaO2 never reaches the threshold
_THRESHOLD = 92.0
_LEAD_MIN = 6
_LEAD_MMHG = 4.0


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings. Defaults give roughly 1.5% positive minutes.

    Attributes:
        static_risk_weights: weights ``w`` of the risk score over static z-scores;
            the risk multiplier is ``logistic(w.z + static_risk_bias)``.
        kind_contrast_weights: weights ``c`` deciding which burst kind converts.
        precursor_rate: bursts per minute at risk multiplier 1.
        precursor_conversion: scale on the kind-specific conversion probability.
        precursor_strength: SaO2 amplitude (percent) of a burst.
        baseline_event_rate: spontaneous episodes per minute at risk multiplier 1.
    """

    n_surgeries: int = 200
    duration_range: tuple[int, int] = (120, 240)
    n_extra_channels: int = 5
    n_statics: int = 4
    precursor_lag_min: int = 45
    precursor_jitter_min: int = 2
    precursor_strength: float = 3.0
    precursor_rate: float = 0.06
    precursor_conversion: float = 1.0
    baseline_event_rate: float = 0.006
    static_risk_weights: tuple[float, ...] = (3.36, 2.1, -1.68, 2.94)
    static_risk_bias: float = -5.2
    kind_contrast_weights: tuple[float, ...] = (2.0, -2.0, 2.0, -2.0)
    missing_rate: float = 0.02
    noise_std: float = 0.3
    ou_theta: float = 0.15
    ou_std: float = 0.8
    refractory_min: int = 20
    label_rate_band: tuple[float, float] = (0.01, 0.02)
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.duration_range
        if self.n_surgeries < 1:
            raise ValueError("n_surgeries must be positive")
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid duration_range {self.duration_range}")
        if not 30 < self.precursor_lag_min <= 60:
            raise ValueError("precursor_lag_min must lie in (30, 60]")
        if not 0 <= self.precursor_jitter_min < self.precursor_lag_min - 30:
            raise ValueError("precursor jitter would push episodes inside a 30-minute lookback")
        if self.n_extra_channels < 1:
            raise ValueError("need at least one auxiliary channel (the precursor also marks it)")
        if len(self.static_risk_weights) != self.n_statics:
            raise ValueError("static_risk_weights needs one weight per static")
        if len(self.kind_contrast_weights) != self.n_statics:
            raise ValueError("kind_contrast_weights needs one weight per static")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        for name in ("precursor_strength", "precursor_rate", "precursor_conversion",
                     "baseline_event_rate", "noise_std", "ou_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 < self.ou_theta <= 1.0:
            raise ValueError("ou_theta must lie in (0, 1]")


@dataclass
class GroundTruth:
    """Latent quantities behind a generated cohort.

    Attributes:
        hazard: per surgery, the probability that an episode starts at each minute.
        onsets: per surgery, first below-threshold minute of every realized episode.
        bursts: per surgery, start minute of every precursor burst.
        kinds: per surgery, kind of every burst (0 oscillation, 1 sag).
        risk: per surgery, the static risk multiplier.
    """

    hazard: dict[str, np.ndarray] = field(default_factory=dict)
    onsets: dict[str, np.ndarray] = field(default_factory=dict)
    bursts: dict[str, np.ndarray] = field(default_factory=dict)
    kinds: dict[str, np.ndarray] = field(default_factory=dict)
    risk: dict[str, float] = field(default_factory=dict)

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["surgery_id", "time_min", "hazard", "onset", "burst"])
            for sid, hz in self.hazard.items():
                on = set(self.onsets[sid].tolist())
                bu = set(self.bursts[sid].tolist())
                for t, h in enumerate(hz.tolist()):
                    w.writerow([sid, t, repr(h), int(t in on), int(t in bu)])


def synth_schema(cfg: SynthConfig) -> ChannelSchema:
    chans = [Channel(TARGET, TIME_SERIES, "%")]
    for k in range(cfg.n_extra_channels):
        name, unit = (_AUX[k][:2] if k < len(_AUX) else (f"aux{k}", "a.u."))
        chans.append(Channel(name, TIME_SERIES, unit))
    for k in range(cfg.n_statics):
        name, unit = (_STATICS[k][:2] if k < len(_STATICS) else (f"static{k}", "a.u."))
        chans.append(Channel(name, STATIC, unit))
    return ChannelSchema(tuple(chans), TARGET)


def _ou(rng: np.random.Generator, n: int, theta: float, std: float) -> np.ndarray:
    """Zero-mean AR(1) discretization of an OU process, started in stationarity."""
    a = 1.0 - theta
    innov = std * np.sqrt(1.0 - a * a)
    e = rng.standard_normal(n)
    x0 = std * rng.standard_normal()
    out, _ = lfilter([innov], [1.0, -a], e, zi=[a * x0])
    return out


OSCILLATION, SAG = 0, 1
BURST_MIN = 10


def burst_shape(kind: int) -> np.ndarray:
    """Unit-amplitude SaO2 disturbance of a burst (positive values lower SaO2)."""
    t = np.arange(BURST_MIN)
    taper = np.hanning(BURST_MIN + 2)[1:-1]
    if kind == OSCILLATION:
        return np.sin(2 * np.pi * t / 4.0) * taper
    if kind == SAG:
        return taper
    raise ValueError(f"unknown burst kind {kind}")


def _episode(rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """SaO2 deficit profile of one episode and the offset of its nominal onset.

    Two minutes of shallow decline, a dip held for a few minutes, then a
    three-minute recovery.
    """
    depth = 97.0 - rng.uniform(84.0, 89.0)
    hold = int(rng.integers(3, 9))
    ramp = np.array([0.6, 1.4])
    recover = depth * np.array([0.6, 0.3, 0.1])
    return np.concatenate([ramp, np.full(hold, depth), recover]), ramp.size


def _generate_one(cfg: SynthConfig, index: int, schema: ChannelSchema):
    rng = np.random.default_rng([cfg.seed, index])
    lo, hi = cfg.duration_range
    n = int(rng.integers(lo, hi + 1))

    z = rng.standard_normal(cfg.n_statics)
    w = np.asarray(cfg.static_risk_weights, dtype=np.float64)
    c = np.asarray(cfg.kind_contrast_weights, dtype=np.float64)
    risk = float(expit(w @ z + cfg.static_risk_bias)) if cfg.n_statics else 1.0
    contrast = float(c @ z) if cfg.n_statics else 0.0
    p_convert = (min(1.0, cfg.precursor_conversion * float(expit(contrast))),
                 min(1.0, cfg.precursor_conversion * float(expit(-contrast))))
    statics = {}
    for k, name in enumerate(schema.statics):
        mean, std = _STATICS[k][2:] if k < len(_STATICS) else (0.0, 1.0)
        v = mean + std * z[k]
        statics[name] = float(np.clip(np.round(v), 1, 5)) if name == "asa" else float(v)

    # precursor bursts and the episodes they seed
    burst_starts = np.flatnonzero(rng.random(n) < min(1.0, cfg.precursor_rate * risk))
    kinds = rng.integers(0, 2, size=burst_starts.size)
    lag, jit = cfg.precursor_lag_min, cfg.precursor_jitter_min
    hazard = np.full(n, min(1.0, cfg.baseline_event_rate * risk))
    planned: list[int] = []
    for b, kind in zip(burst_starts.tolist(), kinds.tolist()):
        p = p_convert[kind]
        hazard[b + lag - jit:b + lag + jit + 1] += p / (2 * jit + 1)
        if rng.random() < p:
            planned.append(b + lag + int(rng.integers(-jit, jit + 1)))
    spont = np.flatnonzero(rng.random(n) < cfg.baseline_event_rate * risk)
    planned.extend(spont.tolist())
    np.clip(hazard, 0.0, 1.0, out=hazard)

    # realize episodes in time order, dropping any that start inside a refractory period
    deficit = np.zeros(n)
    lead = np.zeros(n)
    busy_until = -1
    episodes: list[tuple[int, int]] = []
    for start in sorted(set(planned)):
        prof, ramp = _episode(rng)
        s0 = start - ramp
        if s0 < max(busy_until, 0) or s0 >= n:
            continue
        seg = prof[: max(0, n - s0)]
        deficit[s0:s0 + seg.size] += seg
        for j in range(1, _LEAD_MIN + 1):  # ETCO2 climbs over the minutes before onset
            if 0 <= start - j < n:
                lead[start - j] += _LEAD_MMHG * (_LEAD_MIN + 1 - j) / _LEAD_MIN
        episodes.append((s0, s0 + seg.size))
        busy_until = s0 + prof.size + cfg.refractory_min

    disturbance = np.zeros(n)
    for b, kind in zip(burst_starts.tolist(), kinds.tolist()):
        seg = burst_shape(kind)[: n - b]
        disturbance[b:b + seg.size] += seg

    base = 97.0 + _ou(rng, n, cfg.ou_theta, cfg.ou_std)
    base -= cfg.precursor_strength * disturbance
    base += cfg.noise_std * rng.standard_normal(n)
    sao2 = np.clip(np.maximum(base, _BASELINE_FLOOR) - deficit, 50.0, 100.0)

    onsets = []
    for s0, s1 in episodes:
        low = np.flatnonzero(sao2[s0:s1] < _THRESHOLD)
        if low.size:
            onsets.append(s0 + int(low[0]))

    series = {TARGET: sao2}
    for k, name in enumerate(schema.time_series[1:]):
        mean, std = _AUX[k][2:] if k < len(_AUX) else (0.0, 1.0)
        x = mean + _ou(rng, n, cfg.ou_theta, std) + 0.1 * std * rng.standard_normal(n)
        if k == 0:  # etco2 carries both the burst and the short-term lead
            x += 0.5 * std * disturbance
            x += lead
        elif name == "hr":
            x += 0.8 * deficit  # tachycardic response during desaturation
        series[name] = x

    observed = {name: rng.random(n) >= cfg.missing_rate for name in series}
    record = SurgeryRecord.from_arrays(f"s{index:05d}", series, statics, observed)
    return record, hazard, np.asarray(onsets, dtype=np.int64), burst_starts.astype(np.int64), kinds, risk


def generate(cfg: SynthConfig = SynthConfig()) -> tuple[Cohort, GroundTruth]:
    """Generate a cohort; surgery ``k`` draws only from ``default_rng([seed, k])``."""
    schema = synth_schema(cfg)
    truth = GroundTruth()
    surgeries = []
    for k in range(cfg.n_surgeries):
        rec, hz, on, bu, kinds, risk = _generate_one(cfg, k, schema)
        surgeries.append(rec)
        sid = rec.surgery_id
        truth.hazard[sid], truth.onsets[sid], truth.bursts[sid], truth.risk[sid] = hz, on, bu, risk
        truth.kinds[sid] = kinds
    return Cohort(schema, tuple(surgeries)), truth


# --------------------------------------------------------------------- validation


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class SynthReport:
    checks: tuple[Check, ...]
    label_rate: float
    missing_rate: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        return [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in self.checks]


def label_rate(cohort: Cohort, label_cfg: LabelConfig = LabelConfig()) -> float:
    """Positives over defined labels across the whole cohort."""
    labels = np.concatenate(list(label_cohort(cohort, label_cfg).values()))
    defined = labels != UNDEFINED
    return float(labels[defined].mean()) if defined.any() else float("nan")


def validate_cohort(cohort: Cohort, cfg: SynthConfig, label_cfg: LabelConfig = LabelConfig()) -> SynthReport:
    """Check value bounds, label rate and missingness against the config."""
    target = cohort.schema.target
    sao2 = np.concatenate([s.series[target][s.observed[target]] for s in cohort.surgeries])
    in_bounds = bool(np.all((sao2 >= 50.0) & (sao2 <= 100.0)))
    rate = label_rate(cohort, label_cfg)
    lo, hi = cfg.label_rate_band
    n_obs = sum(int(s.observed[c].sum()) for s in cohort.surgeries for c in s.observed)
    n_all = sum(s.duration_min for s in cohort.surgeries) * len(cohort.schema.time_series)
    miss = 1.0 - n_obs / n_all if n_all else 0.0
    dlo, dhi = cfg.duration_range
    durations_ok = all(dlo <= s.duration_min <= dhi for s in cohort.surgeries)
    checks = (
        Check("sao2_bounds", in_bounds, f"{sao2.size} values, range [{sao2.min():.2f}, {sao2.max():.2f}]"),
        Check("label_rate", bool(lo <= rate <= hi), f"{rate:.4f} (band [{lo}, {hi}])"),
        Check("missing_rate", bool(abs(miss - cfg.missing_rate) <= 0.01),
              f"{miss:.4f} (configured {cfg.missing_rate})"),
        Check("durations", durations_ok, f"all within [{dlo}, {dhi}]"),
    )
    return SynthReport(checks, rate, miss)


def write_synth(cohort: Cohort, truth: GroundTruth | None, out_dir: str | Path) -> dict[str, Path]:
    """Write ``cohort.csv``, ``schema.txt`` and optionally ``ground_truth.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"cohort": out / "cohort.csv", "schema": out / "schema.txt"}
    save_cohort(cohort, paths["cohort"])
    save_schema(cohort.schema, paths["schema"])
    if truth is not None:
        paths["ground_truth"] = out / "ground_truth.csv"
        truth.save_csv(paths["ground_truth"])
    return paths
