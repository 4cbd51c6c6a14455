"""Two-layer LSTM binary classifier with hand-written backpropagation through time.

Shapes follow the usual batch-major convention: windows are
``(batch, lookback, input_dim)``. Gate blocks inside every weight matrix
are stacked in the order (input, forget, cell candidate, output), so a
layer with ``n`` units has ``W`` of shape ``(4n, d)``, ``U`` of shape
``(4n, n)`` and ``b`` of shape ``(4n,)``.

Dropout is inverted (kept units are scaled by ``1/(1-rate)``), so inference
needs no rescaling. Masks are per sequence: one mask on the recurrent input
of each layer, one on the inputs to layer 2 and one on the classifier head,
all resampled for every batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np
from scipy.special import expit

from .metrics import average_precision

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "U1", "b1", "W2", "U2", "b2", "w_out", "b_out")
P_CLAMP = 1e-12


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LSTMConfig:
    layer_sizes: tuple[int, int] = (32, 32)
    input_dim: int = 1
    dropout: float = 0.2
    recurrent_dropout: float = 0.2
    learning_rate: float = 0.001
    batch_size: int = 256
    patience_epochs: int = 20
    max_epochs: int = 50
    monitor: str = "loss"
    negative_fraction: float = 1.0
    clip_norm: float = 0.0
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.layer_sizes) != 2 or min(self.layer_sizes) < 1:
            raise ValueError("layer_sizes must be two positive integers")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not (0 <= self.dropout < 1 and 0 <= self.recurrent_dropout < 1):
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")
        if not 1 <= self.patience_epochs <= self.max_epochs:
            raise ValueError("need 1 <= patience_epochs <= max_epochs")
        if self.monitor not in ("loss", "accuracy", "pr_auc"):
            raise ValueError("monitor must be loss, accuracy or pr_auc")
        if not 0 < self.negative_fraction <= 1:
            raise ValueError("negative_fraction must lie in (0, 1]")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0 (0 disables clipping)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")


@dataclass
class LSTMParams:
    W1: np.ndarray
    U1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    U2: np.ndarray
    b2: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self) -> None:
        n1, n2 = self.U1.shape[1], self.U2.shape[1]
        expected = {
            "W1": (4 * n1, self.W1.shape[1]), "U1": (4 * n1, n1), "b1": (4 * n1,),
            "W2": (4 * n2, n1), "U2": (4 * n2, n2), "b2": (4 * n2,),
            "w_out": (n2,), "b_out": (),
        }
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @property
    def sizes(self) -> tuple[int, int, int]:
        """(input_dim, n1, n2)."""
        return self.W1.shape[1], self.U1.shape[1], self.U2.shape[1]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in PARAM_NAMES:
            yield name, getattr(self, name)

    def astype(self, dtype) -> LSTMParams:
        return LSTMParams(**{k: np.asarray(v, dtype=dtype).copy() for k, v in self.items()})

    @classmethod
    def zeros(cls, input_dim: int, n1: int, n2: int) -> LSTMParams:
        return cls(
            W1=np.zeros((4 * n1, input_dim)), U1=np.zeros((4 * n1, n1)), b1=np.zeros(4 * n1),
            W2=np.zeros((4 * n2, n1)), U2=np.zeros((4 * n2, n2)), b2=np.zeros(4 * n2),
            w_out=np.zeros(n2), b_out=np.array(0.0),
        )

    @classmethod
    def init(cls, input_dim: int, n1: int, n2: int, rng: np.random.Generator) -> LSTMParams:
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases except forget gates at 1."""
        def u(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        b1 = np.zeros(4 * n1)
        b1[n1:2 * n1] = 1.0
        b2 = np.zeros(4 * n2)
        b2[n2:2 * n2] = 1.0
        return cls(
            W1=u((4 * n1, input_dim), input_dim), U1=u((4 * n1, n1), n1), b1=b1,
            W2=u((4 * n2, n1), n1), U2=u((4 * n2, n2), n2), b2=b2,
            w_out=u(n2, n2), b_out=np.array(0.0),
        )


@dataclass
class DropoutMasks:
    """Per-sequence inverted-dropout masks; ``None`` means identity."""

    recurrent1: np.ndarray | None = None
    recurrent2: np.ndarray | None = None
    between: np.ndarray | None = None
    head: np.ndarray | None = None

    @classmethod
    def sample(cls, batch: int, n1: int, n2: int, dropout: float, recurrent: float,
               rng: np.random.Generator, dtype=np.float64) -> DropoutMasks:
        def draw(rate, width):
            if rate == 0.0:
                return None
            keep = rng.random((batch, width)) >= rate
            return (keep / (1.0 - rate)).astype(dtype)

        return cls(
            recurrent1=draw(recurrent, n1),
            recurrent2=draw(recurrent, n2),
            between=draw(dropout, n1),
            head=draw(dropout, n2),
        )


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_pr_auc: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""


@dataclass
class LSTMModel:
    """Trained network plus what inference needs to prepare its inputs."""

    config: LSTMConfig
    params: LSTMParams
    lookback: int
    channels: list[str]
    input_mean: dict[str, float]
    input_std: dict[str, float]


# --------------------------------------------------------------------- cell / layer math


def _sigmoid(z: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Logistic function written through tanh: no overflow and faster than expit."""
    np.multiply(z, 0.5, out=out)
    np.tanh(out, out=out)
    out += 1.0
    out *= 0.5
    return out


def _split_gates(z: np.ndarray, n: int):
    return z[..., :n], z[..., n:2 * n], z[..., 2 * n:3 * n], z[..., 3 * n:]


def cell_forward(x_t, h_prev, c_prev, W, U, b):
    """One LSTM step; works on a single vector or on a batch of rows.

    Returns ``(h_t, c_t, cache)`` where the cache holds the gate
    activations and preactivations needed by the backward pass.
    """
    n = U.shape[1]
    if W.shape[0] != 4 * n or np.shape(x_t)[-1] != W.shape[1] or np.shape(h_prev)[-1] != n:
        raise ValueError("dimension mismatch in cell_forward")
    z = x_t @ W.T + h_prev @ U.T + b
    zi, zf, zg, zo = _split_gates(z, n)
    i, f, o = expit(zi), expit(zf), expit(zo)
    g = np.tanh(zg)
    c_t = f * c_prev + i * g
    tanh_c = np.tanh(c_t)
    h_t = o * tanh_c
    cache = {"z": z, "i": i, "f": f, "g": g, "o": o, "c_prev": c_prev, "tanh_c": tanh_c}
    return h_t, c_t, cache


def _project(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Input projections ``x W^T + b`` for all steps in gate-major layout (L, 4, B, n)."""
    L, B, _ = x.shape
    n = W.shape[0] // 4
    z = x.reshape(L * B, -1) @ W.T + b
    return np.ascontiguousarray(z.reshape(L, B, 4, n).transpose(0, 2, 1, 3))


def _flat_gates(dZ: np.ndarray) -> np.ndarray:
    """(L, 4, B, n) gate gradients as a (4n, L*B) matrix matching the weight rows."""
    L, _, B, n = dZ.shape
    return dZ.transpose(1, 3, 0, 2).reshape(4 * n, L * B)


def _layer_forward(xproj: np.ndarray, U: np.ndarray, rec_mask):
    """Run one layer over time from its input projections.

    Arrays are time-major and gate-major, ``xproj`` being (L, 4, B, n), so
    each gate of each step is one contiguous (B, n) block.
    """
    L, _, B, n = xproj.shape
    dtype = xproj.dtype
    U4T = np.ascontiguousarray(U.reshape(4, n, n).transpose(0, 2, 1))
    acts = np.empty((L, 4, B, n), dtype=dtype)
    cells = np.empty((L + 1, B, n), dtype=dtype)  # cells[t + 1] is c_t
    tanh_c = np.empty((L, B, n), dtype=dtype)
    hs = np.empty((L + 1, B, n), dtype=dtype)  # hs[t + 1] is h_t
    cells[0] = 0.0
    hs[0] = 0.0
    tmp = np.empty((B, n), dtype=dtype)
    for t in range(L):
        h_in = hs[t] if rec_mask is None else hs[t] * rec_mask
        z = np.matmul(h_in, U4T)
        z += xproj[t]
        a = acts[t]
        _sigmoid(z[:2], a[:2])
        np.tanh(z[2], out=a[2])
        _sigmoid(z[3], a[3])
        c = cells[t + 1]
        np.multiply(a[1], cells[t], out=c)
        np.multiply(a[0], a[2], out=tmp)
        c += tmp
        np.tanh(c, out=tanh_c[t])
        np.multiply(a[3], tanh_c[t], out=hs[t + 1])
    return hs, {"acts": acts, "cells": cells, "tanh_c": tanh_c, "hs": hs, "rec_mask": rec_mask}


def _layer_backward(dH: np.ndarray, U: np.ndarray, cache) -> np.ndarray:
    """Gradient w.r.t. the layer preactivations, shape (L, 4, B, n).

    ``dH[t]`` is the loss gradient arriving at ``h_t`` from above.
    """
    acts, cells, tanh_c = cache["acts"], cache["cells"], cache["tanh_c"]
    rec_mask = cache["rec_mask"]
    L, B, n = dH.shape
    U4 = np.ascontiguousarray(U.reshape(4, n, n))
    dZ = np.empty((L, 4, B, n), dtype=dH.dtype)
    dh_next = np.zeros((B, n), dtype=dH.dtype)
    dc_next = np.zeros((B, n), dtype=dH.dtype)
    for t in range(L - 1, -1, -1):
        i, f, g, o = acts[t]
        th = tanh_c[t]
        dz = dZ[t]
        dh = dH[t] + dh_next
        # output gate
        np.multiply(dh, th, out=dz[3])
        dz[3] *= o
        dz[3] *= 1.0 - o
        dc = dh * o
        dc *= 1.0 - th * th
        dc += dc_next
        # input gate
        np.multiply(dc, g, out=dz[0])
        dz[0] *= i
        dz[0] *= 1.0 - i
        # forget gate
        np.multiply(dc, cells[t], out=dz[1])
        dz[1] *= f
        dz[1] *= 1.0 - f
        # cell candidate
        np.multiply(dc, i, out=dz[2])
        dz[2] *= 1.0 - g * g
        dc_next = dc * f
        dh_next = np.matmul(dz, U4).sum(axis=0)
        if rec_mask is not None:
            dh_next *= rec_mask
    return dZ


# --------------------------------------------------------------------- network


def forward(windows, params: LSTMParams, mode: str = "infer", masks: DropoutMasks | None = None):
    """Stacked two-layer pass over every step of the windows.

    Args:
        windows: ``(L, input_dim)`` or ``(B, L, input_dim)``.
        mode: ``"infer"`` ignores any masks; ``"train"`` applies them.

    Returns:
        ``(probability, h2_final, cache)``; probability and h2_final lose the
        batch axis when a single window was passed.
    """
    if mode not in ("train", "infer"):
        raise ValueError("mode must be train or infer")
    x = np.asarray(windows)
    single = x.ndim == 2
    if single:
        x = x[None]
    d, n1, n2 = params.sizes
    if x.ndim != 3 or x.shape[2] != d:
        raise ValueError(f"expected windows with {d} input channels, got shape {np.shape(windows)}")
    m = masks if (mode == "train" and masks is not None) else DropoutMasks()
    B, L, _ = x.shape

    xt = np.ascontiguousarray(x.transpose(1, 0, 2))  # time-major (L, B, d)
    hs1, cache1 = _layer_forward(_project(xt, params.W1, params.b1), params.U1, m.recurrent1)
    h1 = hs1[1:]
    h1_in = h1 if m.between is None else h1 * m.between
    hs2, cache2 = _layer_forward(_project(h1_in, params.W2, params.b2), params.U2, m.recurrent2)
    h2_final = hs2[L]
    head_in = h2_final if m.head is None else h2_final * m.head
    logit = head_in @ params.w_out + params.b_out
    prob = expit(logit)
    cache = {"x": xt, "l1": cache1, "l2": cache2, "h1_in": h1_in, "head_in": head_in,
             "masks": m, "prob": prob, "logit": logit}
    if single:
        return prob[0], h2_final[0], cache
    return prob, h2_final, cache


def loss(probability, label) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-12, 1-1e-12]."""
    p = np.clip(np.asarray(probability, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(label, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def backward(cache, labels, params: LSTMParams) -> dict[str, np.ndarray]:
    """Exact gradients of the mean clamped cross-entropy for a train-mode forward."""
    x, m = cache["x"], cache["masks"]
    p = cache["prob"]
    y = np.asarray(labels, dtype=p.dtype).reshape(p.shape)
    L, B, _ = x.shape
    n2 = params.U2.shape[1]

    # the clamp has zero slope outside [P_CLAMP, 1 - P_CLAMP]
    inside = (p > P_CLAMP) & (p < 1.0 - P_CLAMP)
    dlogit = np.where(inside, p - y, 0.0) / B

    grads: dict[str, np.ndarray] = {}
    grads["w_out"] = cache["head_in"].T @ dlogit
    grads["b_out"] = np.array(dlogit.sum())
    dh2_final = np.outer(dlogit, params.w_out)
    if m.head is not None:
        dh2_final *= m.head

    dH2 = np.zeros((L, B, n2), dtype=p.dtype)
    dH2[L - 1] = dh2_final
    dZ2 = _flat_gates(_layer_backward(dH2, params.U2, cache["l2"]))
    hs2 = cache["l2"]["hs"][:L]
    h2_prev = hs2 if m.recurrent2 is None else hs2 * m.recurrent2
    h1_in = cache["h1_in"].reshape(L * B, -1)
    grads["W2"] = dZ2 @ h1_in
    grads["U2"] = dZ2 @ h2_prev.reshape(L * B, -1)
    grads["b2"] = dZ2.sum(axis=1)

    dH1 = (dZ2.T @ params.W2).reshape(L, B, -1)
    if m.between is not None:
        dH1 *= m.between
    dZ1 = _flat_gates(_layer_backward(dH1, params.U1, cache["l1"]))
    hs1 = cache["l1"]["hs"][:L]
    h1_prev = hs1 if m.recurrent1 is None else hs1 * m.recurrent1
    grads["W1"] = dZ1 @ x.reshape(L * B, -1)
    grads["U1"] = dZ1 @ h1_prev.reshape(L * B, -1)
    grads["b1"] = dZ1.sum(axis=1)
    return grads


def rmsprop_step(params: LSTMParams, grads: Mapping[str, np.ndarray], state: dict,
                 lr: float = 0.001, rho: float = 0.9, eps: float = 1e-8) -> tuple[LSTMParams, dict]:
    """``s <- rho s + (1-rho) g^2``; ``theta <- theta - lr g / (sqrt(s) + eps)``.

    Updates ``params`` and ``state`` in place and returns both.
    """
    for name, value in params.items():
        g = grads[name]
        s = state.get(name)
        if s is None:
            s = state[name] = np.zeros_like(value)
        s *= rho
        s += (1.0 - rho) * g * g
        step = lr * g / (np.sqrt(s) + eps)
        if value.ndim == 0:
            setattr(params, name, np.asarray(value - step, dtype=value.dtype))
        else:
            value -= step
    return params, state


# --------------------------------------------------------------------- training


def _batched_forward(windows: np.ndarray, params: LSTMParams, batch: int = 1024):
    probs, hidden = [], []
    for start in range(0, windows.shape[0], batch):
        p, h, _ = forward(windows[start:start + batch], params, "infer")
        probs.append(p)
        hidden.append(h)
    if not probs:
        n2 = params.U2.shape[1]
        return np.empty(0), np.empty((0, n2))
    return np.concatenate(probs), np.concatenate(hidden)


def _evaluate(windows, labels, params) -> tuple[float, float, float]:
    p, _ = _batched_forward(windows, params)
    p = p.astype(np.float64)
    acc = float(np.mean((p >= 0.5) == (labels == 1)))
    auc = average_precision(p, labels) if labels.any() else float("nan")
    return loss(p, labels), auc, acc


def _improved(value: float, best: float, monitor: str) -> bool:
    if math.isnan(value):
        return False
    return value < best if monitor == "loss" else value > best


def train(X_train, y_train, X_val, y_val, cfg: LSTMConfig = LSTMConfig()) -> tuple[LSTMParams, TrainReport]:
    """Fit the network with RMSProp and early stopping on the validation set.

    Sample order is reshuffled every epoch (after keeping all positives and
    a ``negative_fraction`` share of negatives, redrawn per epoch). The
    parameters of the best epoch under ``cfg.monitor`` are returned.

    Raises:
        TrainingDivergedError: when a batch loss is not finite.
    """
    dtype = np.dtype(cfg.dtype)
    X_train = np.asarray(X_train, dtype=dtype)
    X_val = np.asarray(X_val, dtype=dtype)
    y_train = np.asarray(y_train).astype(np.int8)
    y_val = np.asarray(y_val).astype(np.int8)
    if len(X_train) == 0 or len(X_val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if X_train.shape[2] != cfg.input_dim or X_val.shape[2] != cfg.input_dim:
        raise ValueError(f"windows have {X_train.shape[2]} channels, config says {cfg.input_dim}")
    n1, n2 = cfg.layer_sizes
    init_rng, shuffle_rng, mask_rng = (np.random.default_rng([cfg.seed, k]) for k in (1, 2, 3))
    params = LSTMParams.init(cfg.input_dim, n1, n2, init_rng).astype(dtype)
    state: dict = {}
    report = TrainReport()
    best = math.inf if cfg.monitor == "loss" else -math.inf
    best_params = params.astype(np.float64)
    pos = np.flatnonzero(y_train == 1)
    neg = np.flatnonzero(y_train == 0)
    stale = 0
    for epoch in range(cfg.max_epochs):
        if cfg.negative_fraction < 1.0:
            k = max(1, int(round(cfg.negative_fraction * neg.size)))
            idx = np.concatenate([pos, shuffle_rng.choice(neg, size=k, replace=False)])
        else:
            idx = np.arange(len(y_train))
        idx = shuffle_rng.permutation(idx)
        losses = []
        for b, start in enumerate(range(0, idx.size, cfg.batch_size)):
            sel = idx[start:start + cfg.batch_size]
            masks = DropoutMasks.sample(sel.size, n1, n2, cfg.dropout, cfg.recurrent_dropout,
                                        mask_rng, dtype)
            prob, _, cache = forward(X_train[sel], params, "train", masks)
            batch_loss = loss(prob, y_train[sel])
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(cache, y_train[sel], params)
            if cfg.clip_norm > 0:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
            rmsprop_step(params, grads, state, cfg.learning_rate)
            losses.append(batch_loss * sel.size)
        report.train_loss.append(float(sum(losses) / idx.size))
        vl, vauc, vacc = _evaluate(X_val, y_val, params)
        report.val_loss.append(vl)
        report.val_pr_auc.append(vauc)
        report.val_accuracy.append(vacc)
        current = {"loss": vl, "pr_auc": vauc, "accuracy": vacc}[cfg.monitor]
        log.debug("lstm epoch %d: train %.5f val loss %.5f pr-auc %.4f",
                  epoch, report.train_loss[-1], vl, vauc)
        if _improved(current, best, cfg.monitor):
            best, stale, report.best_epoch = current, 0, epoch
            best_params = params.astype(np.float64)
        else:
            stale += 1
            if stale >= cfg.patience_epochs:
                report.stop_reason = f"validation {cfg.monitor} stalled for {cfg.patience_epochs} epochs"
                break
    else:
        report.stop_reason = "max_epochs reached"
    return best_params, report


# --------------------------------------------------------------------- inference


def _check_windows(model: LSTMModel, windows) -> np.ndarray:
    w = np.asarray(windows)
    if w.ndim != 3:
        raise ValueError("windows must be (n, lookback, channels)")
    if w.shape[1] != model.lookback:
        raise ValueError(f"lookback mismatch: model trained on {model.lookback}, got {w.shape[1]}")
    return w.astype(model.config.dtype, copy=False)


def extract_hidden(model: LSTMModel, windows) -> np.ndarray:
    """Final-step outputs of the second LSTM layer, one row per window.

    The pass runs in the model's training precision; rows come back as float64.
    """
    params = model.params.astype(model.config.dtype)
    _, hidden = _batched_forward(_check_windows(model, windows), params)
    return hidden.astype(np.float64)


def predict_proba(model: LSTMModel, windows) -> np.ndarray:
    """Head probability applied in float64 to the rows of :func:`extract_hidden`."""
    hidden = extract_hidden(model, windows)
    return expit(hidden @ model.params.w_out + model.params.b_out)

