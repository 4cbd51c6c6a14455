"""Second-order gradient-boosted trees with a logistic objective.

Split search is exact greedy over presorted feature columns and is
sparsity aware: NaN entries are missing, and every split learns the
direction missing values take. Trees are stored as flat node arrays in
preorder, the same layout the model container serializes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

log = logging.getLogger(__name__)

LEAF = -1


class GBTDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class GBTConfig:
    learning_rate: float = 0.02
    max_depth: int = 6
    subsample: float = 0.5
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    max_rounds: int = 300
    patience_rounds: int = 5
    base_score: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("lambda, gamma and min_child_weight must be >= 0")
        if self.max_rounds < 1 or self.patience_rounds < 1:
            raise ValueError("max_rounds and patience_rounds must be >= 1")
        if not 0 < self.base_score < 1:
            raise ValueError("base_score must lie in (0, 1)")


@dataclass
class Tree:
    """Preorder node arrays; ``feature == LEAF`` marks a leaf.

    For internal nodes ``value`` is the split threshold (values strictly
    below go left); for leaves it is the leaf weight. ``gain`` is the split
    gain of internal nodes and 0 for leaves.
    """

    feature: np.ndarray
    value: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def depth(self) -> int:
        def walk(i: int) -> int:
            if self.feature[i] == LEAF:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    @classmethod
    def from_preorder(cls, feature, value, default_left, gain=None) -> Tree:
        """Rebuild child links from preorder records."""
        feature = np.asarray(feature, dtype=np.int32)
        n = feature.size
        left = np.full(n, -1, dtype=np.int32)
        right = np.full(n, -1, dtype=np.int32)

        def parse(i: int) -> int:
            # returns the index just past the subtree rooted at i
            if i >= n:
                raise ValueError("malformed preorder tree")
            if feature[i] == LEAF:
                return i + 1
            left[i] = i + 1
            right[i] = parse(i + 1)
            return parse(right[i])

        if n == 0 or parse(0) != n:
            raise ValueError("malformed preorder tree")
        return cls(
            feature=feature,
            value=np.asarray(value, dtype=np.float64),
            default_left=np.asarray(default_left, dtype=np.bool_),
            left=left,
            right=right,
            gain=np.zeros(n) if gain is None else np.asarray(gain, dtype=np.float64),
        )


@dataclass
class GBTModel:
    base_margin: float
    trees: list[Tree]
    learning_rate: float
    feature_names: list[str]
    config: GBTConfig = field(default_factory=GBTConfig)
    # per-column standardization applied to inputs before prediction, if any
    feature_mean: dict[str, float] | None = None
    feature_std: dict[str, float] | None = None


# --------------------------------------------------------------------- objective pieces


def logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def logistic_grad_hess(margin, label):
    """Gradient ``p - y`` and hessian ``p (1 - p)`` of the log-loss in the margin."""
    p = logistic(margin)
    return p - label, p * (1.0 - p)


def log_loss(margin, label) -> float:
    """Mean log-loss computed stably from margins."""
    m = np.asarray(margin, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, m) - y * m))


@numba.njit(cache=True)
def _gain(gl, hl, gr, hr, lam, gamma):
    return 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam)
                  - (gl + gr) * (gl + gr) / (hl + hr + lam)) - gamma


def split_gain(GL: float, HL: float, GR: float, HR: float, lam: float, gamma: float) -> float:
    """Loss reduction of splitting a node into children with the given sums."""
    return _gain(float(GL), float(HL), float(GR), float(HR), float(lam), float(gamma))


def leaf_weight(G: float, H: float, lam: float) -> float:
    return -G / (H + lam)


# --------------------------------------------------------------------- split search kernel


@numba.njit(cache=True)
def _best_splits(sorted_vals, order, n_valid, missing_rows, n_missing, node_of, g, h,
                 node_G, node_H, lam, gamma, min_child_weight):
    """Best split per active node for one tree level.

    ``order[f, :n_valid[f]]`` lists the rows with an observed value of
    feature ``f`` in ascending value order and ``sorted_vals`` holds those
    values; ``missing_rows[f, :n_missing[f]]`` lists the rest. Rows with
    ``node_of < 0`` are not in this level. Candidates are ranked by the
    children's score ``GL^2/(HL+lam) + GR^2/(HR+lam)``, which orders them
    exactly like the gain; equal scores keep the earlier (feature,
    threshold) candidate.
    """
    n_nodes = node_G.shape[0]
    d = order.shape[0]
    best_score = np.full(n_nodes, -np.inf)
    best_feat = np.full(n_nodes, -1, dtype=np.int32)
    best_thr = np.zeros(n_nodes)
    best_left = np.ones(n_nodes, dtype=np.bool_)
    best_sums = np.zeros((n_nodes, 4))
    GL = np.empty(n_nodes)
    HL = np.empty(n_nodes)
    Gm = np.empty(n_nodes)
    Hm = np.empty(n_nodes)
    Cm = np.empty(n_nodes, dtype=np.int64)
    last = np.empty(n_nodes)
    seen = np.empty(n_nodes, dtype=np.bool_)
    for f in range(d):
        Gm[:] = 0.0
        Hm[:] = 0.0
        Cm[:] = 0
        for j in range(n_missing[f]):
            r = missing_rows[f, j]
            k = node_of[r]
            if k >= 0:
                Gm[k] += g[r]
                Hm[k] += h[r]
                Cm[k] += 1
        GL[:] = 0.0
        HL[:] = 0.0
        seen[:] = False
        for j in range(n_valid[f]):
            r = order[f, j]
            k = node_of[r]
            if k < 0:
                continue
            v = sorted_vals[f, j]
            if seen[k] and v > last[k]:
                G = node_G[k]
                H = node_H[k]
                # missing routed left
                gl = GL[k] + Gm[k]
                hl = HL[k] + Hm[k]
                gr = G - gl
                hr = H - hl
                if hl >= min_child_weight and hr >= min_child_weight:
                    score = gl * gl / (hl + lam) + gr * gr / (hr + lam)
                    if score > best_score[k]:
                        thr = 0.5 * (last[k] + v)
                        # for adjacent floats the midpoint can round down onto last[k]
                        if not last[k] < thr:
                            thr = v
                        best_score[k] = score
                        best_feat[k] = f
                        best_thr[k] = thr
                        best_left[k] = True
                        best_sums[k, 0] = gl
                        best_sums[k, 1] = hl
                        best_sums[k, 2] = gr
                        best_sums[k, 3] = hr
                # missing routed right; only distinct when the node has missing rows
                if Cm[k] > 0:
                    gl = GL[k]
                    hl = HL[k]
                    gr = G - gl
                    hr = H - hl
                    if hl >= min_child_weight and hr >= min_child_weight:
                        score = gl * gl / (hl + lam) + gr * gr / (hr + lam)
                        if score > best_score[k]:
                            thr = 0.5 * (last[k] + v)
                            if not last[k] < thr:
                                thr = v
                            best_score[k] = score
                            best_feat[k] = f
                            best_thr[k] = thr
                            best_left[k] = False
                            best_sums[k, 0] = gl
                            best_sums[k, 1] = hl
                            best_sums[k, 2] = gr
                            best_sums[k, 3] = hr
            GL[k] += g[r]
            HL[k] += h[r]
            last[k] = v
            seen[k] = True
    best_gain = np.zeros(n_nodes)
    for k in range(n_nodes):
        if best_feat[k] < 0:
            continue
        gain = _gain(best_sums[k, 0], best_sums[k, 1], best_sums[k, 2], best_sums[k, 3],
                     lam, gamma)
        if gain > 0.0:
            best_gain[k] = gain
        else:
            best_feat[k] = -1
    return best_feat, best_thr, best_left, best_gain


@numba.njit(cache=True)
def _compact(sorted_vals, order, n_valid, missing_rows, n_missing, keep):
    """Restrict presorted columns to the rows flagged in ``keep``."""
    d = order.shape[0]
    n_keep = 0
    for r in range(keep.shape[0]):
        if keep[r]:
            n_keep += 1
    vals = np.empty((d, n_keep))
    o = np.empty((d, n_keep), dtype=np.int32)
    m = np.empty((d, n_keep), dtype=np.int32)
    nv = np.zeros(d, dtype=np.int64)
    nm = np.zeros(d, dtype=np.int64)
    for f in range(d):
        c = 0
        for j in range(n_valid[f]):
            r = order[f, j]
            if keep[r]:
                o[f, c] = r
                vals[f, c] = sorted_vals[f, j]
                c += 1
        nv[f] = c
        c = 0
        for j in range(n_missing[f]):
            r = missing_rows[f, j]
            if keep[r]:
                m[f, c] = r
                c += 1
        nm[f] = c
    return vals, o, nv, m, nm


@numba.njit(cache=True)
def _node_sums(node_of, g, h, n_nodes):
    G = np.zeros(n_nodes)
    H = np.zeros(n_nodes)
    for r in range(node_of.shape[0]):
        k = node_of[r]
        if k >= 0:
            G[k] += g[r]
            H[k] += h[r]
    return G, H


@numba.njit(cache=True)
def _route(X, node_of, feat, thr, default_left, child_left, child_right):
    out = np.full(node_of.shape[0], -1, dtype=np.int32)
    for r in range(node_of.shape[0]):
        k = node_of[r]
        if k < 0 or feat[k] < 0:
            continue
        v = X[r, feat[k]]
        if np.isnan(v):
            go_left = default_left[k]
        else:
            go_left = v < thr[k]
        out[r] = child_left[k] if go_left else child_right[k]
    return out


@numba.njit(cache=True)
def _predict_tree(X, feature, value, default_left, left, right):
    out = np.empty(X.shape[0])
    for r in range(X.shape[0]):
        i = 0
        while feature[i] >= 0:
            v = X[r, feature[i]]
            if np.isnan(v):
                i = left[i] if default_left[i] else right[i]
            elif v < value[i]:
                i = left[i]
            else:
                i = right[i]
        out[r] = value[i]
    return out


@dataclass
class SortedColumns:
    """Per-feature row orders shared by every tree of a training run."""

    X: np.ndarray
    sorted_vals: np.ndarray
    order: np.ndarray
    n_valid: np.ndarray
    missing_rows: np.ndarray
    n_missing: np.ndarray

    @classmethod
    def build(cls, X: np.ndarray) -> SortedColumns:
        X = np.ascontiguousarray(X, dtype=np.float64)
        n, d = X.shape
        order = np.zeros((d, n), dtype=np.int32)
        sorted_vals = np.zeros((d, n))
        missing_rows = np.zeros((d, n), dtype=np.int32)
        n_valid = np.zeros(d, dtype=np.int64)
        n_missing = np.zeros(d, dtype=np.int64)
        for f in range(d):
            col = X[:, f]
            miss = np.isnan(col)
            valid = np.flatnonzero(~miss)
            srt = valid[np.argsort(col[valid], kind="mergesort")]
            order[f, : srt.size] = srt
            sorted_vals[f, : srt.size] = col[srt]
            n_valid[f] = srt.size
            m = np.flatnonzero(miss)
            missing_rows[f, : m.size] = m
            n_missing[f] = m.size
        return cls(X, sorted_vals, order, n_valid, missing_rows, n_missing)


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    default_left: bool
    gain: float


def find_best_split(
    columns: SortedColumns, g, h, rows, cfg: GBTConfig
) -> Split | None:
    """Best exact-greedy split of the node holding ``rows``, or None."""
    rows = np.asarray(rows)
    if rows.size == 0:
        raise ValueError("node sample set is empty")
    node_of = np.full(columns.X.shape[0], -1, dtype=np.int32)
    node_of[rows] = 0
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    G, H = _node_sums(node_of, g, h, 1)
    feat, thr, dl, gain = _best_splits(
        columns.sorted_vals, columns.order, columns.n_valid, columns.missing_rows, columns.n_missing,
        node_of, g, h, G, H, cfg.reg_lambda, cfg.gamma, cfg.min_child_weight,
    )
    if feat[0] < 0:
        return None
    return Split(int(feat[0]), float(thr[0]), bool(dl[0]), float(gain[0]))


def build_tree(columns: SortedColumns, g, h, cfg: GBTConfig, row_mask=None) -> Tree:
    """Grow one tree level by level to ``cfg.max_depth``.

    ``row_mask`` selects the (subsampled) rows the tree is fitted to.
    """
    n = columns.X.shape[0]
    mask = np.ones(n, dtype=bool) if row_mask is None else np.asarray(row_mask, dtype=bool)
    if not mask.any():
        raise ValueError("row mask selects no rows")
    g = np.ascontiguousarray(g, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    lam = cfg.reg_lambda

    # breadth-first construction; converted to preorder at the end
    feat: list[int] = []
    thr: list[float] = []
    dleft: list[bool] = []
    weight: list[float] = []
    gains: list[float] = []
    kids: list[tuple[int, int]] = []

    if mask.all():
        sv, od, nv, mr, nm = (columns.sorted_vals, columns.order, columns.n_valid,
                              columns.missing_rows, columns.n_missing)
    else:
        sv, od, nv, mr, nm = _compact(columns.sorted_vals, columns.order, columns.n_valid,
                                      columns.missing_rows, columns.n_missing, mask)
    node_of = np.where(mask, 0, -1).astype(np.int32)
    level_ids = [0]  # global ids of this level's nodes, indexed by local id
    feat.append(LEAF); thr.append(0.0); dleft.append(True); weight.append(0.0)
    gains.append(0.0); kids.append((-1, -1))
    for depth in range(cfg.max_depth + 1):
        k = len(level_ids)
        G, H = _node_sums(node_of, g, h, k)
        for local, gid in enumerate(level_ids):
            weight[gid] = leaf_weight(G[local], H[local], lam)
        if depth == cfg.max_depth:
            break
        bf, bt, bl, bg = _best_splits(
            sv, od, nv, mr, nm, node_of, g, h, G, H, lam, cfg.gamma, cfg.min_child_weight,
        )
        next_ids: list[int] = []
        child_left = np.full(k, -1, dtype=np.int32)
        child_right = np.full(k, -1, dtype=np.int32)
        for local, gid in enumerate(level_ids):
            if bf[local] < 0:
                continue
            feat[gid], thr[gid], dleft[gid], gains[gid] = int(bf[local]), float(bt[local]), bool(bl[local]), float(bg[local])
            pair = []
            for _ in range(2):
                pair.append(len(feat))
                feat.append(LEAF); thr.append(0.0); dleft.append(True); weight.append(0.0)
                gains.append(0.0); kids.append((-1, -1))
            kids[gid] = (pair[0], pair[1])
            child_left[local] = len(next_ids)
            child_right[local] = len(next_ids) + 1
            next_ids.extend(pair)
        if not next_ids:
            break
        node_of = _route(columns.X, node_of, bf, bt, bl, child_left, child_right)
        level_ids = next_ids

    # preorder renumbering
    pre: list[int] = []
    stack = [0]
    while stack:
        i = stack.pop()
        pre.append(i)
        if feat[i] != LEAF:
            stack.append(kids[i][1])
            stack.append(kids[i][0])
    pos = {old: new for new, old in enumerate(pre)}
    n_nodes = len(pre)
    f_arr = np.array([feat[i] for i in pre], dtype=np.int32)
    v_arr = np.array([thr[i] if feat[i] != LEAF else weight[i] for i in pre])
    l_arr = np.full(n_nodes, -1, dtype=np.int32)
    r_arr = np.full(n_nodes, -1, dtype=np.int32)
    for new, old in enumerate(pre):
        if feat[old] != LEAF:
            l_arr[new], r_arr[new] = pos[kids[old][0]], pos[kids[old][1]]
    return Tree(
        feature=f_arr,
        value=v_arr,
        default_left=np.array([dleft[i] for i in pre], dtype=np.bool_),
        left=l_arr,
        right=r_arr,
        gain=np.array([gains[i] for i in pre]),
    )


def predict_tree(tree: Tree, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    return _predict_tree(X, tree.feature, tree.value, tree.default_left, tree.left, tree.right)


# --------------------------------------------------------------------- training / inference


@dataclass
class GBTTrace:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_round: int = -1
    stop_reason: str = ""


def train(
    X_train,
    y_train,
    X_val,
    y_val,
    cfg: GBTConfig = GBTConfig(),
    feature_names: Sequence[str] | None = None,
) -> tuple[GBTModel, GBTTrace]:
    """Boost trees until validation log-loss stalls for ``patience_rounds``.

    Every round draws a without-replacement row subsample, fits one tree to
    the current gradients and updates all margins. The returned model is
    truncated to the round with the lowest validation loss.
    """
    X_train = np.ascontiguousarray(X_train, dtype=np.float64)
    X_val = np.ascontiguousarray(X_val, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if X_train.shape[0] == 0 or X_val.shape[0] == 0:
        raise ValueError("train and validation sets must be non-empty")
    if X_train.shape[1] != X_val.shape[1]:
        raise ValueError("train and validation feature counts differ")
    n, d = X_train.shape
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(d)]
    if len(names) != d:
        raise ValueError("feature_names does not match the column count")

    rng = np.random.default_rng([cfg.seed, 0x6B7])
    base = math.log(cfg.base_score / (1.0 - cfg.base_score))
    columns = SortedColumns.build(X_train)
    m_train = np.full(n, base)
    m_val = np.full(X_val.shape[0], base)
    n_sub = max(1, int(round(cfg.subsample * n)))
    trees: list[Tree] = []
    trace = GBTTrace()
    best = math.inf
    since_best = 0
    for rnd in range(cfg.max_rounds):
        g, h = logistic_grad_hess(m_train, y_train)
        if cfg.subsample < 1.0:
            mask = np.zeros(n, dtype=bool)
            mask[rng.choice(n, size=n_sub, replace=False)] = True
        else:
            mask = None
        tree = build_tree(columns, g, h, cfg, mask)
        trees.append(tree)
        m_train += cfg.learning_rate * predict_tree(tree, X_train)
        m_val += cfg.learning_rate * predict_tree(tree, X_val)
        if not (np.isfinite(m_train).all() and np.isfinite(m_val).all()):
            raise GBTDivergedError(f"non-finite margin at round {rnd}")
        trace.train_loss.append(log_loss(m_train, y_train))
        vl = log_loss(m_val, y_val)
        trace.val_loss.append(vl)
        if vl < best:
            best, since_best, trace.best_round = vl, 0, rnd
        else:
            since_best += 1
            if since_best >= cfg.patience_rounds:
                trace.stop_reason = f"validation loss stalled for {cfg.patience_rounds} rounds"
                break
    else:
        trace.stop_reason = "max_rounds reached"
    log.debug("gbt: %d rounds, best %d (val loss %.5f)", len(trees), trace.best_round, best)
    model = GBTModel(base, trees[: trace.best_round + 1], cfg.learning_rate, names, cfg)
    return model, trace


def predict_margin(model: GBTModel, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(model.feature_names):
        raise ValueError(
            f"unknown feature layout: model expects {len(model.feature_names)} columns"
        )
    if feature_names is not None and list(feature_names) != model.feature_names:
        raise ValueError("unknown feature layout: column names differ from the model's")
    margin = np.full(X.shape[0], model.base_margin)
    for tree in model.trees:
        margin += model.learning_rate * predict_tree(tree, X)
    return margin


def predict_proba(model: GBTModel, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
    """Probabilities; NaN features follow each node's default direction."""
    return logistic(predict_margin(model, X, feature_names))


def feature_importance(model: GBTModel) -> dict[str, float]:
    """Total split gain per feature name (0 for unused features)."""
    if not model.trees:
        raise ValueError("model has no trees")
    total = np.zeros(len(model.feature_names))
    for tree in model.trees:
        internal = tree.feature != LEAF
        np.add.at(total, tree.feature[internal], tree.gain[internal])
    return dict(zip(model.feature_names, total.tolist()))
