"""Spatially ordered feature sequences and the stacked multi-task Bi-LSTM."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import SAMPLE_SHAPE, label_window
from .losses import BACKGROUND, N_CLASSES, identification_loss_grad, smooth_l1, smooth_l1_grad
from .net import STRIDE, ScoreMaps, cell_labels

log = logging.getLogger(__name__)


@dataclass
class FeatureSequence:
    """Steps are ordered by grid index (d, h, w), i.e. longitudinally first."""
    features: np.ndarray                 # (T, F)
    grid_index: np.ndarray               # (T, 3) int
    labels: np.ndarray | None = None     # (T,) training targets
    offsets: np.ndarray | None = None    # (T, 3)

    def __len__(self):
        return len(self.features)

    @property
    def origins(self) -> np.ndarray:
        return self.grid_index * STRIDE

    def slice(self, lo, hi) -> "FeatureSequence":
        return FeatureSequence(
            self.features[lo:hi], self.grid_index[lo:hi],
            None if self.labels is None else self.labels[lo:hi],
            None if self.offsets is None else self.offsets[lo:hi])


def _sequence_from_mask(maps: ScoreMaps, keep: np.ndarray) -> FeatureSequence:
    idx = np.argwhere(keep)  # C order: longitudinal, then (h, w)
    feats = maps.features[:, idx[:, 0], idx[:, 1], idx[:, 2]].T.copy() if len(idx) else \
        np.zeros((0, maps.features.shape[0]))
    return FeatureSequence(feats, idx.astype(int))


def build_feature_sequence(maps: ScoreMaps) -> FeatureSequence:
    """Cells whose most likely class is not background, in grid order."""
    return _sequence_from_mask(maps, cell_labels(maps) != BACKGROUND)


def cell_targets(grid, centroids_vox, labels):
    """Ground-truth label and offset of every grid cell's sample window."""
    lab = np.full(grid, BACKGROUND, dtype=int)
    off = np.zeros(tuple(grid) + (3,))
    for g in np.ndindex(*grid):
        tgt = label_window(np.asarray(g) * STRIDE, centroids_vox, labels, SAMPLE_SHAPE)
        lab[g] = tgt.label
        off[g] = tgt.centroid_offset
    return lab, off


def build_training_sequence(maps: ScoreMaps, centroids_vox, labels) -> FeatureSequence:
    """Cells that are positive by ground truth, with their targets attached."""
    lab, off = cell_targets(maps.grid, centroids_vox, labels)
    seq = _sequence_from_mask(maps, lab != BACKGROUND)
    g = tuple(seq.grid_index.T)
    seq.labels = lab[g] if len(seq) else np.zeros(0, int)
    seq.offsets = off[g] if len(seq) else np.zeros((0, 3))
    return seq


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiRnnArch:
    input_dim: int = 1024
    hidden: int = 256
    layers: int = 3
    n_classes: int = N_CLASSES
    n_offsets: int = 3

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, doc):
        return cls(**{k: int(v) for k, v in doc.items()})


@dataclass
class BiRnnParams:
    arch: BiRnnArch
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def cell(self, layer: int, direction: str) -> dict[str, np.ndarray]:
        pre = f"l{layer}.{direction}."
        return {k[len(pre):]: v for k, v in self.tensors.items() if k.startswith(pre)}

    def copy(self):
        return BiRnnParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})


def build_birnn(seed: int, arch: BiRnnArch | None = None) -> BiRnnParams:
    """Uniform(+-1/sqrt(hidden)) weights, forget-gate bias +1, and the offset
    head bias at the sample centre."""
    arch = arch or BiRnnArch()
    rng = np.random.default_rng(seed)
    hdim = arch.hidden
    bound = 1.0 / np.sqrt(hdim)
    tensors = {}
    for layer in range(arch.layers):
        nin = arch.input_dim if layer == 0 else 2 * hdim
        for d in ("fwd", "bwd"):
            tensors[f"l{layer}.{d}.wx"] = rng.uniform(-bound, bound, (4 * hdim, nin))
            tensors[f"l{layer}.{d}.wh"] = rng.uniform(-bound, bound, (4 * hdim, hdim))
            b = np.zeros(4 * hdim)
            b[hdim:2 * hdim] = 1.0
            tensors[f"l{layer}.{d}.b"] = b
    hb = np.sqrt(3.0 / (2 * hdim))
    tensors["fc1.w"] = rng.uniform(-hb, hb, (arch.n_classes, 2 * hdim))
    tensors["fc1.b"] = np.zeros(arch.n_classes)
    tensors["fc2.w"] = rng.uniform(-hb, hb, (arch.n_offsets, 2 * hdim))
    tensors["fc2.b"] = np.asarray(SAMPLE_SHAPE, dtype=np.float64) / 2.0
    return BiRnnParams(arch, tensors)


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, hdim, batch=None):
        shape = (hdim,) if batch is None else (batch, hdim)
        return cls(np.zeros(shape), np.zeros(shape))


def lstm_step(cell: dict, x, state: LstmState, cache: dict | None = None):
    """One LSTM step; gate rows are ordered input, forget, output, candidate.

    ``x`` may be a vector or a batch ``(B, n_in)``. Returns ``(h, new_state)``.
    """
    x = np.asarray(x, dtype=np.float64)
    wx, wh, b = cell["wx"], cell["wh"], cell["b"]
    if x.shape[-1] != wx.shape[1]:
        raise T.ShapeError(f"LSTM input width {x.shape[-1]} != {wx.shape[1]}")
    hdim = wh.shape[1]
    z = x @ wx.T + state.hidden @ wh.T + b
    i = T.sigmoid(z[..., :hdim])
    f = T.sigmoid(z[..., hdim:2 * hdim])
    o = T.sigmoid(z[..., 2 * hdim:3 * hdim])
    g = np.tanh(z[..., 3 * hdim:])
    c = f * state.cell + i * g
    tc = np.tanh(c)
    h = o * tc
    if cache is not None:
        cache.update(x=x, h_prev=state.hidden, c_prev=state.cell, i=i, f=f, o=o, g=g, tc=tc)
    return h, LstmState(h, c)


def lstm_step_grad(cell: dict, cache: dict, dh, dc):
    """Backprop one step. ``dh``/``dc`` are gradients w.r.t. the new hidden
    and cell state; returns ``(dx, dh_prev, dc_prev, dz)`` where ``dz`` is
    the pre-activation gradient used to accumulate weight gradients."""
    i, f, o, g, tc = cache["i"], cache["f"], cache["o"], cache["g"], cache["tc"]
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * cache["c_prev"]
    dg = dc * i
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1)
    dx = dz @ cell["wx"]
    dh_prev = dz @ cell["wh"]
    return dx, dh_prev, dc * f, dz


# ---------------------------------------------------------------------------
# Bi-RNN over padded batches: x is (T, B, F), mask is (T, B)
# ---------------------------------------------------------------------------

def _run_direction(cell, x, mask, reverse, caches=None):
    steps, batch, _ = x.shape
    hdim = cell["wh"].shape[1]
    state = LstmState.zeros(hdim, batch)
    out = np.zeros((steps, batch, hdim))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        cache = {} if caches is not None else None
        h, new = lstm_step(cell, x[t], state, cache)
        m = mask[t][:, None]
        state = LstmState(h * m, new.cell * m)
        out[t] = state.hidden
        if caches is not None:
            caches[t] = cache
    return out


def _as_batch(seq):
    if isinstance(seq, FeatureSequence):
        if len(seq) == 0:
            raise ValueError("birnn_forward needs a non-empty sequence")
        return seq.features[:, None, :], np.ones((len(seq), 1)), True
    x, mask = seq
    return np.asarray(x, dtype=np.float64), np.asarray(mask, dtype=np.float64), False


def birnn_forward(params: BiRnnParams, seq, cache: dict | None = None):
    """Per-step ``(logits, offsets)``.

    ``seq`` is a FeatureSequence (returns ``(T, 27)`` and ``(T, 3)``) or a
    padded batch ``(x[T, B, F], mask[T, B])`` (returns ``(T, B, .)`` arrays).
    """
    x, mask, single = _as_batch(seq)
    if x.shape[0] == 0:
        raise ValueError("birnn_forward needs T >= 1")
    arch = params.arch
    if x.shape[-1] != arch.input_dim:
        raise T.ShapeError(f"feature width {x.shape[-1]} != Bi-RNN input {arch.input_dim}")
    layers = [] if cache is not None else None
    h = x
    for layer in range(arch.layers):
        cf = [None] * x.shape[0] if cache is not None else None
        cb = [None] * x.shape[0] if cache is not None else None
        of = _run_direction(params.cell(layer, "fwd"), h, mask, False, cf)
        ob = _run_direction(params.cell(layer, "bwd"), h, mask, True, cb)
        if cache is not None:
            layers.append((cf, cb))
        h = np.concatenate([of, ob], axis=-1)
    t = params.tensors
    logits = h @ t["fc1.w"].T + t["fc1.b"]
    offsets = h @ t["fc2.w"].T + t["fc2.b"]
    if cache is not None:
        cache.update(layers=layers, top=h, mask=mask)
    if single:
        return logits[:, 0], offsets[:, 0]
    return logits, offsets


def _direction_grad(cell, caches, mask, d_out, reverse, grads, prefix):
    steps, batch, hdim = d_out.shape
    dwx = np.zeros_like(cell["wx"])
    dwh = np.zeros_like(cell["wh"])
    db = np.zeros_like(cell["b"])
    dx = np.zeros((steps, batch, cell["wx"].shape[1]))
    dh_next = np.zeros((batch, hdim))
    dc_next = np.zeros((batch, hdim))
    order = range(steps) if reverse else range(steps - 1, -1, -1)
    for t in order:
        m = mask[t][:, None]
        dh = (d_out[t] + dh_next) * m
        dc = dc_next * m
        cache = caches[t]
        dxt, dh_next, dc_next, dz = lstm_step_grad(cell, cache, dh, dc)
        dx[t] = dxt
        dwx += dz.T @ cache["x"]
        dwh += dz.T @ cache["h_prev"]
        db += dz.sum(axis=0)
    grads[prefix + "wx"] = dwx
    grads[prefix + "wh"] = dwh
    grads[prefix + "b"] = db
    return dx


def birnn_grad(params: BiRnnParams, seq, d_logits, d_offsets, cache: dict | None = None):
    """Full backprop-through-time given per-step upstream gradients.

    Shapes of ``d_logits``/``d_offsets`` follow the outputs of
    ``birnn_forward`` for the same ``seq``. Returns a gradient dict keyed
    like ``params.tensors``.
    """
    x, mask, single = _as_batch(seq)
    if cache is None:
        cache = {}
        birnn_forward(params, seq, cache)
    d_logits = np.asarray(d_logits, dtype=np.float64)
    d_offsets = np.asarray(d_offsets, dtype=np.float64)
    if single:
        d_logits = d_logits[:, None]
        d_offsets = d_offsets[:, None]
    t = params.tensors
    top = cache["top"]
    grads = {}
    grads["fc1.w"] = np.einsum("tbk,tbh->kh", d_logits, top)
    grads["fc1.b"] = d_logits.sum(axis=(0, 1))
    grads["fc2.w"] = np.einsum("tbk,tbh->kh", d_offsets, top)
    grads["fc2.b"] = d_offsets.sum(axis=(0, 1))
    d_h = d_logits @ t["fc1.w"] + d_offsets @ t["fc2.w"]
    hdim = params.arch.hidden
    for layer in range(params.arch.layers - 1, -1, -1):
        cf, cb = cache["layers"][layer]
        dxf = _direction_grad(params.cell(layer, "fwd"), cf, mask, d_h[..., :hdim], False,
                              grads, f"l{layer}.fwd.")
        dxb = _direction_grad(params.cell(layer, "bwd"), cb, mask, d_h[..., hdim:], True,
                              grads, f"l{layer}.bwd.")
        d_h = dxf + dxb
    return {k: grads[k] for k in t}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class RnnHyper:
    epochs: int = 12
    batch_size: int = 256
    learning_rate: float = 1e-6
    weight_decay: float = 1e-4
    momentum: float = 0.9
    lam: float = 0.10
    max_len: int = 320
    seed: int = 0


def sequence_step_losses(logits, offsets, labels, gt_offsets):
    """Per-step identification and localization terms of the sequence loss."""
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    f = np.clip(p, 1e-12, 1 - 1e-12)
    y = np.zeros_like(p)
    np.put_along_axis(y, labels[..., None], 1.0, axis=-1)
    ids = -(y * np.log(f) + (1 - y) * np.log(1 - f)).sum(axis=-1)
    pos = labels != BACKGROUND
    locs = smooth_l1(gt_offsets - offsets).sum(axis=-1) * pos
    return ids, locs


def chunk_sequence(seq: FeatureSequence, max_len: int) -> list[FeatureSequence]:
    """Split long sequences into overlapping windows of at most ``max_len``."""
    n = len(seq)
    if n <= max_len:
        return [seq]
    step = max_len // 2
    starts = list(range(0, n - max_len, step)) + [n - max_len]
    return [seq.slice(s, s + max_len) for s in starts]


def pad_batch(seqs: list[FeatureSequence]):
    steps = max(len(s) for s in seqs)
    fdim = seqs[0].features.shape[1]
    x = np.zeros((steps, len(seqs), fdim))
    mask = np.zeros((steps, len(seqs)))
    labels = np.full((steps, len(seqs)), BACKGROUND, dtype=int)
    offsets = np.zeros((steps, len(seqs), 3))
    for b, s in enumerate(seqs):
        n = len(s)
        x[:n, b] = s.features
        mask[:n, b] = 1.0
        labels[:n, b] = s.labels
        offsets[:n, b] = s.offsets
    return x, mask, labels, offsets


def batch_loss_and_grad(params: BiRnnParams, seqs: list[FeatureSequence], lam: float):
    """Mean over sequences of the time-accumulated multi-task loss."""
    x, mask, labels, offsets = pad_batch(seqs)
    cache = {}
    logits, pred = birnn_forward(params, (x, mask), cache)
    ids, locs = sequence_step_losses(logits, pred, labels, offsets)
    nb = len(seqs)
    loss = float(((ids + lam * locs) * mask).sum() / nb)
    d_logits = np.zeros_like(logits)
    d_pred = np.zeros_like(pred)
    valid = mask > 0
    flat_lab = labels[valid]
    d_logits[valid] = identification_loss_grad(logits[valid], flat_lab) * len(flat_lab) / nb
    pos = valid & (labels != BACKGROUND)
    d_pred[pos] = -lam * smooth_l1_grad(offsets[pos] - pred[pos]) / nb
    grads = birnn_grad(params, (x, mask), d_logits, d_pred, cache)
    return loss, grads


def train_birnn(sequences: list[FeatureSequence], hyper: RnnHyper | None = None,
                params: BiRnnParams | None = None, arch: BiRnnArch | None = None,
                history: list | None = None) -> BiRnnParams:
    """Momentum-SGD training over length-bucketed, padded batches."""
    hyper = hyper or RnnHyper()
    seqs = [c for s in sequences if len(s) for c in chunk_sequence(s, hyper.max_len)]
    if not seqs:
        raise ValueError("train_birnn needs at least one non-empty sequence")
    if params is None:
        arch = arch or BiRnnArch(input_dim=seqs[0].features.shape[1])
        params = build_birnn(hyper.seed, arch)
    state = T.OptimState(hyper.learning_rate, hyper.momentum, hyper.weight_decay)
    rng = np.random.default_rng(hyper.seed)
    for epoch in range(hyper.epochs):
        # length buckets: sort by (length, random key), cut, shuffle bucket order
        keys = rng.permutation(len(seqs))
        order = sorted(range(len(seqs)), key=lambda k: (len(seqs[k]), keys[k]))
        batches = [order[i:i + hyper.batch_size] for i in range(0, len(order), hyper.batch_size)]
        total, count = 0.0, 0
        for bi in rng.permutation(len(batches)):
            group = [seqs[k] for k in batches[bi]]
            loss, grads = batch_loss_and_grad(params, group, hyper.lam)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite Bi-RNN loss at epoch {epoch}: {loss}")
            T.sgd_step(params.tensors, grads, state)
            total += loss * len(group)
            count += len(group)
        mean = total / count
        log.info("birnn epoch %d loss %.6f", epoch, mean)
        if history is not None:
            history.append({"epoch": epoch, "loss": mean})
    return params
