"""Multi-task 3D CNN, its fully convolutional re-layout and dense scanning."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .losses import BACKGROUND, N_CLASSES

SAMPLE = (32, 112, 96)
STRIDE = 16
MAGIC = b"SPMK1\n"


@dataclass(frozen=True)
class CnnArch:
    channels: tuple[int, ...] = (32, 64, 128, 256)
    kernel: int = 1
    fc5: int = 1024
    n_classes: int = N_CLASSES
    n_offsets: int = 3
    input_shape: tuple[int, int, int] = SAMPLE

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ValueError("the network has exactly four conv blocks")
        if self.kernel % 2 != 1:
            raise ValueError("conv kernels must have odd extent")
        if any(n % STRIDE for n in self.input_shape):
            raise ValueError(f"input dims {self.input_shape} must be multiples of {STRIDE}")

    @property
    def pool4_shape(self) -> tuple[int, int, int]:
        return tuple(n // STRIDE for n in self.input_shape)

    @property
    def fc5_inputs(self) -> int:
        return self.channels[-1] * int(np.prod(self.pool4_shape))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "CnnArch":
        return cls(channels=tuple(doc["channels"]), kernel=int(doc["kernel"]), fc5=int(doc["fc5"]),
                   n_classes=int(doc["n_classes"]), n_offsets=int(doc["n_offsets"]),
                   input_shape=tuple(doc["input_shape"]))


@dataclass
class ModelParams:
    arch: CnnArch
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name):
        return self.tensors[name]


@dataclass
class FcnModel:
    arch: CnnArch
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]


@dataclass
class ScoreMaps:
    id_scores: np.ndarray
    loc_scores: np.ndarray
    features: np.ndarray

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(self.id_scores.shape[1:])


@dataclass(frozen=True)
class DensePrediction:
    label: int
    centroid_voxel: tuple[float, float, float]
    confidence: float
    grid_index: tuple[int, int, int]


def _expected_shapes(arch: CnnArch) -> dict[str, tuple]:
    shapes = {}
    cin = 1
    k = arch.kernel
    for i, c in enumerate(arch.channels, 1):
        shapes[f"conv{i}.w"] = (c, cin, k, k, k)
        shapes[f"conv{i}.b"] = (c,)
        cin = c
    shapes["fc5.w"] = (arch.fc5, arch.fc5_inputs)
    shapes["fc5.b"] = (arch.fc5,)
    shapes["fc6_1.w"] = (arch.n_classes, arch.fc5)
    shapes["fc6_1.b"] = (arch.n_classes,)
    shapes["fc6_2.w"] = (arch.n_offsets, arch.fc5)
    shapes["fc6_2.b"] = (arch.n_offsets,)
    return shapes


def build_cnn(seed: int, arch: CnnArch | None = None) -> ModelParams:
    """Fan-in scaled uniform weights; zero biases except the offset head,
    whose bias starts at the sample centre."""
    arch = arch or CnnArch()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _expected_shapes(arch).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 6.0 if name.startswith(("conv", "fc5")) else 3.0
        bound = np.sqrt(gain / fan_in)
        tensors[name] = rng.uniform(-bound, bound, shape)
    tensors["fc6_2.b"] = np.asarray(arch.input_shape, dtype=np.float64) / 2.0
    return ModelParams(arch, tensors)


def check_params(params: ModelParams) -> None:
    expected = _expected_shapes(params.arch)
    if list(params.tensors) != list(expected):
        raise ValueError(f"parameter names {list(params.tensors)} do not match the architecture")
    for name, shape in expected.items():
        if params.tensors[name].shape != shape:
            raise ValueError(f"{name} has shape {params.tensors[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# CNN
# ---------------------------------------------------------------------------

def _pointwise_first_block(x, w, b):
    """Conv(1x1x1) + max-pool on a single-channel input, pooling the input once.

    Each channel is ``w * x + b``, monotone in ``x``, so its window maximum
    is taken at the window max of ``x`` (w > 0), the window min (w < 0) or
    the first element (w == 0). Rounding is monotone, so values match the
    conv-then-pool route bit for bit.
    """
    xmax = T.maxpool3d(x)
    xmin = -T.maxpool3d(-x)
    first = x[:, 0::2, 0::2, 0::2]
    wv = w.reshape(-1)[:, None, None, None]
    sel = np.where(wv > 0, xmax, np.where(wv < 0, xmin, first))
    return wv * sel + b[:, None, None, None], sel


def _trunk(tensors, x, n_blocks=4, cache=None):
    # relu(maxpool(a)) == maxpool(relu(a)); pooling first keeps relu off the full-size map
    h = x
    for i in range(1, n_blocks + 1):
        w, b = tensors[f"conv{i}.w"], tensors[f"conv{i}.b"]
        if i == 1 and w.shape[1:] == (1, 1, 1, 1):
            pa, sel = _pointwise_first_block(h, w, b)
            if cache is not None:
                cache.append(("pointwise", sel, pa))
        else:
            a = T.conv3d(h, w, b, 1, "same")
            pa, idx = T.maxpool3d(a, return_indices=True)
            if cache is not None:
                cache.append((h, a, pa, idx))
        h = T.relu(pa)
    return h


def cnn_forward(params: ModelParams, sample, cache: dict | None = None):
    """Return ``(logits[27], offset[3], feature[fc5])`` for one sample."""
    x = T.as_tensor(sample)
    arch = params.arch
    if x.shape != (1, *arch.input_shape):
        raise T.ShapeError(f"CNN input must be {(1, *arch.input_shape)}, got {x.shape}")
    t = params.tensors
    blocks = [] if cache is not None else None
    pooled = _trunk(t, x, cache=blocks)
    flat = pooled.reshape(-1)
    pre5 = T.dense(flat, t["fc5.w"], t["fc5.b"])
    feat = T.relu(pre5)
    logits = T.dense(feat, t["fc6_1.w"], t["fc6_1.b"])
    offset = T.dense(feat, t["fc6_2.w"], t["fc6_2.b"])
    if cache is not None:
        cache.update(blocks=blocks, pooled=pooled, flat=flat, pre5=pre5, feat=feat)
    return logits, offset, feat


def cnn_backward(params: ModelParams, cache: dict, d_logits, d_offset) -> dict[str, np.ndarray]:
    t = params.tensors
    grads = {}
    feat = cache["feat"]
    g1 = T.dense_grad(feat, t["fc6_1.w"], d_logits)
    g2 = T.dense_grad(feat, t["fc6_2.w"], d_offset)
    grads["fc6_1.w"], grads["fc6_1.b"] = g1.wrt_weights, g1.wrt_bias
    grads["fc6_2.w"], grads["fc6_2.b"] = g2.wrt_weights, g2.wrt_bias
    d_feat = g1.wrt_input + g2.wrt_input
    d_pre5 = T.relu_grad(cache["pre5"], d_feat)
    g5 = T.dense_grad(cache["flat"], t["fc5.w"], d_pre5)
    grads["fc5.w"], grads["fc5.b"] = g5.wrt_weights, g5.wrt_bias
    g = g5.wrt_input.reshape(cache["pooled"].shape)
    for i in range(len(cache["blocks"]), 0, -1):
        block = cache["blocks"][i - 1]
        if isinstance(block[0], str):
            _, sel, pa = block
            g = T.relu_grad(pa, g)
            grads[f"conv{i}.w"] = (g * sel).sum(axis=(1, 2, 3)).reshape(t[f"conv{i}.w"].shape)
            grads[f"conv{i}.b"] = g.sum(axis=(1, 2, 3))
            continue
        h, a, pa, idx = block
        g = T.relu_grad(pa, g)
        g = T.maxpool3d_grad(a, g, idx).wrt_input
        gc = T.conv3d_grad(h, t[f"conv{i}.w"], t[f"conv{i}.b"], g, 1, "same", need_input=i > 1)
        grads[f"conv{i}.w"], grads[f"conv{i}.b"] = gc.wrt_weights, gc.wrt_bias
        g = gc.wrt_input
    return {k: grads[k] for k in t}


# ---------------------------------------------------------------------------
# FCN
# ---------------------------------------------------------------------------

def convert_to_fcn(params: ModelParams) -> FcnModel:
    """Re-lay the fully connected layers out as convolutions.

    FC5 rows become ``fc5`` kernels over the Pool4 map (C4 x 2 x 7 x 6 for the
    canonical sample); FC6_1/FC6_2 become 1x1x1 kernels. Values are untouched.
    """
    check_params(params)
    arch = params.arch
    t = params.tensors
    out = {k: v.copy() for k, v in t.items() if k.startswith("conv")}
    out["fc5.w"] = t["fc5.w"].reshape(arch.fc5, arch.channels[-1], *arch.pool4_shape).copy()
    out["fc5.b"] = t["fc5.b"].copy()
    for head in ("fc6_1", "fc6_2"):
        w = t[f"{head}.w"]
        out[f"{head}.w"] = w.reshape(w.shape[0], w.shape[1], 1, 1, 1).copy()
        out[f"{head}.b"] = t[f"{head}.b"].copy()
    return FcnModel(arch, out)


def grid_shape(dims, sample=SAMPLE) -> tuple[int, int, int]:
    return tuple((n - s) // STRIDE + 1 for n, s in zip(dims, sample))


def fcn_forward(fcn: FcnModel, volume) -> ScoreMaps:
    """Dense scan of a ``(1, D, H, W)`` volume; one grid cell per 16-voxel step."""
    x = T.as_tensor(volume)
    arch = fcn.arch
    if x.ndim != 4 or x.shape[0] != 1:
        raise T.ShapeError(f"FCN input must be (1, D, H, W), got {x.shape}")
    dims = x.shape[1:]
    if any(n < s for n, s in zip(dims, arch.input_shape)):
        raise T.ShapeError(f"volume {dims} is smaller than the minimum {arch.input_shape}")
    if any(n % STRIDE for n in dims):
        raise T.ShapeError(f"volume dims {dims} must be multiples of {STRIDE}; pad the volume first")
    t = fcn.tensors
    pooled = _trunk(t, x)
    feat = T.relu(T.conv3d(pooled, t["fc5.w"], t["fc5.b"], 1, "valid"))
    ids = T.conv3d(feat, t["fc6_1.w"], t["fc6_1.b"], 1, "valid")
    locs = T.conv3d(feat, t["fc6_2.w"], t["fc6_2.b"], 1, "valid")
    return ScoreMaps(ids, locs, feat)


def crop_maps(maps: ScoreMaps, origin_voxel, dims, sample=SAMPLE) -> ScoreMaps:
    """Score maps of the grid-aligned subimage ``origin_voxel + [0, dims)``.

    With 1x1x1 convolutions a cell depends only on its own window, so this
    equals scanning the subimage itself. Larger kernels see zero padding at
    the subimage border and do not have this property.
    """
    if any(o % STRIDE or n % STRIDE for o, n in zip(origin_voxel, dims)):
        raise ValueError(f"subimage {tuple(origin_voxel)}+{tuple(dims)} is not aligned to the {STRIDE}-voxel grid")
    lo = [o // STRIDE for o in origin_voxel]
    hi = [a + g for a, g in zip(lo, grid_shape(dims, sample))]
    if any(a < 0 or b > n for a, b, n in zip(lo, hi, maps.grid)):
        raise ValueError(f"subimage cells {lo}..{hi} fall outside the grid {maps.grid}")
    box = (slice(None),) + tuple(slice(a, b) for a, b in zip(lo, hi))
    return ScoreMaps(maps.id_scores[box], maps.loc_scores[box], maps.features[box])


def map_to_image(grid_index, offset) -> tuple[float, float, float]:
    return tuple(STRIDE * g + o for g, o in zip(grid_index, offset))


def cell_labels(maps: ScoreMaps) -> np.ndarray:
    return maps.id_scores.argmax(axis=0)


def dense_predict(maps: ScoreMaps) -> list[DensePrediction]:
    """One prediction per grid cell whose most likely class is a vertebra."""
    probs = T.softmax(maps.id_scores, axis=0)
    labels = probs.argmax(axis=0)
    preds = []
    for idx in np.argwhere(labels != BACKGROUND):
        g = tuple(int(v) for v in idx)
        lab = int(labels[g])
        offset = maps.loc_scores[(slice(None),) + g]
        preds.append(DensePrediction(lab, map_to_image(g, offset), float(probs[(lab,) + g]), g))
    return preds


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path, sections) -> None:
    """``sections`` is an ordered list of ``(tag, descriptor, tensors)``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for tag, desc, tensors in sections:
            head = {"section": tag, "arch": desc, "tensors": list(tensors)}
            fh.write((json.dumps(head, sort_keys=True) + "\n").encode())
            for name in tensors:
                T.write_tensor(fh, tensors[name])


def read_checkpoint(path) -> dict[str, tuple[dict, dict[str, np.ndarray]]]:
    sections = {}
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an SPMK1 checkpoint")
        while True:
            line = fh.readline()
            if not line:
                break
            head = json.loads(line)
            tensors = {name: T.read_tensor(fh) for name in head["tensors"]}
            sections[head["section"]] = (head["arch"], tensors)
    return sections


def cnn_section(params: ModelParams):
    return ("cnn", params.arch.to_json(), params.tensors)


def fcn_section(fcn: FcnModel):
    return ("fcn", fcn.arch.to_json(), fcn.tensors)


def params_from_section(section) -> ModelParams:
    desc, tensors = section
    params = ModelParams(CnnArch.from_json(desc), tensors)
    check_params(params)
    return params


def fcn_from_section(section) -> FcnModel:
    desc, tensors = section
    return FcnModel(CnnArch.from_json(desc), tensors)
