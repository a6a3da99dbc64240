"""Volumes, annotations, sample cropping and the synthetic spine phantom.

Axis order everywhere is (longitudinal, frontal, sagittal) = (D, H, W).
Annotation centroids are stored in millimetres; voxel coordinates are
``mm / spacing`` with voxel 0 centred at 0 mm.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .losses import BACKGROUND, SampleTarget

log = logging.getLogger(__name__)

LABEL_NAMES = (
    [f"C{i}" for i in range(1, 8)]
    + [f"T{i}" for i in range(1, 13)]
    + [f"L{i}" for i in range(1, 6)]
    + ["S1", "S2"]
)
_LABEL_INDEX = {name: i for i, name in enumerate(LABEL_NAMES)}

SAMPLE_SHAPE = (32, 112, 96)
TARGET_SPACING = (1.25, 1.0, 1.0)
GRID = 16
POSITIVE_JITTER = (8, 24, 20)


def encode_label(name: str) -> int:
    if name == "background":
        return BACKGROUND
    try:
        return _LABEL_INDEX[name]
    except KeyError:
        raise ValueError(f"unknown vertebra label {name!r}") from None


def decode_label(index: int) -> str:
    if index == BACKGROUND:
        return "background"
    if not 0 <= index < len(LABEL_NAMES):
        raise ValueError(f"label index {index} out of range")
    return LABEL_NAMES[index]


def region_of(label: int) -> str | None:
    if 0 <= label <= 6:
        return "cervical"
    if 7 <= label <= 18:
        return "thoracic"
    if 19 <= label <= 23:
        return "lumbar"
    return None


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class Volume:
    """Intensities ``(1, D, H, W)``, kept in float32 like the on-disk format."""
    intensities: np.ndarray
    spacing_mm: tuple[float, float, float] = TARGET_SPACING

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[0] != 1 or min(arr.shape) < 1:
            raise ValueError(f"volume must be (1, D, H, W), got {arr.shape}")
        self.intensities = arr
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.intensities.shape[1:])

    def as_tensor(self) -> np.ndarray:
        return self.intensities.astype(np.float64)


@dataclass
class AnnotationSet:
    entries: list[tuple[str, tuple[float, float, float]]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        clean = []
        for i, (name, mm) in enumerate(self.entries):
            try:
                encode_label(name)
            except ValueError:
                raise ValueError(f"annotation entry {i}: unknown vertebra label {name!r}") from None
            if name == "background":
                raise ValueError(f"annotation entry {i}: background is not a vertebra")
            if name in seen:
                raise ValueError(f"annotation entry {i}: duplicate label {name!r}")
            seen.add(name)
            clean.append((name, tuple(float(v) for v in mm)))
        self.entries = clean

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([encode_label(n) for n, _ in self.entries], dtype=int)

    def voxels(self, spacing) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 3))
        return np.array([mm for _, mm in self.entries]) / np.asarray(spacing, dtype=np.float64)

    @classmethod
    def from_voxels(cls, labels, voxels, spacing) -> "AnnotationSet":
        mm = np.asarray(voxels, dtype=np.float64).reshape(-1, 3) * np.asarray(spacing, dtype=np.float64)
        return cls([(decode_label(int(k)), tuple(m)) for k, m in zip(labels, mm)])


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name[: -len(path.suffix)] + ".ann.json" if path.suffix else path.name + ".ann.json")


def save_volume(path, volume: Volume, annotations: AnnotationSet | None = None) -> None:
    path = Path(path)
    header = {"dims": list(volume.dims), "spacing_mm": list(volume.spacing_mm), "dtype": "f32le"}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        fh.write(volume.intensities.astype("<f4").tobytes())
    if annotations is not None:
        ann = [{"label": n, "centroid_mm": list(mm)} for n, mm in annotations.entries]
        sidecar_path(path).write_text(json.dumps({"annotations": ann}, indent=1) + "\n")


def load_volume(path) -> tuple[Volume, AnnotationSet | None]:
    path = Path(path)
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
        dims = [int(n) for n in header["dims"]]
        spacing = [float(s) for s in header["spacing_mm"]]
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed header at byte 0: {line[:120]!r}") from exc
    if dtype != "f32le":
        raise ValueError(f"{path}: unsupported dtype {dtype!r} in header")
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"{path}: header dims must be three positive integers, got {dims}")
    expected = 4 * int(np.prod(dims))
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected} "
            f"(fault at byte {len(line) + min(len(payload), expected)})")
    data = np.frombuffer(payload, dtype="<f4").reshape(1, *dims).astype(np.float32)
    volume = Volume(data, tuple(spacing))
    side = sidecar_path(path)
    annotations = None
    if side.exists():
        doc = json.loads(side.read_text())
        entries = []
        for i, item in enumerate(doc.get("annotations", [])):
            name = item.get("label")
            if name not in _LABEL_INDEX:
                raise ValueError(f"{side}: entry {i} has unknown label {name!r}")
            entries.append((name, tuple(item["centroid_mm"])))
        annotations = AnnotationSet(entries)
    return volume, annotations


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def pad_to_grid(volume: Volume, grid: int = GRID, minimum=SAMPLE_SHAPE) -> Volume:
    dims = volume.dims
    target = [max(-(-n // grid) * grid, m) for n, m in zip(dims, minimum)]
    if list(dims) == target:
        return volume
    pad = [(0, 0)] + [(0, t - n) for n, t in zip(dims, target)]
    return Volume(np.pad(volume.intensities, pad), volume.spacing_mm)


def resample(volume: Volume, annotations: AnnotationSet | None = None,
             spacing=TARGET_SPACING) -> tuple[Volume, AnnotationSet | None]:
    """Trilinear resampling to ``spacing``, then zero-padding to the grid.

    Annotations are kept in millimetres, so their voxel positions follow the
    new spacing automatically.
    """
    old = np.asarray(volume.spacing_mm)
    new = np.asarray(spacing, dtype=np.float64)
    if np.allclose(old, new):
        return pad_to_grid(Volume(volume.intensities, tuple(new))), annotations
    dims = np.asarray(volume.dims)
    out_dims = np.maximum(np.rint(dims * old / new).astype(int), 1)
    coords = np.meshgrid(*[np.arange(n) * s for n, s in zip(out_dims, new / old)], indexing="ij")
    data = ndimage.map_coordinates(volume.intensities[0].astype(np.float64), coords,
                                   order=1, mode="nearest")
    return pad_to_grid(Volume(data, tuple(new))), annotations


# ---------------------------------------------------------------------------
# sample crops
# ---------------------------------------------------------------------------

@dataclass
class SampleCrop:
    """A fixed-size crop. The voxels are sliced lazily from ``volume``."""
    volume: Volume
    origin_voxel: tuple[int, int, int]
    target: SampleTarget

    @property
    def tensor(self) -> np.ndarray:
        d, h, w = self.origin_voxel
        sd, sh, sw = SAMPLE_SHAPE
        return self.volume.intensities[:, d:d + sd, h:h + sh, w:w + sw].astype(np.float64)


def label_window(origin, centroids_vox, labels, size=SAMPLE_SHAPE) -> SampleTarget:
    """Target for a window: nearest contained centroid to the window centre
    (ties to the lower label), or background."""
    origin = np.asarray(origin, dtype=np.float64)
    if len(labels) == 0:
        return SampleTarget(BACKGROUND)
    c = np.asarray(centroids_vox, dtype=np.float64)
    inside = np.all((c >= origin) & (c < origin + np.asarray(size)), axis=1)
    if not inside.any():
        return SampleTarget(BACKGROUND)
    centre = origin + np.asarray(size) / 2.0
    dist = np.sum((c - centre) ** 2, axis=1)
    idx = np.flatnonzero(inside)
    best = min(idx, key=lambda i: (dist[i], labels[i]))
    return SampleTarget(int(labels[best]), tuple(c[best] - origin))


def crop_sample(volume: Volume, annotations: AnnotationSet | None, origin) -> SampleCrop:
    origin = tuple(int(o) for o in origin)
    for o, n, s in zip(origin, volume.dims, SAMPLE_SHAPE):
        if o < 0 or o + s > n:
            raise ValueError(f"crop at origin {origin} does not fit inside volume {volume.dims}")
    ann = annotations or AnnotationSet()
    target = label_window(origin, ann.voxels(volume.spacing_mm), ann.labels)
    return SampleCrop(volume, origin, target)


def _rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_cnn_samples(volumes, per_vertebra: int = 40, seed: int = 0,
                         negatives: int | None = None, jitter=POSITIVE_JITTER,
                         skipped: list | None = None) -> list[SampleCrop]:
    """Positive crops jittered around every annotated vertebra plus negatives.

    ``negatives`` defaults to the number of positives drawn from the same
    volume (1:1). Vertebrae that admit no in-bounds crop are recorded in
    ``skipped`` as ``(volume_index, label_name)``.
    """
    samples = []
    size = np.asarray(SAMPLE_SHAPE)
    jitter = np.asarray(jitter)
    for vi, ((volume, ann), rng) in enumerate(zip(volumes, _rngs(seed, len(volumes)))):
        ann = ann or AnnotationSet()
        dims = np.asarray(volume.dims)
        hi = dims - size
        if np.any(hi < 0):
            raise ValueError(f"volume {vi} {volume.dims} smaller than a sample {SAMPLE_SHAPE}")
        cents = ann.voxels(volume.spacing_mm)
        n_pos = 0
        for (name, _), c in zip(ann.entries, cents):
            lo_o = np.maximum(np.floor(c - size + 1).astype(int), 0)
            hi_o = np.minimum(np.floor(c).astype(int), hi)
            if np.any(lo_o > hi_o):
                log.warning("volume %d: %s too close to the boundary for any crop; skipped", vi, name)
                if skipped is not None:
                    skipped.append((vi, name))
                continue
            for _ in range(per_vertebra):
                centre = c + rng.uniform(-jitter, jitter)
                origin = np.clip(np.rint(centre - size / 2.0).astype(int), lo_o, hi_o)
                samples.append(crop_sample(volume, ann, origin))
                n_pos += 1
        want = n_pos if negatives is None else negatives
        got, attempts = 0, 0
        while got < want and attempts < 200 * max(want, 1):
            attempts += 1
            origin = np.array([rng.integers(0, h + 1) for h in hi])
            crop = crop_sample(volume, ann, origin)
            if crop.target.label == BACKGROUND:
                samples.append(crop)
                got += 1
        if got < want:
            log.warning("volume %d: only %d of %d negative crops found", vi, got, want)
    return samples


def _subvolume(volume: Volume, ann: AnnotationSet, origin, dims):
    sl = tuple(slice(o, o + n) for o, n in zip(origin, dims))
    sub = Volume(volume.intensities[(slice(None),) + sl], volume.spacing_mm)
    cents = ann.voxels(volume.spacing_mm) - np.asarray(origin)
    keep = np.all((cents >= 0) & (cents < np.asarray(dims)), axis=1) if len(ann) else np.zeros(0, bool)
    kept = AnnotationSet.from_voxels(ann.labels[keep], cents[keep], volume.spacing_mm)
    return sub, kept


def rnn_subimage_boxes(volumes, per_vertebra: int = 30, seed: int = 0,
                       max_dims=(96, 256, 256)) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """``(volume_index, origin, dims)`` of random subimages, ``per_vertebra``
    per annotated vertebra.

    Sizes and origins are multiples of the 16-voxel grid, so a subimage's
    score-map cells coincide with cells of the whole-volume scan.
    """
    out = []
    min_dims = np.asarray(SAMPLE_SHAPE)
    for vi, ((volume, ann), rng) in enumerate(zip(volumes, _rngs(seed, len(volumes)))):
        ann = ann or AnnotationSet()
        dims = np.asarray(volume.dims)
        cap = np.minimum(np.asarray(max_dims), dims) // GRID * GRID
        if np.any(cap < min_dims):
            continue
        for _ in range(per_vertebra * len(ann)):
            size = np.array([rng.integers(lo // GRID, hi // GRID + 1) * GRID for lo, hi in zip(min_dims, cap)])
            origin = np.array([rng.integers(0, (n - s) // GRID + 1) * GRID for n, s in zip(dims, size)])
            out.append((vi, origin, size))
    return out


def generate_rnn_subimages(volumes, per_vertebra: int = 30, seed: int = 0,
                           max_dims=(96, 256, 256)) -> list[tuple[Volume, AnnotationSet]]:
    """Random grid-aligned subimages with the annotations they contain."""
    volumes = list(volumes)
    return [_subvolume(volumes[vi][0], volumes[vi][1] or AnnotationSet(), origin, size)
            for vi, origin, size in rnn_subimage_boxes(volumes, per_vertebra, seed, max_dims)]


# ---------------------------------------------------------------------------
# synthetic phantom
# ---------------------------------------------------------------------------

@dataclass
class PhantomSpec:
    seed: int = 0
    vertebra_count: int = 8
    first_label: int = 7
    curvature: float = 4.0           # lateral centreline amplitude, voxels
    size_gradient: float = 0.6       # relative radius growth from C1 to S2
    intensity_gradient: float = 0.5  # body intensity growth from C1 to S2
    level_jitter: float = 0.0        # per-vertebra appearance jitter, in level units
    noise: float = 0.02
    tissue: float = 0.0              # bright soft-tissue base intensity; 0 disables the texture
    tissue_code: float = 0.3         # bright soft-tissue sawtooth amplitude
    code_period: int = 5             # sawtooth period, in levels
    tissue_ramp: float = 1.0         # dark soft-tissue growth from C1 to S2
    margin: tuple[int, int] = (40, 40)
    lateral_dims: tuple[int, int] = (128, 112)
    min_gap: float = 24.0

    def validate(self):
        if not 1 <= self.vertebra_count <= len(LABEL_NAMES):
            raise ValueError(f"vertebra_count must be in 1..26, got {self.vertebra_count}")
        if self.first_label < 0 or self.first_label + self.vertebra_count > len(LABEL_NAMES):
            raise ValueError(f"labels {self.first_label}..{self.first_label + self.vertebra_count - 1} out of range")
        if self.min_gap < 24:
            raise ValueError("vertebrae must be at least 24 voxels apart longitudinally")
        if min(self.noise, self.level_jitter, self.tissue, self.tissue_code) < 0:
            raise ValueError("noise, level_jitter, tissue and tissue_code must be non-negative")
        if self.code_period < 1:
            raise ValueError("code_period must be >= 1")
        if self.lateral_dims[0] < SAMPLE_SHAPE[1] or self.lateral_dims[1] < SAMPLE_SHAPE[2]:
            raise ValueError(f"lateral dims {self.lateral_dims} smaller than a sample")


def level_gap(level: float, min_gap: float = 24.0) -> float:
    return min_gap + 6.0 * level / 25.0


def _soft_ellipsoid(grid, centre, radii, edge=1.0):
    r = np.sqrt(sum(((g - c) / s) ** 2 for g, c, s in zip(grid, centre, radii)))
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * min(radii) / edge, -50, 50)))


def _paint(vol, centre, radii, value, edge=1.0):
    """Add a soft ellipsoid into ``vol`` restricted to its bounding box."""
    lo = [max(int(np.floor(c - r - 4 * edge)), 0) for c, r in zip(centre, radii)]
    hi = [min(int(np.ceil(c + r + 4 * edge)) + 1, n) for c, r, n in zip(centre, radii, vol.shape)]
    if any(a >= b for a, b in zip(lo, hi)):
        return
    grid = np.meshgrid(*[np.arange(a, b, dtype=np.float64) for a, b in zip(lo, hi)], indexing="ij")
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    vol[box] = np.maximum(vol[box], value * _soft_ellipsoid(grid, centre, radii, edge))


def synth_phantom(spec: PhantomSpec) -> tuple[Volume, AnnotationSet]:
    """Curved stack of ellipsoidal vertebral bodies with anatomical context.

    Body radius and intensity grow with the vertebra level; thoracic levels
    carry rib bars, C1 sits under a skull cap and the sacrum between iliac
    wings. With ``tissue > 0`` the surrounding soft tissue is a voxel-scale
    mix of two materials whose intensities encode the local level. Centroids
    are the exact ellipsoid centres.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    levels = np.arange(spec.first_label, spec.first_label + spec.vertebra_count)
    # appearance level: true level plus optional per-vertebra jitter
    look = levels + rng.normal(0.0, spec.level_jitter, len(levels)) if spec.level_jitter else levels.astype(float)
    z = [float(spec.margin[0])]
    for lv in levels[:-1]:
        z.append(z[-1] + level_gap(lv + 0.5, spec.min_gap) + rng.uniform(0.0, 2.0))
    z = np.array(z)
    depth = int(np.ceil(z[-1] + spec.margin[1]))
    depth = max(-(-depth // GRID) * GRID, SAMPLE_SHAPE[0])
    nh, nw = spec.lateral_dims
    vol = np.zeros((depth, nh, nw))

    span = max(z[-1] - z[0], 1.0)
    phase = rng.uniform(0, 2 * np.pi)
    y = nh / 2.0 + 0.5 * spec.curvature * np.sin(phase + 1.3 * np.pi * (z - z[0]) / span)
    x = nw / 2.0 + spec.curvature * np.sin(np.pi * (z - z[0]) / span)

    for lv, app, zc, yc, xc in zip(levels, look, z, y, x):
        t = np.clip(app / 25.0, -0.2, 1.2)
        scale = 1.0 + spec.size_gradient * t
        body = (5.5 * scale, 8.0 * scale, 9.0 * scale)
        value = 0.5 + spec.intensity_gradient * t
        _paint(vol, (zc, yc, xc), body, value)
        # posterior arch
        _paint(vol, (zc, yc + body[1] + 5.0, xc), (2.5 * scale, 5.0, 3.0), 0.6 * value)
        if 7 <= lv <= 18:
            for side in (-1, 1):
                _paint(vol, (zc, yc + 4.0, xc + side * (body[2] + 16.0)), (2.0, 2.5, 15.0), 0.7)
        if lv == 0:
            _paint(vol, (zc - 22.0, yc, xc), (12.0, 40.0, 40.0), 0.8, edge=2.0)
        if lv == 24:
            for side in (-1, 1):
                _paint(vol, (zc + 8.0, yc - 4.0, xc + side * 30.0), (22.0, 10.0, 12.0), 0.75, edge=2.0)

    if spec.tissue:
        # two-material soft tissue: the bright one repeats a sawtooth over the
        # local level, the dark one ramps with it, so every block shows both cues
        s = np.interp(np.arange(depth, dtype=np.float64), z, look)
        bright = spec.tissue + spec.tissue_code * (((s + 0.5) / spec.code_period) % 1.0)
        dark = spec.tissue_ramp * s / 25.0
        speckle = rng.random(vol.shape) < 0.5
        vol += np.where(speckle, bright[:, None, None], dark[:, None, None])
    if spec.noise:
        vol += rng.normal(0.0, spec.noise, vol.shape)
    volume = Volume(vol[None], TARGET_SPACING)
    cents = np.stack([z, y, x], axis=1)
    return volume, AnnotationSet.from_voxels(levels, cents, TARGET_SPACING)
