"""Stage orchestration shared by the command line, the self-test and demos."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig
from .losses import BACKGROUND
from .evaluate import match_vertebrae, predict_volume, sample_metrics, summarize
from .net import FcnModel, ModelParams, build_cnn, convert_to_fcn, crop_maps, fcn_forward
from .sequence import (BiRnnParams, FeatureSequence, _sequence_from_mask, build_birnn,
                       cell_targets, train_birnn)
from .train import predict_samples, train_cnn

log = logging.getLogger(__name__)

# phantom appearance used by the reference corpora
PHANTOM_DEFAULTS = {"noise": 0.01, "intensity_gradient": 2.0, "min_gap": 34.0, "level_jitter": 0.35,
                    "tissue": 1.0}


# ---------------------------------------------------------------------------
# phantom corpora
# ---------------------------------------------------------------------------

@dataclass
class CorpusSpec:
    """A reproducible set of phantoms with random spans of the spine."""
    seed: int = 0
    volumes: int = 30
    vertebrae: tuple[int, int] = (5, 10)
    phantom: dict = field(default_factory=lambda: dict(PHANTOM_DEFAULTS))  # PhantomSpec overrides

    @classmethod
    def from_json(cls, doc: dict) -> "CorpusSpec":
        unknown = set(doc) - {"seed", "volumes", "vertebrae", "phantom"}
        if unknown:
            raise ValueError(f"unknown corpus keys {sorted(unknown)}")
        # partial phantom overrides apply on top of the reference appearance
        phantom = {**PHANTOM_DEFAULTS, **doc.get("phantom", {})}
        spec = cls(**{**doc, "vertebrae": tuple(doc.get("vertebrae", (5, 10))), "phantom": phantom})
        lo, hi = spec.vertebrae
        if not 1 <= lo <= hi <= len(D.LABEL_NAMES) or spec.volumes < 1:
            raise ValueError(f"invalid corpus size: {spec.volumes} volumes of {spec.vertebrae} vertebrae")
        keys = set(spec.phantom)
        bad = (keys - set(D.PhantomSpec.__dataclass_fields__)) | (keys & {"seed", "vertebra_count", "first_label"})
        if bad:
            raise ValueError(f"phantom overrides may not set {sorted(bad)}")
        return spec

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["vertebrae"] = list(self.vertebrae)
        return doc


def phantom_specs(spec: CorpusSpec) -> list[D.PhantomSpec]:
    rng = np.random.default_rng(spec.seed)
    out = []
    extra = {k: tuple(v) if isinstance(v, list) else v for k, v in spec.phantom.items()}
    for i in range(spec.volumes):
        count = int(rng.integers(spec.vertebrae[0], spec.vertebrae[1] + 1))
        first = int(rng.integers(0, len(D.LABEL_NAMES) - count + 1))
        seed = int(rng.integers(0, 2**31))
        out.append(D.PhantomSpec(seed=seed, vertebra_count=count, first_label=first, **extra))
    return out


def phantom_corpus(spec: CorpusSpec) -> list[tuple[str, D.Volume, D.AnnotationSet]]:
    return [(f"phantom_{i:03d}", *D.synth_phantom(ps)) for i, ps in enumerate(phantom_specs(spec))]


def write_corpus(out_dir, items) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, vol, ann in items:
        path = out_dir / f"{name}.vvol"
        D.save_volume(path, vol, ann)
        paths.append(path)
    return paths


def load_corpus(in_dir) -> list[tuple[str, D.Volume, D.AnnotationSet]]:
    """Every ``*.vvol`` in ``in_dir`` (sorted by name), resampled and padded."""
    paths = sorted(Path(in_dir).glob("*.vvol"))
    if not paths:
        raise FileNotFoundError(f"no .vvol volumes in {in_dir}")
    items = []
    for path in paths:
        vol, ann = D.load_volume(path)
        vol, ann = D.resample(vol, ann)
        items.append((path.stem, vol, ann))
    return items


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cnn_samples(cfg: RunConfig, volumes, per_vertebra: int | None = None, seed_shift: int = 0):
    pairs = [(v, a) for _, v, a in volumes]
    per = cfg.data.per_vertebra if per_vertebra is None else per_vertebra
    samples = []
    rngs_seed = cfg.data.seed + seed_shift
    for k, pair in enumerate(pairs):
        n_pos = per * len(pair[1])
        neg = int(round(cfg.data.negative_ratio * n_pos))
        samples += D.generate_cnn_samples([pair], per, seed=(rngs_seed, k), negatives=neg)
    return samples


def train_cnn_stage(cfg: RunConfig, volumes, history: list | None = None) -> ModelParams:
    samples = cnn_samples(cfg, volumes)
    log.info("training CNN on %d samples from %d volumes", len(samples), len(volumes))
    params = build_cnn(cfg.cnn.seed, cfg.cnn_arch)
    return train_cnn(samples, cfg.cnn, params, cfg.cnn_arch, history)


def _volume_targets(vol, ann, grid):
    return cell_targets(grid, ann.voxels(vol.spacing_mm), ann.labels)


def rnn_sequences(cfg: RunConfig, fcn: FcnModel, volumes) -> list[FeatureSequence]:
    """Training sequences of random grid-aligned subimages.

    Positive cells are chosen by ground truth. With 1x1x1 kernels each
    subimage's score maps are cut from one scan of the whole volume;
    otherwise every subimage is scanned on its own.
    """
    pairs = [(v, a) for _, v, a in volumes]
    boxes = D.rnn_subimage_boxes(pairs, cfg.data.rnn_per_vertebra, cfg.data.seed + 1,
                                 cfg.data.rnn_max_dims)
    pointwise = fcn.arch.kernel == 1
    cache = {}
    seqs = []
    for vi, origin, size in boxes:
        vol, ann = pairs[vi]
        if pointwise:
            if vi not in cache:
                maps = fcn_forward(fcn, vol.as_tensor())
                cache = {vi: (maps, _volume_targets(vol, ann, maps.grid))}
            maps, (lab, off) = cache[vi]
            sub = crop_maps(maps, origin, size)
            lo = tuple(o // 16 for o in origin)
            box = tuple(slice(a, a + g) for a, g in zip(lo, sub.grid))
            lab, off = lab[box], off[box]
        else:
            svol, sann = D._subvolume(vol, ann, origin, size)
            sub = fcn_forward(fcn, svol.as_tensor())
            lab, off = _volume_targets(svol, sann, sub.grid)
        seq = _sequence_from_mask(sub, lab != BACKGROUND)
        g = tuple(seq.grid_index.T)
        seq.labels = lab[g] if len(seq) else np.zeros(0, int)
        seq.offsets = off[g] if len(seq) else np.zeros((0, 3))
        if len(seq):
            seqs.append(seq)
    return seqs


def train_rnn_stage(cfg: RunConfig, fcn: FcnModel, volumes, history: list | None = None) -> BiRnnParams:
    seqs = rnn_sequences(cfg, fcn, volumes)
    log.info("training Bi-RNN on %d sequences (mean length %.1f)", len(seqs),
             np.mean([len(s) for s in seqs]) if seqs else 0.0)
    params = build_birnn(cfg.rnn.seed, cfg.rnn_arch)
    return train_birnn(seqs, cfg.rnn, params, cfg.rnn_arch, history)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_corpus(cfg: RunConfig, params: ModelParams, fcn: FcnModel | None,
                    birnn: BiRnnParams | None, volumes) -> dict:
    """Held-out sample metrics plus identification reports for the CNN-only
    and CNN+Bi-RNN paths, pooled over all volumes."""
    fcn = fcn or convert_to_fcn(params)
    samples = cnn_samples(cfg, volumes, seed_shift=1000)
    labels, offsets = predict_samples(params, samples)
    spacing = volumes[0][1].spacing_mm
    acc, err_mm = sample_metrics(labels, offsets, [s.target for s in samples], spacing)
    _, err_vox = sample_metrics(labels, offsets, [s.target for s in samples])
    sample = {"sample_cls_accuracy": acc, "sample_loc_error_mm": err_mm,
              "sample_loc_error_vox": err_vox, "n_samples": len(samples)}
    rows = {"cnn_only": [], "cnn_birnn": []}
    fps = {"cnn_only": [], "cnn_birnn": []}
    for name, vol, ann in volumes:
        pred = predict_volume(fcn, birnn, vol)
        for key, final in (("cnn_only", pred.cnn), ("cnn_birnn", pred.rnn)):
            r = match_vertebrae(final, ann, vol.spacing_mm, cfg.eval.threshold_mm)
            rows[key] += r
            present = set(ann.labels.tolist())
            fps[key] += [f"{name}:{D.decode_label(k)}" for k in final if k not in present]
    return {key: summarize(rows[key], fps[key], dict(sample)) for key in rows}


def dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------

def default_corpora(seed: int = 0, phantom: dict | None = None) -> tuple[CorpusSpec, CorpusSpec]:
    """The fixed training (30 volumes) and held-out (8 volumes) phantom sets."""
    phantom = dict(PHANTOM_DEFAULTS if phantom is None else phantom)
    return (CorpusSpec(seed=seed, volumes=30, vertebrae=(5, 10), phantom=phantom),
            CorpusSpec(seed=seed + 1, volumes=8, vertebrae=(5, 10), phantom=phantom))


def run_end_to_end(cfg: RunConfig, train_spec: CorpusSpec, test_spec: CorpusSpec, run_dir) -> dict:
    """train-cnn, convert, train-rnn and predict on phantoms; writes the
    checkpoints, training curves and ``report.json`` under ``run_dir``."""
    from .net import cnn_section, fcn_section, write_checkpoint

    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    train_items = phantom_corpus(train_spec)
    test_items = phantom_corpus(test_spec)
    cnn_hist, rnn_hist = [], []
    params = train_cnn_stage(cfg, train_items, cnn_hist)
    write_checkpoint(run / "cnn.spmk", [cnn_section(params)])
    fcn = convert_to_fcn(params)
    birnn = train_rnn_stage(cfg, fcn, train_items, rnn_hist)
    write_checkpoint(run / "model.spmk", [fcn_section(fcn), ("birnn", birnn.arch.to_json(), birnn.tensors)])
    report = evaluate_corpus(cfg, params, fcn, birnn, test_items)
    dump_json(run / "report.json", report)
    dump_json(run / "history.json", {"cnn": cnn_hist, "rnn": rnn_hist})
    (run / "config.json").write_text(cfg.dumps())
    return report
