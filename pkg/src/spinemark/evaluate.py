"""Vote aggregation, sample/identification metrics and whole-volume prediction."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import AnnotationSet, Volume, decode_label, region_of
from .losses import BACKGROUND
from .net import FcnModel, dense_predict, fcn_forward, map_to_image
from .sequence import BiRnnParams, birnn_forward, build_feature_sequence

log = logging.getLogger(__name__)

REGIONS = ("cervical", "thoracic", "lumbar")
ID_THRESHOLD_MM = 20.0


@dataclass(frozen=True)
class FinalPrediction:
    label: int
    centroid_voxel: tuple[float, float, float]
    support_count: int
    mean_confidence: float

    def to_json(self):
        return {"label": decode_label(self.label), "centroid_voxel": list(self.centroid_voxel),
                "support_count": self.support_count, "mean_confidence": self.mean_confidence}


def lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(v[(len(v) - 1) // 2])


def aggregate(votes) -> dict[int, FinalPrediction]:
    """Group ``(label, centroid[, confidence])`` votes by label and take the
    componentwise lower median of each group."""
    groups = defaultdict(list)
    confs = defaultdict(list)
    for vote in votes:
        label, centroid = int(vote[0]), vote[1]
        if label == BACKGROUND:
            continue
        groups[label].append(np.asarray(centroid, dtype=np.float64))
        confs[label].append(float(vote[2]) if len(vote) > 2 else 1.0)
    out = {}
    for label in sorted(groups):
        pts = np.array(groups[label])
        centre = tuple(lower_median(pts[:, k]) for k in range(3))
        out[label] = FinalPrediction(label, centre, len(pts), float(np.mean(confs[label])))
    return out


def sample_metrics(pred_labels, pred_offsets, targets, spacing=(1.0, 1.0, 1.0)) -> tuple[float, float]:
    """Classification accuracy over all samples and mean centroid distance
    (mm) over positive samples."""
    pred_labels = np.asarray(pred_labels, dtype=int)
    if len(targets) == 0 or len(pred_labels) == 0:
        raise ValueError("sample_metrics needs at least one sample")
    if len(pred_labels) != len(targets):
        raise ValueError(f"{len(pred_labels)} predictions for {len(targets)} targets")
    gt = np.array([t.label for t in targets])
    acc = float(np.mean(pred_labels == gt))
    pos = gt != BACKGROUND
    if not pos.any():
        return acc, 0.0
    po = np.asarray(pred_offsets, dtype=np.float64)[pos]
    go = np.array([t.centroid_offset for t in targets], dtype=np.float64)[pos]
    dist = np.linalg.norm((po - go) * np.asarray(spacing), axis=1)
    return acc, float(dist.mean())


def match_vertebrae(final: dict[int, FinalPrediction], gt: AnnotationSet, spacing,
                    threshold_mm: float = ID_THRESHOLD_MM) -> list[dict]:
    """Per ground-truth vertebra: identified flag and same-label distance."""
    spacing = np.asarray(spacing, dtype=np.float64)
    gt_mm = gt.voxels(spacing) * spacing
    pred_labels = np.array(sorted(final), dtype=int)
    pred_mm = np.array([final[k].centroid_voxel for k in pred_labels]).reshape(-1, 3) * spacing
    rows = []
    for label, c in zip(gt.labels, gt_mm):
        row = {"label": int(label), "region": region_of(int(label)), "identified": False,
               "error_mm": None, "error_vox": None}
        if label in final:
            d_all = np.linalg.norm(pred_mm - c, axis=1)
            own = d_all[pred_labels == label][0]
            row["error_mm"] = float(own)
            row["error_vox"] = float(np.linalg.norm((pred_mm[pred_labels == label][0] - c) / spacing))
            row["identified"] = bool(own <= threshold_mm and own <= d_all.min())
        rows.append(row)
    return rows


def _stats(rows):
    errs = [r["error_mm"] for r in rows if r["error_mm"] is not None]
    vox = [r["error_vox"] for r in rows if r.get("error_vox") is not None]
    return {
        "n": len(rows),
        "id_rate": float(np.mean([r["identified"] for r in rows])) if rows else None,
        "loc_mean_mm": float(np.mean(errs)) if errs else None,
        "loc_std_mm": float(np.std(errs)) if errs else None,
        "loc_mean_vox": float(np.mean(vox)) if vox else None,
    }


def summarize(rows: list[dict], false_positive_labels=(), extra: dict | None = None) -> dict:
    """Pooled EvalReport dictionary with fixed field names."""
    allstats = _stats(rows)
    report = {
        "id_rate_all": allstats["id_rate"],
        "loc_mean_mm": allstats["loc_mean_mm"],
        "loc_std_mm": allstats["loc_std_mm"],
        "loc_mean_vox": allstats["loc_mean_vox"],
        "n_vertebrae": allstats["n"],
    }
    for region in REGIONS:
        report[region] = _stats([r for r in rows if r["region"] == region])
    report["false_positive_labels"] = sorted(set(false_positive_labels))
    if extra:
        report.update(extra)
    return report


def identification_metrics(final: dict[int, FinalPrediction], gt: AnnotationSet, spacing,
                           threshold_mm: float = ID_THRESHOLD_MM) -> dict:
    rows = match_vertebrae(final, gt, spacing, threshold_mm)
    fps = [decode_label(k) for k in final if k not in set(gt.labels.tolist())]
    return summarize(rows, fps)


@dataclass
class VolumePrediction:
    rnn: dict[int, FinalPrediction]
    cnn: dict[int, FinalPrediction]
    rnn_votes: list
    cnn_votes: list
    sequence_length: int
    diagnostic: str | None = None


def predict_volume(fcn: FcnModel, birnn: BiRnnParams | None, volume: Volume) -> VolumePrediction:
    """FCN dense scan, then the Bi-RNN over the positive-cell sequence.

    The CNN-only path aggregates the FCN's own dense predictions.
    """
    maps = fcn_forward(fcn, volume.as_tensor())
    dense = dense_predict(maps)
    cnn_votes = [(p.label, p.centroid_voxel, p.confidence) for p in dense]
    seq = build_feature_sequence(maps)
    rnn_votes = []
    diagnostic = None
    if len(seq) == 0:
        diagnostic = "no non-background cells; empty prediction set"
        log.warning(diagnostic)
    elif birnn is not None:
        logits, offsets = birnn_forward(birnn, seq)
        probs = T.softmax(logits)
        # step outputs over the 26 vertebra classes; background steps are dropped
        labels = probs.argmax(axis=1)
        for g, lab, off, pr in zip(seq.grid_index, labels, offsets, probs):
            if lab != BACKGROUND:
                rnn_votes.append((int(lab), map_to_image(g, off), float(pr[lab])))
    return VolumePrediction(aggregate(rnn_votes), aggregate(cnn_votes), rnn_votes, cnn_votes,
                            len(seq), diagnostic)
