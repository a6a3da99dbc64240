"""Fast oracle suite behind ``spinemark selftest``.

Each check compares a library routine against an independent computation
(nested loops, finite differences, closed forms) and prints one line.
"""
from __future__ import annotations

import io
import itertools
import math
import tempfile
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import AnnotationSet, Volume, load_volume, save_volume
from .evaluate import aggregate
from .losses import (SampleTarget, identification_loss, localization_loss, smooth_l1,
                     total_loss)
from .net import (CnnArch, build_cnn, cnn_forward, convert_to_fcn, fcn_forward, grid_shape,
                  map_to_image)
from .sequence import BiRnnArch, birnn_forward, birnn_grad, build_birnn


def _conv_loops(x, k, b):
    cin, d, h, w = x.shape
    cout, _, kd, kh, kw = k.shape
    out = np.zeros((cout, d - kd + 1, h - kh + 1, w - kw + 1))
    for o, i, j, m in np.ndindex(*out.shape):
        out[o, i, j, m] = b[o] + np.sum(x[:, i:i + kd, j:j + kh, m:m + kw] * k[o])
    return out


def check_conv(rng) -> float:
    x = rng.standard_normal((2, 5, 4, 6))
    k = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    return float(np.abs(T.conv3d(x, k, b, 1, "valid") - _conv_loops(x, k, b)).max())


def check_pool(rng) -> float:
    x = rng.standard_normal((2, 4, 6, 4))
    ref = np.zeros((2, 2, 3, 2))
    for c, i, j, m in np.ndindex(*ref.shape):
        ref[c, i, j, m] = x[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * m:2 * m + 2].max()
    return float(np.abs(T.maxpool3d(x) - ref).max())


FD_STEP = 1e-5
FD_FLOOR = 1e-5  # below this magnitude central differences are roundoff-limited


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), FD_FLOOR)


def check_conv_grad(rng, probes=10) -> float:
    x = rng.standard_normal((2, 4, 4, 4))
    k = rng.standard_normal((2, 2, 3, 3, 3))
    b = rng.standard_normal(2)
    up = rng.standard_normal((2, 4, 4, 4))
    g = T.conv3d_grad(x, k, b, up, 1, "same")
    worst = 0.0
    for _ in range(probes):
        idx = tuple(int(rng.integers(n)) for n in k.shape)
        kp, km = k.copy(), k.copy()
        kp[idx] += FD_STEP
        km[idx] -= FD_STEP
        fd = (np.sum(T.conv3d(x, kp, b, 1, "same") * up)
              - np.sum(T.conv3d(x, km, b, 1, "same") * up)) / (2 * FD_STEP)
        worst = max(worst, _rel(fd, g.wrt_weights[idx]))
    return worst


def check_birnn_grad(rng, probes=10) -> float:
    params = build_birnn(1, BiRnnArch(input_dim=4, hidden=3, layers=2))
    x = rng.standard_normal((3, 1, 4))
    mask = np.ones((3, 1))
    wl = rng.standard_normal((3, 1, 27))
    wo = rng.standard_normal((3, 1, 3))

    def f(p):
        lg, off = birnn_forward(p, (x, mask))
        return float(np.sum(lg * wl) + np.sum(off * wo))

    cache = {}
    birnn_forward(params, (x, mask), cache)
    grads = birnn_grad(params, (x, mask), wl, wo, cache)
    names = sorted(params.tensors)
    worst = 0.0
    for _ in range(probes):
        name = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(n)) for n in params.tensors[name].shape)
        p2 = params.copy()
        p2.tensors[name][idx] += FD_STEP
        up = f(p2)
        p2.tensors[name][idx] -= 2 * FD_STEP
        fd = (up - f(p2)) / (2 * FD_STEP)
        worst = max(worst, _rel(fd, grads[name][idx]))
    return worst


def check_losses() -> float:
    errs = [abs(smooth_l1(0.0)), abs(smooth_l1(0.5) - 0.125), abs(smooth_l1(-3.0) - 2.5),
            abs(total_loss(1.0, 2.0, 0.12) - 1.24)]
    p = np.full((1, 27), 1.0 / 27)
    direct = -math.log(1 / 27) - 26 * math.log(26 / 27)
    errs.append(abs(identification_loss(p, [SampleTarget(4)]) - direct))
    loss, m = localization_loss(np.array([[16.5, 58.0, 48.0]]), [SampleTarget(3, (16.0, 56.0, 48.0))])
    errs.append(abs(loss - 1.625) + abs(m - 1))
    return max(errs)


def check_fcn(rng) -> float:
    arch = CnnArch(channels=(2, 3, 3, 4), kernel=1, fc5=8)
    params = build_cnn(int(rng.integers(1 << 30)), arch)
    for t in params.tensors.values():
        t += rng.normal(0, 0.1, t.shape)
    vol = rng.standard_normal((1, 48, 128, 112))
    maps = fcn_forward(convert_to_fcn(params), vol)
    worst = 0.0
    for g in itertools.product(*map(range, maps.grid)):
        o = np.asarray(g) * 16
        logits, off, _ = cnn_forward(params, vol[:, o[0]:o[0] + 32, o[1]:o[1] + 112, o[2]:o[2] + 96])
        worst = max(worst, np.abs(logits - maps.id_scores[(slice(None),) + g]).max(),
                    np.abs(off - maps.loc_scores[(slice(None),) + g]).max())
    return float(worst)


def check_mapping(rng) -> float:
    bad = float(map_to_image((2, 3, 1), (4, 10, 7)) != (36, 58, 23))
    for _ in range(50):
        dims = [s + 16 * int(rng.integers(0, 6)) for s in (32, 112, 96)]
        bad += grid_shape(dims) != tuple((n - s) // 16 + 1 for n, s in zip(dims, (32, 112, 96)))
    return bad


def check_median(rng, trials=200) -> float:
    worst = 0.0
    for _ in range(trials):
        q = rng.uniform(0, 100, 3)
        n_in = int(rng.integers(3, 12))
        n_out = int(rng.integers(0, n_in))
        inl = q + rng.uniform(-2, 2, (n_in, 3))
        out = rng.uniform(-500, 500, (n_out, 3))
        votes = [(5, tuple(v)) for v in rng.permutation(np.vstack([inl, out]))]
        c = np.asarray(aggregate(votes)[5].centroid_voxel)
        worst = max(worst, float(np.abs(c - q).max()))
    return worst


def check_roundtrip(rng) -> float:
    vol = Volume(rng.standard_normal((1, 32, 112, 96)).astype(np.float32), (1.25, 1.0, 1.0))
    ann = AnnotationSet([("T4", (12.5, 40.0, 33.0))])
    buf = io.BytesIO()
    T.write_tensor(buf, rng.standard_normal((2, 3)))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "v.vvol"
        save_volume(path, vol, ann)
        back, back_ann = load_volume(path)
    same = np.array_equal(back.intensities, vol.intensities) and back_ann.entries == ann.entries
    return 0.0 if same else 1.0


CHECKS = [
    ("conv3d vs nested loops", check_conv, 1e-12),
    ("maxpool3d vs window scan", check_pool, 0.0),
    ("conv3d gradient vs finite differences", check_conv_grad, 1e-4),
    ("Bi-RNN gradient vs finite differences", check_birnn_grad, 1e-4),
    ("loss closed forms", lambda rng: check_losses(), 1e-12),
    ("FCN cells vs explicit crops", check_fcn, 1e-10),
    ("score-map coordinate mapping", check_mapping, 0.0),
    ("median aggregation robustness", check_median, 2.0),
    ("volume and annotation round trip", check_roundtrip, 0.0),
]


def run_selftest(seed: int = 0, end_to_end: bool = False, run_dir=None, out=print) -> bool:
    rng = np.random.default_rng(seed)
    ok = True
    for name, fn, tol in CHECKS:
        value = fn(rng)
        passed = value <= tol
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'}  {name}: {value:.3g} (tolerance {tol:g})")
    if end_to_end:
        ok &= _end_to_end(run_dir, out)
    out("selftest " + ("passed" if ok else "FAILED"))
    return ok


def _end_to_end(run_dir, out) -> bool:
    from .config import desk_scale
    from .pipeline import default_corpora, run_end_to_end

    train, test = default_corpora()
    with tempfile.TemporaryDirectory() as tmp:
        report = run_end_to_end(desk_scale(), train, test, run_dir or tmp)
    rnn, cnn = report["cnn_birnn"], report["cnn_only"]
    rows = [
        ("sample classification accuracy >= 0.80", rnn["sample_cls_accuracy"] >= 0.80, rnn["sample_cls_accuracy"]),
        ("identification rate >= 0.85", rnn["id_rate_all"] >= 0.85, rnn["id_rate_all"]),
        ("mean localization error <= 4 voxels", (rnn["loc_mean_vox"] or 1e9) <= 4.0, rnn["loc_mean_vox"]),
        ("Bi-RNN beats CNN-only identification", rnn["id_rate_all"] > cnn["id_rate_all"],
         f"{rnn['id_rate_all']:.3f} vs {cnn['id_rate_all']:.3f}"),
    ]
    for name, passed, value in rows:
        out(f"{'PASS' if passed else 'FAIL'}  end-to-end {name}: {value}")
    return all(p for _, p, _ in rows)
