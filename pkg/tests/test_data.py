import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spinemark import data as D
from spinemark.losses import BACKGROUND


def nearest_oracle(origin, cents, labels, size=(32, 112, 96)):
    centre = [o + s / 2 for o, s in zip(origin, size)]
    best = None
    for c, lab in zip(cents, labels):
        if all(o <= v < o + s for v, o, s in zip(c, origin, size)):
            key = (sum((v - m) ** 2 for v, m in zip(c, centre)), lab)
            if best is None or key < best[0]:
                best = (key, lab, c)
    return best


# labels ---------------------------------------------------------------------

def test_label_codec_bijection():
    assert D.LABEL_NAMES[0] == "C1" and D.LABEL_NAMES[-1] == "S2"
    assert len(set(D.LABEL_NAMES)) == 26
    for k in range(26):
        assert D.encode_label(D.decode_label(k)) == k
    assert D.encode_label("background") == BACKGROUND == 26
    assert [D.encode_label(n) for n in ("C7", "T1", "T12", "L1", "L5", "S1")] == [6, 7, 18, 19, 23, 24]
    with pytest.raises(ValueError):
        D.encode_label("Q9")
    with pytest.raises(ValueError):
        D.decode_label(27)


def test_region_of():
    assert [D.region_of(k) for k in (0, 6, 7, 18, 19, 23, 24, 25)] == \
        ["cervical", "cervical", "thoracic", "thoracic", "lumbar", "lumbar", None, None]


def test_annotation_set_rejects_duplicates_and_unknown():
    with pytest.raises(ValueError, match="entry 1"):
        D.AnnotationSet([("T1", (0, 0, 0)), ("T1", (1, 1, 1))])
    with pytest.raises(ValueError, match="Q9"):
        D.AnnotationSet([("Q9", (0, 0, 0))])


def test_volume_validation():
    with pytest.raises(ValueError):
        D.Volume(np.zeros((2, 4, 4, 4)))
    with pytest.raises(ValueError):
        D.Volume(np.zeros((1, 4, 4, 4)), (1.0, 0.0, 1.0))


# file format ----------------------------------------------------------------

def test_save_load_roundtrip_is_bit_identical(tmp_path, rng):
    vol = D.Volume(rng.standard_normal((1, 7, 5, 3)).astype(np.float32), (2.0, 0.8, 0.8))
    ann = D.AnnotationSet([("L2", (3.5, 1.25, 0.1)), ("C1", (0.0, 0.0, 0.0))])
    path = tmp_path / "a.vvol"
    D.save_volume(path, vol, ann)
    header = json.loads(path.read_bytes().split(b"\n", 1)[0])
    assert header == {"dims": [7, 5, 3], "spacing_mm": [2.0, 0.8, 0.8], "dtype": "f32le"}
    back, back_ann = D.load_volume(path)
    assert back.intensities.tobytes() == vol.intensities.tobytes()
    assert back.spacing_mm == vol.spacing_mm
    assert back_ann.entries == ann.entries
    assert (tmp_path / "a.ann.json").exists()


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.vvol"
    D.save_volume(path, D.Volume(np.ones((1, 4, 4, 4))))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ValueError, match="payload"):
        D.load_volume(path)


def test_malformed_header_rejected(tmp_path):
    path = tmp_path / "m.vvol"
    path.write_bytes(b'{"dims": [2, 2]\n' + bytes(32))
    with pytest.raises(ValueError, match="header"):
        D.load_volume(path)


def test_unknown_label_in_sidecar_rejected(tmp_path):
    path = tmp_path / "q.vvol"
    D.save_volume(path, D.Volume(np.ones((1, 2, 2, 2))))
    (tmp_path / "q.ann.json").write_text(json.dumps({"annotations": [
        {"label": "T3", "centroid_mm": [0, 0, 0]}, {"label": "Q9", "centroid_mm": [1, 1, 1]}]}))
    with pytest.raises(ValueError, match=r"entry 1.*Q9"):
        D.load_volume(path)


# resampling -------------------------------------------------------------------

def test_resample_at_target_only_pads(rng):
    vol = D.Volume(rng.standard_normal((1, 40, 120, 100)), D.TARGET_SPACING)
    out, _ = D.resample(vol)
    assert out.dims == (48, 128, 112)
    assert np.array_equal(out.intensities[:, :40, :120, :100], vol.intensities)
    assert not np.any(out.intensities[:, 40:]) and not np.any(out.intensities[:, :, 120:])


def test_resample_doubles_longitudinal_axis():
    arr = np.zeros((1, 20, 112, 96), np.float32)
    arr[0, 7, 50, 40] = 1.0
    vol = D.Volume(arr, (2.5, 1.0, 1.0))
    ann = D.AnnotationSet([("T5", (7 * 2.5, 50.0, 40.0))])
    out, out_ann = D.resample(vol, ann)
    assert out.spacing_mm == (1.25, 1.0, 1.0)
    assert out.dims[0] == 48  # 2 x 20 = 40 voxels, padded up to the 16-voxel grid
    assert not np.any(out.intensities[0, 40:])
    peak = np.unravel_index(np.argmax(out.intensities[0]), out.intensities.shape[1:])
    assert peak == (14, 50, 40)
    z = out_ann.voxels(out.spacing_mm)[0, 0]
    assert z == 2 * ann.voxels(vol.spacing_mm)[0, 0] == 14.0


def test_resample_constant_volume():
    vol = D.Volume(np.full((1, 20, 50, 40), 0.75, np.float32), (2.0, 1.5, 0.8))
    out, _ = D.resample(vol)
    d, h, w = (int(round(n * s / t)) for n, s, t in zip(vol.dims, vol.spacing_mm, D.TARGET_SPACING))
    np.testing.assert_allclose(out.intensities[0, :d, :h, :w], 0.75, atol=1e-6)


def test_resample_preserves_total_intensity():
    vol, _ = D.synth_phantom(D.PhantomSpec(seed=3, vertebra_count=4, noise=0.0))
    coarse = D.Volume(vol.intensities[:, ::2], (2.5, 1.0, 1.0))
    out, _ = D.resample(coarse)
    before = coarse.intensities.sum(dtype=np.float64) * np.prod(coarse.spacing_mm)
    after = out.intensities.sum(dtype=np.float64) * np.prod(out.spacing_mm)
    assert abs(after - before) / before < 0.02


# crops ---------------------------------------------------------------------------

def vol_with(entries, dims=(64, 128, 112)):
    vol = D.Volume(np.zeros((1, *dims), np.float32))
    return vol, D.AnnotationSet.from_voxels([D.encode_label(n) for n, _ in entries],
                                            [v for _, v in entries], vol.spacing_mm)


def test_crop_without_centroid_is_background():
    vol, ann = vol_with([("T1", (50.0, 60.0, 50.0))])
    assert D.crop_sample(vol, ann, (0, 0, 0)).target.label == BACKGROUND


def test_crop_offset_is_relative_to_origin():
    vol, ann = vol_with([("L1", (15.0, 16.0, 17.0))])
    crop = D.crop_sample(vol, ann, (10, 10, 10))
    assert crop.target.label == 19
    np.testing.assert_allclose(crop.target.centroid_offset, (5.0, 6.0, 7.0), atol=1e-12)
    assert crop.tensor.shape == (1, 32, 112, 96)


def test_crop_picks_centroid_nearest_the_centre():
    vol, ann = vol_with([("T3", (2.0, 56.0, 48.0)), ("T4", (20.0, 56.0, 48.0))])
    assert D.crop_sample(vol, ann, (0, 0, 0)).target.label == 10
    tie, tie_ann = vol_with([("T4", (6.0, 56.0, 48.0)), ("T3", (26.0, 56.0, 48.0))])
    assert D.crop_sample(tie, tie_ann, (0, 0, 0)).target.label == 9


@given(st.integers(0, 2**31 - 1))
def test_crop_label_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    labels = rng.choice(26, n, replace=False)
    cents = rng.uniform(0, [64, 128, 112], (n, 3))
    vol = D.Volume(np.zeros((1, 64, 128, 112), np.float32))
    ann = D.AnnotationSet.from_voxels(labels, cents, vol.spacing_mm)
    origin = tuple(int(rng.integers(0, h + 1)) for h in (32, 16, 16))
    target = D.crop_sample(vol, ann, origin).target
    oracle = nearest_oracle(origin, ann.voxels(vol.spacing_mm), labels)
    if oracle is None:
        assert target.label == BACKGROUND
    else:
        assert target.label == oracle[1]
        back = np.asarray(target.centroid_offset) + np.asarray(origin)
        np.testing.assert_allclose(back, oracle[2], rtol=0, atol=1e-12)


def test_crop_out_of_bounds_rejected():
    vol, ann = vol_with([])
    with pytest.raises(ValueError, match="does not fit"):
        D.crop_sample(vol, ann, (40, 0, 0))


# sample generation ----------------------------------------------------------------

def test_per_vertebra_zero_gives_only_negatives():
    vol, ann = D.synth_phantom(D.PhantomSpec(seed=1, vertebra_count=5))
    samples = D.generate_cnn_samples([(vol, ann)], 0, seed=0, negatives=7)
    assert len(samples) == 7
    assert all(s.target.label == BACKGROUND for s in samples)


def test_single_vertebra_positives_share_label():
    vol, ann = D.synth_phantom(D.PhantomSpec(seed=2, vertebra_count=1, first_label=12))
    samples = D.generate_cnn_samples([(vol, ann)], 40, seed=0)
    pos = [s for s in samples if s.target.positive]
    assert len(pos) == 40 and len(samples) == 80
    assert {s.target.label for s in pos} == {12}


def test_positive_offsets_reproduce_centroids():
    vol, ann = D.synth_phantom(D.PhantomSpec(seed=4, vertebra_count=6))
    cents = {lab: c for lab, c in zip(ann.labels, ann.voxels(vol.spacing_mm))}
    for s in D.generate_cnn_samples([(vol, ann)], 5, seed=1):
        if s.target.positive:
            back = np.asarray(s.target.centroid_offset) + np.asarray(s.origin_voxel)
            np.testing.assert_allclose(back, cents[s.target.label], rtol=0, atol=1e-12)
            assert all(0 <= o < n for o, n in zip(s.target.centroid_offset, D.SAMPLE_SHAPE))


def test_label_histogram_is_uniform():
    vols = [D.synth_phantom(D.PhantomSpec(seed=i, vertebra_count=13, first_label=13 * (i % 2), noise=0.0))
            for i in range(4)]
    samples = D.generate_cnn_samples(vols, 20, seed=0)
    counts = Counter(s.target.label for s in samples if s.target.positive)
    assert set(counts) == set(range(26))
    mean = np.mean(list(counts.values()))
    assert all(abs(c - mean) <= 0.1 * mean for c in counts.values())


def test_sample_generation_is_reproducible():
    pair = D.synth_phantom(D.PhantomSpec(seed=5, vertebra_count=4))
    a = D.generate_cnn_samples([pair], 3, seed=9)
    b = D.generate_cnn_samples([pair], 3, seed=9)
    assert [(s.origin_voxel, s.target) for s in a] == [(s.origin_voxel, s.target) for s in b]


def test_boundary_vertebra_is_skipped_with_record():
    vol = D.Volume(np.zeros((1, 32, 112, 96), np.float32))
    ann = D.AnnotationSet.from_voxels([3], [[10.0, 200.0, 40.0]], vol.spacing_mm)
    skipped = []
    samples = D.generate_cnn_samples([(vol, ann)], 4, seed=0, negatives=0, skipped=skipped)
    assert samples == [] and skipped == [(0, "C4")]


def test_rnn_subimages():
    vol, ann = D.synth_phantom(D.PhantomSpec(seed=6, vertebra_count=8))
    subs = D.generate_rnn_subimages([(vol, ann)], 30, seed=0)
    assert len(subs) == 240
    boxes = D.rnn_subimage_boxes([(vol, ann)], 30, seed=0)
    cents = ann.voxels(vol.spacing_mm)
    for (sub, sub_ann), (_, origin, size) in zip(subs, boxes):
        assert all(n <= m and n % 16 == 0 for n, m in zip(sub.dims, (96, 256, 256)))
        assert all(o % 16 == 0 for o in origin)
        inside = np.all((cents >= origin) & (cents < origin + size), axis=1)
        assert sorted(sub_ann.labels.tolist()) == sorted(ann.labels[inside].tolist())
        np.testing.assert_allclose(sub_ann.voxels(sub.spacing_mm) + origin, cents[inside], atol=1e-9)


# phantom -------------------------------------------------------------------------

def test_phantom_is_deterministic():
    a = D.synth_phantom(D.PhantomSpec(seed=11, vertebra_count=6, level_jitter=0.5))
    b = D.synth_phantom(D.PhantomSpec(seed=11, vertebra_count=6, level_jitter=0.5))
    assert a[0].intensities.tobytes() == b[0].intensities.tobytes()
    assert a[1].entries == b[1].entries


def test_phantom_has_consecutive_labels():
    _, ann = D.synth_phantom(D.PhantomSpec(seed=0, vertebra_count=5, first_label=3))
    assert ann.labels.tolist() == [3, 4, 5, 6, 7]


def test_straight_noiseless_phantom_is_collinear():
    vol, ann = D.synth_phantom(D.PhantomSpec(seed=0, vertebra_count=6, curvature=0.0, noise=0.0))
    c = ann.voxels(vol.spacing_mm)
    assert np.abs(c[:, 1:] - c[0, 1:]).max() < 1e-9


def test_phantom_rejects_tight_spacing():
    with pytest.raises(ValueError, match="24"):
        D.synth_phantom(D.PhantomSpec(min_gap=20.0))


@given(seed=st.integers(0, 10**6), count=st.integers(4, 12), gap=st.floats(24, 40))
def test_phantom_spacing_and_grid(seed, count, gap):
    first = seed % (27 - count)
    spec = D.PhantomSpec(seed=seed, vertebra_count=count, first_label=first, min_gap=gap, noise=0.0)
    vol, ann = D.synth_phantom(spec)
    z = ann.voxels(vol.spacing_mm)[:, 0]
    assert np.all(np.diff(z) >= 24)
    assert all(n % 16 == 0 for n in vol.dims)
    assert np.all((z >= 0) & (z < vol.dims[0]))


def test_tissue_texture_encodes_level():
    spec = D.PhantomSpec(seed=5, vertebra_count=6, first_label=9, noise=0.0, curvature=0.0,
                       tissue=1.0, tissue_ramp=1.0, tissue_code=0.3, code_period=5)
    vol, ann = D.synth_phantom(spec)
    v = vol.intensities[0]
    zs = ann.voxels(vol.spacing_mm)[:, 0]
    for zc in zs:
        zi = int(round(zc))
        level = np.interp(zi, zs, ann.labels)  # levels run linearly between centroids
        corner = v[zi, :8, :8]
        bright = 1.0 + 0.3 * (((level + 0.5) / 5) % 1.0)
        dark = level / 25.0
        assert np.all(np.isclose(corner, bright, atol=1e-9) | np.isclose(corner, dark, atol=1e-9))
        assert 0.3 < np.mean(np.isclose(corner, bright, atol=1e-9)) < 0.7


def test_tissue_texture_off_by_default():
    vol, _ = D.synth_phantom(D.PhantomSpec(seed=5, noise=0.0))
    assert np.abs(vol.intensities[0, :, :8, :8]).max() < 1e-9
