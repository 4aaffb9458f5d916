import logging
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import oracles
from nulite.data import (
    AnnotatedImage,
    AugmentConfig,
    align_classes,
    align_label,
    align_pannuke_predictions,
    augment,
    balanced_sampler,
    convert_pannuke,
    instance_types,
    load_pannuke,
    make_hv_target,
    make_targets,
    relabel_sequential,
    repair_consistency,
    resize_tile,
    sampling_weights,
    write_dataset,
)
from nulite.synthetic import disk_dataset, disk_sample


# ---------------------------------------------------------------------------
# HV targets


def test_strip_target():
    inst = np.zeros((3, 7), dtype=np.int32)
    inst[1, 1:6] = 1
    hv = make_hv_target(inst)
    assert np.allclose(hv[0, 1, 1:6], [-1, -0.5, 0, 0.5, 1])
    assert not hv[1].any()


def test_empty_target():
    hv = make_hv_target(np.zeros((5, 6), dtype=np.int32))
    assert hv.shape == (2, 5, 6) and not hv.any()


def test_two_squares_span_unit_range():
    inst = np.zeros((10, 10), dtype=np.int32)
    inst[1:4, 1:4] = 1
    inst[5:8, 6:9] = 2
    hv = make_hv_target(inst)
    assert np.allclose(hv, oracles.hv_target(inst), atol=1e-6)
    for k in (1, 2):
        for ch in (0, 1):
            v = hv[ch][inst == k]
            assert v.min() == -1 and v.max() == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_hv_matches_pixel_oracle(seed):
    rng = np.random.default_rng(seed)
    gt, _ = oracles.random_instance_pair(rng)
    hv = make_hv_target(gt)
    assert np.allclose(hv, oracles.hv_target(gt), atol=1e-6)
    assert not hv[:, gt == 0].any()
    assert np.abs(hv).max(initial=0) <= 1


def test_horizontal_flip_negates_and_mirrors():
    s = disk_sample("a", 48, 3, seed=4)
    hv = make_hv_target(s.instance_map)
    flipped = make_hv_target(np.ascontiguousarray(s.instance_map[:, ::-1]))
    assert np.allclose(flipped[0], -hv[0][:, ::-1], atol=1e-6)
    assert np.allclose(flipped[1], hv[1][:, ::-1], atol=1e-6)


def test_rot90_exchanges_channels():
    s = disk_sample("a", 48, 3, seed=5)
    hv = make_hv_target(s.instance_map)
    rot = make_hv_target(np.ascontiguousarray(np.rot90(s.instance_map)))
    # counter-clockwise rotation: new columns are old rows, new rows are reversed old columns
    assert np.allclose(rot[0], np.rot90(hv[1]), atol=1e-6)
    assert np.allclose(rot[1], -np.rot90(hv[0]), atol=1e-6)


# ---------------------------------------------------------------------------
# consistency helpers


def test_relabel_sequential_first_appearance():
    m = np.array([[0, 7, 7], [3, 0, 9]])
    assert relabel_sequential(m).tolist() == [[0, 1, 1], [2, 0, 3]]


def test_instance_types_majority_and_tie():
    inst = np.array([[1, 1, 1, 1, 2, 2]])
    types = np.array([[2, 2, 3, 0, 4, 1]])
    assert instance_types(inst, types) == {1: 2, 2: 1}


def test_repair_consistency(caplog):
    inst = np.array([[1, 1, 0]], dtype=np.int32)
    types = np.array([[2, 3, 5]], dtype=np.uint8)
    s = AnnotatedImage("x", np.zeros((1, 3, 3), np.uint8), inst, types)
    with caplog.at_level(logging.WARNING):
        fixed = repair_consistency(s, 6)
    assert fixed.type_map.tolist() == [[2, 2, 0]]
    with pytest.raises(ValueError):
        repair_consistency(replace(s, type_map=np.array([[7, 7, 0]], np.uint8)), 6)


# ---------------------------------------------------------------------------
# augmentation


def test_identity_augmentation_is_passthrough():
    s = disk_sample("a", 32, 2, seed=1)
    out, targets = augment(s, 0, AugmentConfig.identity())
    assert out is s
    assert np.array_equal(targets.hv_target, make_targets(s).hv_target)


def test_flip_only_augmentation():
    s = disk_sample("a", 48, 3, seed=2)
    cfg = replace(AugmentConfig.identity(), p_flip=1.0)
    for seed in range(6):
        out, t = augment(s, seed, cfg)
        if np.array_equal(out.rgb, s.rgb[:, ::-1]):
            assert np.allclose(t.hv_target[0], -make_hv_target(s.instance_map)[0][:, ::-1], atol=1e-6)
            return
    pytest.fail("no horizontal flip drawn in six seeds")


@pytest.mark.parametrize("seed", range(8))
def test_augmented_targets_are_consistent(seed):
    s = disk_sample("a", 64, 4, seed=seed)
    full = AugmentConfig(**{k: 1.0 for k in AugmentConfig.__dataclass_fields__ if k.startswith("p_")})
    out, t = augment(s, seed, full)
    assert out.rgb.shape == s.rgb.shape and out.rgb.dtype == np.uint8
    assert np.array_equal(out.type_map == 0, out.instance_map == 0)
    assert np.allclose(t.hv_target, make_hv_target(out.instance_map))
    assert np.array_equal(t.np_target, out.instance_map > 0)
    ids = np.unique(out.instance_map)
    assert np.array_equal(ids, np.arange(ids.size))


def test_augment_is_deterministic():
    s = disk_sample("a", 48, 3, seed=3)
    a, _ = augment(s, 123)
    b, _ = augment(s, 123)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.instance_map, b.instance_map)


# ---------------------------------------------------------------------------
# sampling


def _tissue_set(labels):
    return [AnnotatedImage(str(i), np.zeros((4, 4, 3), np.uint8), np.zeros((4, 4), np.int32),
                           np.zeros((4, 4), np.uint8), t) for i, t in enumerate(labels)]


def test_uniform_dataset_gives_uniform_stream():
    stream = balanced_sampler(_tissue_set([0] * 20), seed=0)
    draws = np.array([next(stream) for _ in range(10000)])
    counts = np.bincount(draws, minlength=20)
    assert stats.chisquare(counts).pvalue > 0.01


def test_imbalanced_tissues_are_balanced():
    stream = balanced_sampler(_tissue_set([0] * 90 + [1] * 10), seed=0)
    draws = np.array([next(stream) for _ in range(10000)])
    frac = float((draws >= 90).mean())
    assert abs(frac - 0.5) <= 0.05


def test_sampler_is_deterministic():
    ds = _tissue_set([0, 1, 1, 2])
    a, b = balanced_sampler(ds, 9), balanced_sampler(ds, 9)
    assert [next(a) for _ in range(100)] == [next(b) for _ in range(100)]


def test_rare_nuclei_raise_weight():
    w = sampling_weights([0, 0], [0, 10], 1.0, 0.1)
    assert w[1] == pytest.approx(2 * w[0])


def test_empty_sampler_rejected():
    with pytest.raises(ValueError):
        balanced_sampler([], 0)


# ---------------------------------------------------------------------------
# class alignment


def test_consep_alignment():
    assert align_label("CoNSeP", "healthy epithelial") == "Epithelial"
    assert align_label("CoNSeP", "fibroblast") == "Miscellaneous"
    assert align_label("CoNSeP", 6) == "Miscellaneous"
    assert align_classes("CoNSeP", np.array([[0, 3, 4, 5]])).tolist() == [[0, 3, 1, 4]]


def test_glysac_alignment():
    assert align_label("GlySAC", "Lymphocytes") == "Inflammatory"
    assert align_classes("GlySAC", np.array([[0, 1, 2, 3]])).tolist() == [[0, 3, 2, 1]]


def test_prediction_alignment():
    pred = np.arange(6)[None]
    assert align_pannuke_predictions("CoNSeP", pred).tolist() == [[0, 1, 2, 4, 4, 3]]
    assert align_pannuke_predictions("GlySAC", pred).tolist() == [[0, 1, 2, 3, 3, 1]]


def test_unknown_alignment():
    with pytest.raises(ValueError):
        align_label("MoNuSeg", 1)
    with pytest.raises(ValueError):
        align_label("CoNSeP", "platelet")


def test_resize_tile():
    s = disk_sample("a", 50, 2, seed=0)
    r = resize_tile(s, 64)
    assert r.rgb.shape == (64, 64, 3) and r.instance_map.shape == (64, 64)
    assert set(np.unique(r.instance_map)) == set(np.unique(s.instance_map))


# ---------------------------------------------------------------------------
# on-disk datasets


def test_fixture_round_trip(tmp_path):
    samples = disk_dataset(2, size=32, count=2, seed=1)
    write_dataset(tmp_path, samples)
    loaded = load_pannuke(tmp_path, fold=0)
    assert [s.id for s in loaded] == [s.id for s in samples]
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.instance_map, b.instance_map)
        areas = np.bincount(b.instance_map.ravel())[1:]
        assert areas.tolist() == np.bincount(a.instance_map.ravel())[1:].tolist()
        assert b.tissue_label == a.tissue_label < 19


def test_empty_directory_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert load_pannuke(tmp_path) == []
    assert caplog.records


def test_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pannuke(tmp_path / "nope")


def test_convert_pannuke(tmp_path):
    images = np.zeros((2, 16, 16, 3), dtype=np.float64)
    masks = np.zeros((2, 16, 16, 6), dtype=np.float64)
    masks[0, 2:6, 2:6, 0] = 11  # neoplastic
    masks[0, 8:12, 8:12, 3] = 4  # dead
    masks[1, 1:5, 9:13, 4] = 2  # epithelial
    np.save(tmp_path / "images.npy", images)
    np.save(tmp_path / "masks.npy", masks)
    np.save(tmp_path / "types.npy", np.array(["Breast", "Colon"]))
    n = convert_pannuke(tmp_path / "images.npy", tmp_path / "masks.npy", tmp_path / "types.npy",
                        tmp_path / "out", fold=2)
    assert n == 2
    loaded = load_pannuke(tmp_path / "out", fold=2)
    assert [s.tissue_label for s in loaded] == [3, 5]
    assert instance_types(loaded[0].instance_map, loaded[0].type_map) == {1: 1, 2: 4}
    assert instance_types(loaded[1].instance_map, loaded[1].type_map) == {1: 5}
