import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cloudseg.errors import AssemblyError, ConfigurationError, DegenerateDayError, DimensionError
from cloudseg.lidar import DayRecord, SyntheticSceneSpec, generate_corpus, generate_day
from cloudseg.preprocessing import (
    DESK, FULL, DatasetPlan, ScaleConfig, SplitSpec, assemble_datasets, plan_datasets,
    preprocess_backscatter, preprocess_day, preprocess_ldr, quarter_and_flip, scale_config,
)


def _full_day(cloud_cols=None):
    h, w = FULL.h_day, FULL.w_day
    clean = np.zeros((h, w), np.uint8)
    if cloud_cols is not None:
        clean[300:320, cloud_cols[0]:cloud_cols[1]] = 1
    rng = np.random.default_rng(0)
    return DayRecord(rng.random((h, w), dtype=np.float32) + 0.1, rng.random((h, w), dtype=np.float32),
                     clean_mask=clean, day_id="big")


# scale configs

def test_full_scale_config():
    assert (FULL.h0, FULL.wq, FULL.offsets, FULL.c0) == (640, 800, (0, 680, 1400, 2080), 16)
    assert FULL.flatten_kernel == (20, 25)
    assert FULL.boundary_kernel == 28


def test_desk_scale_config():
    assert (DESK.h_day, DESK.w_day, DESK.h0, DESK.wq, DESK.c0) == (67, 344, 64, 96, 4)
    assert DESK.flatten_kernel == (2, 3)
    DESK.validate()
    assert ScaleConfig.from_dict(DESK.as_dict()) == DESK


def test_scale_config_validation():
    with pytest.raises(ConfigurationError):
        ScaleConfig("x", 67, 344, 4, 96, (0, 81, 166, 248), 4).validate()
    with pytest.raises(ConfigurationError):
        ScaleConfig("x", 67, 344, 3, 96, (0, 81, 166, 249), 4).validate()
    with pytest.raises(ConfigurationError):
        scale_config("huge")


def test_full_windows_cover_day_and_overlap():
    covered = np.zeros(FULL.w_day, bool)
    for o in FULL.offsets:
        covered[o:o + FULL.wq] = True
    assert covered.all()
    for a, b in zip(FULL.offsets, FULL.offsets[1:]):
        assert b < a + FULL.wq


def test_desk_windows_cover_day_with_similar_overlap():
    covered = np.zeros(DESK.w_day, bool)
    for o in DESK.offsets:
        covered[o:o + DESK.wq] = True
    assert covered.all()
    overlaps = [(a + DESK.wq - b) / DESK.wq for a, b in zip(DESK.offsets, DESK.offsets[1:])]
    assert all(0.1 <= r <= 0.2 for r in overlaps)


# value cleaning

def test_backscatter_constant_day_is_zero():
    np.testing.assert_array_equal(preprocess_backscatter(np.full((3, 4), math.e)), 0.0)


def test_backscatter_two_point_normalization():
    out = preprocess_backscatter(np.array([[math.e, math.e ** 3]]))
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-12)


def test_backscatter_invalid_values_take_daily_minimum():
    raw = np.array([[math.e, math.e ** 2, math.e ** 3, np.nan, -1.0, 0.0, np.inf]])
    out = preprocess_backscatter(raw)
    logs = np.array([1, 2, 3, 1, 1, 1, 1], float)
    np.testing.assert_allclose(out[0], (logs - logs.mean()) / logs.std(), atol=1e-12)


def test_backscatter_no_valid_values():
    with pytest.raises(DegenerateDayError):
        preprocess_backscatter(np.array([[np.nan, -2.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_backscatter_standardized(seed):
    rng = np.random.default_rng(seed)
    raw = rng.lognormal(0, 2, (67, 344))
    raw[rng.random(raw.shape) < 0.05] = np.nan
    out = preprocess_backscatter(raw)
    assert np.isfinite(out).all()
    assert abs(out.mean()) <= 1e-6
    assert abs(out.std() - 1.0) <= 1e-6


def test_ldr_rule():
    np.testing.assert_array_equal(preprocess_ldr(np.array([-0.5, 0.3, 1.7, np.nan])), [0, 0.3, 1, 0])
    np.testing.assert_array_equal(preprocess_ldr(np.zeros((2, 2))), 0.0)


def test_ldr_range():
    out = preprocess_ldr(np.random.default_rng(0).normal(0.5, 2.0, (50, 50)))
    assert out.min() >= 0 and out.max() <= 1


def test_day_image_channels():
    img = preprocess_day(generate_day(SyntheticSceneSpec(seed=4)))
    assert img.shape == (67, 344, 2)
    assert img[..., 1].min() >= 0 and img[..., 1].max() <= 1


# quartering

def test_full_day_gives_eight_samples():
    day = _full_day()
    samples = quarter_and_flip(day, FULL)
    assert len(samples) == 8
    img = preprocess_day(day)
    for i, o in enumerate(FULL.offsets):
        s = samples[2 * i]
        assert s.image.shape == (667, 800, 2)
        assert s.source == ("big", i, False)
        np.testing.assert_array_equal(s.image, img[:, o:o + 800].astype(np.float32))
    np.testing.assert_array_equal(samples[0].image, img[:, 0:800].astype(np.float32))


def test_overlap_cloud_flags():
    flags = [s.has_cloud for s in quarter_and_flip(_full_day((700, 751)), FULL)[::2]]
    assert flags == [1, 1, 0, 0]


def test_flip_is_column_reversal_and_involution():
    day = generate_day(SyntheticSceneSpec(seed=5))
    samples = quarter_and_flip(day, DESK)
    for plain, flipped in zip(samples[::2], samples[1::2]):
        assert flipped.image.tobytes() == np.ascontiguousarray(plain.image[:, ::-1]).tobytes()
        np.testing.assert_array_equal(flipped.mask, plain.mask[:, ::-1])
        back = flipped.flipped()
        assert back.image.tobytes() == plain.image.tobytes()
        assert back.mask.tobytes() == plain.mask.tobytes()
        assert back.source == plain.source


def test_one_hot_mask_sums_to_one():
    s = quarter_and_flip(generate_day(SyntheticSceneSpec(seed=6)), DESK)[0]
    oh = s.one_hot()
    assert oh.shape == (67, 96, 2)
    np.testing.assert_array_equal(oh.sum(axis=-1), 1)
    np.testing.assert_array_equal(oh[..., 1], s.mask)


def test_mask_kind_selects_label_source():
    day = generate_day(SyntheticSceneSpec(seed=8))
    clean = quarter_and_flip(day, DESK, "clean")
    noisy = quarter_and_flip(day, DESK, "noisy")
    np.testing.assert_array_equal(noisy[0].mask, day.noisy_mask[:, :96])
    np.testing.assert_array_equal(clean[0].mask, day.clean_mask[:, :96])
    with pytest.raises(ConfigurationError):
        quarter_and_flip(day, DESK, "clean_mask")


def test_quarter_dimension_mismatch():
    with pytest.raises(DimensionError):
        quarter_and_flip(generate_day(SyntheticSceneSpec(seed=0)), FULL)


def test_n_days_give_8n_samples():
    corpus = generate_corpus(6, 9)
    assert sum(len(quarter_and_flip(d, DESK)) for d in corpus) == 48


# dataset assembly

def test_desk_default_bundle():
    corpus = generate_corpus(80, 0)
    bundle = assemble_datasets(corpus, DESK, SplitSpec.desk_default(80, seed=0))
    assert bundle.sizes() == (160, 200, 80, 40)
    bundle.check_disjoint()
    cls = bundle.classification
    assert sum(s.has_cloud for s in cls) == 80
    keys = {}
    for name, samples in bundle.collections().items():
        for s in samples:
            assert keys.setdefault(s.source[:2], name) == name
    noisy_days = {s.source[0] for s in bundle.noisy}
    hand_days = {s.source[0] for s in bundle.hand_labeled}
    assert not noisy_days & hand_days
    assert set(bundle.day_images) == hand_days | {s.source[0] for s in bundle.holdout}


def test_classification_labels_follow_noisy_mask():
    corpus = generate_corpus(80, 0)
    bundle = assemble_datasets(corpus, DESK, SplitSpec.desk_default(80))
    by_id = {d.day_id: d for d in corpus}
    for s in bundle.classification:
        day_id, q, _ = s.source
        o = DESK.offsets[q]
        assert s.has_cloud == int(by_id[day_id].noisy_mask[:, o:o + DESK.wq].any())
    for s in bundle.hand_labeled:
        day_id, q, f = s.source
        o = DESK.offsets[q]
        win = by_id[day_id].clean_mask[:, o:o + DESK.wq]
        np.testing.assert_array_equal(s.mask, win[:, ::-1] if f else win)


def test_manifest_lines():
    corpus = generate_corpus(80, 0)
    bundle = assemble_datasets(corpus, DESK, SplitSpec.desk_default(80))
    lines = bundle.manifest_lines()
    assert len(lines) == 480
    day_id, q, f, name, flag = lines[0].split(",")
    assert name == "classification" and f in ("0", "1") and flag in ("0", "1")


def test_all_clear_corpus_cannot_balance():
    spec = SyntheticSceneSpec(clouds=[], aerosol_probability=0.0)
    corpus = generate_corpus(16, 0, spec)
    with pytest.raises(AssemblyError, match="cloudy"):
        assemble_datasets(corpus, DESK, SplitSpec.scaled(16, (16, 8, 8, 8)))


def test_scaled_split_layout():
    split = SplitSpec.scaled(80)
    assert split.noisy.days == tuple(range(0, 25))
    assert split.classification.days == tuple(range(25, 65))
    assert split.hand_labeled.days == tuple(range(65, 75))
    assert split.holdout.days == tuple(range(75, 80))
    with pytest.raises(AssemblyError):
        SplitSpec.desk_default(40)
    with pytest.raises(AssemblyError):
        SplitSpec.scaled(8)


def test_overlapping_day_ranges_rejected():
    flags = [{"clean": [1] * 4, "noisy": [1] * 4}] * 4
    split = SplitSpec(
        classification=DatasetPlan((0,), 2, "noisy"),
        noisy=DatasetPlan((1,), 2, "noisy"),
        hand_labeled=DatasetPlan((1, 2), 2, "clean"),
        holdout=DatasetPlan((3,), 2, "clean"),
    )
    with pytest.raises(AssemblyError):
        plan_datasets(flags, split)


def test_paper_sized_counts_from_flag_stubs():
    # flag stubs stand in for a full-scale season; assembly only needs quarter flags
    n_noisy, n_cls, n_hand, n_hold = 525, 240, 54, 28
    flags = [{"clean": [1, 1, 1, 0], "noisy": [1, 1, 0, 0]} for _ in range(n_noisy + n_cls + n_hand + n_hold)]
    a, b, c = n_noisy, n_noisy + n_cls, n_noisy + n_cls + n_hand
    split = SplitSpec(
        classification=DatasetPlan(tuple(range(a, b)), 1780, "noisy", cloudy=890, clear=890),
        noisy=DatasetPlan(tuple(range(a)), 4200, "noisy"),
        hand_labeled=DatasetPlan(tuple(range(b, c)), 432, "clean"),
        holdout=DatasetPlan(tuple(range(c, len(flags))), 224, "clean"),
    )
    chosen = plan_datasets(flags, split)
    sizes = tuple(len(chosen[k]) for k in ("classification", "noisy", "hand_labeled", "holdout"))
    assert sizes == (1780, 4200, 432, 224)
    assert sum(r.has_cloud for r in chosen["classification"]) == 890
    keys = [(r.day, r.quarter, r.flipped) for refs in chosen.values() for r in refs]
    assert len(keys) == len(set(keys))
    assert all(r.day < a for r in chosen["noisy"])

    flags[a:b] = [{"clean": [0] * 4, "noisy": [0] * 4}] * n_cls
    with pytest.raises(AssemblyError, match="shortfall 890"):
        plan_datasets(flags, split)
