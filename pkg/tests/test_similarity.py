import json
import math

import numpy as np
import pytest
from conftest import small_config

from oracles import frechet_2d, ssim_reference
from sttransfer.network import ImageSequence, init_parameters
from sttransfer.similarity import (
    FeatureVector,
    SimilarityReport,
    ZeroNormError,
    compare_datasets,
    cosine,
    dataset_similarity,
    fid,
    inception_features,
    normalized_std,
    pair_cosines,
    scenario_cosine_study,
    ssim,
)
from sttransfer.synthdata import generate_approach_scenarios, generate_dataset, get_domain


def test_cosine_examples():
    assert cosine([1, 0], [1, 0]) == 1.0
    assert cosine([1, 0], [-1, 0]) == -1.0
    assert cosine([1, 0], [0, 2]) == 0.0
    assert math.isclose(cosine([1, 1], [1, 0]), 1 / math.sqrt(2))
    assert cosine(FeatureVector(np.array([3.0, 4.0])), [6.0, 8.0]) == pytest.approx(1.0)


def test_cosine_bounds_and_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = rng.normal(size=(2, 17)) * rng.uniform(1e-3, 1e3)
        c = cosine(a, b)
        assert -1.0 <= c <= 1.0
        assert c == pytest.approx(cosine(b, a), abs=1e-15)
        assert cosine(a, a * 7.5) == pytest.approx(1.0)


def test_cosine_errors():
    with pytest.raises(ZeroNormError):
        cosine([0, 0], [1, 2])
    with pytest.raises(ValueError):
        cosine([1, 2, 3], [1, 2])
    with pytest.raises(ValueError):
        cosine([np.nan, 1], [1, 2])


def test_normalized_std():
    assert normalized_std([2.0, 2.0, 2.0]) == 0.0
    assert normalized_std([1.0, 3.0]) == pytest.approx(0.5)
    assert math.isnan(normalized_std([-1.0, 1.0]))


# --------------------------------------------------------------------------- SSIM


def test_ssim_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(3):
        x = rng.random((12, 14))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        assert ssim(x, y) == pytest.approx(ssim_reference(x, y), abs=1e-12)


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(2)
    x, y = rng.random((2, 24, 32))
    assert ssim(x, x) == pytest.approx(1.0)
    assert ssim(x, y) == pytest.approx(ssim(y, x))
    assert ssim(x, y) < 0.2


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


# --------------------------------------------------------------------------- FID


def test_fid_matches_2d_closed_form():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(400, 2)) @ np.array([[1.0, 0.3], [0.0, 0.5]])
    b = rng.normal(size=(300, 2)) @ np.array([[0.7, 0.0], [0.2, 1.2]]) + [0.5, -1.0]
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    ref = frechet_2d(a.mean(0), ca, b.mean(0), cb)
    assert fid(a, b, eps=0.0) == pytest.approx(ref, rel=1e-9)


def test_fid_identity_shift_and_floor():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(100, 5))
    assert fid(a, a) == pytest.approx(0.0, abs=1e-6)
    assert fid(a, a + 2.0) == pytest.approx(4.0 * 5, rel=1e-6)
    # rank-deficient covariance (fewer samples than dims) stays finite and non-negative
    small = rng.normal(size=(3, 20))
    assert fid(small, small) >= 0.0
    assert np.isfinite(fid(small, rng.normal(size=(4, 20))))


def test_fid_accepts_feature_vectors_and_validates():
    vs = [FeatureVector(np.array([1.0, 2.0])), FeatureVector(np.array([2.0, 1.0])), FeatureVector(np.array([0.0, 0.5]))]
    assert fid(vs, vs) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        fid(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(ValueError):
        fid(np.zeros((5, 3)), np.zeros((5, 4)))


# --------------------------------------------------------------------------- dataset level


@pytest.fixture(scope="module")
def model_and_data():
    cfg = small_config(frame_height=24, frame_width=32, sequence_length=3)
    params = init_parameters(cfg, seed=5)
    a = generate_dataset(get_domain("townA"), 6, 0.5, 3, seed=1)
    b = generate_dataset(get_domain("townB"), 6, 0.5, 3, seed=2)
    return params, a, b


def test_pair_cosines_seeded(model_and_data):
    params, a, b = model_and_data
    c1, s1 = pair_cosines(params, a, b, n_pairs=40, seed=7)
    c2, s2 = pair_cosines(params, a, b, n_pairs=40, seed=7)
    np.testing.assert_array_equal(c1, c2)
    assert s1 == s2 and len(c1) + s1 == 40
    c3, _ = pair_cosines(params, a, b, n_pairs=40, seed=8)
    assert not np.array_equal(c1, c3)


def test_same_frame_similarity_is_one(model_and_data):
    params, a, _ = model_and_data
    assert dataset_similarity(params, a, a, n_pairs=30, seed=1, same_frames=True) == pytest.approx(1.0)


def test_empty_dataset_rejected(model_and_data):
    params, a, _ = model_and_data
    with pytest.raises(ValueError):
        dataset_similarity(params, a, [], n_pairs=5)


def test_zero_features_are_skipped():
    # all-zero weights and biases give all-zero inception features
    params = init_parameters(small_config(), seed=0)
    for p in params.values():
        p.data[:] = 0
    ds = [ImageSequence(np.random.default_rng(0).random((2, 3, 8, 8)), label=0, seq_id="z")]
    cos, skipped = pair_cosines(params, ds, ds, n_pairs=4)
    assert skipped == 4 and cos.size == 0
    with pytest.raises(ZeroNormError), pytest.warns(UserWarning):
        dataset_similarity(params, ds, ds, n_pairs=4)


def test_inception_features_shape_and_padding():
    params6 = init_parameters(small_config(input_channels=6), seed=0)
    f = inception_features(params6, np.random.default_rng(0).random((5, 3, 8, 8)))
    assert f.shape == (5, params6.config.inception_feature_dim)


def test_compare_datasets_report_round_trip(model_and_data):
    params, a, b = model_and_data
    row = compare_datasets(params, a, b, n_pairs=20, seed=3, fid_frames=10)
    assert row.domain_a == "townA" and row.domain_b == "townB"
    assert -1 <= row.mean_cosine <= 1 and row.fid >= 0 and -1 <= row.ssim_mean <= 1
    rep = SimilarityReport(pairs=[row], model_checksum=params.checksum())
    d = json.loads(rep.to_json())
    assert d["schema"] == "sttransfer.similarity/1"
    assert d["pairs"][0]["n_pairs"] == 20
    assert "townA" in rep.to_table()
    again = compare_datasets(params, a, b, n_pairs=20, seed=3, fid_frames=10)
    assert again == row


def test_scenario_study_groups_by_level(model_and_data):
    params, _, _ = model_and_data
    refs, probes = generate_approach_scenarios(get_domain("townA"), 2, 3, seed=1)
    rows = scenario_cosine_study(params, refs, probes)
    assert [r.scenario for r in rows] == ["level1", "level2", "level3", "level4"]
    assert all(r.n == 2 and -1 <= r.mean_cosine <= 1 for r in rows)
    with pytest.raises(ValueError):
        scenario_cosine_study(params, refs[:1], probes)
