import warnings

import numpy as np
import pytest
from conftest import small_config

from sttransfer import tensor as T
from sttransfer.network import ConfigError, HiddenState, forward, forward_batch, init_parameters
from sttransfer.salient import compute_maps
from sttransfer.synthdata import generate_dataset, generate_steering_dataset, get_domain
from sttransfer.transfer import (
    Adam,
    AblationFlags,
    TrainConfig,
    assemble_input,
    evaluate,
    harvest_bundle,
    harvest_hidden,
    init_phase2,
    load_bundle,
    phase2_config,
    save_bundle,
    train_phase1,
    train_phase2,
)

CFG = small_config()


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(get_domain("townA", 8, 8), 12, 0.5, 2, seed=1)


@pytest.fixture(scope="module")
def tiny_b():
    return generate_dataset(get_domain("townB", 8, 8), 10, 0.5, 2, seed=2)


@pytest.fixture(scope="module")
def phase1(tiny):
    T.set_precision("float64")
    return train_phase1(tiny, CFG, TrainConfig(epochs=2, batch_size=4, seed=5))


def test_zero_epochs_leaves_init(tiny):
    params, h0, hist = train_phase1(tiny, CFG, TrainConfig(epochs=0, seed=5))
    assert len(hist) == 0
    assert params.checksum() == init_parameters(CFG, 5).checksum()


def test_training_is_deterministic(tiny, phase1):
    params, h0, hist = train_phase1(tiny, CFG, TrainConfig(epochs=2, batch_size=4, seed=5))
    assert params.checksum() == phase1[0].checksum()
    assert hist.to_dict(with_time=False) == phase1[2].to_dict(with_time=False)
    other, _, _ = train_phase1(tiny, CFG, TrainConfig(epochs=2, batch_size=4, seed=6))
    assert other.checksum() != phase1[0].checksum()


def test_history_train_metric_equals_evaluate(tiny, phase1):
    params, h0, hist = phase1
    assert hist.metric == "accuracy" and len(hist) == 2
    assert evaluate(params, h0, tiny).value == hist.records[-1].train_metric


def test_adam_matches_hand_computed_first_step():
    p = init_parameters(CFG, 0)
    for t in p.values():
        t.grad = np.full_like(t.data, 0.5)
    before = p["fc3.bias"].data.copy()
    Adam(p, lr=0.01).step(p)
    # the first bias-corrected Adam step is lr * g / (|g| + eps), i.e. about lr per coordinate
    np.testing.assert_allclose(before - p["fc3.bias"].data, 0.01 * 0.5 / (0.5 + 1e-8))


def test_harvest_identities(tiny, phase1):
    params = phase1[0]
    one = harvest_hidden(params, tiny[:1])
    f = forward(params, tiny[0])
    assert one.equals(HiddenState([(h.astype(np.float64), c) for h, c in f.hidden.layers]))
    doubled = harvest_hidden(params, [tiny[0], tiny[1], tiny[0], tiny[1]])
    pair = harvest_hidden(params, tiny[:2])
    for (a, b), (c, d) in zip(doubled.layers, pair.layers):
        np.testing.assert_allclose(a, c, atol=1e-15)
        np.testing.assert_allclose(b, d, atol=1e-15)
    x = assemble_input(tiny, None, 3)
    mean = forward_batch(params, x).hidden[-1][0].mean(axis=0)
    np.testing.assert_allclose(harvest_hidden(params, tiny).top_h, mean, atol=1e-14)
    with pytest.raises(ValueError):
        harvest_hidden(params, [])


def test_bundle_round_trip(tmp_path, tiny, phase1):
    b = harvest_bundle(phase1[0], tiny, AblationFlags(True, False, True))
    save_bundle(tmp_path / "b.stx", b)
    back = load_bundle(tmp_path / "b.stx")
    assert back.source_config == b.source_config and back.flags == b.flags
    assert back.source_config_digest == b.source_config_digest
    assert back.harvested_hidden.equals(b.harvested_hidden)
    for k, v in {**b.cnn_and_inception_weights, **b.lstm_weights}.items():
        got = back.cnn_and_inception_weights.get(k, back.lstm_weights.get(k))
        assert np.array_equal(got, v)
    assert set(b.cnn_and_inception_weights).isdisjoint(b.lstm_weights)


@pytest.mark.parametrize("flags", [AblationFlags(), AblationFlags.none(), AblationFlags(True, False, False),
                                   AblationFlags(False, True, True)])
def test_init_phase2_respects_flags(tiny, phase1, flags):
    params, h0, _ = phase1
    bundle = harvest_bundle(params, tiny)
    p2, hid = init_phase2(bundle, CFG, seed=9, flags=flags)
    fresh = init_parameters(CFG, 9)
    for name in p2.names():
        src = params[name].data if name in bundle.cnn_and_inception_weights else None
        take = flags.transfer_cnn if src is not None else flags.transfer_lstm_weights
        expected = params[name].data if take else fresh[name].data
        assert np.array_equal(p2[name].data, expected), name
    if flags.transfer_hidden:
        assert hid.equals(bundle.harvested_hidden)
    else:
        assert not hid.equals(bundle.harvested_hidden)


def test_three_to_six_channel_start_is_equivalent(tiny, phase1):
    params, _, _ = phase1
    bundle = harvest_bundle(params, tiny)
    p6, hid = init_phase2(bundle, phase2_config(CFG, augmented=True), seed=1)
    assert p6.config.input_channels == 6
    assert not p6["conv1.weight"].data[:, 3:].any()
    x3 = assemble_input(tiny, None, 3)
    x6 = np.concatenate([x3, np.random.default_rng(0).random(x3.shape)], axis=2)
    np.testing.assert_allclose(forward_batch(p6, x6, hid).output, forward_batch(params, x3, hid).output, atol=1e-12)


def test_six_channel_without_cnn_transfer_is_random(tiny, phase1):
    bundle = harvest_bundle(phase1[0], tiny)
    p6, _ = init_phase2(bundle, phase2_config(CFG, True), seed=1, flags=AblationFlags(False, True, True))
    assert p6["conv1.weight"].data[:, 3:].any()


def test_init_phase2_errors(tiny, phase1):
    bundle = harvest_bundle(phase1[0], tiny)
    with pytest.raises(ConfigError):
        init_phase2(bundle, small_config(lstm_hidden=5), seed=0)
    bundle6 = harvest_bundle(init_parameters(CFG.with_channels(6), 0), tiny)
    with pytest.raises(ConfigError):
        init_phase2(bundle6, CFG, seed=0)
    bundle.source_config_digest = "stale"
    with pytest.warns(UserWarning, match="drift"):
        init_phase2(bundle, CFG, seed=0)


def test_phase2_without_transfer_or_maps_equals_phase1(tiny, tiny_b, phase1):
    # all flags off and no maps: Phase 2 is exactly a from-scratch run on the target data
    bundle = harvest_bundle(phase1[0], tiny)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=7, salient_subset_ratio=0.0)
    p2, h2 = init_phase2(bundle, phase2_config(CFG, augmented=False), seed=7, flags=AblationFlags.none())
    p2, hist2 = train_phase2(p2, h2, tiny_b, None, cfg)
    p1, _, hist1 = train_phase1(tiny_b, CFG, cfg)
    assert hist2.to_dict(with_time=False) == hist1.to_dict(with_time=False)
    assert p2.checksum() == p1.checksum()


def test_phase2_with_maps_trains(tiny, tiny_b, phase1):
    params, h0, _ = phase1
    maps = compute_maps(params, tiny_b[:3], h0)
    p2, hid = init_phase2(harvest_bundle(params, tiny), phase2_config(CFG, True), seed=1)
    x = assemble_input(tiny_b, maps, 6)
    assert x[:3, :, 3:].any() and not x[3:, :, 3:].any()
    p2, hist = train_phase2(p2, hid, tiny_b, maps, TrainConfig(epochs=1, batch_size=5), val=tiny_b, val_maps=maps)
    assert len(hist) == 1 and hist.records[0].val_metric is not None


def test_assemble_input_errors(tiny):
    with pytest.raises(ConfigError):
        assemble_input(tiny, None, 5)


def test_label_and_config_errors(tiny):
    steer = generate_steering_dataset(get_domain("townA", 8, 8), 4, 2, seed=0)
    with pytest.raises(ConfigError):
        train_phase1(steer, CFG, TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        train_phase1(tiny, small_config(head="regression"), TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        train_phase1(tiny, CFG, TrainConfig(epochs=1, loss="mse"))
    with pytest.raises(ValueError):
        train_phase1([], CFG, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        evaluate(init_parameters(CFG, 0), HiddenState.zeros(CFG), [])


def test_regression_training_reduces_error():
    steer = generate_steering_dataset(get_domain("townA", 8, 8), 16, 2, seed=0)
    cfg = small_config(head="regression")
    params, h0, hist = train_phase1(steer, cfg, TrainConfig(epochs=6, batch_size=4, learning_rate=3e-3))
    assert hist.metric == "mae_deg"
    assert hist.records[-1].train_metric < hist.records[0].train_metric


def test_sgd_and_early_stop(tiny):
    _, _, hist = train_phase1(tiny, CFG, TrainConfig(epochs=3, optimizer="sgd", learning_rate=0.01))
    assert len(hist) == 3
    _, _, hist = train_phase1(tiny, CFG, TrainConfig(epochs=5, stop_at_accuracy=0.0))
    assert len(hist) == 1


def test_toy_training_reaches_95_percent(trained_toy, toy_data):
    params, h0, hist = trained_toy
    assert hist.records[-1].train_metric >= 0.95
    assert hist.epochs_to(0.95) is not None
    with T.precision("float32"):
        assert evaluate(params, h0, toy_data).value == hist.records[-1].train_metric


def test_no_warnings_on_clean_phase2(tiny, phase1):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        init_phase2(harvest_bundle(phase1[0], tiny), CFG, seed=0)
