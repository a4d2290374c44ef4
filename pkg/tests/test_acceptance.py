"""End-to-end acceptance criteria.

Each test is one criterion; the terminal summary prints one PASS/FAIL line per
criterion with the measured values (see ``conftest.pytest_terminal_summary``).
Criteria 5 to 9 run the full-scale experiments and dominate the suite's runtime.
"""
import json
import os
import time

import numpy as np
import pytest
from conftest import as64

from oracles import canny_reference, rel_error, stable_difference
from sttransfer import tensor as T
from sttransfer.cli import main
from sttransfer.experiments import ExperimentSetup, Workbench, default_workers, run_experiment
from sttransfer.network import NetworkConfig, forward_batch, init_hidden_random, init_parameters, trace
from sttransfer.salient import canny
from sttransfer.similarity import cosine, fid, ssim
from sttransfer.transfer import assemble_input, harvest_bundle, init_phase2, phase2_config

CORES = os.cpu_count() or 1
REFERENCE_CORES = 8


def _runtime_note(elapsed: float, limit: float, cores_ref: int | None = None) -> str:
    """Runtime limits quoted for a reference machine are only asserted on a machine that size."""
    if cores_ref is None or CORES >= cores_ref:
        assert elapsed < limit, f"took {elapsed:.1f}s, limit {limit:.0f}s"
        return f"{elapsed:.1f}s < {limit:.0f}s"
    return f"{elapsed:.0f}s on {CORES} core(s); limit {limit:.0f}s applies to {cores_ref} cores, not asserted"


# --------------------------------------------------------------------------- 1


def _random_biases(params, rng):
    for name in params.names():
        if name.endswith("bias"):
            params[name].data[:] = rng.normal(0, 0.1, params[name].shape)


def test_c01_gradient_correctness(record_property):
    """1 gradient correctness"""
    start = time.perf_counter()
    worst = 0.0
    # default widths on 2-frame 8x8 input. Per tensor: a random direction (touches every element at once)
    # plus three random single elements. The step size adapts so a difference never straddles a
    # ReLU/max-pool switch. The exhaustive per-element sweep lives in test_network at reduced width.
    cfg = NetworkConfig(frame_height=8, frame_width=8, sequence_length=2)
    for trial in range(20):
        rng = np.random.default_rng([2, trial])
        params = init_parameters(cfg, seed=trial)
        _random_biases(params, rng)
        x = rng.random((2, 2, 3, 8, 8))
        y = rng.integers(0, 2, 2)
        h0 = init_hidden_random(cfg, trial)
        T.backward(T.cross_entropy(trace(params, x, h0).raw, y))

        def loss():
            with T.no_grad():
                return float(T.cross_entropy(trace(params, x, h0).raw, y).data)

        for name in params.names():
            arr = params[name].data
            v = rng.normal(size=arr.shape)
            base = arr.copy()

            def along(direction):
                def f(t):
                    arr[...] = base + t * direction
                    out = loss()
                    arr[...] = base
                    return out
                return f

            err = float(rel_error((params[name].grad * v).sum(), stable_difference(along(v))))
            for _ in range(3):
                idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
                unit = np.zeros_like(arr)
                unit[idx] = 1.0
                err = max(err, float(rel_error(params[name].grad[idx], stable_difference(along(unit)))))
            worst = max(worst, err)
            assert err < 1e-4, f"default trial {trial} {name}: {err:.2e}"
    elapsed = time.perf_counter() - start
    record_property("detail", f"max rel err {worst:.1e} < 1e-4; {_runtime_note(elapsed, 120)}")


# --------------------------------------------------------------------------- 2


def test_c02_canny_oracle(record_property):
    """2 Canny white-square oracle"""
    start = time.perf_counter()
    img = np.zeros((20, 20))
    y0, y1 = 5, 15  # white square occupies rows/cols 5..14
    img[y0:y1, y0:y1] = 1.0
    edges = canny(img)
    elapsed = time.perf_counter() - start
    np.testing.assert_array_equal(edges, canny_reference(img))
    ring = np.zeros((20, 20), dtype=bool)
    ring[y0 - 1 : y1 + 1, y0 - 1 : y1 + 1] = True
    ring[y0 + 1 : y1 - 1, y0 + 1 : y1 - 1] = False
    on = edges.astype(bool)
    assert not (on & ~ring).any(), "edge pixel farther than 1 px from the square boundary"
    # every boundary pixel of the square has an edge within 1 px
    boundary = np.zeros((20, 20), dtype=bool)
    boundary[y0:y1, y0:y1] = True
    boundary[y0 + 1 : y1 - 1, y0 + 1 : y1 - 1] = False
    near = np.zeros_like(on)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            near |= np.roll(np.roll(on, dy, 0), dx, 1)
    missing = int((boundary & ~near).sum())
    assert missing == 0, f"{missing} boundary pixels without a nearby edge"
    record_property("detail", f"{int(on.sum())} edge px, all within 1 px of the ring, reference-identical; "
                              f"{_runtime_note(elapsed, 1)}")


# --------------------------------------------------------------------------- 3


def test_c03_metric_invariants(record_property):
    """3 metric invariants"""
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    a = rng.normal(size=64)
    assert abs(cosine(a, a) - 1) <= 1e-9
    assert abs(cosine(a, 3.7 * a) - 1) <= 1e-9
    assert abs(cosine(a, -a) + 1) <= 1e-9
    assert abs(cosine([1.0, 0, 0], [0, 2.0, 0])) <= 1e-9
    b = rng.normal(size=64)
    b -= (a @ b) / (a @ a) * a
    assert abs(cosine(a, b)) <= 1e-9
    assert abs(cosine(a, b) - cosine(5 * a, 0.1 * b)) <= 1e-9
    x = rng.random((24, 32))
    assert abs(ssim(x, x) - 1) <= 1e-9
    feats = rng.normal(size=(300, 16))
    assert fid(feats, feats) < 1e-6
    d = rng.normal(size=16)
    got = fid(feats, feats + d)
    assert abs(got - d @ d) < 1e-6
    elapsed = time.perf_counter() - start
    record_property("detail", f"fid shift err {abs(got - d @ d):.1e}; {_runtime_note(elapsed, 10)}")


# --------------------------------------------------------------------------- 4


def test_c04_channel_extension_equivalence(trained_toy, toy_data, record_property):
    """4 3->6 channel extension equivalence"""
    params32, h0, _ = trained_toy
    params = as64(params32)
    bundle = harvest_bundle(params, toy_data[:50])
    p6, hid = init_phase2(bundle, phase2_config(params.config, augmented=True), seed=0)
    x3 = assemble_input(toy_data, None, 3)
    x6 = assemble_input(toy_data, None, 6)
    diff = np.abs(forward_batch(p6, x6, hid).output - forward_batch(params, x3, hid).output).max()
    h_diff = max(np.abs(a - b).max() for (a, _), (b, _) in zip(forward_batch(p6, x6, hid).hidden,
                                                               forward_batch(params, x3, hid).hidden))
    # the zero kernels also make the start model blind to whatever the aux channels hold
    x6[:, :, 3:] = np.random.default_rng(4).random(x6[:, :, 3:].shape)
    aux_diff = np.abs(forward_batch(p6, x6, hid).output - forward_batch(params, x3, hid).output).max()
    assert diff < 1e-6 and h_diff < 1e-6 and aux_diff < 1e-6
    record_property("detail", f"max |output diff| {diff:.1e}, hidden {h_diff:.1e}, with random aux {aux_diff:.1e} (< 1e-6)")


# --------------------------------------------------------------------------- 5-9: full-scale experiments


@pytest.fixture(scope="module")
def bench():
    setup = ExperimentSetup(workers=default_workers())
    return setup, Workbench(setup), {}


def _run(bench, name):
    setup, wb, cache = bench
    if name not in cache:
        start = time.perf_counter()
        cache[name] = (run_experiment(name, setup, wb), time.perf_counter() - start)
        print(f"\n{name} ({cache[name][1]:.0f}s)\n{cache[name][0].table}")
    return cache[name]


@pytest.mark.slow
def test_c05_transfer_ordering(bench, record_property):
    """5 transfer ordering on the shifted domain"""
    result, elapsed = _run(bench, "transfer-ordering")
    s = result.data["summary"]
    full, weights, base = (s[v]["shifted"]["mean"] for v in ("full", "weights-only", "baseline"))
    record_property("detail", f"shifted acc full {full:.4f}, weights-only {weights:.4f}, baseline {base:.4f}, "
                              f"gap {100 * (full - base):+.2f} pts; "
                              f"{_runtime_note(elapsed, 1800, REFERENCE_CORES)}")
    assert full >= weights, "full < weights-only"
    assert weights >= base, "weights-only < baseline"
    assert full - base >= 0.03, "full - baseline < 3 points"


@pytest.mark.slow
def test_c06_convergence_ordering(bench, record_property):
    """6 convergence ordering"""
    result, elapsed = _run(bench, "convergence")
    s = {v: d["epochs_to_threshold"]["mean"] for v, d in result.data["summary"].items()}
    record_property("detail", "epochs to 95%: " + ", ".join(f"{k} {v:.1f}" for k, v in s.items())
                    + f"; {_runtime_note(elapsed, 1800, REFERENCE_CORES)}")
    assert s["full"] <= min(s["no-lstm-transfer"], s["no-cnn-transfer"])
    assert abs(s["no-data-aug"] - s["full"]) <= 1


@pytest.mark.slow
def test_c07_steering(bench, record_property):
    """7 steering transfer"""
    result, elapsed = _run(bench, "steering")
    s = result.data["summary"]
    full_sh, base_sh = s["full"]["shifted"]["mean"], s["baseline"]["shifted"]["mean"]
    full_in, base_in = s["full"]["in_domain"]["mean"], s["baseline"]["in_domain"]["mean"]
    record_property("detail", f"shifted MAE transfer {full_sh:.2f} vs scratch {base_sh:.2f} deg; "
                              f"in-domain {full_in:.2f} / {base_in:.2f} deg; "
                              f"{_runtime_note(elapsed, 1200, REFERENCE_CORES)}")
    assert full_sh <= base_sh
    assert full_in < 5 and base_in < 5


@pytest.mark.slow
def test_c08_similarity_ordering(bench, record_property):
    """8 similarity ordering"""
    result, _ = _run(bench, "similarity-table")
    o = result.data["cosine_ordering"]
    record_property("detail", f"same {o['same_domain']:.4f} > cross {o['cross_domain']:.4f} > noise {o['noise']:.4f}")
    assert result.data["setup"]["similarity_pairs"] == 500
    assert o["same_domain"] - o["cross_domain"] > 0.02
    assert o["cross_domain"] - o["noise"] > 0.02


@pytest.mark.slow
def test_c09_scenario_trend(bench, record_property):
    """9 scenario study trend"""
    result, _ = _run(bench, "similarity-table")
    rows = result.data["report"]["scenarios"]
    assert [r["scenario"] for r in rows] == ["level1", "level2", "level3", "level4"]
    cos = [r["mean_cosine"] for r in rows]
    conf = [r["mean_collision_confidence"] for r in rows]
    record_property("detail", "cosine " + " ".join(f"{c:.3f}" for c in cos)
                    + "; P(collision) " + " ".join(f"{c:.3f}" for c in conf))
    assert all(b <= a for a, b in zip(cos, cos[1:])), "hidden-state cosine increases somewhere"
    assert all(b >= a for a, b in zip(conf, conf[1:])), "collision confidence decreases somewhere"


# --------------------------------------------------------------------------- 10


@pytest.mark.slow
def test_c10_reproducibility(bench, tmp_path, record_property):
    """10 bit-exact reproducibility"""
    setup, _, _ = bench
    first, _ = _run(bench, "similarity-table")
    again = run_experiment("similarity-table", setup, Workbench(setup))
    assert again.to_json() == first.to_json()
    # the CLI path, at reduced scale, twice and with a different worker count
    small = ["--set", "n_train=48", "--set", "n_test=24", "--set", "seeds=2", "--set", "phase1_epochs=1",
             "--set", "phase2_epochs=1", "--set", "height=16", "--set", "width=16", "--set", "steps=4"]
    outs = []
    for i, workers in enumerate((1, 1, 2)):
        d = tmp_path / f"run{i}"
        assert main(["experiment", "transfer-ordering", "--out-dir", str(d), "--seed", "7",
                     "--workers", str(workers), *small]) == 0
        outs.append(json.loads((d / "transfer-ordering.json").read_text()))
        outs[-1]["setup"].pop("workers")
    assert outs[0] == outs[1] == outs[2]
    record_property("detail", "similarity-table rerun and CLI transfer-ordering (x3, 1 and 2 workers) identical")
