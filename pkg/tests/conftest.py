import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sttransfer import tensor as T  # noqa: E402
from sttransfer.network import NetworkConfig, Parameters  # noqa: E402


@pytest.fixture(autouse=True)
def _float64():
    """Tests run in 64-bit mode unless they switch explicitly; always restored."""
    T.set_precision("float64")
    yield
    T.set_precision("float64")


@pytest.fixture(scope="session")
def toy_data():
    from sttransfer.synthdata import generate_dataset, get_domain

    return generate_dataset(get_domain("townA"), 200, 0.5, 15, seed=101)


@pytest.fixture(scope="session")
def trained_toy(toy_data):
    """Phase-1 model on 200 townA sequences, 30 epochs, float32 training."""
    from sttransfer.transfer import TrainConfig, train_phase1

    with T.precision("float32"):
        params, h0, history = train_phase1(toy_data, NetworkConfig(), TrainConfig(epochs=30, seed=3))
    return params, h0, history


def as64(params: Parameters) -> Parameters:
    with T.precision("float64"):
        return Parameters(params.config, {k: T.Tensor(v.data.astype(np.float64), True, k)
                                          for k, v in params.tensors.items()}, params.seed)


def small_config(**kw) -> NetworkConfig:
    from sttransfer.network import ConvSpec, InceptionSpec

    base = dict(
        frame_height=8, frame_width=8, sequence_length=2,
        conv=(ConvSpec(3, 5, 2), ConvSpec(4, 3, 2)),
        inception=(InceptionSpec(2, 2, 2, 1, 2, 2), InceptionSpec(2, 2, 3, 1, 2, 1)),
        bridge_features=4, lstm_hidden=3, fc_widths=(4, 3),
    )
    base.update(kw)
    return NetworkConfig(**base)


# --------------------------------------------------------------------------- acceptance summary

_ACCEPTANCE: dict[str, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("detail", "")
        if report.outcome == "failed":
            msg = str(report.longrepr.reprcrash.message) if hasattr(report.longrepr, "reprcrash") else ""
            detail = f"{detail} | {msg.splitlines()[0] if msg else 'failed'}".strip(" |")
        _ACCEPTANCE[name] = ("PASS" if report.outcome == "passed" else report.outcome.upper(), name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        status, name, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {int(name[6:8]):2d} {status:4s} {name[9:]}: {detail}")
