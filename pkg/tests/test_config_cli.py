import json

import pytest

from sttransfer import config as C
from sttransfer.cli import main


def test_defaults():
    cfg = C.resolve(environ={})
    assert cfg["epochs"] == 10 and cfg["precision"] == "float32" and cfg["transfer_cnn"] is True


def test_precedence_file_env_cli(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nepochs = 3\nseed=4  # trailing\nbatch_size = 8\n\ndata_aug = no\n")
    env = {"STTRANSFER_SEED": "5", "STTRANSFER_BATCH_SIZE": "16", "STTRANSFER_KERNELS": "python", "PATH": "/x"}
    cfg = C.resolve(f, {"batch_size": 2, "epochs": None}, env)
    assert cfg["epochs"] == 3  # file; CLI None is ignored
    assert cfg["seed"] == 5  # env beats file
    assert cfg["batch_size"] == 2  # CLI beats env
    assert cfg["data_aug"] is False


def test_unknown_and_bad_keys(tmp_path):
    with pytest.raises(C.ConfigKeyError, match="unknown key"):
        C.resolve(environ={"STTRANSFER_EPOCHZ": "3"})
    with pytest.raises(C.ConfigKeyError, match="bad value"):
        C.resolve(environ={"STTRANSFER_EPOCHS": "three"})
    f = tmp_path / "bad.cfg"
    f.write_text("epochs 3\n")
    with pytest.raises(C.ConfigKeyError, match="key = value"):
        C.read_file(f)
    with pytest.raises(C.ConfigKeyError):
        C.resolve(cli={"nope": 1}, environ={})
    with pytest.raises(C.ConfigKeyError):
        C.resolve(cli={"precision": "float16"}, environ={})
    with pytest.raises(C.ConfigKeyError):
        C.resolve(cli={"salient_ratio": 1.5}, environ={})


# --------------------------------------------------------------------------- CLI


@pytest.fixture()
def clean_env(monkeypatch):
    import os

    for k in list(os.environ):
        if k.startswith("STTRANSFER_") and k not in C.RESERVED_ENV:
            monkeypatch.delenv(k)


def gen(tmp_path, name, domain="townA", n=12, seed=1, extra=()):
    out = tmp_path / name
    rc = main(["gen-data", "--domain", domain, "--n", str(n), "--seed", str(seed), "--steps", "3",
               "--height", "8", "--width", "8", "--out", str(out), *extra])
    assert rc == 0
    return out


def test_gen_data_is_byte_reproducible(tmp_path, clean_env):
    a = gen(tmp_path, "a.stx")
    b = gen(tmp_path, "b.stx")
    assert a.read_bytes() == b.read_bytes()
    man = json.loads((tmp_path / "a.stx.manifest.json").read_text())
    assert man["command"] == "gen-data" and man["seed"] == 1 and "numpy" in man["versions"]


def test_full_pipeline_and_eval_matches_history(tmp_path, clean_env, capsys):
    src = gen(tmp_path, "src.stx")
    tgt = gen(tmp_path, "tgt.stx", domain="townB", seed=2)
    ck1, bundle = tmp_path / "p1.ckpt", tmp_path / "p1.bundle"
    assert main(["train-phase1", "--data", str(src), "--out", str(ck1), "--epochs", "2",
                 "--batch-size", "4", "--bundle-out", str(bundle)]) == 0
    aug = tmp_path / "tgt_aug.stx"
    assert main(["gen-salient", "--checkpoint", str(ck1), "--data", str(tgt), "--ratio", "0.5",
                 "--out", str(aug)]) == 0
    ck2 = tmp_path / "p2.ckpt"
    assert main(["train-phase2", "--bundle", str(bundle), "--data", str(aug), "--out", str(ck2),
                 "--epochs", "2", "--batch-size", "4"]) == 0
    hist = json.loads((tmp_path / "p2.ckpt.history.json").read_text())
    capsys.readouterr()
    js = tmp_path / "m.json"
    assert main(["eval", "--checkpoint", str(ck2), "--data", str(aug), "--json-out", str(js)]) == 0
    out = capsys.readouterr().out
    assert "accuracy" in out and "confusion" in out
    m = json.loads(js.read_text())
    assert m["value"] == hist["records"][-1]["train_metric"]
    assert sum(map(sum, m["confusion"])) == 12
    man = json.loads((tmp_path / "p2.ckpt.manifest.json").read_text())
    assert man["flags"] == {"transfer_cnn": True, "transfer_lstm_weights": True, "transfer_hidden": True}
    assert main(["train-phase2", "--bundle", str(bundle), "--data", str(aug), "--out", str(tmp_path / "p3.ckpt"),
                 "--epochs", "1", "--no-lstm-transfer", "--no-data-aug"]) == 0
    man = json.loads((tmp_path / "p3.ckpt.manifest.json").read_text())
    assert man["flags"]["transfer_hidden"] is False
    sim = tmp_path / "sim.json"
    assert main(["similarity", "--checkpoint", str(ck1), "--a", str(src), "--b", str(tgt), "--n-pairs", "10",
                 "--json-out", str(sim)]) == 0
    assert json.loads(sim.read_text())["schema"] == "sttransfer.similarity/1"


def test_steering_pipeline(tmp_path, clean_env, capsys):
    data = gen(tmp_path, "s.stx", extra=("--task", "steering"))
    ck = tmp_path / "s.ckpt"
    assert main(["train-phase1", "--data", str(data), "--out", str(ck), "--epochs", "1"]) == 0
    assert main(["eval", "--checkpoint", str(ck), "--data", str(data)]) == 0
    assert "mean absolute error" in capsys.readouterr().out
    col = gen(tmp_path, "c.stx")
    assert main(["eval", "--checkpoint", str(ck), "--data", str(col)]) == 2


def test_exit_codes(tmp_path, clean_env, monkeypatch, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--n", "3"])  # missing --out
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    monkeypatch.setenv("STTRANSFER_BOGUS", "1")
    assert main(["gen-data", "--out", str(tmp_path / "x")]) == 2
    monkeypatch.delenv("STTRANSFER_BOGUS")
    assert main(["eval", "--checkpoint", str(tmp_path / "missing"), "--data", str(tmp_path / "missing")]) == 1
    (tmp_path / "junk").write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk"), "--data", str(tmp_path / "junk")]) == 1
    assert main(["experiment", "convergence", "--out-dir", str(tmp_path), "--set", "nope=1"]) == 2
    assert "error" in capsys.readouterr().err


def test_config_file_flag(tmp_path, clean_env):
    f = tmp_path / "c.cfg"
    f.write_text("n = 4\nsteps = 2\nframe_height = 8\nframe_width = 8\n")
    out = tmp_path / "d.stx"
    assert main(["--config", str(f), "gen-data", "--out", str(out)]) == 0
    from sttransfer.synthdata import load_dataset

    ds = load_dataset(out)
    assert len(ds.sequences) == 4 and ds.sequences[0].frames.shape == (2, 3, 8, 8)
