import hashlib
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from siagcn import config as C
from siagcn.cli import main
from siagcn.errors import ConfigError
from siagcn.graph import build_chain
from siagcn.synth import save_heatmaps
from siagcn.train import load_checkpoint

SMALL = ["--set", "synth.n_train=8", "--set", "synth.n_val=4", "--set", "synth.n_test=6"]
FAST = ["--set", "model.n_heads=2", "--set", "model.n_layers=2", "--set", "model.kernel_size=3"]


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    assert main(["gen", *SMALL, "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "r"
    assert main(["train", "--data", str(dataset), "--out", str(out), *FAST, "--set", "train.epochs=2"]) == 0
    return out


def test_gen_deterministic(tmp_path):
    args = ["gen", "--set", "synth.n_train=100", "--set", "synth.n_val=0", "--set", "synth.n_test=0", "--seed", "7"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert len(list((tmp_path / "a" / "train").iterdir())) == 100
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert (tmp_path / "a" / "config.ini").is_file()


def test_gen_empty_warns(tmp_path, capsys):
    zero = ["--set", "synth.n_train=0", "--set", "synth.n_val=0", "--set", "synth.n_test=0"]
    assert main(["gen", *zero, "--out", str(tmp_path / "z")]) == 0
    assert "warning" in capsys.readouterr().err
    files = sorted(p.name for p in (tmp_path / "z").rglob("*") if p.is_file())
    assert files == ["config.ini", "manifest.json"]


def test_gen_refuses_nonempty_without_force(tmp_path, capsys):
    out = tmp_path / "d"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["gen", *SMALL, "--out", str(out)]) == 1
    assert "--force" in capsys.readouterr().err
    assert main(["gen", *SMALL, "--out", str(out), "--force"]) == 0
    assert (out / "keep.txt").read_text() == "x"


def test_gen_unknown_key_names_key_and_line(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[corruption]\njitter_sigma = 1.0\nwobble = 3\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1
    err = capsys.readouterr().err
    assert "wobble" in err and "bad.ini:3" in err


def test_usage_errors_exit_1(capsys):
    assert pytest.raises(SystemExit, main, ["frobnicate"]).value.code == 1
    assert pytest.raises(SystemExit, main, ["gen"]).value.code == 1
    assert main(["gen", "--set", "nodot=1", "--out", "/tmp/never"]) == 1


def test_train_outputs(trained):
    names = sorted(p.name for p in trained.iterdir())
    assert names == ["best.ckpt", "config.ini", "last.ckpt", "train_log.jsonl"]
    records = [json.loads(l) for l in (trained / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [-1, 0, 1]
    assert all(np.isfinite(r["loss"]) for r in records if r["kind"] == "train")
    assert "n_heads = 2" in (trained / "config.ini").read_text()


def test_train_smoke_under_a_minute(dataset, tmp_path):
    t = time.perf_counter()
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--set", "train.epochs=2"]) == 0
    assert time.perf_counter() - t < 60
    assert (tmp_path / "r" / "best.ckpt").is_file() and (tmp_path / "r" / "last.ckpt").is_file()


def test_train_does_not_touch_dataset(dataset, trained, tmp_path):
    before = tree_digest(dataset)
    main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), *FAST, "--set", "train.epochs=1"])
    main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(dataset), "--out", str(tmp_path / "e")])
    assert tree_digest(dataset) == before


def test_train_resume_matches_uninterrupted(dataset, tmp_path):
    base = ["train", "--data", str(dataset), *FAST, "--set", "train.milestones=2", "--set", "train.lr=0.003"]
    assert main([*base, "--out", str(tmp_path / "full"), "--set", "train.epochs=4"]) == 0
    assert main([*base, "--out", str(tmp_path / "part"), "--set", "train.epochs=2"]) == 0
    ckpt = tmp_path / "part" / "last.ckpt"
    assert main([*base, "--out", str(tmp_path / "part"), "--set", "train.epochs=4", "--resume", str(ckpt)]) == 0
    for name in ("last.ckpt", "train_log.jsonl"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes(), name
    # best.ckpt may come from the first invocation and then records its config
    a, _, ia = load_checkpoint(tmp_path / "full" / "best.ckpt")
    b, _, ib = load_checkpoint(tmp_path / "part" / "best.ckpt")
    assert ia["epoch"] == ib["epoch"]
    assert all(x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(a.parameters(), b.parameters()))


def test_train_nan_injection_aborts(dataset, tmp_path, capsys):
    out = tmp_path / "nan"
    rc = main(["train", "--data", str(dataset), "--out", str(out), "--set", "train.lr=1e6",
               "--set", "train.optimizer=sgd_momentum", "--set", "train.batch_size=2"])
    assert rc == 3
    assert "non-finite loss" in capsys.readouterr().err
    records = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert records[0]["kind"] == "eval" and records[-1]["kind"] == "abort"


def test_train_graph_mismatch_before_training(dataset, tmp_path, capsys):
    g = tmp_path / "chain.graph"
    g.write_text(build_chain(4).to_text())
    out = tmp_path / "r"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--set", f"model.graph={g}"]) == 2
    assert "21" in capsys.readouterr().err
    assert not (out / "train_log.jsonl").exists()


def test_eval_report_deterministic(dataset, trained, tmp_path, capsys):
    args = ["eval", "--checkpoint", str(trained / "best.ckpt"), "--shared", str(trained / "last.ckpt"),
            "--data", str(dataset)]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    for name in ("report.txt", "report.json", "config.ini"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    text = (tmp_path / "a" / "report.txt").read_text()
    assert text.splitlines()[1].split() == ["delta", "input", "shared", "sia"]
    assert text.splitlines()[-1].startswith("mPCK")
    doc = json.loads((tmp_path / "a" / "report.json").read_text())
    assert set(doc["systems"]) == {"input", "shared", "sia"} and doc["meta"]["split"] == "test"
    assert text in capsys.readouterr().out


def test_eval_without_ground_truth(trained, tmp_path, capsys):
    d = tmp_path / "nogt"
    assert main(["gen", "--set", "synth.n_train=0", "--set", "synth.n_val=0", "--set", "synth.n_test=2",
                 "--out", str(d)]) == 0
    maps = np.random.default_rng(0).random((21, 32, 32))
    save_heatmaps(d / "test" / "000000.hmap", maps)
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(d)]) == 2
    assert "no ground truth" in capsys.readouterr().err


def test_eval_graph_mismatch(dataset, tmp_path, capsys):
    from siagcn.model import ModelConfig, init_model, save_model

    save_model(tmp_path / "chain.bin", init_model(build_chain(4), ModelConfig(n_heads=1, n_layers=1, kernel_size=3)))
    assert main(["eval", "--checkpoint", str(tmp_path / "chain.bin"), "--data", str(dataset)]) == 2
    assert "nodes" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "worst:" in out
    assert main(["gradcheck", "--tol", "1e-12", "--precision", "double"]) == 3
    assert "FAIL" in capsys.readouterr().out
    assert main(["gradcheck", "--params", "pointer"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if "max rel err" in l]
    assert [l.split()[0] for l in lines] == ["pointer.weight", "pointer.bias"]


def test_gradcheck_guard(capsys):
    assert main(["gradcheck", "--set", "gradcheck.max_params=50"]) == 1
    assert "--subsample" in capsys.readouterr().err
    assert main(["gradcheck", "--set", "gradcheck.max_params=50", "--subsample", "30"]) == 0
    assert "30 entries" in capsys.readouterr().out


def test_inspect(tmp_path, capsys):
    assert main(["inspect"]) == 0
    out = capsys.readouterr().out
    assert "nodes (21)" in out and "directed edges in kernel order (61)" in out
    assert "B =" in out and "A_hat =" in out
    g = tmp_path / "tri.graph"
    g.write_text("[nodes]\na\nb\n[bones]\na b\n")
    assert main(["--threads", "1", "inspect", "--graph", str(g)]) == 0
    out = capsys.readouterr().out
    assert "0 a -> a" in out and "1 b -> a" in out and "[0.5 0.5 0.  0. ]" in out
    assert main(["inspect", "--graph", str(tmp_path / "none.graph")]) == 2


def test_console_script_exit_codes(tmp_path):
    run = lambda *a: subprocess.run([sys.executable, "-m", "siagcn.cli", *a], capture_output=True, text=True)
    assert run("inspect", "--no-matrices").returncode == 0
    assert run("eval", "--checkpoint", str(tmp_path / "x"), "--data", str(tmp_path)).returncode == 2
    assert run("bogus").returncode == 1


# -- config --------------------------------------------------------------------

def test_config_round_trip_and_presets():
    cfg = C.default_config()
    text = C.format_config(cfg)
    assert C.parse_config_text(text) == cfg
    full = C.default_config("full")
    assert full["model"]["n_heads"] == 10 and full["model"]["kernel_size"] == 45
    assert full["loss"]["alpha_schedule"] == ((0, 1.0), (40, 0.1))
    assert C.parse_config_text(C.format_config(full), preset="full") == full


def test_config_overrides_and_errors():
    cfg = C.load_config(overrides=["train.milestones=3,5", "loss.alpha_schedule=0:1.0,4:0.2", "model.tied=true"])
    assert cfg["train"]["milestones"] == (3, 5)
    assert cfg["loss"]["alpha_schedule"] == ((0, 1.0), (4, 0.2))
    assert cfg["model"]["tied"] is True
    for bad in ("train.epochs=zero", "nosuch.key=1", "train.nosuch=1", "train.epochs=0", "novalue"):
        with pytest.raises(ConfigError):
            C.load_config(overrides=[bad])
    with pytest.raises(ConfigError, match="unknown section"):
        C.parse_config_text("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        C.load_config("/nonexistent/file.ini")
