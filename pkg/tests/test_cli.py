import json
import shutil

import pytest

from catalogs import selection_catalog
from vidcam import cli
from vidcam.dataset import SplitManifest, write_catalog
from vidcam.network import reduced_spec
from vidcam.trainer import load_checkpoint


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> split -> train (2 epochs) on a 3-class, 32x32 dataset."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {"spec_version": 1, "architecture": reduced_spec(3, 32).to_dict(),
           "training": {"epochs": 2, "batch_size": 8, "lr0": 0.001, "momentum": 0.95, "decay": 0.0005}}
    (root / "tiny.spec").write_text(json.dumps(cfg))
    assert cli.main(["synth", "--classes", "3", "--size", "32", "--videos", "6", "--frames", "3",
                     "--seed", "2", "--out", str(root / "data")]) == 0
    assert cli.main(["split", "--catalog", str(root / "data" / "catalog.csv"), "--all-devices",
                     "--seed", "2", "--out", str(root / "split.csv")]) == 0
    assert cli.main(["train", "--config", str(root / "tiny.spec"), "--manifest", str(root / "split.csv"),
                     "--frames", str(root / "data"), "--out", str(root / "ck"), "--seed", "2",
                     "--deterministic", "--eval-each-epoch", "--debug"]) == 0
    return root


def test_train_outputs(workspace):
    ck = workspace / "ck"
    assert {"epoch_001.ckpt", "epoch_002.ckpt", "history.csv", "train.log", "training.png", "run.json"} <= {
        p.name for p in ck.iterdir()}
    history = (ck / "history.csv").read_text().splitlines()
    assert history[0].startswith("epoch,mean_loss") and len(history) == 3
    run = json.loads((ck / "run.json").read_text())
    assert run["seed"] == 2 and run["args"]["command"] == "train" and len(run["config_hash"]) == 16
    meta = load_checkpoint(ck / "epoch_002.ckpt").metadata
    assert meta["seed"] == 2 and meta["config"]["batch_size"] == 8 and meta["config"]["epochs"] == 2


def test_split_metadata_carries_run(workspace):
    man = SplitManifest.read(workspace / "split.csv")
    assert man.metadata["run"]["seed"] == 2
    assert cli.main(["validate", "--manifest", str(workspace / "split.csv")]) == 0


def test_evaluate_writes_report(workspace, capsys):
    out = workspace / "report"
    code = cli.main(["evaluate", "--checkpoint", str(workspace / "ck" / "epoch_002.ckpt"), "--manifest",
                     str(workspace / "split.csv"), "--frames", str(workspace / "data"), "--out", str(out)])
    assert code == 0
    assert "overall video accuracy" in capsys.readouterr().out
    summary = json.loads((out / "summary.json").read_text())
    assert summary["metadata"]["epoch"] == 2 and summary["metadata"]["run"]["args"]["voting"] == "majority"
    assert (out / "confusion_overall.png").exists() and (out / "accuracy.png").exists()


def test_classify_frame_directory(workspace, capsys):
    clip = workspace / "clip"
    clip.mkdir(exist_ok=True)
    for p in sorted((workspace / "data").glob("S02_V001_f*.png")):
        shutil.copy(p, clip / p.name)
    code = cli.main(["classify", "--checkpoint", str(workspace / "ck" / "epoch_002.ckpt"),
                     "--video-frames", str(clip), "--frames", "3"])
    out = capsys.readouterr().out
    assert code == 0
    assert out.startswith("predicted device: S0")
    assert "votes:" in out and "mean probabilities:" in out
    assert out.count("  S0") == 3
    # more frames than the clip holds needs the opt-in flag
    assert cli.main(["classify", "--checkpoint", str(workspace / "ck" / "epoch_002.ckpt"),
                     "--video-frames", str(clip), "--frames", "5"]) == 1
    assert cli.main(["classify", "--checkpoint", str(workspace / "ck" / "epoch_002.ckpt"),
                     "--video-frames", str(clip), "--frames", "5", "--allow-repeats"]) == 0


def test_deterministic_cli_training_repeats_bytes(workspace):
    out = workspace / "ck2"
    assert cli.main(["train", "--config", str(workspace / "tiny.spec"), "--manifest", str(workspace / "split.csv"),
                     "--frames", str(workspace / "data"), "--out", str(out), "--seed", "2", "--deterministic",
                     "--eval-each-epoch", "--debug"]) == 0
    for name in ("epoch_001.ckpt", "epoch_002.ckpt", "train.log", "history.csv"):
        if name == "train.log":
            # elapsed time differs between runs
            strip = lambda t: [line.split(" elapsed=")[0] for line in t.splitlines()]  # noqa: E731
            assert strip((out / name).read_text()) == strip((workspace / "ck" / name).read_text())
        else:
            assert (out / name).read_bytes() == (workspace / "ck" / name).read_bytes()


def test_select_devices_on_mock_snapshot(tmp_path, capsys):
    write_catalog(tmp_path / "vision.csv", selection_catalog())
    code = cli.main(["select-devices", "--catalog", str(tmp_path / "vision.csv"), "--out", str(tmp_path / "dev.json")])
    assert code == 0
    assert "selected 28 of 35 devices" in capsys.readouterr().out
    data = json.loads((tmp_path / "dev.json").read_text())
    assert len(data["devices"]) == 28 and len(data["audit"]) == 35


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "constrained_net.constrained.w" in out and "max relative error" in out


def test_gradcheck_failure_exits_3(monkeypatch):
    import vidcam.gradcheck

    monkeypatch.setattr(vidcam.gradcheck, "run_gradcheck", lambda seed: {"conv.input": 0.5})
    assert cli.main(["gradcheck"]) == 3


def test_usage_and_data_errors(tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["train", "--bogus"]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["validate", "--manifest", str(tmp_path / "nope.csv")]) == 2
    assert cli.main(["train", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.spec").write_text("{not json")
    assert cli.main(["train", "--config", str(tmp_path / "bad.spec"), "--manifest", str(tmp_path / "x.csv"),
                     "--out", str(tmp_path / "o")]) == 1


def test_builtin_configs_load():
    for name in ("default", "synthetic.spec"):
        cfg = cli.load_config(name)
        assert cfg["spec_version"] == 1 and "architecture" in cfg and "training" in cfg
    assert cli.load_config("default")["training"]["epochs"] == 30


def test_jobs_default_from_environment(monkeypatch):
    monkeypatch.setenv(cli.JOBS_ENV, "3")
    assert cli.default_jobs() == 3
    monkeypatch.setenv(cli.JOBS_ENV, "many")
    assert cli.default_jobs() >= 1
