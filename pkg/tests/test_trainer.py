import hashlib
import subprocess
import sys

import numpy as np
import pytest

from vidcam.constrained import post_update_hook, satisfies_constraints
from vidcam.errors import CheckpointError, ConfigError, DataError, NumericError
from vidcam.gradcheck import tiny_spec
from vidcam.network import BANK, build_model, reduced_spec
from vidcam.tensor import softmax_cross_entropy
from vidcam.trainer import (
    MAGIC,
    Checkpoint,
    OptimizerState,
    TrainConfig,
    learning_rate,
    load_checkpoint,
    save_checkpoint,
    sgd_momentum_step,
    train,
    training_frames,
)


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert learning_rate(cfg, 0) == 0.001
    assert learning_rate(cfg, 2000) == pytest.approx(0.0005, rel=1e-15)


def test_two_steps_match_hand_recurrence():
    cfg = TrainConfig()
    params = {"p": np.zeros(1)}
    state = OptimizerState.zeros_like(params)
    sgd_momentum_step(params, {"p": np.ones(1)}, state, cfg)
    assert params["p"][0] == pytest.approx(-0.001, abs=1e-18)
    sgd_momentum_step(params, {"p": np.ones(1)}, state, cfg)
    lr1 = 0.001 / 1.0005
    v1 = 0.95 * -0.001 - lr1
    assert state.velocity["p"][0] == pytest.approx(v1, abs=1e-18)
    assert params["p"][0] == pytest.approx(-0.001 + v1, abs=1e-18)
    assert state.t == 2


def test_zero_gradient_step_only_advances_counter(rng):
    params = {"w": rng.standard_normal((3, 4))}
    before = params["w"].copy()
    state = OptimizerState.zeros_like(params)
    sgd_momentum_step(params, {"w": np.zeros((3, 4))}, state, TrainConfig())
    np.testing.assert_array_equal(params["w"], before)
    assert state.t == 1


def test_non_finite_gradient_names_the_layer():
    params = {"fc1.w": np.zeros(3)}
    g = np.array([0.0, np.inf, 1.0])
    with pytest.raises(NumericError, match="fc1.w"):
        sgd_momentum_step(params, {"fc1.w": g}, OptimizerState.zeros_like(params), TrainConfig())


@pytest.mark.parametrize("field,value", [("epochs", 0), ("lr0", 0.0), ("batch_size", 0), ("momentum", -1.0)])
def test_config_preconditions(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value})


def test_checkpoint_round_trip_is_bitwise(tmp_path, rng):
    model = build_model(reduced_spec(3, 32), 4)
    params = model.params
    state = OptimizerState({k: rng.standard_normal(v.shape).astype(v.dtype) for k, v in params.items()}, 17)
    ckpt = Checkpoint.from_model(model, state, epoch=3, metadata={"seed": 4, "config_hash": "abc"})
    path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
    assert path.read_bytes().startswith(MAGIC)
    back = load_checkpoint(path)
    assert back.spec == ckpt.spec and back.catalog == ckpt.catalog and back.epoch == 3
    assert back.metadata == ckpt.metadata and back.optimizer.t == 17
    for k in params:
        assert back.params[k].dtype == params[k].dtype
        np.testing.assert_array_equal(back.params[k], params[k])
        np.testing.assert_array_equal(back.optimizer.velocity[k], state.velocity[k])
    # saving the loaded checkpoint reproduces the file byte for byte
    again = save_checkpoint(back, tmp_path / "again.ckpt")
    assert again.read_bytes() == path.read_bytes()


def test_corrupted_byte_is_detected(tmp_path):
    path = save_checkpoint(Checkpoint.from_model(build_model(reduced_spec(3, 32), 0)), tmp_path / "m.ckpt")
    data = bytearray(path.read_bytes())
    for pos in (len(data) // 2, len(data) - 40):
        bad = bytearray(data)
        bad[pos] ^= 0x01
        (tmp_path / "bad.ckpt").write_bytes(bytes(bad))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(bytes(data[:100]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "alien.ckpt").write_bytes(b"PK\x03\x04" + bytes(data[4:]))
    with pytest.raises(CheckpointError, match="not a"):
        load_checkpoint(tmp_path / "alien.ckpt")


def test_checkpoint_loads_identically_in_another_process(tmp_path, rng):
    model = build_model(reduced_spec(3, 32), 9)
    path = save_checkpoint(Checkpoint.from_model(model), tmp_path / "m.ckpt")
    x = rng.random((4, 3, 32, 32)).astype(np.float32)
    np.save(tmp_path / "x.npy", x)
    here = hashlib.sha256(load_checkpoint(path).model().predict_proba(x).tobytes()).hexdigest()
    code = (
        "import hashlib, sys, numpy as np\n"
        "from vidcam.trainer import load_checkpoint\n"
        "m = load_checkpoint(sys.argv[1]).model()\n"
        "print(hashlib.sha256(m.predict_proba(np.load(sys.argv[2])).tobytes()).hexdigest())\n"
    )
    out = subprocess.run([sys.executable, "-c", code, str(path), str(tmp_path / "x.npy")],
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == here


def test_toy_problem_loss_below_threshold(rng):
    model = build_model(tiny_spec(classes=2), 0, dtype="float64")
    x = rng.random((2, 3, 12, 12))
    y = np.array([0, 1])
    cfg = TrainConfig(lr0=0.02)
    state = OptimizerState.zeros_like(model.params)
    loss = None
    for _ in range(500):
        logits, cache = model.forward(x, keep_cache=True)
        loss, g, _ = softmax_cross_entropy(logits, y)
        if loss < 1e-3:
            break
        sgd_momentum_step(model.params, model.backward(cache, g), state, cfg)
        model.params[BANK] = post_update_hook(model.params[BANK])
    assert loss < 1e-3


def test_training_lowers_loss_and_keeps_bank_valid(small_synth, tmp_path):
    ds, manifest = small_synth
    model = build_model(reduced_spec(3, 32), 0, catalog=manifest.devices)
    seen = []

    def check(step, m, loss):
        seen.append(satisfies_constraints(m.params[BANK]))

    cfg = TrainConfig(epochs=5, batch_size=8, seed=0, checkpoint_dir=str(tmp_path), check_every=1, cache_frames=True)
    history = train(model, manifest, ds.root, cfg, on_step=check)
    assert len(history) == 5 and all(seen) and len(seen) == 5 * -(-len(training_frames(manifest, ds.root)) // 8)
    assert history[-1].mean_loss < history[0].mean_loss
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [f"epoch_{i:03d}.ckpt" for i in range(1, 6)]
    log = (tmp_path / "train.log").read_text().splitlines()
    assert len(log) == 5 and log[0].startswith("epoch=1 loss=")
    last = load_checkpoint(tmp_path / "epoch_005.ckpt")
    assert last.epoch == 5 and satisfies_constraints(last.params[BANK])


def test_deterministic_runs_are_bit_identical(small_synth, tmp_path):
    ds, manifest = small_synth
    for run in ("a", "b"):
        model = build_model(reduced_spec(3, 32), 1, catalog=manifest.devices)
        cfg = TrainConfig(epochs=2, batch_size=8, seed=1, deterministic=True, checkpoint_dir=str(tmp_path / run))
        train(model, manifest, ds.root, cfg)
    for name in ("epoch_001.ckpt", "epoch_002.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_frames_are_listed_before_training(small_synth, tmp_path):
    ds, manifest = small_synth
    victim = manifest.side("train")[0]["video_id"]
    empty = tmp_path / "frames"
    empty.mkdir()
    with pytest.raises(DataError, match="missing"):
        training_frames(manifest, empty)
    with pytest.raises(DataError, match=victim):
        train(build_model(reduced_spec(3, 32), 0, catalog=manifest.devices), manifest, empty, TrainConfig(epochs=1))


def test_catalog_mismatch_is_rejected(small_synth):
    ds, manifest = small_synth
    with pytest.raises(ConfigError):
        train(build_model(reduced_spec(3, 32), 0), manifest, ds.root, TrainConfig(epochs=1))
