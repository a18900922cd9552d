import json
import math

import numpy as np
import pytest

from spheregan.autodiff import Tensor
from spheregan.data import DataError
from spheregan.geometry import spherical_weights
from spheregan.model import ConfigError
from spheregan.training import (
    Adam,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    init_state,
    load_checkpoint,
    load_config,
    save_checkpoint,
    train,
    train_step,
)

SMALL = dict(height=32, width=64, gen_channels=(4, 8, 8, 8), disc_channels=(4, 4, 4, 4), batch_size=2, seed=3)


def small_config(**kw):
    return TrainConfig(**{**SMALL, **kw})


def params_snapshot(net):
    return {k: p.data.copy() for k, p in net.params.items()}


# ---------------------------------------------------------------- Adam


def scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8, p=1.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_two_steps_hand_computed():
    p, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
    adam_step(p, np.array([0.5]), m, v, 1, 0.1)
    assert p[0] == pytest.approx(0.9, abs=1e-8)  # eps shifts it by 2e-9
    adam_step(p, np.array([-0.2]), m, v, 2, 0.1)
    assert p[0] == pytest.approx(scalar_adam([0.5, -0.2], 0.1), abs=1e-12)
    assert p[0] == pytest.approx(0.865439, abs=1e-6)


def test_adam_zero_grad_keeps_params_and_counts_step():
    params = {"w": Tensor(np.array([1.0, -2.0]))}
    opt = Adam(params, lr=0.1)
    opt.step(params, {"w": np.zeros(2)})
    opt.step(params, {"w": np.zeros(2)})
    assert opt.t == 2
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])


def test_adam_step_bounded(rng):
    b1, b2, lr = 0.9, 0.999, 1e-3
    p, m, v = np.zeros(50), np.zeros(50), np.zeros(50)
    for t in range(1, 201):
        before = p.copy()
        adam_step(p, rng.standard_normal(50), m, v, t, lr, b1, b2)
        # Cauchy-Schwarz on the moment sums bounds |m_hat| / sqrt(v_hat)
        r = b1 * b1 / b2
        bound = (1 - b1) / (1 - b1 ** t) * math.sqrt((1 - b2 ** t) / (1 - b2)) * math.sqrt((1 - r ** t) / (1 - r))
        assert np.abs(p - before).max() <= lr * bound * (1 + 1e-9)


def test_adam_constant_gradient_moves_by_lr():
    p, m, v = np.zeros(1), np.zeros(1), np.zeros(1)
    for t in range(1, 6):
        before = p.copy()
        adam_step(p, np.array([3.0]), m, v, t, 0.01)
        assert before[0] - p[0] == pytest.approx(0.01, rel=1e-6)


# ---------------------------------------------------------------- config


def test_config_dotted_keys_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model.height": 32, "model.width": 64, "train": {"lr_gen": 0.002}}))
    cfg = load_config(path, ["train.seed=9", "loss.terms=CC,G_BCE", "model.conv_mode=planar"])
    assert (cfg.height, cfg.lr_gen, cfg.seed, cfg.conv_mode) == (32, 0.002, 9, "planar")
    assert cfg.loss_terms == ("CC", "G_BCE")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_config_defaults_follow_training_setup():
    cfg = TrainConfig()
    assert (cfg.k, cfg.lr_gen, cfg.lr_disc, cfg.beta1, cfg.beta2, cfg.adam_eps) == (5, 1e-4, 1e-5, 0.9, 0.999, 1e-8)


@pytest.mark.parametrize("override", ["train.nope=1", "train.lr_gen=-1", "train.batch_size=0", "loss.terms=CC,KL"])
def test_config_rejects_bad_values(override):
    with pytest.raises(ConfigError):
        cfg = TrainConfig().with_overrides([override])
        cfg.validate()


# ---------------------------------------------------------------- training loop


def test_single_step_updates_both_networks(tiny_dataset):
    _, seqs = tiny_dataset
    cfg = small_config(max_steps=1, epochs=1)
    state = init_state(cfg)
    g0, d0 = params_snapshot(state.generator), params_snapshot(state.discriminator)
    state = train(cfg, [seqs[0]], state=state)
    assert state.step == 1
    rec = state.history[0]
    assert all(math.isfinite(v) for v in rec.values())
    for before, net in ((g0, state.generator), (d0, state.discriminator)):
        assert any(not np.array_equal(before[k], p.data) for k, p in net.params.items())


def test_discriminator_phase_leaves_generator_grads_empty(tiny_dataset):
    _, seqs = tiny_dataset
    state = init_state(small_config())
    gen, disc = state.generator, state.discriminator
    frames = np.stack(seqs[0].frames[5:7])
    prev, target = np.stack(seqs[0].saliency[0:2]), np.stack(seqs[0].saliency[5:7])
    fake = gen(frames, prev, train=True)
    gen.zero_grad()
    d = disc(fake.detach(), state.rng, train=True)
    d.backward(np.ones(2, np.float32))
    assert all(p.grad is None for p in gen.params.values())
    assert any(p.grad is not None for p in disc.params.values())
    # train_step refuses to continue if the fake maps were not detached
    detach = Tensor.detach
    try:
        Tensor.detach = lambda self: self
        with pytest.raises(RuntimeError, match="leaked"):
            train_step(state, frames, prev, target, spherical_weights(32, 64), state.config.loss_config())
    finally:
        Tensor.detach = detach


def test_debug_mode_checks_labels(tiny_dataset):
    _, seqs = tiny_dataset
    state = train(small_config(max_steps=2, debug=True), seqs)
    assert state.step == 2


def test_nan_loss_names_term(tiny_dataset):
    _, seqs = tiny_dataset
    state = init_state(small_config())
    seq = seqs[0]
    frames = np.stack(seq.frames[5:7])
    prev = np.stack(seq.saliency[0:2])
    target = np.stack(seq.saliency[5:7]).copy()
    target[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError, match="cc_loss"):
        train_step(state, frames, prev, target, spherical_weights(32, 64), state.config.loss_config())


def test_no_pairs_is_data_error(tiny_dataset):
    _, seqs = tiny_dataset
    with pytest.raises(DataError):
        train(small_config(k=20), seqs)


def test_same_seed_same_losses(tiny_dataset):
    _, seqs = tiny_dataset
    a = train(small_config(max_steps=3), seqs).history
    b = train(small_config(max_steps=3), seqs).history
    assert a == b
    c = train(small_config(max_steps=3, seed=4), seqs).history
    assert a != c


def test_resume_is_bit_identical(tiny_dataset, tmp_path):
    _, seqs = tiny_dataset
    cfg = small_config(max_steps=5, checkpoint_every=2, epochs=3)
    full = train(cfg, seqs, out_dir=tmp_path / "full")
    resumed = load_checkpoint(tmp_path / "full" / "checkpoints" / "step_000002")
    assert resumed.step == 2
    resumed = train(cfg, seqs, out_dir=tmp_path / "resumed", state=resumed)
    assert resumed.history == full.history[2:]
    for net_a, net_b in ((full.generator, resumed.generator), (full.discriminator, resumed.discriminator)):
        for k in net_a.params:
            assert np.array_equal(net_a.params[k].data, net_b.params[k].data), k
        for k in net_a.buffers:
            assert np.array_equal(net_a.buffers[k], net_b.buffers[k]), k


def test_checkpoint_layout(tmp_path):
    state = init_state(small_config())
    save_checkpoint(state, tmp_path / "ck")
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    blob = (tmp_path / "ck" / "tensors.bin").read_bytes()
    assert manifest["format_version"] == 1 and manifest["dtype"] == "float32-le"
    assert sum(e["nbytes"] for e in manifest["tensors"]) == len(blob)
    names = {e["name"] for e in manifest["tensors"]}
    assert "gen.param.enc1.weight" in names and "disc.adam_v.fc.weight" in names
    first = manifest["tensors"][0]
    values = np.frombuffer(blob, "<f4", count=first["nbytes"] // 4).reshape(first["shape"])
    np.testing.assert_array_equal(values, state.generator.params["enc1.weight"].data)
    back = load_checkpoint(tmp_path / "ck")
    assert back.config == state.config


def test_training_log_written(tiny_dataset, tmp_path):
    _, seqs = tiny_dataset
    train(small_config(max_steps=2), seqs, out_dir=tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    assert [r["step"] for r in recs] == [1, 2]
    assert {"cc_loss", "kl_loss", "smse_loss", "g_bce_loss", "total", "d_loss", "d_real", "d_fake"} <= set(recs[0])
    assert (tmp_path / "checkpoints" / "last" / "manifest.json").exists()
