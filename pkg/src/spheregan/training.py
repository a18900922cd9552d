"""Alternating GAN training with Adam, seeded determinism and checkpoint/resume."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff
from .data import DataError, make_pairs
from .geometry import spherical_weights
from .losses import TERMS, LossConfig, discriminator_loss, generator_loss
from .model import ConfigError, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

# dotted config keys -> TrainConfig field
_SECTIONS = {
    "model": ("height", "width", "gen_channels", "disc_channels", "conv_mode", "dropout"),
    "train": ("k", "epochs", "batch_size", "lr_gen", "lr_disc", "beta1", "beta2", "adam_eps",
              "seed", "checkpoint_every", "max_steps", "data", "out", "debug"),
    "loss": ("terms", "eps"),
}
_DOTTED = {f"{sec}.{name}": name for sec, names in _SECTIONS.items() for name in names}
_FIELD_ALIAS = {"terms": "loss_terms", "eps": "loss_eps"}


@dataclass
class TrainConfig:
    height: int = 64
    width: int = 128
    gen_channels: tuple = (16, 32, 64, 128)
    disc_channels: tuple = (16, 32, 64, 64)
    conv_mode: str = "spherical"
    dropout: float = 0.5
    k: int = 5
    epochs: int = 20
    batch_size: int = 4
    lr_gen: float = 1e-4
    lr_disc: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    max_steps: int = 0
    data: str = ""
    out: str = ""
    debug: bool = False
    loss_terms: tuple = TERMS
    loss_eps: float = 1e-7

    def validate(self):
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        self.generator_config().validate()
        self.discriminator_config().validate()
        try:
            self.loss_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def generator_config(self):
        return GeneratorConfig(self.height, self.width, tuple(self.gen_channels), self.conv_mode)

    def discriminator_config(self):
        return DiscriminatorConfig(self.height, self.width, tuple(self.disc_channels), self.dropout)

    def loss_config(self):
        return LossConfig(terms=tuple(self.loss_terms), eps=self.loss_eps)

    def to_dict(self):
        """Flat dotted keys, e.g. ``{"train.lr_gen": 1e-4, ...}``."""
        out = {}
        for dotted, name in _DOTTED.items():
            value = getattr(self, _FIELD_ALIAS.get(name, name))
            out[dotted] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, d):
        """Build from dotted keys; nested sections and bare field names are accepted too."""
        flat = _flatten(d)
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in flat.items():
            name = _DOTTED.get(key, key)
            name = _FIELD_ALIAS.get(name, name) if key in _DOTTED else name
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(known[name], value)
        return cls(**kwargs)

    def with_overrides(self, overrides):
        """Apply ``key=value`` strings (values parsed as JSON when possible)."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            key = key.strip()
            if key not in _DOTTED and key not in {f.name for f in fields(self)}:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            d[key] = value
        return TrainConfig.from_dict(d)


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key in _SECTIONS:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _scalar(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _coerce(f, value):
    if isinstance(f.default, tuple):
        if isinstance(value, str):
            value = [_scalar(v.strip()) for v in value.split(",") if v.strip()]
        return tuple(value)
    if isinstance(f.default, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if isinstance(f.default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{f.name} must be an integer, got {value}")
        return int(value)
    if isinstance(f.default, float):
        return float(value)
    return value


def load_config(path, overrides=()):
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = TrainConfig.from_dict(raw).with_overrides(overrides)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# Adam


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update at step ``t`` (1-based); updates arrays in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
    return param, m, v


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params, grads):
        self.t += 1
        for k, p in params.items():
            adam_step(p.data, grads[k], self.m[k], self.v[k], self.t, self.lr, self.beta1, self.beta2, self.eps)


# --------------------------------------------------------------------------
# checkpoints


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    discriminator: Discriminator
    opt_gen: Adam
    opt_disc: Adam
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    batch_index: int = 0
    history: list = field(default_factory=list)


def init_state(config: TrainConfig):
    config.validate()
    init_seq, noise_seq = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    gen = Generator(config.generator_config(), init_rng)
    disc = Discriminator(config.discriminator_config(), init_rng)
    return TrainState(
        config, gen, disc,
        Adam(gen.params, config.lr_gen, config.beta1, config.beta2, config.adam_eps),
        Adam(disc.params, config.lr_disc, config.beta1, config.beta2, config.adam_eps),
        np.random.default_rng(noise_seq),
    )


def _state_arrays(state: TrainState):
    arrays = {}
    for tag, net, opt in (("gen", state.generator, state.opt_gen), ("disc", state.discriminator, state.opt_disc)):
        for k, p in net.params.items():
            arrays[f"{tag}.param.{k}"] = p.data
        for k, b in net.buffers.items():
            arrays[f"{tag}.buffer.{k}"] = b
        for k in net.params:
            arrays[f"{tag}.adam_m.{k}"] = opt.m[k]
            arrays[f"{tag}.adam_v.{k}"] = opt.v[k]
    return arrays


def save_checkpoint(state: TrainState, directory):
    """Write ``manifest.json`` plus one little-endian float32 blob ``tensors.bin``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    arrays = _state_arrays(state)
    with open(d / "tensors.bin", "wb") as f:
        for name, a in arrays.items():
            blob = np.ascontiguousarray(a, dtype="<f4").tobytes()
            f.write(blob)
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
            offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "batch_index": state.batch_index,
        "adam_steps": {"gen": state.opt_gen.t, "disc": state.opt_disc.t},
        "rng_state": state.rng.bit_generator.state,
        "dtype": "float32-le",
        "tensors": entries,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def load_checkpoint(directory) -> TrainState:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        blob = (d / "tensors.bin").read_bytes()
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"not a checkpoint directory: {d} ({exc.filename} missing)") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    state = init_state(TrainConfig.from_dict(manifest["config"]))
    arrays = _state_arrays(state)
    for e in manifest["tensors"]:
        if e["name"] not in arrays:
            raise ValueError(f"checkpoint tensor {e['name']} does not belong to this architecture")
        target = arrays[e["name"]]
        values = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"]).reshape(e["shape"])
        if values.shape != target.shape:
            raise ValueError(f"{e['name']}: checkpoint shape {values.shape} != model shape {target.shape}")
        target[...] = values
    state.step = manifest["step"]
    state.epoch = manifest["epoch"]
    state.batch_index = manifest["batch_index"]
    state.opt_gen.t = manifest["adam_steps"]["gen"]
    state.opt_disc.t = manifest["adam_steps"]["disc"]
    state.rng.bit_generator.state = manifest["rng_state"]
    return state


# --------------------------------------------------------------------------
# loop


def _stack(pairs, idx):
    frames = np.stack([pairs[i].frame for i in idx]).astype(np.float32)
    prev = np.stack([pairs[i].sal_prev for i in idx]).astype(np.float32)
    target = np.stack([pairs[i].sal_target for i in idx]).astype(np.float32)
    return frames, prev, target


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def _check_finite(step, values):
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingDivergedError(f"non-finite {name} ({v}) at step {step}")


def train_step(state: TrainState, frames, prev, target, weights, loss_cfg):
    """One generator update followed by one discriminator update; returns the log record."""
    gen, disc, rng = state.generator, state.discriminator, state.rng
    gen.zero_grad()
    disc.zero_grad()

    fake = gen(frames, prev, train=True)
    d_fake = disc(fake, rng, train=True)
    loss_g, parts = generator_loss(target, fake, d_fake, weights, loss_cfg)
    _check_finite(state.step, {k: v for k, v in parts.as_dict().items()})
    loss_g.backward()
    state.opt_gen.step(gen.params, gen.grads())

    gen.zero_grad()
    disc.zero_grad()
    d_real = disc(target, rng, train=True)
    d_fake_det = disc(fake.detach(), rng, train=True)
    loss_d, y_real, y_fake = discriminator_loss(d_real, d_fake_det, rng, return_labels=True)
    _check_finite(state.step, {"d_loss": float(loss_d.data)})
    loss_d.backward()
    if any(p.grad is not None for p in gen.params.values()):
        raise RuntimeError("discriminator update leaked gradients into the generator")
    if state.config.debug:
        assert (0.9 <= y_real).all() and (y_real <= 1.0).all(), y_real
        assert (0.0 <= y_fake).all() and (y_fake <= 0.1).all(), y_fake
    state.opt_disc.step(disc.params, disc.grads())
    disc.zero_grad()

    state.step += 1
    rec = {"step": state.step, "epoch": state.epoch}
    rec.update(parts.as_dict())
    rec["d_loss"] = float(loss_d.data)
    rec["d_real"] = float(np.mean(d_real.data))
    rec["d_fake"] = float(np.mean(d_fake_det.data))
    return rec


def build_pairs(sequences, k):
    pairs = [p for seq in sequences for p in make_pairs(seq, k)]
    if not pairs:
        raise DataError(f"no training pairs: every sequence is shorter than k + 1 = {k + 1} frames")
    return pairs


def train(config: TrainConfig, sequences, out_dir=None, state: TrainState | None = None, log_path=None):
    """Run (or resume) training; returns the final :class:`TrainState`.

    Writes ``train_log.jsonl`` and ``checkpoints/step_XXXXXX`` under ``out_dir``
    when it is given. ``config.max_steps`` (if > 0) caps the total step count.
    """
    state = state or init_state(config)
    config = state.config
    pairs = build_pairs(sequences, config.k)
    weights = spherical_weights(config.height, config.width)
    loss_cfg = config.loss_config()
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if log_path is None and out is not None:
        log_path = out / "train_log.jsonl"
    log_file = open(log_path, "a" if state.step else "w") if log_path else None

    prev_debug = autodiff.DEBUG_FINITE
    autodiff.DEBUG_FINITE = config.debug
    batches_per_epoch = math.ceil(len(pairs) / config.batch_size)
    try:
        while state.epoch < config.epochs:
            order = epoch_order(config.seed, state.epoch, len(pairs))
            while state.batch_index < batches_per_epoch:
                if config.max_steps and state.step >= config.max_steps:
                    break
                b = state.batch_index
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                frames, prev, target = _stack(pairs, idx)
                rec = train_step(state, frames, prev, target, weights, loss_cfg)
                state.batch_index += 1
                state.history.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
                if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                    save_checkpoint(state, out / "checkpoints" / f"step_{state.step:06d}")
            else:
                if state.history:
                    log.info("epoch %d done at step %d: L_G=%.4f L_D=%.4f", state.epoch, state.step,
                             state.history[-1]["total"], state.history[-1]["d_loss"])
                state.epoch += 1
                state.batch_index = 0
                continue
            break
    finally:
        autodiff.DEBUG_FINITE = prev_debug
        if log_file:
            log_file.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoints" / "last")
    return state
