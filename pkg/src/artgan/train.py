"""Training loop, run configuration and metrics log."""
from __future__ import annotations

import dataclasses
import logging
import math
import shutil
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import LabeledImageSet, parse_dataset_spec, split_train_test
from .losses import loss_adv, loss_d, loss_g, loss_l2
from .model import ArtGAN, ModelConfig, build, one_hot, parse_width
from .optim import RMSProp, lr_at_epoch
from .tensor import Rng, sigmoid

log = logging.getLogger(__name__)


class ConfigFileError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    d: int = 100
    width_mult: str = "1"
    base_lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    lambda_rec: float = 1.0
    # scales both adversarial losses (L_D and L_adv); 0 leaves only reconstruction
    adv_weight: float = 1.0
    lr_drop_epoch: int = 80
    lr_drop_factor: float = 10.0
    leaky_alpha: float = 0.2
    dataset: str = "synth:K=3,per_class=500,seed=0"
    test_frac: float = 0.3
    split_seed: int = 0
    out_dir: str = "runs/artgan"
    log_every: int = 10
    keep_checkpoints: bool = False
    record_wall_time: bool = False
    resume: str = ""

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batchnorm needs two samples)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        parse_width(self.width_mult)

    def model_config(self, K) -> ModelConfig:
        return ModelConfig(K=K, d=self.d, width_mult=self.width_mult, leaky_alpha=self.leaky_alpha)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # -- `key = value` files -------------------------------------------------

    def dumps(self) -> str:
        lines = ["# ArtGAN training configuration"]
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, overrides: dict[str, str] | None = None) -> "TrainConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ConfigFileError(f"line {lineno}: expected 'key = value', got {raw!r}")
            values[key.strip()] = value.strip()
        values.update(overrides or {})
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in types:
                raise ConfigFileError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                if kind == "bool":
                    if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(value)
                    kwargs[key] = value.lower() in ("true", "1", "yes")
                elif kind == "int":
                    kwargs[key] = int(value)
                elif kind == "float":
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = value
            except ValueError:
                raise ConfigFileError(f"bad value for {key}: {value!r}") from None
        try:
            return cls(**kwargs)
        except ValueError as e:
            raise ConfigFileError(str(e)) from None

    @classmethod
    def load(cls, path, overrides=None):
        return cls.loads(Path(path).read_text(encoding="utf-8"), overrides)


@dataclass
class StepMetrics:
    epoch: int
    step: int
    loss_d: float
    loss_adv: float
    loss_l2: float
    loss_g: float
    d_real_acc: float
    d_fake_rate: float
    wall_time: float

    HEADER = "#" + "\t".join(["epoch", "step", "loss_d", "loss_adv", "loss_l2", "loss_g",
                              "d_real_acc", "d_fake_rate", "wall_time"])

    def to_line(self):
        return "\t".join(repr(getattr(self, f.name)) for f in fields(self))

    @classmethod
    def from_line(cls, line):
        parts = line.rstrip("\n").split("\t")
        fs = fields(cls)
        if len(parts) != len(fs):
            raise ValueError(f"expected {len(fs)} fields, got {len(parts)}")
        return cls(*(int(p) if f.type == "int" else float(p) for f, p in zip(fs, parts)))


def read_metrics(path) -> list[StepMetrics]:
    with open(path, encoding="utf-8") as f:
        return [StepMetrics.from_line(line) for line in f if line.strip() and not line.startswith("#")]


class Trainer:
    """Model, both optimizers, the random stream and the epoch/step counters."""

    def __init__(self, model: ArtGAN, config: TrainConfig, rng: Rng):
        self.model, self.config, self.rng = model, config, rng
        self.opt_G = RMSProp(model.theta_G, config.base_lr, config.rho, config.eps)
        self.opt_D = RMSProp(model.theta_D, config.base_lr, config.rho, config.eps)
        self.epoch = 0
        self.step = 0

    @classmethod
    def create(cls, config: TrainConfig, K: int) -> "Trainer":
        rng = Rng(config.seed)
        model = build(config.model_config(K), rng)
        return cls(model, config, rng)

    def set_lr(self, lr):
        self.opt_G.lr = self.opt_D.lr = lr

    # -- state capture -------------------------------------------------------

    def snapshot(self):
        m = self.model
        return (m.theta_G.snapshot(), m.theta_D.snapshot(),
                {n: b.copy() for n, b in m.buffers().items()},
                self.opt_G.snapshot(), self.opt_D.snapshot(), self.rng.get_state(),
                self.epoch, self.step)

    def restore(self, snap):
        tg, td, bufs, og, od, rng_state, self.epoch, self.step = snap
        self.model.theta_G.restore(tg)
        self.model.theta_D.restore(td)
        for n, b in self.model.buffers().items():
            np.copyto(b, bufs[n])
        self.opt_G.restore(og)
        self.opt_D.restore(od)
        self.rng.set_state(rng_state)

    def _tensor_sections(self):
        m = self.model
        return {
            "theta_G": {n: p for n, p, _ in m.theta_G.items()},
            "theta_D": {n: p for n, p, _ in m.theta_D.items()},
            "buffers": m.buffers(),
            "optim_G": self.opt_G.state_arrays(),
            "optim_D": self.opt_D.state_arrays(),
        }

    def to_checkpoint(self) -> ckpt.Checkpoint:
        o = lambda opt: (opt.steps, opt.lr, opt.rho, opt.eps)  # noqa: E731
        return ckpt.Checkpoint(self.model.config, self.epoch, self.step, self._tensor_sections(),
                               {"G": o(self.opt_G), "D": o(self.opt_D)}, self.rng.seed, self.rng.get_state())

    def load_checkpoint(self, ck: ckpt.Checkpoint):
        """Copy checkpoint state in; nothing is modified unless every tensor fits."""
        target = self._tensor_sections()
        ckpt.check_compatible(target, ck.tensors)
        for section, arrays in target.items():
            for name, arr in arrays.items():
                np.copyto(arr, ck.tensors[section][name])
        for which, opt in (("G", self.opt_G), ("D", self.opt_D)):
            opt.steps, opt.lr, opt.rho, opt.eps = ck.optim_scalars[which]
        self.rng = Rng(ck.rng_seed)
        self.rng.set_state(ck.rng_state)
        self.epoch, self.step = ck.epoch, ck.step

    @classmethod
    def from_checkpoint(cls, ck: ckpt.Checkpoint, config: TrainConfig | None = None) -> "Trainer":
        config = config or TrainConfig(d=ck.config.d, width_mult=str(ck.config.width_mult),
                                       leaky_alpha=ck.config.leaky_alpha)
        model = ArtGAN(config.model_config(ck.config.K))
        trainer = cls(model, config, Rng(ck.rng_seed))
        trainer.load_checkpoint(ck)
        return trainer


def _finite(*values):
    return all(math.isfinite(v) for v in values)


def discriminator_phase(trainer: Trainer, x_real, k_real):
    """Sample noise and labels, generate, update D, and leave the adversarial
    gradient for G accumulated in theta_G. Returns the quantities logged."""
    model, cfg, rng = trainer.model, trainer.config, trainer.rng
    n, K, d = x_real.shape[0], model.config.K, model.config.d
    z = rng.normal((n, d))
    k_hat = rng.integers(1, K + 1, size=n)
    zy = model.generator_input(z, one_hot(k_hat, K))

    model.theta_D.zero_grads()
    model.theta_G.zero_grads()
    real_logits, c_real = model.D.forward(x_real, "train")
    x_fake, c_gen = model.G.forward(zy, "train")
    fake_logits, c_fake = model.D.forward(x_fake, "train")

    l_d, g_real, g_fake, _, _ = loss_d(real_logits, k_real, fake_logits)
    l_adv, g_adv = loss_adv(fake_logits, k_hat)
    if not _finite(l_d, l_adv):
        raise NonFiniteLossError(f"non-finite loss at step {trainer.step}: L_D={l_d}, L_adv={l_adv}")

    # adversarial gradient for G, through D as it stood when the fake logits were computed;
    # D's own parameter gradients are not touched by this path
    dx_fake = model.D.backward(cfg.adv_weight * g_adv, c_fake, param_grads=False)
    model.G.backward(dx_fake, c_gen)

    # D update; x_fake is a constant here
    model.D.backward(cfg.adv_weight * g_real, c_real)
    model.D.backward(cfg.adv_weight * g_fake, c_fake)
    trainer.opt_D.step()

    acc = float(np.mean(np.argmax(real_logits[:, :K], axis=1) + 1 == k_real))
    fake_rate = float(np.mean(sigmoid(fake_logits[:, K]) > 0.5))
    return l_d, l_adv, acc, fake_rate


def generator_phase(trainer: Trainer, x_real):
    """Reconstruction path and G update. Enc runs forward only, so the L2 loss
    never reaches theta_D. Batchnorm uses batch statistics here without
    touching the running averages. Returns L_L2."""
    model, cfg = trainer.model, trainer.config
    z, _ = model.D.enc.forward(x_real, "batch")
    x_rec, c_dec = model.G.dec.forward(z, "batch")
    l_l2, g_l2 = loss_l2(x_rec, x_real)
    if not _finite(l_l2):
        raise NonFiniteLossError(f"non-finite loss at step {trainer.step}: L_L2={l_l2}")
    model.G.dec.backward(cfg.lambda_rec * g_l2, c_dec)
    trainer.opt_G.step()
    return l_l2


def train_step(trainer: Trainer, x_real, k_real) -> StepMetrics:
    """One D update followed by one G update on a minibatch.

    On a non-finite loss or gradient every piece of state is rolled back to
    its pre-step value and the error is re-raised.
    """
    t0 = time.perf_counter()
    snap = trainer.snapshot()
    try:
        l_d, l_adv, acc, fake_rate = discriminator_phase(trainer, x_real, k_real)
        l_l2 = generator_phase(trainer, x_real)
    except FloatingPointError as e:
        trainer.restore(snap)
        if isinstance(e, NonFiniteLossError):
            raise
        raise NonFiniteLossError(f"step {trainer.step + 1}: {e}") from e
    trainer.step += 1
    wall = time.perf_counter() - t0 if trainer.config.record_wall_time else 0.0
    return StepMetrics(trainer.epoch, trainer.step, l_d, l_adv, l_l2,
                       loss_g(l_adv, l_l2, trainer.config.lambda_rec), acc, fake_rate, wall)


def prepare_dataset(config: TrainConfig) -> tuple[LabeledImageSet, LabeledImageSet]:
    full = parse_dataset_spec(config.dataset)
    return split_train_test(full, config.test_frac, config.split_seed)


def _check_writable(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_probe"
    probe.write_bytes(b"")
    probe.unlink()


def train(config: TrainConfig, dataset: LabeledImageSet | None = None, progress=None) -> Trainer:
    """Run (or resume) training; writes checkpoints and the metrics log under ``config.out_dir``.

    Each epoch reshuffles with the run's random stream and drops the final
    partial batch. A checkpoint is written after every epoch.
    """
    out = Path(config.out_dir)
    _check_writable(out)
    if dataset is None:
        dataset, _ = prepare_dataset(config)
    if len(dataset) < config.batch_size:
        raise ValueError(f"dataset has {len(dataset)} images, fewer than one batch of {config.batch_size}")

    if config.resume:
        trainer = Trainer.from_checkpoint(ckpt.load(config.resume), config)
        if trainer.model.config.K != dataset.K:
            raise ValueError(f"checkpoint has K={trainer.model.config.K}, dataset has K={dataset.K}")
    else:
        trainer = Trainer.create(config, dataset.K)

    (out / "config.txt").write_text(config.dumps(), encoding="utf-8")
    metrics_path = out / "metrics.tsv"
    fresh = not (config.resume and metrics_path.exists())
    with open(metrics_path, "w" if fresh else "a", encoding="utf-8") as mlog:
        if fresh:
            mlog.write(StepMetrics.HEADER + "\n")
        n = config.batch_size
        steps_per_epoch = len(dataset) // n
        while trainer.epoch < config.epochs:
            trainer.set_lr(lr_at_epoch(trainer.epoch, config.base_lr, config.lr_drop_epoch, config.lr_drop_factor))
            order = trainer.rng.permutation(len(dataset))
            for b in range(steps_per_epoch):
                idx = order[b * n:(b + 1) * n]
                try:
                    m = train_step(trainer, dataset.images[idx], dataset.labels[idx])
                except FloatingPointError as e:
                    log.warning("step skipped and rolled back: %s", e)
                    continue
                mlog.write(m.to_line() + "\n")
                if progress is not None:
                    progress(m)
                if config.log_every and trainer.step % config.log_every == 0:
                    log.info("epoch %d step %d  L_D %.4f  L_adv %.4f  L_L2 %.4f  acc %.3f  fake %.3f",
                             m.epoch, m.step, m.loss_d, m.loss_adv, m.loss_l2, m.d_real_acc, m.d_fake_rate)
            trainer.epoch += 1
            mlog.flush()
            ckpt.save(out / "latest.ckpt", trainer.to_checkpoint())
            if config.keep_checkpoints:
                shutil.copyfile(out / "latest.ckpt", out / f"epoch_{trainer.epoch:04d}.ckpt")
    ckpt.save(out / "final.ckpt", trainer.to_checkpoint())
    return trainer

