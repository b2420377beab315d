"""Denoising pre-training loop, EMA tracking and the sqrt compute-budget rule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from fractions import Fraction
from numbers import Integral
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from sprout.checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint, save_checkpoint
from sprout.diffusion import (
    LossWeighting,
    Parameterization,
    denoising_loss,
    forward_diffuse,
    make_schedule,
    regression_target,
    sample_timesteps,
)
from sprout.errors import ArgumentError, ConfigurationError, NumericError
from sprout.imageio import atomic_write_text, load_image_tensor
from sprout.model import UDiTModel, build_model, resolve_config

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    model: str = "udit-nano"
    model_overrides: dict = field(default_factory=dict, hash=False)
    schedule: str = "linear-interp"
    parameterization: str = "epsilon"
    weighting: str = "uniform"
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    steps: int = 1000
    ema_decay: float = 0.999
    seed: int = 0
    checkpoint_interval: int = 500
    image_size: int = 64

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.steps < 0 or self.checkpoint_interval < 1:
            raise ConfigurationError("batch_size, lr and checkpoint_interval must be positive and steps >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigurationError("ema_decay must lie in [0, 1)")
        make_schedule(self.schedule)
        Parameterization(self.parameterization)
        LossWeighting(self.weighting)

    def model_config(self):
        if self.model_overrides:
            return resolve_config({"preset": self.model, **self.model_overrides})
        return resolve_config(self.model)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "model_overrides":
                for k, v in self.model_overrides.items():
                    v = ",".join(str(c) for c in v) if isinstance(v, (tuple, list)) else v
                    lines.append(f"model.{k} = {v}")
            else:
                lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment; ``model.<field>`` overrides the preset."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values, overrides = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        if key.startswith("model."):
            sub = key[len("model.") :]
            if sub == "stem_channels":
                try:
                    overrides[sub] = tuple(int(v) for v in raw.strip("()").split(",") if v.strip())
                except ValueError:
                    raise ConfigurationError(f"config line {lineno}: bad channel list {raw!r}") from None
            else:
                overrides[sub] = _scalar(raw)
            continue
        if key not in types or key == "model_overrides":
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = {"int": int, "float": float}.get(types[key], str)(raw)
        except ValueError:
            raise ConfigurationError(f"config line {lineno}: bad value for {key}: {raw!r}") from None
    cfg = TrainConfig(**values, model_overrides=overrides)
    cfg.model_config()
    return cfg


def _scalar(raw: str):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


class EMA:
    """Exponential moving average of a module's floating-point state."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module):
        for k, v in model.state_dict().items():
            if v.is_floating_point():
                self.shadow[k].mul_(self.decay).add_(v, alpha=1.0 - self.decay)
            else:
                self.shadow[k].copy_(v)

    def state_dict(self):
        return self.shadow


class StepResult(NamedTuple):
    loss: float
    t_mean: float
    t_min: float
    t_max: float
    grad_norm: float


def step_generator(seed: int, step: int) -> torch.Generator:
    # stateless per-step stream so a resumed run draws the same noise
    state = np.random.SeedSequence([int(seed), int(step)]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch), 0x5EED]).permutation(n)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for 0-based ``step`` from a stream of seeded epoch permutations."""
    start = step * batch_size
    out = np.empty(batch_size, dtype=np.int64)
    cache = {}
    for j in range(batch_size):
        epoch, pos = divmod(start + j, n)
        if epoch not in cache:
            cache[epoch] = epoch_permutation(n, seed, epoch)
        out[j] = cache[epoch][pos]
    return out


class Trainer:
    def __init__(self, model: UDiTModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.schedule = make_schedule(config.schedule)
        self.param = Parameterization(config.parameterization)
        self.weighting = LossWeighting(config.weighting, self.schedule)
        self.optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=config.lr,
            betas=(config.beta1, config.beta2),
            weight_decay=config.weight_decay,
        )
        self.ema = EMA(model, config.ema_decay)
        self.step = 0

    def train_step(self, batch: torch.Tensor, step: int | None = None) -> StepResult:
        step = self.step if step is None else step
        gen = step_generator(self.config.seed, step)
        batch = batch.to(next(self.model.parameters()).dtype)
        self.model.train()
        t = sample_timesteps(batch.shape[0], gen, dtype=batch.dtype)
        eps = torch.randn(batch.shape, generator=gen, dtype=batch.dtype)
        noisy = forward_diffuse(batch, eps, t, self.schedule)
        target = regression_target(batch, eps, t, self.param)
        pred = self.model(noisy.xt, t)
        loss = denoising_loss(pred, target, t, self.weighting) if torch.isfinite(pred).all() else None
        if loss is not None:
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
        grads = [p.grad.detach().norm() for p in self.model.parameters() if p.grad is not None]
        grad_norm = float(torch.stack(grads).norm()) if grads else float("nan")
        loss_value = float(loss.detach()) if loss is not None else float("nan")
        if not math.isfinite(loss_value) or not math.isfinite(grad_norm):
            raise NumericError(
                f"non-finite loss at step {step} (t in [{float(t.min()):.4f}, {float(t.max()):.4f}], "
                f"grad-norm {grad_norm:.4g})"
            )
        self.optimizer.step()
        self.ema.update(self.model)
        self.step = step + 1
        self.model.eval()
        return StepResult(loss_value, float(t.mean()), float(t.min()), float(t.max()), grad_norm)

    # -- optimizer state <-> flat tables -------------------------------------
    def optimizer_table(self) -> dict[str, np.ndarray]:
        names = {id(p): n for n, p in self.model.named_parameters()}
        table = {}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                st = self.optimizer.state.get(p)
                if not st:
                    continue
                name = names[id(p)]
                for key in ("exp_avg", "exp_avg_sq"):
                    table[f"{name}/{key}"] = st[key].detach().to(torch.float32).numpy().copy()
                table[f"{name}/step"] = np.asarray(float(st["step"]), dtype=np.float32)
        return table

    def load_optimizer_table(self, table: dict[str, np.ndarray]):
        for name, p in self.model.named_parameters():
            if f"{name}/step" not in table:
                continue
            self.optimizer.state[p] = {
                "step": torch.tensor(float(table[f"{name}/step"]), dtype=torch.float32),
                "exp_avg": torch.from_numpy(table[f"{name}/exp_avg"].copy()).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(table[f"{name}/exp_avg_sq"].copy()).to(p.dtype),
            }

    def save(self, path) -> Checkpoint:
        return save_checkpoint(
            self.model,
            path,
            step=self.step,
            ema=self.ema,
            optimizer_state=self.optimizer_table(),
            train_text=self.config.to_text(),
        )

    @classmethod
    def resume(cls, path, config: TrainConfig) -> "Trainer":
        ckpt = load_checkpoint(path)
        model = model_from_checkpoint(ckpt)
        trainer = cls(model, config)
        if ckpt.ema:
            trainer.ema.shadow = {k: torch.from_numpy(v.copy()) for k, v in ckpt.ema.items()}
        trainer.load_optimizer_table(ckpt.optimizer)
        trainer.step = ckpt.step
        return trainer


def train_step(trainer: Trainer, batch: torch.Tensor, step: int | None = None) -> StepResult:
    return trainer.train_step(batch, step)


def format_log_line(step: int, result: StepResult) -> str:
    return f"{step}\t{result.loss!r}\t{result.t_mean!r}"


def saturation_warning(n_images: int, diversity_budget: int | None) -> str | None:
    """Message when the dataset outgrows a caller-supplied diversity budget."""
    if diversity_budget is None or n_images <= diversity_budget:
        return None
    return (
        f"dataset has {n_images} images, above the diversity budget of {diversity_budget}; "
        "extra homogeneous data tends to give diminishing returns"
    )


def train_loop(
    data,
    config: TrainConfig,
    out_path,
    resume=None,
    log_path=None,
    warn_saturation: int | None = None,
) -> tuple[Checkpoint, list[str]]:
    """Run ``config.steps`` total steps, checkpointing to ``out_path``.

    ``data`` is an image directory or an N x 3 x S x S tensor in [-1, 1].
    With ``resume`` the run continues from that checkpoint's step count;
    returned log lines cover only the steps run by this call. The loss log
    is rewritten atomically alongside every checkpoint.
    """
    images = data if isinstance(data, torch.Tensor) else load_image_tensor(data, size=config.image_size)
    n = images.shape[0]
    msg = saturation_warning(n, warn_saturation)
    if msg:
        log.warning(msg)
    if resume is not None:
        trainer = Trainer.resume(resume, config)
    else:
        trainer = Trainer(build_model(config.model_config(), seed=config.seed), config)
    prior = []
    if log_path and resume is not None and Path(log_path).exists():
        prior = Path(log_path).read_text(encoding="utf-8").splitlines()[: trainer.step]
    lines = []

    def checkpoint():
        ckpt = trainer.save(out_path)
        if log_path:
            atomic_write_text(log_path, "".join(ln + "\n" for ln in prior + lines))
        return ckpt

    while trainer.step < config.steps:
        idx = batch_indices(n, config.batch_size, trainer.step, config.seed)
        result = trainer.train_step(images[torch.from_numpy(idx)])
        lines.append(format_log_line(trainer.step, result))
        if trainer.step % config.checkpoint_interval == 0 and trainer.step < config.steps:
            checkpoint()
    ckpt = checkpoint()
    return ckpt, lines


def estimate_steps(n_ref, s_ref, n_target) -> int:
    """Steps for ``n_target`` images given ``s_ref`` steps measured at ``n_ref``.

    Steps grow with the square root of dataset size: 4x the data, 2x the
    steps. The result is rounded up; integer (and Fraction) inputs are
    handled in exact arithmetic.
    """
    for name, v in (("n_ref", n_ref), ("s_ref", s_ref), ("n_target", n_target)):
        if isinstance(v, bool) or not isinstance(v, (int, float, Fraction, np.integer, np.floating)):
            raise ArgumentError(f"{name} must be a number")
        if not v > 0 or (isinstance(v, float) and not math.isfinite(v)):
            raise ArgumentError(f"{name} must be positive and finite, got {v!r}")
    if all(isinstance(v, (Integral, Fraction)) for v in (n_ref, s_ref, n_target)):
        # smallest k with k^2 >= s_ref^2 * n_target / n_ref
        q = Fraction(s_ref) ** 2 * Fraction(n_target) / Fraction(n_ref)
        bound = math.ceil(q)
        k = math.isqrt(bound)
        return k if k * k >= bound else k + 1
    return math.ceil(s_ref * math.sqrt(n_target / n_ref))
