"""Forward corruption, regression targets, loss weighting and their inverses.

Time is continuous, t in [0, 1], with t=0 the clean image and t=1 pure noise.
A noisy sample is ``x_t = a(t) * x0 + b(t) * eps`` and the network regresses
``r = c(t) * x0 + d(t) * eps``.

All functions are pure; coefficient evaluators accept python floats (and
return floats) or tensors (and return tensors of the same dtype).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import torch

from sprout.errors import ArgumentError, ConfigurationError, NumericError, ShapeError, SingularityError

SCHEDULE_KINDS = ("linear-interp", "cosine", "vp-ddpm")
PARAM_MODES = ("epsilon", "x0", "velocity")
WEIGHTING_KINDS = ("uniform", "snr")

# inversions divide by a(t) (or a+b); below this the error blow-up exceeds 1000x
SINGULARITY_CUTOFF = 1e-3

VP_STEPS = 1000
VP_BETA_START = 1e-4
VP_BETA_END = 0.02
SNR_CLIP = 5.0


def _as_tensor(t):
    if isinstance(t, torch.Tensor):
        return t, False
    return torch.as_tensor(t, dtype=torch.float64), True


def _out(value: torch.Tensor, scalar: bool):
    return value.item() if scalar else value


def _vp_log_alpha_bar() -> torch.Tensor:
    betas = torch.linspace(VP_BETA_START, VP_BETA_END, VP_STEPS, dtype=torch.float64)
    log_ab = torch.cumsum(torch.log1p(-betas), dim=0)
    return torch.cat([torch.zeros(1, dtype=torch.float64), log_ab])


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal/noise coefficients a(t), b(t) on t in [0, T], T = 1."""

    kind: str = "linear-interp"
    T: float = 1.0
    _table: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def a(self, t):
        tt, scalar = _as_tensor(t)
        if self.kind == "linear-interp":
            out = 1.0 - tt
        elif self.kind == "cosine":
            out = torch.cos(tt * (math.pi / 2))
        else:
            out = self._vp_signal(tt)
        return _out(out, scalar)

    def b(self, t):
        tt, scalar = _as_tensor(t)
        if self.kind == "linear-interp":
            out = tt.clone() if not scalar else tt
        elif self.kind == "cosine":
            out = torch.sin(tt * (math.pi / 2))
        else:
            sig = self._vp_signal(tt)
            out = torch.sqrt(torch.clamp(1.0 - sig * sig, min=0.0))
        return _out(out, scalar)

    def _vp_signal(self, tt: torch.Tensor) -> torch.Tensor:
        # sqrt(alpha_bar) with log(alpha_bar) linearly interpolated between the
        # 1000 discrete steps, then rescaled so the terminal signal is exactly 0
        table = self._table
        pos = torch.clamp(tt.to(torch.float64), 0.0, 1.0) * VP_STEPS
        lo = torch.clamp(torch.floor(pos).long(), max=VP_STEPS - 1)
        frac = pos - lo.to(torch.float64)
        log_ab = table[lo] * (1.0 - frac) + table[lo + 1] * frac
        sig = torch.exp(0.5 * log_ab)
        sig_end = math.exp(0.5 * table[-1].item())
        out = (sig - sig_end) / (1.0 - sig_end)
        return out.to(tt.dtype) if tt.is_floating_point() else out


def make_schedule(kind: str = "linear-interp") -> NoiseSchedule:
    if kind not in SCHEDULE_KINDS:
        raise ConfigurationError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    table = _vp_log_alpha_bar() if kind == "vp-ddpm" else None
    return NoiseSchedule(kind=kind, _table=table)


_TARGET_COEFFS = {"epsilon": (0.0, 1.0), "x0": (1.0, 0.0), "velocity": (-1.0, 1.0)}


@dataclass(frozen=True)
class Parameterization:
    mode: str = "epsilon"

    def __post_init__(self):
        if self.mode not in PARAM_MODES:
            raise ConfigurationError(f"unknown parameterization {self.mode!r}; expected one of {PARAM_MODES}")

    def c(self, t=None) -> float:
        return _TARGET_COEFFS[self.mode][0]

    def d(self, t=None) -> float:
        return _TARGET_COEFFS[self.mode][1]


@dataclass(frozen=True)
class LossWeighting:
    """lambda(t): ``uniform`` is 1; ``snr`` is a(t)^2/b(t)^2 clipped at 5."""

    kind: str = "uniform"
    schedule: NoiseSchedule | None = None

    def __post_init__(self):
        if self.kind not in WEIGHTING_KINDS:
            raise ConfigurationError(f"unknown loss weighting {self.kind!r}; expected one of {WEIGHTING_KINDS}")

    def __call__(self, t):
        tt, scalar = _as_tensor(t)
        if self.kind == "uniform":
            return _out(torch.ones_like(tt), scalar)
        sched = self.schedule or make_schedule()
        a, b = sched.a(tt), sched.b(tt)
        snr = (a * a) / torch.clamp(b * b, min=1e-12)
        return _out(torch.clamp(snr, max=SNR_CLIP), scalar)


class NoisyBatch(NamedTuple):
    x0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    xt: torch.Tensor


def _broadcast_time(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return t.reshape(-1, *([1] * (like.dim() - 1))) if t.dim() else t


def _check_pair(x0, eps):
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 and eps shapes differ: {tuple(x0.shape)} vs {tuple(eps.shape)}")


def _check_times(t: torch.Tensor, batch: int | None):
    if t.dim() > 1:
        raise ShapeError(f"t must be a scalar or vector, got shape {tuple(t.shape)}")
    if t.dim() == 1 and batch is not None and t.shape[0] != batch:
        raise ShapeError(f"t has {t.shape[0]} entries for a batch of {batch}")
    if t.numel() and (torch.isnan(t).any() or (t < 0).any() or (t > 1).any()):
        raise ArgumentError("timesteps must lie in [0, 1]")


def _times(t, x: torch.Tensor) -> torch.Tensor:
    tt = torch.as_tensor(t, dtype=x.dtype if x.is_floating_point() else torch.float64)
    _check_times(tt, x.shape[0] if x.dim() else None)
    return tt


def forward_diffuse(x0, eps, t, sched: NoiseSchedule) -> NoisyBatch:
    x0, eps = torch.as_tensor(x0), torch.as_tensor(eps)
    _check_pair(x0, eps)
    tt = _times(t, x0)
    a = _broadcast_time(sched.a(tt), x0)
    b = _broadcast_time(sched.b(tt), x0)
    return NoisyBatch(x0, eps, tt, a * x0 + b * eps)


def regression_target(x0, eps, t, param: Parameterization) -> torch.Tensor:
    x0, eps = torch.as_tensor(x0), torch.as_tensor(eps)
    _check_pair(x0, eps)
    mode = param.mode
    if mode == "epsilon":
        return eps.clone()
    if mode == "x0":
        return x0.clone()
    return eps - x0


def recover_x0(xt, prediction, t, sched: NoiseSchedule, param: Parameterization) -> torch.Tensor:
    """Invert the forward process given a network prediction of the target."""
    xt, prediction = torch.as_tensor(xt), torch.as_tensor(prediction)
    _check_pair(xt, prediction)
    if param.mode == "x0":
        return prediction.clone()
    tt = _times(t, xt)
    a, b = sched.a(tt), sched.b(tt)
    denom = a if param.mode == "epsilon" else a + b
    small = torch.as_tensor(denom) < SINGULARITY_CUTOFF
    if small.any():
        bad = tt[small.nonzero()[0]] if tt.dim() else tt
        raise SingularityError(
            f"cannot recover x0 at t={float(bad):.6g}: signal coefficient below {SINGULARITY_CUTOFF}"
        )
    denom = _broadcast_time(denom, xt)
    b = _broadcast_time(b, xt)
    return (xt - b * prediction) / denom


def denoising_loss(prediction, r, t, w: LossWeighting | None = None) -> torch.Tensor:
    """Batch mean of lambda(t_i) * MSE(prediction_i, r_i)."""
    prediction, r = torch.as_tensor(prediction), torch.as_tensor(r)
    if prediction.shape != r.shape:
        raise ShapeError(f"prediction and target shapes differ: {tuple(prediction.shape)} vs {tuple(r.shape)}")
    if not (torch.isfinite(prediction).all() and torch.isfinite(r).all()):
        raise NumericError("non-finite values in prediction or target")
    w = w or LossWeighting()
    err = (prediction - r) ** 2
    if err.dim() == 0:
        per_sample = err.reshape(1)
    else:
        per_sample = err.reshape(err.shape[0], -1).mean(dim=1)
    tt = torch.as_tensor(t, dtype=per_sample.dtype)
    lam = w(tt).to(per_sample.dtype)
    return (lam * per_sample).mean()


def sample_timesteps(batch_size: int, rng=0, dtype=torch.float32) -> torch.Tensor:
    """i.i.d. U[0, 1) times; ``rng`` is an int seed or a ``torch.Generator``."""
    if batch_size < 1:
        raise ArgumentError("batch_size must be >= 1")
    gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(int(rng))
    return torch.rand(batch_size, generator=gen, dtype=dtype)
