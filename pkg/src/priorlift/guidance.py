"""Diffusion guidance: noise schedule, oracle interface and distillation scores.

Images are ``(H, W, 3)`` tensors throughout. Every score function returns an
image-space term that the caller chains through the renderer with a
vector-Jacobian product; noise predictions are always treated as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError, NonFiniteLossError


class NoiseSchedule:
    """Linear-beta DDPM schedule indexed by integer timesteps ``1..num_steps``."""

    def __init__(self, num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        self.num_steps = int(num_steps)
        self.betas = np.linspace(beta_start, beta_end, self.num_steps, dtype=np.float64)
        self.alphas_cumprod = np.cumprod(1.0 - self.betas)
        self._alpha = np.sqrt(self.alphas_cumprod)
        self._sigma = np.sqrt(1.0 - self.alphas_cumprod)

    def _check(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.num_steps:
            raise InvalidInputError(f"timestep {t} outside [1, {self.num_steps}]")
        return t - 1

    def alpha(self, t: int) -> float:
        return float(self._alpha[self._check(t)])

    def sigma(self, t: int) -> float:
        return float(self._sigma[self._check(t)])

    def sample_timestep(self, rng: np.random.Generator, low: float = 0.02, high: float = 0.98) -> int:
        lo = max(1, int(round(low * self.num_steps)))
        hi = min(self.num_steps, int(round(high * self.num_steps)))
        return int(rng.integers(lo, hi + 1))


WEIGHTINGS: Dict[str, Callable[[NoiseSchedule, int], float]] = {
    "sigma2": lambda s, t: s.sigma(t) ** 2,
    "constant": lambda s, t: 1.0,
}


def timestep_weight(schedule: NoiseSchedule, t: int, weighting: str = "sigma2") -> float:
    try:
        return WEIGHTINGS[weighting](schedule, t)
    except KeyError:
        raise ConfigError(f"unknown weighting {weighting!r}; choose from {sorted(WEIGHTINGS)}") from None


def add_noise(x: torch.Tensor, t: int, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if x.shape != noise.shape:
        raise InvalidInputError(f"noise shape {tuple(noise.shape)} != image shape {tuple(x.shape)}")
    return schedule.alpha(t) * x + schedule.sigma(t) * noise


def apply_cfg(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise InvalidInputError("conditional and unconditional predictions differ in shape")
    return eps_uncond + scale * (eps_cond - eps_uncond)


@runtime_checkable
class GuidanceOracle(Protocol):
    """Anything that predicts the noise in a noised image.

    ``prompt=None`` requests the unconditional prediction. ``camera`` is the
    pose the image was rendered from; real diffusion backends ignore it, test
    oracles use it to look up their target.
    """

    supports_condition: bool
    supports_text: bool

    def predict_noise(self, x_t, t, prompt, condition=None, camera=None) -> torch.Tensor: ...


class GuidedOracle:
    """Wrap an oracle with classifier-free guidance at a fixed scale."""

    def __init__(self, inner: GuidanceOracle, scale: float = 7.5):
        self.inner = inner
        self.scale = float(scale)
        self.supports_condition = inner.supports_condition
        self.supports_text = inner.supports_text
        self.requires_condition = getattr(inner, "requires_condition", False)

    def predict_noise(self, x_t, t, prompt, condition=None, camera=None):
        cond = self.inner.predict_noise(x_t, t, prompt, condition=condition, camera=camera)
        if self.scale == 1.0 or prompt is None:
            return cond
        uncond = self.inner.predict_noise(x_t, t, None, condition=condition, camera=camera)
        return apply_cfg(cond, uncond, self.scale)


def _predict(oracle, x_t, t, prompt, condition, camera):
    with torch.no_grad():
        out = oracle.predict_noise(x_t, t, prompt, condition=condition, camera=camera)
    out = torch.as_tensor(out, dtype=x_t.dtype)
    if out.shape != x_t.shape:
        raise InvalidInputError(f"oracle returned shape {tuple(out.shape)} for input {tuple(x_t.shape)}")
    return out


def sds_score(
    oracle: GuidanceOracle,
    x: torch.Tensor,
    t: int,
    prompt: Optional[str],
    noise: torch.Tensor,
    schedule: NoiseSchedule,
    weighting: str = "sigma2",
    *,
    condition: Optional[torch.Tensor] = None,
    camera=None,
) -> torch.Tensor:
    """``w(t) * (eps_hat(x_t, t, y) - eps)`` for a rendered image ``x``."""
    if prompt is not None and not oracle.supports_text:
        raise ConfigError("oracle does not accept text prompts")
    x_t = add_noise(x.detach(), t, noise, schedule)
    eps_hat = _predict(oracle, x_t, t, prompt, condition, camera)
    return timestep_weight(schedule, t, weighting) * (eps_hat - noise)


def weighted_score(
    pretrained: GuidanceOracle,
    learned: Optional["LearnedScore"],
    x_t: torch.Tensor,
    edge_condition: Optional[torch.Tensor],
    normal_condition: Optional[torch.Tensor],
    t: int,
    prompt: Optional[str],
    noise: torch.Tensor,
    lam: float,
    *,
    camera=None,
) -> torch.Tensor:
    """``(eps_phi(x_t | edge) - eps) - lam * (eps_theta(x_t | normal) - eps)``.

    Unweighted: the caller multiplies by ``w(t)``. With ``lam == 0`` the
    learned estimator is never evaluated and the term is the conditioned SDS
    residual.
    """
    if not pretrained.supports_condition:
        raise ConfigError("pretrained oracle must accept a condition image")
    eps_phi = _predict(pretrained, x_t, t, prompt, edge_condition, camera)
    term = eps_phi - noise
    if lam == 0:
        return term
    if learned is None:
        raise ConfigError("lambda > 0 requires a learned score estimator")
    if normal_condition is None and learned.requires_condition:
        raise ConfigError("learned score estimator needs a normal-map condition")
    eps_theta = learned.predict_noise(x_t, t, prompt, condition=normal_condition)
    return term - lam * (eps_theta.to(x_t.dtype) - noise)


def vsd_score(
    pretrained: GuidanceOracle,
    learned: "LearnedScore",
    x_t: torch.Tensor,
    t: int,
    prompt: Optional[str],
    learned_condition: Optional[torch.Tensor],
    schedule: NoiseSchedule,
    weighting: str = "sigma2",
    *,
    pretrained_condition: Optional[torch.Tensor] = None,
    camera=None,
) -> torch.Tensor:
    """``w(t) * (eps_phi(x_t) - eps_theta(x_t | cond))``, the variational baseline."""
    eps_phi = _predict(pretrained, x_t, t, prompt, pretrained_condition, camera)
    eps_theta = learned.predict_noise(x_t, t, prompt, condition=learned_condition).to(x_t.dtype)
    return timestep_weight(schedule, t, weighting) * (eps_phi - eps_theta)


@dataclass(frozen=True)
class LambdaSchedule:
    start: float = 0.5
    end: float = 0.75
    ramp_iters: int = 5000

    def __post_init__(self):
        if self.ramp_iters < 1:
            raise ConfigError("ramp_iters must be >= 1")
        if self.end < self.start:
            raise ConfigError("lambda schedule must be non-decreasing")


def lambda_at(schedule: LambdaSchedule, iteration: int) -> float:
    if iteration < 0:
        raise InvalidInputError("iteration must be >= 0")
    if iteration >= schedule.ramp_iters:
        return schedule.end
    return schedule.start + (schedule.end - schedule.start) * iteration / schedule.ramp_iters


def timestep_embedding(t: torch.Tensor, dim: int, num_steps: int) -> torch.Tensor:
    """Sinusoidal embedding of ``t / num_steps``, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=torch.float32) * (-math.log(1000.0) / max(half - 1, 1)))
    phase = (t.float()[:, None] / num_steps) * 1000.0 * freqs[None]
    emb = torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class NoiseEstimator(nn.Module):
    """Three-layer conv net: (x_t, t, condition, prompt id) -> predicted noise.

    The timestep embedding and a learned per-prompt bias are broadcast as
    extra input channels next to the image and its condition.
    """

    def __init__(self, hidden: int = 32, t_dim: int = 8, cond_channels: int = 3,
                 max_prompts: int = 64, num_steps: int = 1000):
        super().__init__()
        self.t_dim = t_dim
        self.num_steps = num_steps
        self.cond_channels = cond_channels
        self.prompt_bias = nn.Embedding(max_prompts, 1)
        nn.init.zeros_(self.prompt_bias.weight)
        in_ch = 3 + cond_channels + t_dim + 1
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )

    def forward(self, x_t, t, condition, prompt_ids):
        b, _, h, w = x_t.shape
        emb = timestep_embedding(t, self.t_dim, self.num_steps)[:, :, None, None].expand(b, self.t_dim, h, w)
        bias = self.prompt_bias(prompt_ids)[:, :, None, None].expand(b, 1, h, w)
        if condition is None:
            condition = x_t.new_zeros(b, self.cond_channels, h, w)
        return self.net(torch.cat([x_t, condition, emb, bias], dim=1))


class LearnedScore:
    """Trainable noise estimator for the current scene, conditioned on an image.

    Prompts are interned to integer ids on first sight. Training goes through
    :func:`learned_score_update`, one Adam step per call.
    """

    supports_condition = True
    supports_text = True
    requires_condition = True

    def __init__(self, estimator: Optional[nn.Module] = None, lr: float = 1e-3, seed: int = 0,
                 num_steps: int = 1000, hidden: int = 32):
        if estimator is None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                estimator = NoiseEstimator(hidden=hidden, num_steps=num_steps)
        self.estimator = estimator
        self.optimizer = torch.optim.Adam(self.estimator.parameters(), lr=lr)
        self.prompt_ids: Dict[str, int] = {}

    def _prompt_id(self, prompt: Optional[str]) -> int:
        if prompt is None:
            return 0
        if prompt not in self.prompt_ids:
            self.prompt_ids[prompt] = len(self.prompt_ids) + 1
        return self.prompt_ids[prompt]

    def _forward(self, x_t, t, prompt, condition):
        dtype = next(self.estimator.parameters()).dtype
        xb = x_t.to(dtype).permute(2, 0, 1)[None]
        cb = None if condition is None else condition.to(dtype).permute(2, 0, 1)[None]
        tb = torch.tensor([int(t)])
        pid = torch.tensor([self._prompt_id(prompt)])
        return self.estimator(xb, tb, cb, pid)[0].permute(1, 2, 0)

    def predict_noise(self, x_t, t, prompt, condition=None, camera=None) -> torch.Tensor:
        with torch.no_grad():
            return self._forward(x_t, t, prompt, condition)

    def parameters_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.estimator.parameters()])


def learned_score_update(
    learned: LearnedScore,
    x: torch.Tensor,
    t: int,
    condition: Optional[torch.Tensor],
    prompt: Optional[str],
    noise: torch.Tensor,
    schedule: NoiseSchedule,
    lr: Optional[float] = None,
) -> float:
    """One optimiser step on ``mean((eps_theta(a_t x + s_t eps) - eps)^2)``; returns the loss."""
    if lr is not None:
        for group in learned.optimizer.param_groups:
            group["lr"] = lr
    x_t = add_noise(x.detach(), t, noise, schedule)
    pred = learned._forward(x_t, t, prompt, condition)
    loss = ((pred - noise.to(pred.dtype)) ** 2).mean()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"learned-score loss is {loss.item()} at t={t} "
            f"(|x|max={x.abs().max().item():.3g}, |eps|max={noise.abs().max().item():.3g})"
        )
    learned.optimizer.zero_grad()
    loss.backward()
    learned.optimizer.step()
    return float(loss.detach())
