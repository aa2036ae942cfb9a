"""Variance-preserving DDPM machinery: schedules, forward noising, CFG and
ancestral reverse sampling.

Timesteps are integers in [0, T]; t = 0 is the clean latent. All arrays are
float64. Latents may carry leading batch dimensions, the last two axes are
always (tokens, width).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from eimlab.denoisers.base import Denoiser
    from eimlab.text import TextEmbedding


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # index 1..T stored at positions 0..T-1
    alpha_bars: np.ndarray  # index 0..T, alpha_bars[0] == 1

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def signal(self, t: int) -> float:
        return math.sqrt(self.alpha_bars[t])

    def noise(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bars[t])

    def strength_to_timestep(self, fraction: float) -> int:
        """Map a forward strength in [0, 1] to t* = round(f*T), halves rounded up."""
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"forward fraction must lie in [0, 1], got {fraction}")
        return int(math.floor(fraction * self.T + 0.5))


def build_schedule(T: int = 50, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"step count must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"betas must satisfy 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    alpha_bars = np.empty(int(T) + 1)
    alpha_bars[0] = 1.0
    alpha_bars[1:] = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(betas, alpha_bars)


@dataclass
class LatentImage:
    tokens: np.ndarray
    timestep: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim < 2:
            raise ValueError("latent tokens must be at least 2-D (tokens, width)")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("latent contains non-finite entries")
        if self.timestep < 0:
            raise ValueError("timestep must be non-negative")

    @property
    def token_count(self) -> int:
        return self.tokens.shape[-2]

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    @property
    def is_clean(self) -> bool:
        return self.timestep == 0


@dataclass
class NoiseDraw:
    values: np.ndarray
    lineage: tuple = ()

    @classmethod
    def sample(cls, shape, root_seed: int, task_id: int) -> "NoiseDraw":
        rng = derive_stream(root_seed, task_id)
        return cls(rng.standard_normal(shape), (root_seed, task_id))


@dataclass(frozen=True)
class SamplerConfig:
    guidance_scale: float = 7.5
    total_steps: int = 50
    forward_fraction: float = 0.75
    deterministic: bool = False  # posterior-mean steps, no injected noise

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be nonnegative")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0.0 <= self.forward_fraction <= 1.0:
            raise ValueError("forward_fraction must be in [0, 1]")


def derive_stream(root_seed: int, task_id: int) -> np.random.Generator:
    """Independent generator for (root_seed, task_id); identical pairs give identical streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(root_seed), spawn_key=(int(task_id),))))


def forward_noise(z0: LatentImage, t: int, eps: NoiseDraw | np.ndarray, sched: NoiseSchedule) -> LatentImage:
    if z0.timestep != 0:
        raise ValueError("forward_noise expects a clean latent (timestep 0)")
    if not 0 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T}]")
    noise = eps.values if isinstance(eps, NoiseDraw) else np.asarray(eps, dtype=np.float64)
    if noise.shape != z0.tokens.shape:
        raise ValueError(f"noise shape {noise.shape} does not match latent shape {z0.tokens.shape}")
    if t == 0:
        return LatentImage(z0.tokens.copy(), 0)
    return LatentImage(sched.signal(t) * z0.tokens + sched.noise(t) * noise, t)


def cfg_combine(eps_cond, eps_uncond, w: float):
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + w * (eps_cond - eps_uncond)


def guided_eps(den: "Denoiser", z: np.ndarray, cond: "TextEmbedding", t: int, w: float) -> np.ndarray:
    eps_c = den.predict(z, cond, t)
    if w == 1.0:
        return eps_c
    eps_u = den.predict(z, den.vocab.null_embedding(cond.length), t)
    return cfg_combine(eps_c, eps_u, w)


def reverse_step_coefficients(sched: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """(x0 coefficient, z_t coefficient, posterior variance) of q(z_{t-1} | z_t, x0)."""
    ab_t, ab_prev = sched.alpha_bars[t], sched.alpha_bars[t - 1]
    beta = sched.beta(t)
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
    return c0, ct, var


def reverse_sample(
    z_t: LatentImage,
    cond: "TextEmbedding",
    den: "Denoiser",
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    on_step=None,
) -> LatentImage:
    """Ancestral sampling from z_t.timestep down to 0 with classifier-free guidance.

    ``on_step(t, z)`` is called before every denoiser evaluation (attention taps
    and traces hook in here).
    """
    if z_t.timestep <= 0:
        raise ValueError("reverse_sample needs a noised latent (timestep > 0)")
    if z_t.timestep > sched.T:
        raise ValueError("latent timestep exceeds schedule length")
    z = z_t.tokens.copy()
    for t in range(z_t.timestep, 0, -1):
        if on_step is not None:
            on_step(t, z)
        eps = guided_eps(den, z, cond, t, cfg.guidance_scale)
        x0 = (z - sched.noise(t) * eps) / sched.signal(t)
        c0, ct, var = reverse_step_coefficients(sched, t)
        z = c0 * x0 + ct * z
        if not cfg.deterministic and var > 0.0:
            z = z + math.sqrt(var) * rng.standard_normal(z.shape)
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite latent at reverse step t={t}")
    return LatentImage(z, 0)

