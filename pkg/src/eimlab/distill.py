"""SDS / DDS / HSDS gradient operators and the iterative image-direction search.

None of these operators differentiate through the denoiser: every gradient
is a difference of epsilon predictions, and the latent being optimised is
its own render (dz/dtheta = I). All predictions inside one gradient share
the same timestep and noise draw.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from eimlab.denoisers.base import Denoiser
from eimlab.diffusion import LatentImage, NoiseDraw, NoiseSchedule, forward_noise
from eimlab.text import EditDirection, TextEmbedding


class DistillationError(FloatingPointError):
    def __init__(self, message: str, trace: "DistillTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class HSDSConfig:
    lam: float = 0.5
    eta_start: float = 0.1
    eta_end: float = 0.01
    iterations: int = 50
    # "ascent": z' <- z' + eta * dHSDS; "descent": z' <- z' - eta * dHSDS
    sign: str = "ascent"
    # "context": z_s is the full target prompt; "attribute": only the edited tokens
    z_s_mode: str = "context"
    snapshot_every: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.eta_start <= 0 or self.eta_end <= 0:
            raise ValueError("step sizes must be positive")
        if self.iterations < 0:
            raise ValueError("iteration count must be nonnegative")
        if self.sign not in ("ascent", "descent"):
            raise ValueError(f"unknown update sign {self.sign!r}")
        if self.z_s_mode not in ("context", "attribute"):
            raise ValueError(f"unknown z_s mode {self.z_s_mode!r}")

    def step_size(self, k: int) -> float:
        if self.iterations <= 1:
            return self.eta_start
        return self.eta_start + (self.eta_end - self.eta_start) * k / (self.iterations - 1)


@dataclass
class DistillTrace:
    grad_norms: list = field(default_factory=list)
    alignment: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.grad_norms)

    def rows(self):
        for k, (g, a, e) in enumerate(zip(self.grad_norms, self.alignment, self.step_sizes)):
            yield {"iteration": k, "grad_norm": g, "alignment": a, "eta": e}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["iteration", "grad_norm", "alignment", "eta"], lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _noise(eps) -> np.ndarray:
    return eps.values if isinstance(eps, NoiseDraw) else np.asarray(eps, dtype=np.float64)


def sds_grad(den: Denoiser, z: LatentImage, c: TextEmbedding, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    if t < 1:
        raise ValueError("score distillation needs t >= 1")
    z_t = forward_noise(z, t, eps, sched)
    return den.predict(z_t.tokens, c, t) - _noise(eps)


def dds_grad(den: Denoiser, z: LatentImage, c0: TextEmbedding, z_prime: LatentImage, c1: TextEmbedding,
             t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    if z.tokens.shape != z_prime.tokens.shape:
        raise ValueError("source and current latents differ in shape")
    if t < 1:
        raise ValueError("score distillation needs t >= 1")
    z_t = forward_noise(z, t, eps, sched)
    zp_t = forward_noise(z_prime, t, eps, sched)
    return den.predict(z_t.tokens, c0, t) - den.predict(zp_t.tokens, c1, t)


def hsds_grad(den: Denoiser, z_t: LatentImage, z_t_prime: LatentImage, c_tilde: TextEmbedding,
              z_s: TextEmbedding, lam: float) -> np.ndarray:
    """2 (eps(z', c~) - eps(z', z_s)) + 2 lam (eps(z_t, c~) - eps(z', c~))."""
    if z_t.timestep != z_t_prime.timestep:
        raise ValueError(f"timestep mismatch: {z_t.timestep} vs {z_t_prime.timestep}")
    if z_t.tokens.shape != z_t_prime.tokens.shape:
        raise ValueError("latent shapes differ")
    t = z_t.timestep
    eps_prime_tilde = den.predict(z_t_prime.tokens, c_tilde, t)
    eps_prime_s = den.predict(z_t_prime.tokens, z_s, t)
    eps_tilde = den.predict(z_t.tokens, c_tilde, t)
    return 2.0 * (eps_prime_tilde - eps_prime_s) + lam * 2.0 * (eps_tilde - eps_prime_tilde)


def hsds_appendix_grad(den: Denoiser, z: LatentImage, c_attr: TextEmbedding, c0: TextEmbedding,
                       z_prime: LatentImage, c1: TextEmbedding, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """DDS(z, c_attr; z', c0) - DDS(z, c1; z', c0)."""
    return (dds_grad(den, z, c_attr, z_prime, c0, t, eps, sched)
            - dds_grad(den, z, c1, z_prime, c0, t, eps, sched))


def identify_image_direction(den: Denoiser, z_t: LatentImage, c_tilde: TextEmbedding, z_s: TextEmbedding,
                             cfg: HSDSConfig, rng: np.random.Generator | None = None):
    """Iterate the HSDS update at the fixed timestep of ``z_t``.

    Returns the image-subspace direction n = z'_K - z_t and its trace. ``rng``
    is accepted for interface symmetry; the update itself draws no noise.
    """
    if z_t.timestep < 1:
        raise ValueError("the image direction is searched for a noised latent")
    sign = 1.0 if cfg.sign == "ascent" else -1.0
    trace = DistillTrace()
    zp = LatentImage(z_t.tokens.copy(), z_t.timestep)
    scale = np.sqrt(z_t.tokens.size)
    for k in range(cfg.iterations):
        g = hsds_grad(den, z_t, zp, c_tilde, z_s, cfg.lam)
        gap = den.predict(zp.tokens, c_tilde, z_t.timestep) - den.predict(zp.tokens, z_s, z_t.timestep)
        eta = cfg.step_size(k)
        trace.grad_norms.append(float(np.linalg.norm(g)))
        trace.alignment.append(float(np.linalg.norm(gap) / scale))
        trace.step_sizes.append(eta)
        if not np.all(np.isfinite(g)):
            raise DistillationError(f"non-finite HSDS gradient at iteration {k}", trace)
        zp = LatentImage(zp.tokens + sign * eta * g, z_t.timestep)
        if cfg.snapshot_every and k % cfg.snapshot_every == 0:
            trace.snapshots[k] = zp.tokens.copy()
    return EditDirection("image", zp.tokens - z_t.tokens, 1.0), trace
