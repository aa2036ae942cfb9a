"""Closed-form Gaussian-factor denoiser.

The clean latent is z0 = base + A f + r where f holds one coordinate per
semantic factor and r lives in the orthogonal complement of A's columns.
A text condition pins factor means (small variance); factors the prompt
leaves unspecified keep a broad prior. Because the prior is Gaussian, the
posterior of z0 given z_t and hence the optimal epsilon are exact.

Condition readout is linear in the text embedding: every row is expanded
in the vocabulary's dual basis, so an interpolated row reads out the
interpolated factor target. Rows whose norm leaves the unit ball (far
beyond any real token) progressively lose control over all factors,
which is how the model degrades under over-large edit degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from eimlab.diffusion import NoiseSchedule
from eimlab.scenes import FACTORS, LEVELS, render_coords
from eimlab.text import SemanticVocabulary, TextEmbedding


@dataclass
class GaussianFactorModel:
    vocab: SemanticVocabulary
    loadings: np.ndarray  # D x m, orthonormal columns
    base: np.ndarray  # D
    mixing: np.ndarray  # m x m
    token_count: int = 16
    width: int = 32
    factor_names: tuple[str, ...] = FACTORS
    levels: dict = field(default_factory=lambda: dict(LEVELS))
    sigma2_cond: float = 0.01
    sigma2_free: float = 1.0
    sigma2_residual: float = 0.01
    free_mean: float = 0.5
    capacity_decay: float = 0.1
    schedule: NoiseSchedule | None = None

    def __post_init__(self):
        for name in ("sigma2_cond", "sigma2_free", "sigma2_residual"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive (singular prior covariance)")
        if not self.sigma2_cond < self.sigma2_free:
            raise ValueError("conditioned variance must be smaller than the free variance")
        D, m = self.loadings.shape
        if D != self.token_count * self.width or m != len(self.factor_names):
            raise ValueError("loading matrix shape disagrees with token_count*width and factor count")
        if self.vocab.width != self.width:
            raise ValueError("vocabulary width must equal the latent width")
        self._dual = np.linalg.pinv(self.vocab.table)  # d x K
        K = len(self.vocab.tokens)
        self._level_weights = np.zeros((K, m))  # token -> target coordinate contribution
        self._presence = np.zeros((K, m))
        for (attr, value), level in self.levels.items():
            if attr in self.factor_names:
                j = self.factor_names.index(attr)
                k = self.vocab.index((attr, value))
                self._level_weights[k, j] = level
                self._presence[k, j] = 1.0

    @property
    def factor_count(self) -> int:
        return self.loadings.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.loadings.shape[0]

    # -- condition readout ------------------------------------------------

    def condition(self, cond: TextEmbedding) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(factor means, factor variances, conditioned mask) for a prompt."""
        coeff = cond.tokens @ self._dual  # l x K
        presence = (coeff @ self._presence).sum(axis=0)
        targets = (coeff @ self._level_weights).sum(axis=0)
        on = presence > 0.5
        raw = np.where(on, targets / np.where(on, presence, 1.0), self.free_mean)
        means = self.free_mean + self.mixing @ (raw - self.free_mean)
        excess = np.maximum(np.linalg.norm(cond.tokens, axis=1) - 1.0 - 1e-9, 0.0)
        lost = 1.0 - math.exp(-self.capacity_decay * float(np.sum(excess**2)))
        cond_var = self.sigma2_cond + (self.sigma2_free - self.sigma2_cond) * lost
        var = np.where(on, cond_var, self.sigma2_free)
        return means, var, on

    def prior_mean(self, cond: TextEmbedding) -> np.ndarray:
        means, _, _ = self.condition(cond)
        return self.base + self.loadings @ means

    # -- latent <-> factors -------------------------------------------------

    def encode(self, coords) -> np.ndarray:
        z = self.base + self.loadings @ np.asarray(coords, dtype=np.float64)
        return z.reshape(self.token_count, self.width)

    def factors(self, z: np.ndarray) -> np.ndarray:
        flat = np.asarray(z).reshape(*np.shape(z)[:-2], self.latent_dim)
        return (flat - self.base) @ self.loadings

    def render(self, z: np.ndarray) -> np.ndarray:
        return render_coords(self.factors(z))[0]

    # codec used by the editing pipeline
    def encode_scene(self, scene) -> np.ndarray:
        return self.encode(scene.factors.coords())

    def decode(self, z: np.ndarray) -> np.ndarray:
        return self.render(z)

    def read_factors(self, z: np.ndarray) -> np.ndarray:
        return self.factors(z)

    # -- denoiser contract --------------------------------------------------

    def predict(self, z_t: np.ndarray, cond: TextEmbedding, t: int, sched: NoiseSchedule | None = None) -> np.ndarray:
        return analytic_eps(self, z_t, cond, t, sched or self.schedule)


def _gains(var: np.ndarray, a: float, b: float) -> np.ndarray:
    return a * var / (a * a * var + b * b)


def analytic_posterior(model: GaussianFactorModel, z_t, cond: TextEmbedding, t: int, sched: NoiseSchedule):
    """Exact E[z0 | z_t, cond] (flattened, shape (..., D)) and the posterior
    variances: one per factor plus the shared complement variance last."""
    z = np.asarray(z_t, dtype=np.float64)
    flat = z.reshape(*z.shape[:-2], model.latent_dim)
    means, var, _ = model.condition(cond)
    m_c = model.base + model.loadings @ means
    a, b = sched.signal(t), sched.noise(t)
    k = _gains(var, a, b)
    k_res = _gains(np.array(model.sigma2_residual), a, b)
    r = flat - a * m_c
    u = r @ model.loadings
    resid = r - u @ model.loadings.T
    mean = m_c + (u * k) @ model.loadings.T + k_res * resid
    all_var = np.append(var, model.sigma2_residual)
    post_var = all_var * b * b / (a * a * all_var + b * b)
    return mean, post_var


def analytic_eps(model: GaussianFactorModel, z_t, cond: TextEmbedding, t: int, sched: NoiseSchedule) -> np.ndarray:
    if t < 1:
        raise ValueError("epsilon is undefined at t = 0")
    z = np.asarray(z_t, dtype=np.float64)
    mean, _ = analytic_posterior(model, z, cond, t, sched)
    eps = (z.reshape(mean.shape) - sched.signal(t) * mean) / sched.noise(t)
    return eps.reshape(z.shape)


def _entangled_mixing(m: int, rng: np.random.Generator, magnitude: float) -> np.ndarray:
    signs = rng.choice([-1.0, 1.0], size=(m, m))
    M = magnitude * signs
    np.fill_diagonal(M, 1.0)
    return M


def gaussian_factor_model(
    vocab: SemanticVocabulary,
    sched: NoiseSchedule,
    variant: str = "disentangled",
    token_count: int = 16,
    seed: int = 0,
    entanglement: float = 0.35,
    **kwargs,
) -> GaussianFactorModel:
    if variant not in ("disentangled", "entangled"):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "entangled" and entanglement < 0.3:
        raise ValueError("entangled variant needs off-diagonal mixing of at least 0.3")
    width = vocab.width
    factor_names = kwargs.pop("factor_names", FACTORS)
    m = len(factor_names)
    rng = np.random.default_rng(seed)
    D = token_count * width
    q, _ = np.linalg.qr(rng.standard_normal((D, m)))
    base = 0.1 * rng.standard_normal(D)
    mixing = np.eye(m) if variant == "disentangled" else _entangled_mixing(m, rng, entanglement)
    return GaussianFactorModel(
        vocab, q, base, mixing, token_count=token_count, width=width,
        factor_names=tuple(factor_names), schedule=sched, **kwargs,
    )
