"""Semantic loss: how far unconditioned factors wander after forward noising
and reverse sampling, plus an exact oracle for the analytic model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from eimlab.denoisers.analytic import GaussianFactorModel, _gains
from eimlab.diffusion import (
    LatentImage,
    NoiseSchedule,
    SamplerConfig,
    derive_stream,
    forward_noise,
    reverse_sample,
    reverse_step_coefficients,
)
from eimlab.text import TextEmbedding, encode_prompt


@dataclass
class SemanticLossRow:
    strength: float
    timestep: int
    mean: np.ndarray  # per factor
    std: np.ndarray  # per factor, across seeds


def _conditioning(scene, vocab, conditioned) -> TextEmbedding:
    """True prompt, null prompt, or the true prompt restricted to some attributes."""
    assign = dict(scene.assignment)
    if conditioned is True:
        keep = assign
    elif conditioned is False:
        keep = {}
    else:
        keep = {a: assign[a] for a in conditioned}
    return encode_prompt(vocab, vocab.prompt(keep))


def semantic_loss_sweep(scene, strengths, den, sched: NoiseSchedule, conditioned=True, seeds: int = 200,
                        root_seed: int = 0, sampler: SamplerConfig | None = None) -> list[SemanticLossRow]:
    """Across-seed spread of every recovered factor at each forward strength.

    ``conditioned`` is True (full true prompt), False (null prompt) or a list
    of attributes to keep in the prompt.
    """
    if seeds < 2:
        raise ValueError("need at least two seeds for a spread")
    sampler = sampler or SamplerConfig()
    cond = _conditioning(scene, den.vocab, conditioned)
    z0 = LatentImage(den.encode_scene(scene), 0)
    rows = []
    for si, f in enumerate(strengths):
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"strength {f} outside [0, 1]")
        t = sched.strength_to_timestep(f)
        rng = derive_stream(root_seed, si)
        eps = rng.standard_normal((seeds,) + z0.tokens.shape)
        if t == 0:
            out = np.broadcast_to(z0.tokens, eps.shape)
        else:
            z_t = LatentImage(sched.signal(t) * z0.tokens + sched.noise(t) * eps, t)
            out = reverse_sample(z_t, cond, den, sampler, sched, rng).tokens
        fac = np.asarray(den.read_factors(out))
        rows.append(SemanticLossRow(float(f), t, fac.mean(axis=0), fac.std(axis=0, ddof=1)))
    return rows


def sampler_moments(model: GaussianFactorModel, coords, cond: TextEmbedding, t: int, sched: NoiseSchedule,
                    sampler: SamplerConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-factor mean and std of the sampler's output on the analytic model.

    Each factor coordinate p = A_j^T z evolves independently under an affine
    map plus Gaussian noise (CFG included), so first and second moments
    propagate in closed form.
    """
    sampler = sampler or SamplerConfig()
    coords = np.asarray(coords, dtype=np.float64)
    beta = model.loadings.T @ model.base
    mu_c, var_c, _ = model.condition(cond)
    mu_u, var_u, _ = model.condition(model.vocab.null_embedding(cond.length))
    w = sampler.guidance_scale
    a0, b0 = sched.signal(t), sched.noise(t)
    m = a0 * (beta + coords)
    v = np.full_like(m, b0 * b0) if t > 0 else np.zeros_like(m)
    for s in range(t, 0, -1):
        a = sched.signal(s)
        kc, ku = _gains(var_c, a, sched.noise(s)), _gains(var_u, a, sched.noise(s))
        # x0 estimate of one branch: beta + mu + k (p - a (beta + mu)) = P + Q p
        Pc, Qc = (beta + mu_c) * (1 - kc * a), kc
        Pu, Qu = (beta + mu_u) * (1 - ku * a), ku
        if w != 1.0:
            P, Q = Pu + w * (Pc - Pu), Qu + w * (Qc - Qu)
        else:
            P, Q = Pc, Qc
        c0, ct, var = reverse_step_coefficients(sched, s)
        g = c0 * Q + ct
        m = c0 * P + g * m
        v = g * g * v + (0.0 if sampler.deterministic else var)
    return m - beta, np.sqrt(v)


def posterior_std(model: GaussianFactorModel, cond: TextEmbedding, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Bayesian std of each factor given z_t (no guidance)."""
    _, var, _ = model.condition(cond)
    a, b = sched.signal(t), sched.noise(t)
    return np.sqrt(var * b * b / (a * a * var + b * b))


def semantic_loss_oracle(model: GaussianFactorModel, scene, strengths, sched: NoiseSchedule, conditioned=True,
                         sampler: SamplerConfig | None = None) -> list[SemanticLossRow]:
    cond = _conditioning(scene, model.vocab, conditioned)
    rows = []
    for f in strengths:
        t = sched.strength_to_timestep(f)
        m, s = sampler_moments(model, scene.factors.coords(), cond, t, sched, sampler)
        rows.append(SemanticLossRow(float(f), t, m, s))
    return rows


def mc_std_tolerance(std: np.ndarray, seeds: int, k: float = 4.0) -> np.ndarray:
    """k standard errors of a sample std (Gaussian approximation)."""
    return k * std / math.sqrt(2.0 * (seeds - 1))
