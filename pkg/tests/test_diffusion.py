import math

import mpmath
import numpy as np
import pytest

from eimlab.diffusion import (
    LatentImage,
    NoiseDraw,
    SamplerConfig,
    build_schedule,
    cfg_combine,
    derive_stream,
    forward_noise,
    reverse_sample,
)
from eimlab.text import encode_prompt


def test_single_step_schedule():
    s = build_schedule(1, 0.5, 0.5)
    assert list(s.alpha_bars) == [1.0, 0.5]


def test_alpha_bar_matches_high_precision_product(sched):
    mpmath.mp.dps = 50
    betas = [mpmath.mpf(1e-4) + (mpmath.mpf(0.02) - mpmath.mpf(1e-4)) * i / 49 for i in range(50)]
    ref = mpmath.fprod(1 - b for b in betas)
    assert abs(sched.alpha_bars[50] - float(ref)) < 1e-12


@pytest.mark.parametrize("T,lo,hi", [(0, 1e-4, 0.02), (-3, 1e-4, 0.02), (10, 0.0, 0.02), (10, 1e-4, 1.0)])
def test_bad_schedule(T, lo, hi):
    with pytest.raises(ValueError):
        build_schedule(T, lo, hi)


def test_schedule_monotone(sched):
    assert np.all(np.diff(sched.betas) > 0)
    assert sched.alpha_bars[0] == 1.0
    assert np.all(np.diff(sched.alpha_bars) < 0)
    np.testing.assert_array_equal(sched.alpha_bars[1:], sched.alpha_bars[:-1] * (1 - sched.betas))


def test_strength_to_timestep(sched):
    assert [sched.strength_to_timestep(f) for f in (0.0, 0.15, 0.35, 0.55, 0.75, 1.0)] == [0, 8, 18, 28, 38, 50]


def test_forward_noise_t0_is_identity(sched):
    z0 = LatentImage(np.arange(12.0).reshape(3, 4))
    out = forward_noise(z0, 0, np.ones((3, 4)), sched)
    np.testing.assert_array_equal(out.tokens, z0.tokens)
    assert out.is_clean


def test_forward_noise_symmetric_coefficients():
    s = build_schedule(1, 0.5, 0.5)
    out = forward_noise(LatentImage(np.ones((2, 2))), 1, np.ones((2, 2)), s)
    np.testing.assert_allclose(out.tokens, 2 * math.sqrt(0.5))


def test_forward_noise_mc_mean(sched):
    z0 = LatentImage(derive_stream(3, 0).standard_normal((2, 3)))
    eps = derive_stream(3, 1).standard_normal((10_000, 2, 3))
    zt = sched.signal(37) * z0.tokens + sched.noise(37) * eps  # batched
    single = forward_noise(z0, 37, eps[0], sched).tokens
    np.testing.assert_allclose(single, zt[0])
    se = sched.noise(37) / math.sqrt(len(eps))
    assert np.all(np.abs(zt.mean(0) - sched.signal(37) * z0.tokens) < 3.5 * se)


def test_forward_noise_errors(sched):
    z0 = LatentImage(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        forward_noise(z0, 51, np.zeros((2, 2)), sched)
    with pytest.raises(ValueError):
        forward_noise(z0, 3, np.zeros((2, 3)), sched)


def test_latent_rejects_nonfinite():
    with pytest.raises(ValueError):
        LatentImage(np.array([[np.nan]]))


def test_cfg_combine_cases():
    a, b = np.full((2, 2), 0.2), np.full((2, 2), 0.1)
    np.testing.assert_array_equal(cfg_combine(a, b, 1.0), a)
    np.testing.assert_array_equal(cfg_combine(a, b, 0.0), b)
    np.testing.assert_allclose(cfg_combine(0.2, 0.1, 7.5), 0.85)
    with pytest.raises(ValueError):
        cfg_combine(a, np.zeros((2, 3)), 2.0)


def test_derive_stream():
    a = derive_stream(42, 0).standard_normal(100)
    np.testing.assert_array_equal(a, derive_stream(42, 0).standard_normal(100))
    assert not np.array_equal(a, derive_stream(42, 1).standard_normal(100))
    x = derive_stream(42, 7).standard_normal(100_000)
    assert abs(x.mean()) < 0.01 and abs(x.var() - 1) < 0.02


def test_noise_draw_lineage():
    d = NoiseDraw.sample((2, 2), 5, 9)
    assert d.lineage == (5, 9)
    np.testing.assert_array_equal(d.values, derive_stream(5, 9).standard_normal((2, 2)))


def test_reverse_sample_recovers_conditioned_factor(disentangled, vocab, sched):
    m = disentangled
    coords = np.array([0.8, 1.0, 0.5, 0.5, 0.5])
    cond = encode_prompt(vocab, vocab.prompt({"article": "a", "color": "red", "object": "circle"}))
    # pin the colour target at 0.8 via an interpolated colour row
    row = cond.row_of("color")
    toks = cond.tokens.copy()
    lo, hi = vocab.vector(("color", "red")), vocab.vector(("color", "blue"))
    toks[row] = lo + 0.8 * (hi - lo)
    cond = cond.with_tokens(toks)
    t = sched.strength_to_timestep(0.75)
    rng = derive_stream(0, 0)
    z0 = m.encode(coords)
    eps = rng.standard_normal((100,) + z0.shape)
    zt = LatentImage(sched.signal(t) * z0 + sched.noise(t) * eps, t)
    out = reverse_sample(zt, cond, m, SamplerConfig(), sched, rng).tokens
    assert abs(m.factors(out)[:, 0].mean() - 0.8) < 0.05


def test_reverse_sample_guidance_identity(disentangled, vocab, sched):
    """With a predictor that ignores its prompt, w=0 and w=1 coincide."""

    class Blind:
        def __init__(self, m):
            self.m, self.vocab = m, m.vocab

        def predict(self, z, cond, t):
            return self.m.predict(z, self.vocab.null_embedding(3), t)

    den = Blind(disentangled)
    cond = encode_prompt(vocab, vocab.prompt({"article": "a", "color": "red", "object": "circle"}))
    zt = LatentImage(derive_stream(1, 0).standard_normal((16, 32)), 20)
    a = reverse_sample(zt, cond, den, SamplerConfig(0.0), sched, derive_stream(1, 1)).tokens
    b = reverse_sample(zt, cond, den, SamplerConfig(1.0), sched, derive_stream(1, 1)).tokens
    np.testing.assert_array_equal(a, b)


def test_reverse_sample_determinism_and_errors(disentangled, vocab, sched):
    cond = encode_prompt(vocab, vocab.prompt({"article": "a", "color": "red", "object": "circle"}))
    zt = LatentImage(derive_stream(2, 0).standard_normal((16, 32)), 10)
    a = reverse_sample(zt, cond, disentangled, SamplerConfig(), sched, derive_stream(2, 1)).tokens
    b = reverse_sample(zt, cond, disentangled, SamplerConfig(), sched, derive_stream(2, 1)).tokens
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        reverse_sample(LatentImage(zt.tokens, 0), cond, disentangled, SamplerConfig(), sched, derive_stream(2, 1))


def test_reverse_sample_calls_hook(disentangled, vocab, sched):
    seen = []
    cond = encode_prompt(vocab, vocab.prompt({"article": "a", "color": "red", "object": "circle"}))
    zt = LatentImage(np.zeros((16, 32)), 5)
    reverse_sample(zt, cond, disentangled, SamplerConfig(), sched, derive_stream(0, 0), on_step=lambda t, z: seen.append(t))
    assert seen == [5, 4, 3, 2, 1]
