import math

import numpy as np
import pytest
import torch

from eimlab.denoisers import GaussianFactorModel, analytic_eps, analytic_posterior, gaussian_factor_model
from eimlab.denoisers.toy import ToyAttentionModel, ToyDenoiser, extract_attention_maps, load_model, save_model
from eimlab.diffusion import build_schedule, derive_stream
from eimlab.text import SemanticVocabulary, encode_prompt

# D = 4, m = 2; only f1 can be prompted, f2 always keeps its free prior
PAIR = (("f1", ("lo", "hi")),)
PAIR_LEVELS = {("f1", "lo"): 0.0, ("f1", "hi"): 1.0}


def small_model(sched, seed=0, **kw):
    vocab = SemanticVocabulary(PAIR, width=4, seed=1)
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((4, 2)))
    return GaussianFactorModel(vocab, q, np.zeros(4), np.eye(2), token_count=1, width=4,
                               factor_names=("f1", "f2"), levels=PAIR_LEVELS, schedule=sched, **kw)


def test_disentangled_structure(disentangled):
    A = disentangled.loadings
    np.testing.assert_allclose(A.T @ A, np.eye(5), atol=1e-12)
    np.testing.assert_array_equal(disentangled.mixing, np.eye(5))
    assert disentangled.sigma2_cond < disentangled.sigma2_free


def test_entangled_mixing(entangled, vocab, sched):
    M = entangled.mixing
    off = M[~np.eye(5, dtype=bool)]
    assert np.all(np.abs(off) >= 0.3)
    with pytest.raises(ValueError):
        gaussian_factor_model(vocab, sched, "entangled", entanglement=0.1)


def test_entangled_condition_shifts_several_factors(entangled, disentangled, vocab):
    red = encode_prompt(vocab, vocab.prompt({"color": "red"}))
    blue = encode_prompt(vocab, vocab.prompt({"color": "blue"}))
    d_ent = entangled.condition(blue)[0] - entangled.condition(red)[0]
    d_dis = disentangled.condition(blue)[0] - disentangled.condition(red)[0]
    assert np.count_nonzero(np.abs(d_dis) > 1e-12) == 1
    assert np.count_nonzero(np.abs(d_ent) > 0.1) == 5


def test_scalar_symmetric_posterior():
    sched = build_schedule(1, 0.5, 0.5)
    m = small_model(sched, free_mean=0.0, sigma2_free=1.0, sigma2_cond=0.5, sigma2_residual=1.0)
    null = m.vocab.null_embedding(1)
    z = np.random.default_rng(0).standard_normal((1, 4))
    mean, _ = analytic_posterior(m, z, null, 1, sched)
    np.testing.assert_allclose(mean, z.ravel() / math.sqrt(2), atol=1e-14)
    np.testing.assert_allclose(analytic_eps(m, z, null, 1, sched), z / math.sqrt(2), atol=1e-14)


def test_t0_posterior_is_identity(disentangled, vocab, sched):
    z = derive_stream(0, 0).standard_normal((16, 32))
    cond = encode_prompt(vocab, vocab.prompt({"color": "red"}))
    mean, var = analytic_posterior(disentangled, z, cond, 0, sched)
    np.testing.assert_allclose(mean, z.ravel(), atol=1e-12)
    assert np.all(var == 0)
    with pytest.raises(ValueError):
        analytic_eps(disentangled, z, cond, 0, sched)


def test_singular_prior_rejected(sched):
    with pytest.raises(ValueError):
        small_model(sched, sigma2_residual=0.0)


def test_posterior_matches_importance_sampling(sched):
    m = small_model(sched, seed=4, sigma2_free=0.8, sigma2_residual=0.3)
    cond = encode_prompt(m.vocab, m.vocab.prompt({"f1": "hi"}))
    t = 30
    a, b = sched.signal(t), sched.noise(t)
    means, var, _ = m.condition(cond)
    A = m.loadings
    cov = A @ np.diag(var) @ A.T + m.sigma2_residual * (np.eye(4) - A @ A.T)
    mu = m.base + A @ means
    rng = np.random.default_rng(11)
    z_t = a * rng.multivariate_normal(mu, cov) + b * rng.standard_normal(4)
    draws = rng.multivariate_normal(mu, cov, size=1_000_000)
    logw = -0.5 * np.sum((z_t - a * draws) ** 2, axis=1) / (b * b)
    w = np.exp(logw - logw.max())
    ref = (w[:, None] * draws).sum(0) / w.sum()
    mean, _ = analytic_posterior(m, z_t.reshape(1, 4), cond, t, sched)
    np.testing.assert_allclose(mean, ref, atol=1e-2)


def test_degenerate_prior_gives_zero_eps(sched):
    m = small_model(sched, sigma2_cond=1e-14, sigma2_free=1e-13, sigma2_residual=1e-14)
    cond = encode_prompt(m.vocab, m.vocab.prompt({"f1": "hi"}))
    t = 20
    z = sched.signal(t) * m.prior_mean(cond).reshape(1, 4)
    assert np.abs(analytic_eps(m, z, cond, t, sched)).max() < 1e-6


def test_reconstruction_identity(disentangled, vocab, sched):
    cond = encode_prompt(vocab, vocab.prompt({"color": "green", "object": "square"}))
    z = derive_stream(5, 0).standard_normal((16, 32))
    for t in (1, 17, 50):
        mean, _ = analytic_posterior(disentangled, z, cond, t, sched)
        eps = analytic_eps(disentangled, z, cond, t, sched)
        np.testing.assert_allclose(sched.signal(t) * mean.reshape(16, 32) + sched.noise(t) * eps, z, atol=1e-12)


def test_batched_prediction_matches_single(disentangled, vocab):
    cond = encode_prompt(vocab, vocab.prompt({"color": "green"}))
    z = derive_stream(6, 0).standard_normal((3, 16, 32))
    batch = disentangled.predict(z, cond, 12)
    for i in range(3):
        np.testing.assert_allclose(batch[i], disentangled.predict(z[i], cond, 12), atol=1e-14)


def test_overlarge_rows_lose_control(disentangled, vocab):
    cond = encode_prompt(vocab, vocab.prompt({"color": "red"}))
    _, var, on = disentangled.condition(cond)
    big = cond.with_tokens(cond.tokens * 6.0)
    _, var_big, _ = disentangled.condition(big)
    assert var_big[0] > 10 * var[0]


# -- toy transformers --------------------------------------------------------------


def toy_inputs(model, B=2, l=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(B, model.token_count, model.width, generator=g, dtype=torch.float64)
    c = torch.randn(B, l, model.text_width, generator=g, dtype=torch.float64)
    return z, c, c.mean(1), torch.full((B,), 7)


@pytest.mark.parametrize("mode", ["joint", "cross"])
def test_attention_rows_normalised(mode):
    model = ToyAttentionModel(mode, layers=2)
    z, c, p, t = toy_inputs(model)
    with torch.no_grad():
        eps, taps = model(z, c, p, t)
        assert eps.shape == z.shape
        if mode == "joint":
            for full in model.full_joint_attention(z, c, p, t):
                np.testing.assert_allclose(full.sum(-1).numpy(), 1.0, atol=1e-6)
        else:
            for a in taps:
                np.testing.assert_allclose(a.sum(-1).numpy(), 1.0, atol=1e-6)
    for a in taps:
        assert a.min() >= 0 and a.max() <= 1


@pytest.mark.parametrize("mode", ["joint", "cross"])
def test_text_permutation_invariance(mode):
    model = ToyAttentionModel(mode, layers=2, seed=3)
    z, c, p, t = toy_inputs(model, seed=1)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    with torch.no_grad():
        a, taps = model(z, c, p, t)
        b, taps_p = model(z, c[:, perm], p, t)
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-12)
    np.testing.assert_allclose(taps[0][..., perm].numpy(), taps_p[0].numpy(), atol=1e-12)


def test_forward_determinism():
    model = ToyAttentionModel("joint", layers=2)
    z, c, p, t = toy_inputs(model)
    with torch.no_grad():
        assert model(z, c, p, t)[0].numpy().tobytes() == model(z, c, p, t)[0].numpy().tobytes()


def test_width_mismatch():
    model = ToyAttentionModel("joint", layers=1)
    z, c, p, t = toy_inputs(model)
    with pytest.raises(ValueError):
        model(z[..., :8], c, p, t)


@pytest.mark.parametrize("mode,expect", [("joint", 1 / 22), ("cross", 1 / 6)])
def test_uniform_attention_maps(mode, expect):
    model = ToyAttentionModel(mode, layers=1, heads=1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if any(k in name for k in (".q.", ".k.", "q.weight", "k.weight", "q.bias", "k.bias")) and "attn" in name:
                p.zero_()
    z, c, p, t = toy_inputs(model)
    with torch.no_grad():
        _, taps = model(z, c, p, t)
    np.testing.assert_allclose(taps[0].numpy(), expect, atol=1e-12)


def test_joint_column_accounting():
    model = ToyAttentionModel("joint", layers=2)
    z, c, p, t = toy_inputs(model)
    with torch.no_grad():
        full = model.full_joint_attention(z, c, p, t)
        _, taps = model(z, c, p, t)
    v = model.token_count
    for f, tap in zip(full, taps):
        np.testing.assert_allclose(f[:, :v, v:].numpy(), tap.numpy(), atol=1e-12)
        total = tap.sum(-1) + f[:, :v, :v].sum(-1)
        np.testing.assert_allclose(total.numpy(), 1.0, atol=1e-12)


def test_extract_attention_maps(vocab):
    model = ToyAttentionModel("cross", layers=2)
    den = ToyDenoiser(model, vocab)
    toks = vocab.prompt({"article": "a", "color": "red", "object": "circle"})
    cond = encode_prompt(vocab, toks)
    _, taps = den.predict_with_taps(np.zeros((16, 32)), cond, 5)
    maps = extract_attention_maps(taps, cond.identities, ("color", "red"))
    assert len(maps) == 2 and maps[0].values.shape == (16,)
    assert all((m.values >= 0).all() and (m.values <= 1).all() for m in maps)
    with pytest.raises(KeyError):
        extract_attention_maps(taps, cond.identities, ("color", "blue"))


def test_model_file_roundtrip(tmp_path, vocab):
    model = ToyAttentionModel("joint", layers=2, seed=5)
    save_model(model, tmp_path / "m.bin", {"epochs": 1}, vocab, {"note": "x"})
    back, meta = load_model(tmp_path / "m.bin")
    assert meta["note"] == "x" and meta["mode"] == "joint"
    save_model(back, tmp_path / "n.bin", {"epochs": 1}, vocab, {"note": "x"})
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "n.bin").read_bytes()
    z, c, p, t = toy_inputs(model)
    with torch.no_grad():
        np.testing.assert_allclose(model(z, c, p, t)[0].numpy(), back(z, c, p, t)[0].numpy(), atol=1e-4)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + (tmp_path / "m.bin").read_bytes()[4:])
    with pytest.raises(ValueError):
        load_model(bad)


@pytest.mark.parametrize("t", [1, 10, 38, 50])
def test_posterior_mean_matches_dense_gaussian(disentangled, entangled, vocab, sched, t):
    # dense D x D conditioning formula as the independent oracle
    cond = encode_prompt(vocab, vocab.prompt({"color": "green", "object": "circle", "size": "small"}))
    for model in (disentangled, entangled):
        means, var, _ = model.condition(cond)
        A = model.loadings
        mu = model.base + A @ means
        cov = A @ np.diag(var) @ A.T + model.sigma2_residual * (np.eye(512) - A @ A.T)
        a, b = sched.signal(t), sched.noise(t)
        z = derive_stream(4, t).standard_normal(512)
        gain = a * cov @ np.linalg.inv(a * a * cov + b * b * np.eye(512))
        oracle = mu + gain @ (z - a * mu)
        eps = model.predict(z.reshape(16, 32), cond, t)
        x0 = (z - b * eps.ravel()) / a
        np.testing.assert_allclose(x0, oracle, atol=1e-6)


def test_column_locality(disentangled, entangled, vocab):
    red = encode_prompt(vocab, vocab.prompt({"color": "red", "object": "square"}))
    blue = encode_prompt(vocab, vocab.prompt({"color": "blue", "object": "square"}))
    j = disentangled.factor_names.index("color")
    for model, check in ((disentangled, "local"), (entangled, "spread")):
        delta = model.loadings.T @ (model.prior_mean(blue) - model.prior_mean(red))
        off = np.delete(np.abs(delta), j)
        if check == "local":
            assert off.max() < 1e-10
        else:
            assert np.all(off >= 0.3 * abs(delta[j]))


def test_posterior_std_increases_with_t(disentangled, vocab, sched):
    cond = encode_prompt(vocab, vocab.prompt({"color": "red"}))
    z = np.zeros((16, 32))
    stds = np.array([np.sqrt(analytic_posterior(disentangled, z, cond, t, sched)[1]) for t in range(0, 51)])
    assert np.all(np.diff(stds, axis=0) > 0)
