"""Patch codec, denoising training loop and finite-difference gradient check
for the toy attention models."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from eimlab.diffusion import NoiseSchedule, derive_stream
from eimlab.scenes import RASTER
from eimlab.text import NULL, SemanticVocabulary, encode_prompt

PATCH = 4


def patchify(raster: np.ndarray) -> np.ndarray:
    """(..., 16, 16, 3) -> (..., 16 tokens, 48)."""
    r = np.asarray(raster, dtype=np.float64)
    g = RASTER // PATCH
    lead = r.shape[:-3]
    r = r.reshape(*lead, g, PATCH, g, PATCH, 3)
    r = np.moveaxis(r, -4, -3)  # (..., gy, gx, py, px, 3)
    return r.reshape(*lead, g * g, PATCH * PATCH * 3)


def unpatchify(tokens: np.ndarray) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.float64)
    g = RASTER // PATCH
    lead = t.shape[:-2]
    t = t.reshape(*lead, g, g, PATCH, PATCH, 3)
    t = np.moveaxis(t, -3, -4)  # (..., gy, py, gx, px, 3)
    return t.reshape(*lead, RASTER, RASTER, 3)


@dataclass
class PatchCodec:
    """Linear patch embedding: 4x4x3 patches projected on their top principal
    components, then scaled so latents have unit variance."""

    mean: np.ndarray  # 48
    components: np.ndarray  # width x 48, orthonormal rows
    scale: float

    @property
    def width(self) -> int:
        return self.components.shape[0]

    @classmethod
    def fit(cls, rasters, width: int = 32) -> "PatchCodec":
        patches = patchify(np.asarray(rasters)).reshape(-1, PATCH * PATCH * 3)
        if width > patches.shape[1]:
            raise ValueError("latent width exceeds the patch dimension")
        mean = patches.mean(axis=0)
        _, _, vt = np.linalg.svd(patches - mean, full_matrices=False)
        comps = vt[:width]
        # fix the SVD sign ambiguity so fits are reproducible
        comps = comps * np.sign(comps[np.arange(width), np.argmax(np.abs(comps), axis=1)])[:, None]
        proj = (patches - mean) @ comps.T
        return cls(mean, comps, float(proj.std()))

    def encode(self, raster) -> np.ndarray:
        return (patchify(raster) - self.mean) @ self.components.T / self.scale

    def decode(self, z) -> np.ndarray:
        patches = np.asarray(z) * self.scale @ self.components + self.mean
        return np.clip(unpatchify(patches), 0.0, 1.0)

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "components": self.components.tolist(), "scale": self.scale})

    @classmethod
    def from_json(cls, text: str) -> "PatchCodec":
        d = json.loads(text)
        return cls(np.array(d["mean"]), np.array(d["components"]), float(d["scale"]))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    prompt_dropout: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning rate must be nonnegative and momentum in [0, 1)")
        if not 0 <= self.prompt_dropout < 1:
            raise ValueError("prompt dropout must lie in [0, 1)")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, losses):
        super().__init__(message)
        self.losses = losses


def prompt_tensors(vocab: SemanticVocabulary, scenes):
    embs = [encode_prompt(vocab, vocab.prompt(s.assignment)) for s in scenes]
    text = torch.from_numpy(np.stack([e.tokens for e in embs]))
    return text


def _loss(model, z0, text, t, eps, sched: NoiseSchedule):
    a = torch.from_numpy(np.sqrt(sched.alpha_bars[t.numpy()]))[:, None, None]
    b = torch.sqrt(1.0 - a * a)
    z_t = a * z0 + b * eps
    pred, _ = model(z_t, text, text.mean(dim=1), t)
    return torch.mean((pred - eps) ** 2)


def train_denoiser(model, vocab: SemanticVocabulary, codec: PatchCodec, scenes, cfg: TrainConfig,
                   sched: NoiseSchedule):
    """SGD with momentum on the epsilon-prediction MSE. Returns (model, per-epoch mean losses)."""
    if codec.width != model.width:
        raise ValueError("codec width must equal the model width")
    z0 = torch.from_numpy(np.stack([codec.encode(s.raster) for s in scenes]))
    text = prompt_tensors(vocab, scenes)
    null = torch.from_numpy(encode_prompt(vocab, [NULL] * text.shape[1]).tokens)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    n = len(scenes)
    losses, first = [], None
    for epoch in range(cfg.epochs):
        rng = derive_stream(cfg.seed, epoch)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            B = len(idx)
            t = torch.from_numpy(rng.integers(1, sched.T + 1, size=B))
            eps = torch.from_numpy(rng.standard_normal((B, *z0.shape[1:])))
            drop = torch.from_numpy(rng.random(B) < cfg.prompt_dropout)
            txt = torch.where(drop[:, None, None], null, text[idx])
            opt.zero_grad()
            loss = _loss(model, z0[idx], txt, t, eps, sched)
            loss.backward()
            opt.step()
            val = loss.item()
            if first is None:
                first = val
            if not math.isfinite(val) or val > 10.0 * first:
                raise TrainingDiverged(f"loss {val:.4g} at epoch {epoch} exceeds 10x the initial {first:.4g}",
                                       losses + [val])
            total += val * B
            count += B
        losses.append(total / count)
    return model, losses


def make_batch(codec: PatchCodec, vocab: SemanticVocabulary, scenes, sched: NoiseSchedule, seed: int = 0):
    """A fixed (z0, text, t, eps) batch for gradient checks."""
    rng = derive_stream(seed, 0)
    z0 = torch.from_numpy(np.stack([codec.encode(s.raster) for s in scenes]))
    text = prompt_tensors(vocab, scenes)
    t = torch.from_numpy(rng.integers(1, sched.T + 1, size=len(scenes)))
    eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape)))
    return z0, text, t, eps


def finite_diff_check(model, batch, sched: NoiseSchedule, probes: int = 32, step: float = 1e-3,
                      seed: int = 0, rel_floor: float = 1e-2) -> float:
    """Max relative error of autograd against central differences on random
    parameter entries.

    Entries whose gradient is below ``rel_floor`` times the largest gradient
    component are measured against that floor instead of their own size;
    otherwise the O(step^2) truncation error of a near-zero entry would
    dominate the statistic.
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    z0, text, t, eps = batch
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    _loss(model, z0, text, t, eps, sched).backward()
    # parameters off the output path (the last joint layer's text branch) get no grad
    grads = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
    model.zero_grad()
    floor = max(rel_floor * max(float(g.abs().max()) for g in grads), 1e-300)
    rng = derive_stream(seed, 0)
    sizes = np.array([p.numel() for p in params], dtype=np.float64)
    worst = 0.0
    with torch.no_grad():
        for _ in range(probes):
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            i = int(rng.integers(params[k].numel()))
            flat = params[k].view(-1)
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(_loss(model, z0, text, t, eps, sched))
            flat[i] = orig - step
            down = float(_loss(model, z0, text, t, eps, sched))
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            g = float(grads[k].view(-1)[i])
            worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), floor))
    return worst


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
