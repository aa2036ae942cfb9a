"""Tiny transformer denoisers: joint self-attention over concatenated image
and text tokens (DiT style) or image self-attention plus cross-attention to
static text tokens (UNet style conditioning).

Everything runs in float64 so autograd gradients can be checked against
finite differences. Attention taps are head-averaged post-softmax maps.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from eimlab.text import SemanticVocabulary, TextEmbedding

MODES = ("joint", "cross")
MAGIC = b"EIMT"
VERSION = 1


class Attention(nn.Module):
    """Multi-head attention; queries from ``x``, keys/values from ``ctx``."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError("width must be divisible by the head count")
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def split(self, x):
        B, n, d = x.shape
        return x.view(B, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, q_in, kv_in, mask=None):
        q, k, v = self.split(self.q(q_in)), self.split(self.k(kv_in)), self.split(self.v(kv_in))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(q_in.shape)
        return self.o(out), att


class JointAttention(nn.Module):
    """Self-attention over [image; text] with modality-specific projections."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.img = nn.ModuleDict({n: nn.Linear(d, d) for n in "qkvo"})
        self.txt = nn.ModuleDict({n: nn.Linear(d, d) for n in "qkvo"})

    def forward(self, x_img, x_txt):
        v_count = x_img.shape[1]
        B, _, d = x_img.shape
        hd = d // self.heads

        def proj(name):
            y = torch.cat([self.img[name](x_img), self.txt[name](x_txt)], dim=1)
            return y.view(B, -1, self.heads, hd).transpose(1, 2)

        q, k, v = proj("q"), proj("k"), proj("v")
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, -1, d)
        return self.img["o"](out[:, :v_count]), self.txt["o"](out[:, v_count:]), att


def mlp(d: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))


class JointBlock(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.ln_img, self.ln_txt = nn.LayerNorm(d), nn.LayerNorm(d)
        self.attn = JointAttention(d, heads)
        self.ln2_img, self.ln2_txt = nn.LayerNorm(d), nn.LayerNorm(d)
        self.mlp_img, self.mlp_txt = mlp(d), mlp(d)

    def forward(self, x, c):
        a_img, a_txt, att = self.attn(self.ln_img(x), self.ln_txt(c))
        x, c = x + a_img, c + a_txt
        x = x + self.mlp_img(self.ln2_img(x))
        c = c + self.mlp_txt(self.ln2_txt(c))
        v = x.shape[1]
        return x, c, att.mean(dim=1)[:, :v, v:]  # image rows, text columns


class CrossBlock(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.ln1, self.ln2, self.ln3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.ln_ctx = nn.LayerNorm(d)
        self.self_attn = Attention(d, heads)
        self.cross_attn = Attention(d, heads)
        self.mlp = mlp(d)

    def forward(self, x, c):
        h = self.ln1(x)
        x = x + self.self_attn(h, h)[0]
        a, att = self.cross_attn(self.ln2(x), self.ln_ctx(c))
        x = x + a
        x = x + self.mlp(self.ln3(x))
        return x, c, att.mean(dim=1)


class TextEncoderBlock(nn.Module):
    """Causal pre-norm self-attention over the prompt, like a CLIP text layer."""

    def __init__(self, d, heads):
        super().__init__()
        self.ln1, self.ln2 = nn.LayerNorm(d), nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.mlp = mlp(d)

    def forward(self, c):
        l = c.shape[1]
        mask = torch.ones(l, l, dtype=torch.bool).tril()
        h = self.ln1(c)
        c = c + self.attn(h, h, mask)[0]
        return c + self.mlp(self.ln2(c))


@dataclass
class AttentionMap:
    layer: int
    token: tuple
    values: np.ndarray  # one entry per image token


class ToyAttentionModel(nn.Module):
    def __init__(self, mode: str = "joint", layers: int = 4, heads: int = 2, width: int = 32,
                 text_width: int = 32, token_count: int = 16, steps: int = 50, text_positions: bool = False,
                 final_norm: bool = True, pooled: bool = False, text_layers: int = 0, seed: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown conditioning mode {mode!r}")
        self.mode, self.layers, self.heads, self.width = mode, layers, heads, width
        self.text_width, self.token_count, self.steps = text_width, token_count, steps
        self.text_positions = text_positions
        self.final_norm = final_norm
        self.use_pooled = pooled
        self.text_layers = text_layers
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.img_in = nn.Linear(width, width)
            self.txt_in = nn.Linear(text_width, width)
            # optional shortcut: the pooled prompt added to every image token.
            # Off by default so that conditioning has to pass through attention.
            self.pooled_in = nn.Linear(text_width, width) if pooled else None
            self.time_emb = nn.Embedding(steps + 1, width)
            self.img_pos = nn.Parameter(0.02 * torch.randn(token_count, width))
            self.txt_pos = nn.Parameter(0.02 * torch.randn(16, width)) if text_positions else None
            # optional contextual text encoder shared by both modes (off by default)
            self.text_encoder = nn.ModuleList(TextEncoderBlock(width, heads) for _ in range(text_layers))
            block = JointBlock if mode == "joint" else CrossBlock
            self.blocks = nn.ModuleList(block(width, heads) for _ in range(layers))
            # without the final norm and with no layers the network is affine
            self.ln_out = nn.LayerNorm(width) if final_norm else nn.Identity()
            self.out = nn.Linear(width, width)
            nn.init.normal_(self.time_emb.weight, std=0.1)
        self.double()
        self.init_hash = self.param_hash()

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    @property
    def is_trained(self) -> bool:
        return self.param_hash() != self.init_hash

    def forward(self, z_t, text, pooled, t):
        """z_t: (B, v, d); text: (B, l, d_text); pooled: (B, d_text); t: (B,) ints.

        Returns the epsilon prediction (B, v, d) and per-layer head-averaged
        attention from image tokens to text tokens, each (B, v, l).
        """
        x, c = self._embed(z_t, text, pooled, t)
        taps = []
        for blk in self.blocks:
            x, c, att = blk(x, c)
            taps.append(att)
        return self.out(self.ln_out(x)), taps

    def _embed(self, z_t, text, pooled, t):
        if z_t.shape[-1] != self.width or text.shape[-1] != self.text_width:
            raise ValueError("input widths disagree with the model")
        cond = self.time_emb(t)
        if self.pooled_in is not None:
            cond = cond + self.pooled_in(pooled)
        x = self.img_in(z_t) + self.img_pos + cond[:, None, :]
        c = self.txt_in(text)
        if self.txt_pos is not None:
            c = c + self.txt_pos[: c.shape[1]]
        for blk in self.text_encoder:
            c = blk(c)
        return x, c

    def full_joint_attention(self, z_t, text, pooled, t):
        """Joint mode only: full (B, v+l, v+l) head-averaged attention per layer."""
        if self.mode != "joint":
            raise ValueError("full attention rows exist only in joint mode")
        x, c = self._embed(z_t, text, pooled, t)
        out = []
        for blk in self.blocks:
            out.append(blk.attn(blk.ln_img(x), blk.ln_txt(c))[2].mean(dim=1))
            x, c, _ = blk(x, c)
        return out


class ToyDenoiser:
    """Numpy-facing wrapper: the Denoiser contract plus the image codec."""

    def __init__(self, model: ToyAttentionModel, vocab: SemanticVocabulary, codec=None):
        if vocab.width != model.text_width:
            raise ValueError("vocabulary width must match the model's text width")
        self.model = model
        self.vocab = vocab
        self.codec = codec

    @property
    def token_count(self) -> int:
        return self.model.token_count

    @property
    def width(self) -> int:
        return self.model.width

    def _inputs(self, z_t, cond: TextEmbedding, t):
        z = torch.as_tensor(np.asarray(z_t, dtype=np.float64))
        lead = z.shape[:-2]
        z = z.reshape(-1, *z.shape[-2:])
        B = z.shape[0]
        text = torch.as_tensor(cond.tokens).expand(B, -1, -1)
        pooled = torch.as_tensor(cond.pooled).expand(B, -1)
        tt = torch.full((B,), int(t), dtype=torch.long)
        return z, text, pooled, tt, lead

    def predict(self, z_t, cond: TextEmbedding, t: int) -> np.ndarray:
        out, _ = self.predict_with_taps(z_t, cond, t)
        return out

    def predict_with_taps(self, z_t, cond: TextEmbedding, t: int):
        z, text, pooled, tt, lead = self._inputs(z_t, cond, t)
        with torch.no_grad():
            eps, taps = self.model(z, text, pooled, tt)
        eps = eps.numpy().reshape(*lead, *eps.shape[-2:])
        return eps, [a.numpy().reshape(*lead, *a.shape[-2:]) for a in taps]

    # codec
    def encode_scene(self, scene) -> np.ndarray:
        return self.codec.encode(scene.raster)

    def decode(self, z) -> np.ndarray:
        return self.codec.decode(z)

    def read_factors(self, z) -> np.ndarray:
        from eimlab.scenes import estimate_factors

        rasters = self.decode(z)
        if rasters.ndim == 3:
            return estimate_factors(rasters)
        flat = rasters.reshape(-1, *rasters.shape[-3:])
        return np.stack([estimate_factors(r) for r in flat]).reshape(*rasters.shape[:-3], -1)


def extract_attention_maps(taps, identities, token) -> list[AttentionMap]:
    """Per-layer maps of the attention every image token pays to ``token``.

    ``taps`` are per-layer (v, l) or (B, v, l) arrays restricted to text
    columns; ``identities`` names the text rows.
    """
    token = tuple(token)
    ids = [tuple(t) for t in identities]
    if token not in ids:
        raise KeyError(f"token {token!r} is not in the conditioning prompt")
    col = ids.index(token)
    return [AttentionMap(i, token, np.asarray(a)[..., col].copy()) for i, a in enumerate(taps)]


# -- serialization -------------------------------------------------------------


def save_model(model: ToyAttentionModel, path, train_config: dict | None = None,
               vocab: SemanticVocabulary | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    names, shapes, blobs = [], [], []
    for name, p in model.named_parameters():
        names.append(name)
        shapes.append(list(p.shape))
        blobs.append(p.detach().numpy().astype("<f4").tobytes())
    header = MAGIC + struct.pack("<IBIII", VERSION, MODES.index(model.mode), model.layers, model.heads, model.width)
    path.write_bytes(header + b"".join(blobs))
    sidecar = {
        "mode": model.mode,
        "layers": model.layers,
        "heads": model.heads,
        "width": model.width,
        "text_width": model.text_width,
        "token_count": model.token_count,
        "steps": model.steps,
        "text_positions": model.text_positions,
        "final_norm": model.final_norm,
        "pooled": model.use_pooled,
        "text_layers": model.text_layers,
        "parameters": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
        "train_config": train_config or {},
        "vocab": json.loads(vocab.to_json()) if vocab is not None else None,
        **(extra or {}),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_model(path) -> tuple[ToyAttentionModel, dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ValueError("not a toy model file")
    version, mode, L, H, d = struct.unpack_from("<IBIII", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported model file version {version}")
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    model = ToyAttentionModel(MODES[mode], L, H, d, meta["text_width"], meta["token_count"], meta["steps"],
                              meta["text_positions"], meta.get("final_norm", True),
                              meta.get("pooled", False), meta.get("text_layers", 0))
    offset = 4 + struct.calcsize("<IBIII")
    params = dict(model.named_parameters())
    with torch.no_grad():
        for entry in meta["parameters"]:
            p = params[entry["name"]]
            n = p.numel()
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float64)
            p.copy_(torch.from_numpy(arr.reshape(entry["shape"])))
            offset += 4 * n
    if offset != len(data):
        raise ValueError("model file has trailing bytes")
    return model, meta
