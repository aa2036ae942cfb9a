"""Linear probes on attention maps.

Prompts "a <color> <object>" are generated from pure noise; the maps of the
colour token and the object token are recorded per layer. One-vs-rest
logistic probes trained on colour-token maps are then applied to the
object-token maps of held-out generations. Accuracies are balanced (mean of
the per-class recalls), so 0.5 means no colour information transfers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from eimlab.diffusion import NoiseSchedule, SamplerConfig, cfg_combine, derive_stream, reverse_step_coefficients
from eimlab.text import encode_prompt

PROBE_L2 = 1e-4
PROBE_TOL = 1e-6
PROBE_STEPS = 5000


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class ProbeRecord:
    scene_id: int
    label: str  # colour named in the prompt
    obj: str
    maps: dict  # attribute name -> (layers, v) head-averaged maps

    def features(self, token: str, layer: int) -> np.ndarray:
        return self.maps[token][layer]


@dataclass
class ProbeResult:
    mode: str
    transfer: list  # per layer
    self_accuracy: list = field(default_factory=list)

    @property
    def average(self) -> float:
        return float(np.mean(self.transfer))

    @property
    def distance_from_chance(self) -> float:
        return float(np.mean(np.abs(np.asarray(self.transfer) - 0.5)))


def generate_with_maps(den, prompt_tokens, count: int, sched: NoiseSchedule, rng: np.random.Generator,
                       sampler: SamplerConfig | None = None, record_steps=None):
    """Generate ``count`` latents for one prompt from N(0, I) at t = T.

    Returns the final latents and the conditional branch's text-column
    attention, averaged over the recorded steps: (count, layers, v, l).
    """
    sampler = sampler or SamplerConfig()
    cond = encode_prompt(den.vocab, prompt_tokens)
    null = den.vocab.null_embedding(cond.length)
    z = rng.standard_normal((count, den.token_count, den.width))
    steps = set(range(1, sched.T + 1) if record_steps is None else record_steps)
    acc, n = None, 0
    for t in range(sched.T, 0, -1):
        eps_c, taps = den.predict_with_taps(z, cond, t)
        if t in steps:
            stacked = np.stack(taps, axis=1)
            acc = stacked if acc is None else acc + stacked
            n += 1
        eps = eps_c if sampler.guidance_scale == 1.0 else cfg_combine(eps_c, den.predict(z, null, t), sampler.guidance_scale)
        x0 = (z - sched.noise(t) * eps) / sched.signal(t)
        c0, ct, var = reverse_step_coefficients(sched, t)
        z = c0 * x0 + ct * z
        if not sampler.deterministic and var > 0:
            z = z + math.sqrt(var) * rng.standard_normal(z.shape)
    if n == 0:
        raise ValueError("no reverse step was recorded")
    return z, acc / n


def build_probe_dataset(den, colors, per_color: int, sched: NoiseSchedule, seed: int = 0,
                        objects=("square", "circle"), sampler: SamplerConfig | None = None,
                        record_steps=None) -> list[ProbeRecord]:
    if not den.model.is_trained:
        raise UntrainedModelError("model parameters still match their initialisation")
    if per_color < 1:
        raise ValueError("per_color must be positive")
    vocab = den.vocab
    records = []
    for ci, color in enumerate(colors):
        rng = derive_stream(seed, ci)
        objs = [objects[i % len(objects)] for i in range(per_color)]
        for oi, obj in enumerate(objects):
            count = objs.count(obj)
            if count == 0:
                continue
            tokens = vocab.prompt({"article": "a", "color": color, "object": obj})
            _, maps = generate_with_maps(den, tokens, count, sched, rng, sampler, record_steps)
            col_c, col_o = tokens.index(("color", color)), tokens.index(("object", obj))
            for k in range(count):
                records.append(ProbeRecord(len(records), color, obj,
                                           {"color": maps[k, :, :, col_c], "object": maps[k, :, :, col_o]}))
    return records


@dataclass
class LinearProbe:
    """One-vs-rest logistic probes for every class on standardized features."""

    classes: list
    mean: np.ndarray
    std: np.ndarray
    weights: np.ndarray  # classes x features
    bias: np.ndarray

    def scores(self, X) -> np.ndarray:
        Xs = (np.asarray(X) - self.mean) / self.std
        return Xs @ self.weights.T + self.bias

    def predict_binary(self, X) -> np.ndarray:
        return self.scores(X) > 0.0


def _fit_logistic(X: np.ndarray, y: np.ndarray, l2: float) -> tuple[np.ndarray, float]:
    n, p = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    # step 1/L with L the Lipschitz constant of the logistic loss gradient
    L = np.linalg.eigvalsh(Xb.T @ Xb / n).max() / 4.0 + l2
    w = np.zeros(p + 1)
    for _ in range(PROBE_STEPS):
        r = 1.0 / (1.0 + np.exp(-(Xb @ w))) - y
        g = Xb.T @ r / n
        g[:p] += l2 * w[:p]
        if np.linalg.norm(g) < PROBE_TOL:
            break
        w -= g / L
    return w[:p], float(w[p])


def train_probe(X, labels, l2: float = PROBE_L2) -> LinearProbe:
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ValueError("probe training needs at least two classes")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Xs = (X - mean) / std
    W, b = [], []
    for c in classes:
        w, c0 = _fit_logistic(Xs, (labels == c).astype(np.float64), l2)
        W.append(w)
        b.append(c0)
    return LinearProbe(classes, mean, std, np.array(W), np.array(b))


def balanced_accuracy(probe: LinearProbe, X, labels) -> float:
    """Mean over classes of the one-vs-rest balanced accuracy."""
    labels = np.asarray(labels)
    pred = probe.predict_binary(X)
    accs = []
    for j, c in enumerate(probe.classes):
        pos = labels == c
        if pos.all() or not pos.any():
            continue
        tpr = pred[pos, j].mean()
        tnr = (~pred[~pos, j]).mean()
        accs.append(0.5 * (tpr + tnr))
    return float(np.mean(accs))


def split_records(records, test_fraction: float = 0.5, seed: int = 0):
    rng = derive_stream(seed, 10_000)
    order = rng.permutation(len(records))
    cut = int(round(len(records) * (1.0 - test_fraction)))
    return [records[i] for i in order[:cut]], [records[i] for i in order[cut:]]


def eval_transfer(records, mode: str, source: str = "color", target: str = "object", seed: int = 0,
                  l2: float = PROBE_L2) -> ProbeResult:
    """Train colour probes on ``source`` maps, evaluate on held-out ``target`` maps, per layer."""
    train, test = split_records(records, seed=seed)
    layers = records[0].maps[source].shape[0]
    y_tr = [r.label for r in train]
    y_te = [r.label for r in test]
    transfer, self_acc = [], []
    for layer in range(layers):
        probe = train_probe([r.features(source, layer) for r in train], y_tr, l2)
        self_acc.append(balanced_accuracy(probe, [r.features(source, layer) for r in test], y_te))
        transfer.append(balanced_accuracy(probe, [r.features(target, layer) for r in test], y_te))
    return ProbeResult(mode, transfer, self_acc)


def shuffled_control(records, seed: int = 0, source: str = "color") -> float:
    """Self-accuracy with permuted labels: the null distribution sits at 0.5."""
    rng = derive_stream(seed, 20_000)
    labels = [records[i].label for i in rng.permutation(len(records))]
    shuffled = [ProbeRecord(r.scene_id, lab, r.obj, r.maps) for r, lab in zip(records, labels)]
    res = eval_transfer(shuffled, "control", source, source, seed)
    return float(np.mean(res.transfer))
