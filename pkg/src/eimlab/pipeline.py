"""Encode-Identify-Manipulate editing.

A denoiser used here also needs an image codec: ``encode_scene(scene)``
returning a clean v x d latent, ``decode(latent)`` returning a raster and
``read_factors(latent)`` returning factor-space coordinates. The analytic
model reads factors exactly; the toy models read them off the decoded
raster.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from eimlab.diffusion import (
    LatentImage,
    NoiseSchedule,
    SamplerConfig,
    derive_stream,
    forward_noise,
    reverse_sample,
)
from eimlab.distill import DistillTrace, HSDSConfig, identify_image_direction
from eimlab.scenes import FACTORS, LEVELS, Scene
from eimlab.text import (
    NULL,
    EditDirection,
    EditPlan,
    SemanticVocabulary,
    TextEmbedding,
    apply_text_direction,
    encode_prompt,
    multi_attr_manipulate,
)
from eimlab.theory import tau_threshold


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class JointLatent:
    image: np.ndarray  # v x d at some timestep
    text: np.ndarray  # l x d
    timestep: int = 0

    @property
    def partition(self) -> int:
        return self.image.shape[-2]

    def concat(self) -> np.ndarray:
        return np.concatenate([self.image, self.text], axis=-2)

    @classmethod
    def split(cls, joint: np.ndarray, partition: int, timestep: int = 0) -> "JointLatent":
        return cls(joint[..., :partition, :], joint[..., partition:, :], timestep)


@dataclass
class EditRequest:
    scene: Scene
    plan: EditPlan
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    hsds: HSDSConfig = field(default_factory=HSDSConfig)
    seed: int = 0
    scale_image_by_alpha: bool = False
    pooled_extra: bool = False


@dataclass
class EditReport:
    source_coords: np.ndarray
    edited_coords: np.ndarray
    edited_raster: np.ndarray
    edited_latent: np.ndarray
    text_source: TextEmbedding
    text_edited: TextEmbedding
    n_text: EditDirection
    n_image: EditDirection
    t_star: int
    seed: int
    plan: EditPlan
    sampler: SamplerConfig
    factor_names: tuple = FACTORS
    trace: DistillTrace | None = None
    source_raster: np.ndarray | None = None

    @property
    def edited_attributes(self) -> list[str]:
        return self.plan.attributes

    @property
    def drift(self) -> dict[str, float]:
        """Absolute change of every factor the plan does not edit."""
        return {
            name: float(abs(self.edited_coords[j] - self.source_coords[j]))
            for j, name in enumerate(self.factor_names)
            if name not in self.plan.attributes
        }

    @property
    def recovered(self) -> dict[str, float]:
        return {name: float(self.edited_coords[j]) for j, name in enumerate(self.factor_names)}

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "t_star": self.t_star,
            "plan": [e.__dict__ for e in self.plan.entries],
            "source_factors": dict(zip(self.factor_names, map(float, self.source_coords))),
            "recovered_factors": self.recovered,
            "drift": self.drift,
            "text_direction_norm": float(np.linalg.norm(self.n_text.delta)),
            "image_direction_norm": float(np.linalg.norm(self.n_image.delta)),
            "hsds_iterations": len(self.trace) if self.trace is not None else 0,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def describe(scene: Scene, plan: EditPlan, vocab: SemanticVocabulary) -> tuple[list, list]:
    """Oracle describer: source prompt from the scene's factors, target prompt
    identical except for the planned attributes."""
    source = dict(scene.assignment)
    target = dict(source)
    for e in plan.entries:
        if e.attribute not in vocab.attribute_names:
            raise KeyError(f"vocabulary has no attribute {e.attribute!r}")
        if e.target not in vocab.values(e.attribute):
            raise KeyError(f"vocabulary has no value {e.target!r} for {e.attribute!r}")
        if source.get(e.attribute) != e.source:
            raise ValueError(f"plan source {e.attribute}={e.source!r} does not match the scene ({source.get(e.attribute)!r})")
        target[e.attribute] = e.target
    return vocab.prompt(source), vocab.prompt(target)


def attribute_prompt(vocab: SemanticVocabulary, t1: list, plan: EditPlan) -> list:
    return [tok if tok[0] in plan.attributes else NULL for tok in t1]


def target_coords(source: np.ndarray, plan: EditPlan, factor_names=FACTORS) -> np.ndarray:
    out = np.array(source, dtype=np.float64)
    for e in plan.entries:
        j = factor_names.index(e.attribute)
        lo, hi = LEVELS[(e.attribute, e.source)], LEVELS[(e.attribute, e.target)]
        out[j] = lo + e.alpha * (hi - lo)
    return out


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:  # stage tag for the caller
        raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc


def eim_edit(req: EditRequest, den, vocab: SemanticVocabulary, sched: NoiseSchedule) -> EditReport:
    rng = derive_stream(req.seed, 0)

    # Encode
    t0, t1 = _stage("encode", describe, req.scene, req.plan, vocab)
    z_c0 = encode_prompt(vocab, t0)
    z_c1 = encode_prompt(vocab, t1)
    z = LatentImage(_stage("encode", den.encode_scene, req.scene), 0)
    t_star = sched.strength_to_timestep(req.sampler.forward_fraction)
    eps = rng.standard_normal(z.tokens.shape)
    z_t = forward_noise(z, t_star, eps, sched)

    # Identify
    z_tilde_c = _stage("identify", multi_attr_manipulate, z_c0, z_c1, req.plan)
    n_c = EditDirection("text", z_tilde_c.tokens - z_c0.tokens, float(np.max(req.plan.degrees, initial=0.0)))
    if req.pooled_extra:
        z_tilde_c = TextEmbedding(z_tilde_c.tokens, z_tilde_c.identities, n_c.delta.mean(axis=0))
    if req.hsds.z_s_mode == "context":
        z_s = z_c1
    else:
        z_s = encode_prompt(vocab, attribute_prompt(vocab, t1, req.plan))
    trace = None
    if t_star > 0 and req.hsds.iterations > 0:
        n_img, trace = _stage("identify", identify_image_direction, den, z_t, z_tilde_c, z_s, req.hsds, rng)
    else:
        n_img = EditDirection("image", np.zeros_like(z.tokens), 0.0)
    if req.scale_image_by_alpha:
        n_img = n_img.scaled(float(np.max(req.plan.degrees, initial=0.0)))

    # Manipulate
    z_tilde_t = LatentImage(z_t.tokens + n_img.delta, t_star)
    z_tilde_c_final = apply_text_direction(z_c0, n_c)
    z_tilde_c_final.pooled_delta = z_tilde_c.pooled_delta
    if t_star > 0:
        z0 = _stage("sample", reverse_sample, z_tilde_t, z_tilde_c_final, den, req.sampler, sched, rng).tokens
    else:
        z0 = z_tilde_t.tokens
    if not np.all(np.isfinite(z0)):
        raise PipelineError("sample", "non-finite edited latent")

    return EditReport(
        source_coords=req.scene.factors.coords(),
        edited_coords=np.asarray(_stage("decode", den.read_factors, z0)),
        edited_raster=_stage("decode", den.decode, z0),
        edited_latent=z0,
        text_source=z_c0,
        text_edited=z_tilde_c_final,
        n_text=n_c,
        n_image=n_img,
        t_star=t_star,
        seed=req.seed,
        plan=req.plan,
        sampler=req.sampler,
        factor_names=tuple(getattr(den, "factor_names", FACTORS)),
        trace=trace,
        source_raster=req.scene.raster,
    )


def reverse_edit(report: EditReport, den, sched: NoiseSchedule) -> EditReport:
    """Move the edited joint latent back along the negated directions."""
    if report.n_text is None or report.n_image is None:
        raise PipelineError("reverse", "report carries no directions")
    rng = derive_stream(report.seed, 1)
    z = LatentImage(report.edited_latent, 0)
    eps = rng.standard_normal(z.tokens.shape)
    z_t = forward_noise(z, report.t_star, eps, sched)
    back_t = LatentImage(z_t.tokens - report.n_image.delta, report.t_star)
    back_c = apply_text_direction(report.text_edited, -report.n_text)
    if report.t_star > 0:
        z0 = _stage("sample", reverse_sample, back_t, back_c, den, report.sampler, sched, rng).tokens
    else:
        z0 = back_t.tokens
    inverse_plan = EditPlan(tuple(replace(e, source=e.target, target=e.source) for e in report.plan.entries))
    return replace(
        report,
        edited_coords=np.asarray(den.read_factors(z0)),
        edited_raster=den.decode(z0),
        edited_latent=z0,
        text_edited=back_c,
        n_text=-report.n_text,
        n_image=-report.n_image,
        plan=inverse_plan,
        trace=None,
    )


def signed_distance(emb: TextEmbedding, z_c0: TextEmbedding, z_c1: TextEmbedding) -> float:
    """n^T (z - midpoint) for the unit text direction n between two prompts."""
    n = (z_c1.tokens - z_c0.tokens).ravel()
    norm = np.linalg.norm(n)
    if norm == 0.0:
        return 0.0
    mid = 0.5 * (z_c0.tokens + z_c1.tokens).ravel()
    return float(n @ (emb.tokens.ravel() - mid) / norm)


@dataclass
class SweepRow:
    alpha: float
    target_delta: float
    max_drift: float
    projection: float
    tau: float
    within_bound: bool


def threshold_sweep(req: EditRequest, alphas, den, vocab: SemanticVocabulary, sched: NoiseSchedule,
                    corruption_tol: float = 0.05):
    """Edit at each degree with paired seeds; deltas are against the null edit.

    Returns (rows, first alpha whose off-target drift exceeds ``corruption_tol``).
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alpha list must be nonempty")
    if any(a < 0 for a in alphas):
        raise ValueError("edit degrees must be nonnegative")
    factor_names = tuple(getattr(den, "factor_names", FACTORS))
    target_j = factor_names.index(req.plan.entries[0].attribute)
    edited = [factor_names.index(a) for a in req.plan.attributes]
    base_req = replace(req, plan=req.plan.with_alpha(0.0), scale_image_by_alpha=True)
    baseline = eim_edit(base_req, den, vocab, sched).edited_coords
    d = vocab.width
    rows, corrupt_at = [], None
    for a in alphas:
        rep = eim_edit(replace(req, plan=req.plan.with_alpha(a), scale_image_by_alpha=True), den, vocab, sched)
        diff = rep.edited_coords - baseline
        off = [abs(diff[j]) for j in range(len(diff)) if j not in edited]
        proj = float(abs(rep.n_text.delta.ravel() @ rep.text_edited.tokens.ravel()))
        tau = tau_threshold(a, d) if a > 0 else 0.0
        row = SweepRow(a, float(diff[target_j]), float(max(off, default=0.0)), proj, tau, proj <= tau + 1e-12)
        rows.append(row)
        if corrupt_at is None and row.max_drift > corruption_tol:
            corrupt_at = a
    return rows, corrupt_at

