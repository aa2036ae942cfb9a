"""Synthetic "a <color> <object>" scenes: factors, anti-aliased rendering,
masks, dataset sampling and PPM/PGM export.

Every scene factor also has a coordinate in [0, 1] ("factor space"); the
analytic denoiser works in those coordinates and renders them back with
:func:`render_coords`, which accepts continuous colour and shape mixes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

RASTER = 16
SUPERSAMPLE = 4
BACKGROUND = np.array([0.5, 0.5, 0.5])
COLORS = {
    "red": np.array([0.9, 0.1, 0.1]),
    "green": np.array([0.1, 0.8, 0.1]),
    "blue": np.array([0.1, 0.2, 0.9]),
}
OBJECTS = ("square", "circle")
SIZE_RANGE = (0.3, 0.8)
POS_RANGE = (0.2, 0.8)

FACTORS = ("color", "object", "size", "xpos", "ypos")
# token -> coordinate in factor space
LEVELS: dict[tuple[str, str], float] = {
    ("color", "red"): 0.0,
    ("color", "green"): 0.5,
    ("color", "blue"): 1.0,
    ("object", "square"): 0.0,
    ("object", "circle"): 1.0,
    ("size", "small"): 0.2,
    ("size", "medium"): 0.5,
    ("size", "large"): 0.9,
    ("xpos", "left"): 0.2,
    ("xpos", "center"): 0.5,
    ("xpos", "right"): 0.8,
    ("ypos", "top"): 0.2,
    ("ypos", "middle"): 0.5,
    ("ypos", "bottom"): 0.8,
}


@dataclass(frozen=True)
class FactorVector:
    color: str
    object: str
    size: float
    x: float
    y: float

    def validate(self) -> None:
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.object not in OBJECTS:
            raise ValueError(f"unknown object {self.object!r}")
        lo, hi = SIZE_RANGE
        if not lo - 1e-12 <= self.size <= hi + 1e-12:
            raise ValueError(f"size {self.size} outside {SIZE_RANGE}")
        lo, hi = POS_RANGE
        for name, val in (("x", self.x), ("y", self.y)):
            if not lo - 1e-12 <= val <= hi + 1e-12:
                raise ValueError(f"{name} position {val} outside {POS_RANGE}")

    def coords(self) -> np.ndarray:
        return np.array([
            LEVELS[("color", self.color)],
            LEVELS[("object", self.object)],
            (self.size - SIZE_RANGE[0]) / (SIZE_RANGE[1] - SIZE_RANGE[0]),
            (self.x - POS_RANGE[0]) / (POS_RANGE[1] - POS_RANGE[0]),
            (self.y - POS_RANGE[0]) / (POS_RANGE[1] - POS_RANGE[0]),
        ])

    def assignment(self) -> dict[str, str]:
        """Oracle description: the nearest vocabulary value for every factor."""
        c = self.coords()
        out = {"article": "a", "color": self.color, "object": self.object}
        for i, attr in enumerate(("size", "xpos", "ypos"), start=2):
            choices = [(abs(LEVELS[k] - c[i]), k[1]) for k in LEVELS if k[0] == attr]
            out[attr] = min(choices)[1]
        return out

    @classmethod
    def from_assignment(cls, assignment: dict[str, str]) -> "FactorVector":
        def unit(attr):
            return LEVELS[(attr, assignment[attr])]

        return cls(
            assignment["color"],
            assignment["object"],
            SIZE_RANGE[0] + unit("size") * (SIZE_RANGE[1] - SIZE_RANGE[0]),
            POS_RANGE[0] + unit("xpos") * (POS_RANGE[1] - POS_RANGE[0]),
            POS_RANGE[0] + unit("ypos") * (POS_RANGE[1] - POS_RANGE[0]),
        )


@dataclass
class Scene:
    factors: FactorVector
    raster: np.ndarray
    object_mask: np.ndarray
    background_mask: np.ndarray
    prompt: list

    @property
    def assignment(self) -> dict[str, str]:
        return dict(self.prompt)


def _coverage(shape_mix: float, size: float, cx: float, cy: float) -> np.ndarray:
    n = RASTER * SUPERSAMPLE
    g = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(g, g)  # rows are y
    half = size / 2.0
    square = ((np.abs(X - cx) <= half) & (np.abs(Y - cy) <= half)).astype(np.float64)
    circle = (((X - cx) ** 2 + (Y - cy) ** 2) <= half * half).astype(np.float64)
    fine = (1.0 - shape_mix) * square + shape_mix * circle
    return fine.reshape(RASTER, SUPERSAMPLE, RASTER, SUPERSAMPLE).mean(axis=(1, 3))


def color_from_coord(c: float) -> np.ndarray:
    c = float(np.clip(c, 0.0, 1.0))
    red, green, blue = COLORS["red"], COLORS["green"], COLORS["blue"]
    if c <= 0.5:
        return red + (green - red) * (c / 0.5)
    return green + (blue - green) * ((c - 0.5) / 0.5)


def render_coords(coords) -> tuple[np.ndarray, np.ndarray]:
    """Raster and coverage from factor-space coordinates (clipped to [0, 1])."""
    c = np.clip(np.asarray(coords, dtype=np.float64), 0.0, 1.0)
    size = SIZE_RANGE[0] + c[2] * (SIZE_RANGE[1] - SIZE_RANGE[0])
    cx = POS_RANGE[0] + c[3] * (POS_RANGE[1] - POS_RANGE[0])
    cy = POS_RANGE[0] + c[4] * (POS_RANGE[1] - POS_RANGE[0])
    cov = _coverage(c[1], size, cx, cy)[..., None]
    raster = BACKGROUND * (1.0 - cov) + color_from_coord(c[0]) * cov
    return raster, cov[..., 0]


def render_scene(factors: FactorVector) -> Scene:
    factors.validate()
    raster, cov = render_coords(factors.coords())
    obj = cov > 0.5
    return Scene(factors, raster, obj, ~obj, _prompt_tokens(factors.assignment()))


def _prompt_tokens(assignment: dict[str, str]) -> list:
    order = ("article", "color", "object", "size", "xpos", "ypos")
    return [(a, assignment[a]) for a in order if a in assignment]


def sample_factors(rng: np.random.Generator, color: str | None = None, quantized: bool = False) -> FactorVector:
    if color is None:
        color = list(COLORS)[rng.integers(len(COLORS))]
    obj = OBJECTS[rng.integers(len(OBJECTS))]
    if quantized:
        pick = {}
        for attr in ("size", "xpos", "ypos"):
            vals = [k[1] for k in LEVELS if k[0] == attr]
            pick[attr] = vals[rng.integers(len(vals))]
        return FactorVector.from_assignment({"color": color, "object": obj, **pick})
    size = rng.uniform(*SIZE_RANGE)
    x, y = rng.uniform(*POS_RANGE, size=2)
    return FactorVector(color, obj, float(size), float(x), float(y))


def sample_dataset(n: int, rng: np.random.Generator, quantized: bool = False) -> list[Scene]:
    """n scenes with colours stratified as evenly as n allows, order shuffled."""
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    names = list(COLORS)
    colors = [names[i % len(names)] for i in range(n)]
    order = rng.permutation(n)
    return [render_scene(sample_factors(rng, colors[i], quantized)) for i in order]


# -- export -----------------------------------------------------------------


def to_bytes8(values: np.ndarray) -> bytes:
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8).tobytes()


def write_ppm(path, raster: np.ndarray) -> None:
    h, w, _ = raster.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + to_bytes8(raster))


def write_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + to_bytes8(mask.astype(np.float64)))


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    magic, w, h, maxval, body = parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
    channels = 3 if magic == b"P6" else 1
    arr = np.frombuffer(body[: w * h * channels], dtype=np.uint8).astype(np.float64) / maxval
    return arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)


def dataset_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def export_dataset(scenes: list[Scene], root, config: dict) -> Path:
    """Write scenes under ``root/<config-hash>/`` and return that directory."""
    out = Path(root) / dataset_hash(config)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, s in enumerate(scenes):
        stem = f"scene_{i:05d}"
        write_ppm(out / f"{stem}.ppm", s.raster)
        write_pgm(out / f"{stem}_object.pgm", s.object_mask)
        write_pgm(out / f"{stem}_background.pgm", s.background_mask)
        manifest.append({"id": stem, "factors": asdict(s.factors), "prompt": [list(t) for t in s.prompt]})
    doc = {"config": config, "scenes": manifest}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


# -- reading factors back off a raster ---------------------------------------

_PATH = np.linspace(0.0, 1.0, 201)
_PATH_COLORS = np.stack([color_from_coord(c) for c in _PATH])
_MIXES = np.linspace(0.0, 1.0, 11)


def estimate_factors(raster: np.ndarray) -> np.ndarray:
    """Factor-space coordinates of a rendered (or generated) raster.

    Colour comes from the most saturated pixels projected onto the palette
    path, position from the coverage centroid, and shape mix plus size from
    the best-fitting rendered silhouette. Objects clipped by two canvas edges
    are ambiguous in size and the fit returns the smallest consistent one.
    An empty canvas reads as the factor-space midpoint.
    """
    img = np.clip(np.asarray(raster, dtype=np.float64), 0.0, 1.0)
    off = img - BACKGROUND
    dist = np.linalg.norm(off, axis=-1)
    if dist.max() < 0.05:
        return np.full(len(FACTORS), 0.5)
    core = dist >= 0.9 * dist.max()
    col = img[core].mean(axis=0)
    color = _PATH[np.argmin(np.linalg.norm(_PATH_COLORS - col, axis=1))]
    ref = col - BACKGROUND
    cov = np.clip(off @ ref / (ref @ ref), 0.0, 1.0)
    g = (np.arange(RASTER) + 0.5) / RASTER
    total = cov.sum()
    cx = float((cov.sum(axis=0) * g).sum() / total)
    cy = float((cov.sum(axis=1) * g).sum() / total)
    area = total / RASTER**2
    best = None
    for m in _MIXES:
        s0 = np.sqrt(area / ((1.0 - m) + m * np.pi / 4.0))
        fit = minimize(
            lambda p, m=m: float(np.sum((_coverage(m, p[0], p[1], p[2]) - cov) ** 2)),
            [s0, cx, cy], method="Nelder-Mead",
            options={"xatol": 1e-3, "fatol": 1e-6, "maxiter": 200},
        )
        if best is None or fit.fun < best[0]:
            best = (fit.fun, m, fit.x[0], fit.x[1], fit.x[2])
    _, mix, size, cx, cy = best
    return np.array([
        color,
        mix,
        (size - SIZE_RANGE[0]) / (SIZE_RANGE[1] - SIZE_RANGE[0]),
        (cx - POS_RANGE[0]) / (POS_RANGE[1] - POS_RANGE[0]),
        (cy - POS_RANGE[0]) / (POS_RANGE[1] - POS_RANGE[0]),
    ])
