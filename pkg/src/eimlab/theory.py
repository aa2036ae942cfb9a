"""Executable checks of the two propositions about editing directions.

Orthogonality (prop2): direction vectors placed in disjoint blocks of R^{md}
are orthogonal and keep their norm. Concentration (prop1): for standard-normal latents,
sum_i n_i^T z_i ~ N(0, m), so P(|sum| <= tau) = erf(tau / sqrt(2m)); the
Monte-Carlo estimate is compared to that and to the stated lower bound.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from eimlab.diffusion import derive_stream
from eimlab.text import extended_direction

DEFAULT_C_GRID = (0.01, 0.1, 0.5, 1.0)
CHUNK = 100_000


def tau_threshold(alpha: float, d: int) -> float:
    if d <= 2:
        raise ValueError("tau needs d > 2")
    return 2.0 * alpha * math.sqrt(d / (d - 2.0))


def prop2_check(directions) -> tuple[float, float]:
    """(max |<n_i^ext, n_j^ext>| over i != j, max | ||n_i^ext|| - 1 |)."""
    dirs = [np.asarray(n, dtype=np.float64) for n in directions]
    if not dirs:
        raise ValueError("need at least one direction")
    for i, n in enumerate(dirs):
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError(f"direction {i} is not unit norm")
    m = len(dirs)
    ext = [extended_direction(n, i + 1, m) for i, n in enumerate(dirs)]
    worst_dot = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            worst_dot = max(worst_dot, abs(float(ext[i] @ ext[j])))
    worst_norm = max(abs(float(np.linalg.norm(e)) - 1.0) for e in ext)
    return worst_dot, worst_norm


def prop1_bound(m: int, d: int, alpha: float, c: float) -> float:
    """((1 - 3 e^{-c d}) (1 - (2/alpha) e^{-alpha^2/2}))^m."""
    return ((1.0 - 3.0 * math.exp(-c * d)) * (1.0 - (2.0 / alpha) * math.exp(-alpha * alpha / 2.0))) ** m


@dataclass
class Prop1Report:
    m: int
    d: int
    alpha: float
    samples: int
    tau: float
    estimate: float
    analytic: float
    stderr: float
    bounds: dict  # c -> claimed lower bound

    @property
    def z_score(self) -> float:
        return abs(self.estimate - self.analytic) / self.stderr if self.stderr > 0 else 0.0

    def bound_holds(self, c: float) -> bool:
        return self.estimate >= self.bounds[c]

    def rows(self):
        for c, b in sorted(self.bounds.items()):
            yield {
                "m": self.m, "d": self.d, "alpha": self.alpha, "samples": self.samples,
                "tau": self.tau, "estimate": self.estimate, "analytic": self.analytic,
                "stderr": self.stderr, "c": c, "bound": b, "bound_holds": self.bound_holds(c),
            }


def _chunk_hits(m, d, tau, n, root, task):
    rng = derive_stream(root, task)
    hits = 0
    # draw the full latents and unit directions; the projections are what matter
    # but sampling the d-dimensional objects keeps the check honest
    step = max(1, 2_000_000 // (m * d))
    done = 0
    while done < n:
        k = min(step, n - done)
        dirs = rng.standard_normal((k, m, d))
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        z = rng.standard_normal((k, m, d))
        s = np.einsum("kmd,kmd->k", dirs, z)
        hits += int(np.count_nonzero(np.abs(s) <= tau))
        done += k
    return hits


def prop1_mc(m: int, d: int, alpha: float, samples: int, seed: int = 0, c_grid=DEFAULT_C_GRID,
             jobs: int = 1) -> Prop1Report:
    """Monte-Carlo estimate of P(|sum n_i^T z_i| <= tau).

    Work is split into fixed chunks, each with its own derived stream, so the
    result does not depend on ``jobs``.
    """
    if alpha < 1:
        raise ValueError("the concentration bound needs alpha >= 1")
    if d < 4:
        raise ValueError("the concentration bound needs d >= 4")
    if m < 1:
        raise ValueError("m must be positive")
    if samples < 10_000:
        raise ValueError("at least 1e4 samples are required")
    tau = tau_threshold(alpha, d)
    sizes = [CHUNK] * (samples // CHUNK) + ([samples % CHUNK] if samples % CHUNK else [])
    args = [(m, d, tau, n, seed, i) for i, n in enumerate(sizes)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            hits = sum(ex.map(lambda a: _chunk_hits(*a), args))
    else:
        hits = sum(_chunk_hits(*a) for a in args)
    p = hits / samples
    analytic = math.erf(tau / math.sqrt(2.0 * m))
    stderr = math.sqrt(max(analytic * (1.0 - analytic), 1.0 / samples) / samples)
    bounds = {float(c): prop1_bound(m, d, alpha, c) for c in c_grid}
    return Prop1Report(m, d, float(alpha), samples, tau, p, analytic, stderr, bounds)


PROP1_FIELDS = ["m", "d", "alpha", "samples", "tau", "estimate", "analytic", "stderr", "c", "bound", "bound_holds"]


def write_prop1_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, PROP1_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            for row in r.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def prop1_summary(reports) -> str:
    lines = ["m  d   alpha  estimate   analytic   |z|    bound holds for c"]
    for r in reports:
        ok = ",".join(f"{c:g}" for c in sorted(r.bounds) if r.bound_holds(c)) or "none"
        lines.append(f"{r.m:<2} {r.d:<3} {r.alpha:<6g} {r.estimate:.6f}  {r.analytic:.6f}  {r.z_score:5.2f}  {ok}")
    return "\n".join(lines) + "\n"


def report_dict(r: Prop1Report) -> dict:
    return asdict(r)
