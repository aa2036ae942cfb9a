"""Toy text encoder over a structured semantic vocabulary, and the linear
algebra of text-side edit directions.

Prompts are slot lists: one row per vocabulary attribute, in vocabulary
order, with the reserved null token filling attributes the prompt leaves
unspecified. Token vectors are seeded standard normals scaled to unit norm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

NULL = ("<null>", "<null>")

SHAPES_ATTRIBUTES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("article", ("a",)),
    ("color", ("red", "green", "blue")),
    ("object", ("square", "circle")),
    ("size", ("small", "medium", "large")),
    ("xpos", ("left", "center", "right")),
    ("ypos", ("top", "middle", "bottom")),
)


class UnknownTokenError(KeyError):
    pass


@dataclass(frozen=True)
class SemanticVocabulary:
    attributes: tuple[tuple[str, tuple[str, ...]], ...] = SHAPES_ATTRIBUTES
    width: int = 32
    seed: int = 7

    def __post_init__(self):
        names = [a for a, _ in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError("attribute names must be unique")
        if self.width < 2:
            raise ValueError("embedding width must be at least 2")
        rng = np.random.default_rng(self.seed)
        table = rng.standard_normal((len(self.tokens), self.width))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        table.setflags(write=False)
        object.__setattr__(self, "_table", table)
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.tokens)})

    @property
    def tokens(self) -> list[tuple[str, str]]:
        return [NULL] + [(a, v) for a, values in self.attributes for v in values]

    @property
    def attribute_names(self) -> list[str]:
        return [a for a, _ in self.attributes]

    @property
    def table(self) -> np.ndarray:
        return self._table

    def values(self, attribute: str) -> tuple[str, ...]:
        for a, values in self.attributes:
            if a == attribute:
                return values
        raise UnknownTokenError(f"unknown attribute {attribute!r}")

    def vector(self, token: tuple[str, str]) -> np.ndarray:
        try:
            return self._table[self._index[tuple(token)]]
        except KeyError:
            raise UnknownTokenError(f"token {token!r} is not in the vocabulary") from None

    def index(self, token: tuple[str, str]) -> int:
        try:
            return self._index[tuple(token)]
        except KeyError:
            raise UnknownTokenError(f"token {token!r} is not in the vocabulary") from None

    def prompt(self, assignment: dict[str, str]) -> list[tuple[str, str]]:
        """Slot-ordered token list for an attribute -> value assignment."""
        unknown = set(assignment) - set(self.attribute_names)
        if unknown:
            raise UnknownTokenError(f"unknown attribute(s) {sorted(unknown)}")
        out = []
        for a, values in self.attributes:
            if a in assignment:
                if assignment[a] not in values:
                    raise UnknownTokenError(f"token {(a, assignment[a])!r} is not in the vocabulary")
                out.append((a, assignment[a]))
            else:
                out.append(NULL)
        return out

    def null_embedding(self, length: int) -> "TextEmbedding":
        return encode_prompt(self, [NULL] * length)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "width": self.width,
            "attributes": [{"name": a, "values": list(v)} for a, v in self.attributes],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SemanticVocabulary":
        doc = json.loads(text)
        attrs = tuple((a["name"], tuple(a["values"])) for a in doc["attributes"])
        return cls(attributes=attrs, width=int(doc["width"]), seed=int(doc["seed"]))


@dataclass
class TextEmbedding:
    tokens: np.ndarray
    identities: list = field(default_factory=list)
    pooled_delta: np.ndarray | None = None  # extra pooled shift, see eim pipeline

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError("text embedding must be a non-empty l x d matrix")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("text embedding contains non-finite entries")
        if self.identities and len(self.identities) != self.tokens.shape[0]:
            raise ValueError("identities must name every row")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def pooled(self) -> np.ndarray:
        p = pool(self)
        return p if self.pooled_delta is None else p + self.pooled_delta

    def row_of(self, attribute: str) -> int:
        for i, (a, _) in enumerate(self.identities):
            if a == attribute:
                return i
        raise KeyError(f"attribute {attribute!r} not present in prompt {self.identities}")

    def with_tokens(self, tokens: np.ndarray) -> "TextEmbedding":
        return TextEmbedding(tokens, list(self.identities), self.pooled_delta)


@dataclass(frozen=True)
class EditDirection:
    subspace: str  # "text" or "image"
    delta: np.ndarray
    degree: float = 1.0

    def __post_init__(self):
        if self.subspace not in ("text", "image"):
            raise ValueError(f"unknown subspace {self.subspace!r}")
        if not np.all(np.isfinite(self.delta)):
            raise ValueError("direction contains non-finite entries")

    def __neg__(self) -> "EditDirection":
        return EditDirection(self.subspace, -self.delta, -self.degree)

    def scaled(self, factor: float) -> "EditDirection":
        return EditDirection(self.subspace, factor * self.delta, factor * self.degree)


@dataclass(frozen=True)
class PlanEntry:
    attribute: str
    source: str
    target: str
    alpha: float = 1.0


@dataclass(frozen=True)
class EditPlan:
    entries: tuple[PlanEntry, ...] = ()

    def __post_init__(self):
        attrs = [e.attribute for e in self.entries]
        if len(set(attrs)) != len(attrs):
            raise ValueError("edit plan attributes must be distinct")

    @classmethod
    def single(cls, attribute: str, source: str, target: str, alpha: float = 1.0) -> "EditPlan":
        return cls((PlanEntry(attribute, source, target, alpha),))

    @property
    def degrees(self) -> np.ndarray:
        """Diagonal of the per-attribute degree matrix."""
        return np.array([e.alpha for e in self.entries], dtype=np.float64)

    @property
    def attributes(self) -> list[str]:
        return [e.attribute for e in self.entries]

    def with_alpha(self, alpha: float) -> "EditPlan":
        return EditPlan(tuple(PlanEntry(e.attribute, e.source, e.target, alpha) for e in self.entries))


def encode_prompt(vocab: SemanticVocabulary, tokens: Sequence[tuple[str, str]]) -> TextEmbedding:
    tokens = [tuple(t) for t in tokens]
    if not tokens:
        raise ValueError("cannot encode an empty prompt")
    rows = np.stack([vocab.vector(t) for t in tokens])
    return TextEmbedding(rows, tokens)


def pool(emb: TextEmbedding) -> np.ndarray:
    if emb.tokens.shape[0] == 0:
        raise ValueError("cannot pool an empty embedding")
    return emb.tokens.mean(axis=0)


def text_direction(z_c0: TextEmbedding, z_c1: TextEmbedding, alpha: float) -> EditDirection:
    if z_c0.tokens.shape != z_c1.tokens.shape:
        raise ValueError(f"prompt shapes differ: {z_c0.tokens.shape} vs {z_c1.tokens.shape}")
    return EditDirection("text", alpha * (z_c1.tokens - z_c0.tokens), alpha)


def apply_text_direction(z_c0: TextEmbedding, n: EditDirection) -> TextEmbedding:
    if n.subspace != "text":
        raise TypeError("an image-subspace direction cannot be applied to a text embedding")
    if n.delta.shape != z_c0.tokens.shape:
        raise ValueError(f"direction shape {n.delta.shape} does not match embedding {z_c0.tokens.shape}")
    return z_c0.with_tokens(z_c0.tokens + n.delta)


def multi_attr_manipulate(C0: TextEmbedding, C1: TextEmbedding, plan: EditPlan) -> TextEmbedding:
    """C = C0 + diag(degrees) (C1 - C0), restricted to the rows the plan names.

    Rows are formed as (1 - a) C0 + a C1, which is exact at both a = 0 and a = 1.
    """
    if C0.tokens.shape != C1.tokens.shape:
        raise ValueError("source and target prompts must have the same shape")
    out = C0.tokens.copy()
    for e in plan.entries:
        try:
            r0, r1 = C0.row_of(e.attribute), C1.row_of(e.attribute)
        except KeyError as exc:
            raise KeyError(f"plan attribute {e.attribute!r} is absent from the prompts") from exc
        if r0 != r1:
            raise ValueError(f"attribute {e.attribute!r} sits at different rows ({r0} vs {r1})")
        out[r0] = (1.0 - e.alpha) * C0.tokens[r0] + e.alpha * C1.tokens[r1]
    return C0.with_tokens(out)


def extended_direction(n_i, block_index: int, block_count: int) -> np.ndarray:
    """Place n_i in block ``block_index`` (1-based) of an (m*d)-vector of zeros."""
    n_i = np.asarray(n_i, dtype=np.float64)
    if not 1 <= block_index <= block_count:
        raise IndexError(f"block index {block_index} outside [1, {block_count}]")
    if not np.all(np.isfinite(n_i)):
        raise ValueError("direction must be finite")
    d = n_i.shape[0]
    out = np.zeros(block_count * d)
    out[(block_index - 1) * d : block_index * d] = n_i
    return out


def differing_rows(a: Iterable, b: Iterable) -> list[int]:
    return [i for i, (x, y) in enumerate(zip(a, b)) if tuple(x) != tuple(y)]
