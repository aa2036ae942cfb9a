"""Denoiser contract shared by the analytic oracle and the toy attention models."""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from eimlab.text import SemanticVocabulary, TextEmbedding


@runtime_checkable
class Denoiser(Protocol):
    """Conditional epsilon-predictor.

    ``predict`` takes a latent of shape (..., v, d), a text condition and an
    integer timestep and returns an array of the latent's shape. It must be
    deterministic and must not mutate the model.
    """

    vocab: SemanticVocabulary
    token_count: int
    width: int

    def predict(self, z_t: np.ndarray, cond: TextEmbedding, t: int) -> np.ndarray: ...
