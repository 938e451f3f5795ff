"""Match-probability layer and binary cross-entropy objective.

The probability that a response answers a comment chunk is the negative
exponential of the cosine distance between their embeddings,
p = exp(-alpha * (1 - cos)), with alpha controlling how fast the
probability decays as the embeddings drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonUnitNormError

POSITIVE = "positive"
NEGATIVE = "negative"

PROB_EPS = 1e-12  # probability clamp applied before logs
_UNIT_TOL = 1e-6


@dataclass
class ScoringConfig:
    alpha: float = 50.0

    def __post_init__(self) -> None:
        if not (self.alpha > 0.0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")


@dataclass
class MatchScore:
    probability: float
    cosine_similarity: float


def _check_unit(v: np.ndarray, name: str) -> None:
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > _UNIT_TOL:
        raise NonUnitNormError(f"{name} has norm {norm!r}, expected unit within {_UNIT_TOL}")


def _cosine(vc: np.ndarray, vr: np.ndarray) -> float:
    # Bitwise-equal inputs have cosine distance exactly zero; computing the
    # dot product would re-introduce rounding noise.
    if vc is vr or np.array_equal(vc, vr):
        return 1.0
    s = float(vc @ vr)
    return min(1.0, max(-1.0, s))


def match_probability(vc: np.ndarray, vr: np.ndarray, cfg: ScoringConfig) -> MatchScore:
    """p(match) = exp(-alpha * (1 - vc.vr)) for unit-norm embeddings."""
    _check_unit(vc, "vc")
    _check_unit(vr, "vr")
    s = _cosine(vc, vr)
    return MatchScore(probability=math.exp(-cfg.alpha * (1.0 - s)), cosine_similarity=s)


def bce_loss(score: MatchScore, label: str) -> float:
    """-log p for positives, -log(1-p) for negatives, with p clamped."""
    p = min(max(score.probability, PROB_EPS), 1.0 - PROB_EPS)
    if label == POSITIVE:
        return -math.log(p)
    if label == NEGATIVE:
        return -math.log(1.0 - p)
    raise ValueError(f"unknown label {label!r}")


def loss_gradient(
    vc: np.ndarray,
    vr: np.ndarray,
    cfg: ScoringConfig,
    label: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (dL/dvc, dL/dvr) through the scorer and the BCE loss.

    For positives dL/ds = -alpha exactly (the exponential cancels against
    the log); for negatives dL/ds = alpha * p / (1 - p) with p clamped away
    from 1, which keeps the gradient finite when a negative pair is scored
    as a near-certain match.
    """
    _check_unit(vc, "vc")
    _check_unit(vr, "vr")
    s = _cosine(vc, vr)
    if label == POSITIVE:
        coeff = -cfg.alpha
    elif label == NEGATIVE:
        p = min(max(math.exp(-cfg.alpha * (1.0 - s)), PROB_EPS), 1.0 - PROB_EPS)
        coeff = cfg.alpha * p / (1.0 - p)
    else:
        raise ValueError(f"unknown label {label!r}")
    return coeff * vr, coeff * vc
