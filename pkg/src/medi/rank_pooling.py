"""Baseline dynamic images.

Production path: closed-form approximate rank pooling, a weighted frame sum
with linear coefficients 2t - T - 1. Test oracle: exact rank pooling by
fixed-step subgradient descent on the pairwise hinge objective over running
feature means, kept independent so the closed form has something to be
checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import NumericalError

if TYPE_CHECKING:
    from .media_io import Clip

COEFF_KINDS = ("ARP", "TEMPORAL_RANKED", "MOTION")


@dataclass
class CoefficientVector:
    """Per-frame scalar weights for a weighted frame sum."""

    values: np.ndarray
    kind: str = "ARP"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in COEFF_KINDS:
            raise ValueError(f"unknown coefficient kind {self.kind!r}")
        if not np.isfinite(self.values).all():
            raise ValueError("coefficients must be finite")

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class DynamicImage:
    """A single-image summary of a clip (H x W x C float tensor)."""

    tensor: np.ndarray
    provenance: str = "DI"
    source_clip_id: str = ""

    def __post_init__(self):
        if self.provenance not in ("DI", "TRDI", "MIDI", "FUSED"):
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass
class RankingVector:
    """Result of exact rank pooling: the ranking direction and diagnostics."""

    d: np.ndarray
    regularizer: float
    iterations: int
    final_objective: float
    objective_trace: np.ndarray = field(repr=False, default=None)


def arp_coefficients(num_frames: int) -> CoefficientVector:
    """Linear rank-pooling coefficients 2t - T - 1 for t = 1..T.

    Integer-valued, symmetric about zero, and exactly zero-sum.
    """
    if num_frames < 2:
        raise ValueError("need at least two frames")
    t = np.arange(1, num_frames + 1, dtype=np.float64)
    return CoefficientVector(values=2.0 * t - num_frames - 1.0, kind="ARP")


def weighted_sum_image(clip: "Clip", coeffs: CoefficientVector) -> DynamicImage:
    """Weighted sum of a clip's frames, accumulated in double precision."""
    values = np.asarray(coeffs.values, dtype=np.float64)
    if len(values) != clip.T:
        raise ValueError(f"coefficient length {len(values)} != clip length {clip.T}")
    stack = clip.pixel_stack().astype(np.float64)
    tensor = np.tensordot(values, stack, axes=1)
    provenance = "TRDI" if coeffs.kind == "TEMPORAL_RANKED" else "DI"
    return DynamicImage(tensor=tensor, provenance=provenance, source_clip_id=clip.entry.clip_id)


def running_feature_means(clip: "Clip") -> np.ndarray:
    """Running means V_t of the flattened frames, shape (T, H*W*C)."""
    stack = clip.pixel_stack().astype(np.float64).reshape(clip.T, -1)
    cums = np.cumsum(stack, axis=0)
    return cums / np.arange(1, clip.T + 1, dtype=np.float64)[:, None]


def exact_rank_pool(
    clip: "Clip",
    lambda_reg: float = 1.0,
    iterations: int = 500,
    step_size: float = 1e-3,
) -> RankingVector:
    """Subgradient descent on the pairwise hinge ranking objective.

    Minimizes  lambda/2 ||d||^2 + 2/(T(T-1)) * sum_{q>t} max(0, 1 - <d,V_q> + <d,V_t>)
    over the running means V_t, starting from d = 0 with a fixed step.
    Slow by design; this is the oracle the closed-form pooling is compared
    against in tests, never a production path.
    """
    if clip.T < 2:
        raise ValueError("need at least two frames")
    if lambda_reg <= 0:
        raise ValueError("lambda_reg must be positive")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    v = running_feature_means(clip)
    T = clip.T
    ts, qs = np.triu_indices(T, k=1)  # ts < qs, i.e. every ordered pair q > t
    pair_norm = 2.0 / (T * (T - 1))
    d = np.zeros(v.shape[1], dtype=np.float64)
    trace = np.empty(iterations + 1, dtype=np.float64)

    def objective(scores: np.ndarray, dvec: np.ndarray) -> float:
        margins = 1.0 - scores[qs] + scores[ts]
        hinge = np.maximum(margins, 0.0).sum()
        return 0.5 * lambda_reg * float(dvec @ dvec) + pair_norm * hinge

    scores = v @ d
    trace[0] = objective(scores, d)
    for it in range(iterations):
        margins = 1.0 - scores[qs] + scores[ts]
        active = margins > 0.0
        # subgradient of the hinge part: sum over active pairs of (V_t - V_q)
        counts = np.bincount(ts[active], minlength=T).astype(np.float64)
        counts -= np.bincount(qs[active], minlength=T)
        grad = lambda_reg * d + pair_norm * (counts @ v)
        d -= step_size * grad
        scores = v @ d
        trace[it + 1] = objective(scores, d)
        if not np.isfinite(trace[it + 1]):
            raise NumericalError(
                f"rank pooling objective became non-finite at iteration {it + 1}"
            )
    return RankingVector(
        d=d,
        regularizer=lambda_reg,
        iterations=iterations,
        final_objective=float(trace[-1]),
        objective_trace=trace,
    )


def ranking_score(rank: RankingVector, clip: "Clip", t: int) -> float:
    """Score <d, V_t> for 1-based frame position t."""
    if not (1 <= t <= clip.T):
        raise ValueError(f"t={t} out of range 1..{clip.T}")
    v = running_feature_means(clip)
    return float(v[t - 1] @ rank.d)
