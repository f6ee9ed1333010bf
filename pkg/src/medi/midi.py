"""Motion-intensity dynamic images.

Each frame is scored by the mean optical-flow magnitude between it and the
apex frame; weights invert those magnitudes against their maximum so the
apex (zero motion against itself) always carries the largest weight. The
dynamic image is the weighted frame sum, normalized to a convex combination
by default. Static clips fall back to uniform weights instead of the
all-zero image the literal inversion would produce.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .optical_flow import FlowConfig, estimate_flow, mean_magnitude
from .rank_pooling import DynamicImage

if TYPE_CHECKING:
    from .media_io import Clip

ZERO_MOTION_EPS = 1e-8


@dataclass
class MotionProfile:
    """Per-frame motion magnitudes and the weights derived from them."""

    magnitudes: np.ndarray
    weights: np.ndarray
    fallback_used: bool = False


def motion_profile(clip: "Clip", flow_cfg: FlowConfig = FlowConfig()) -> MotionProfile:
    """Mean flow magnitude of every frame against the apex, and its weights.

    Flow runs on pre-normalization [0, 1] luminance. The apex's own
    magnitude is pinned to exactly zero without invoking the estimator, so
    estimator noise can never displace its maximum weight. If all motion is
    below threshold the weights fall back to uniform 1/T.
    """
    if clip.T < 2:
        raise ValueError("need at least two frames")
    stack = clip.denormalized_stack()
    apex = clip.apex_index
    apex_frame = stack[apex]
    mags = np.zeros(clip.T, dtype=np.float64)
    for i in range(clip.T):
        if i == apex:
            continue
        mags[i] = mean_magnitude(estimate_flow(stack[i], apex_frame, flow_cfg))
    peak = float(mags.max())
    if peak < ZERO_MOTION_EPS:
        weights = np.full(clip.T, 1.0 / clip.T, dtype=np.float64)
        return MotionProfile(magnitudes=mags, weights=weights, fallback_used=True)
    return MotionProfile(magnitudes=mags, weights=peak - mags, fallback_used=False)


def weights_from_magnitudes(mags: np.ndarray) -> MotionProfile:
    """Weight computation alone, for callers that bring their own magnitudes."""
    mags = np.asarray(mags, dtype=np.float64)
    peak = float(mags.max())
    if peak < ZERO_MOTION_EPS:
        n = len(mags)
        return MotionProfile(
            magnitudes=mags, weights=np.full(n, 1.0 / n, dtype=np.float64), fallback_used=True
        )
    return MotionProfile(magnitudes=mags, weights=peak - mags, fallback_used=False)


def build_midi(
    clip: "Clip",
    flow_cfg: FlowConfig = FlowConfig(),
    normalize: bool = True,
) -> DynamicImage:
    """Motion-intensity dynamic image: the weighted sum of all frames.

    With normalize on (default) the weights are first scaled to unit sum,
    keeping pixel values inside the per-pixel envelope of the input frames.
    The convex combination is evaluated anchored at the dominant frame,
    sum = f_k + sum_i w_i (f_i - f_k) with k = argmax w, so a static clip
    reproduces its common frame bit-for-bit and a weight of exactly one
    returns that frame bit-for-bit. normalize=False applies the raw
    inverted magnitudes as a plain weighted sum.
    """
    profile = motion_profile(clip, flow_cfg)
    weights = profile.weights
    stack = clip.pixel_stack().astype(np.float64)
    if normalize:
        weights = weights / weights.sum()
        anchor = int(np.argmax(weights))
        deltas = stack - stack[anchor]
        tensor = stack[anchor] + np.tensordot(weights, deltas, axes=1)
    else:
        tensor = np.tensordot(weights, stack, axes=1)
    return DynamicImage(tensor=tensor, provenance="MIDI", source_clip_id=clip.entry.clip_id)
