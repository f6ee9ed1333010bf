"""Procedural micro-expression corpus at desk scale.

Each subject gets a jittered schematic face (ellipse outline, eyes, brows,
nose, mouth, plus a smooth per-subject texture field so every region carries
gradients for flow estimation). Each clip warps one class-specific facial
region with a Gaussian displacement bump whose direction is class-coded and
whose magnitude over time rises from the onset to a randomized apex and
falls again. Class identity therefore lives in the motion's direction and
locality, which survives the network's global pooling; absolute position
alone would not.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .media_io import FRAME_NAME
from .optical_flow import FlowConfig, estimate_flow, mean_magnitude


@dataclass(frozen=True)
class MotionClass:
    """A nameable micro-movement: where it happens and which way it pushes."""

    name: str
    center_y: float  # in unit face coordinates [0, 1]
    center_x: float
    dir_y: float
    dir_x: float
    sigma: float = 0.105  # bump radius as a fraction of image size


DEFAULT_CLASSES = (
    MotionClass("brow_raise", 0.26, 0.50, -1.0, 0.0),
    MotionClass("mouth_stretch", 0.72, 0.50, 0.0, 1.0),
    MotionClass("nose_wrinkle", 0.47, 0.50, 0.75, -0.66),
    MotionClass("eye_squeeze", 0.36, 0.30, 0.6, 0.8),
)


@dataclass(frozen=True)
class SynthConfig:
    num_subjects: int = 8
    clips_per_subject: int = 10
    classes: tuple[MotionClass, ...] = DEFAULT_CLASSES
    frames_per_clip: int = 12
    image_size: int = 64
    amplitude: float = 1.5  # peak displacement in pixels
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.amplitude <= 2.0):
            raise ValueError("amplitude must lie in (0, 2] pixels")
        if self.frames_per_clip < 2:
            raise ValueError("clips need at least two frames")
        if self.num_subjects < 1 or self.clips_per_subject < 1:
            raise ValueError("need at least one subject and one clip")
        centers = {(c.center_y, c.center_x) for c in self.classes}
        if len(centers) != len(self.classes):
            raise ValueError("classes must have distinct region centers")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "classes"}
        d["classes"] = [c.__dict__ for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "classes" in known:
            known["classes"] = tuple(MotionClass(**c) for c in known["classes"])
        return cls(**known)


def _render_face(rng: np.random.Generator, size: int) -> np.ndarray:
    """One subject's neutral face in [0, 1], drawn supersampled then reduced."""
    ss = 4 * size
    img = np.full((ss, ss), 0.35, dtype=np.float32)

    def jit(scale):
        return float(rng.uniform(-scale, scale))

    cy, cx = ss * (0.5 + 0.02 * jit(1)), ss * (0.5 + 0.02 * jit(1))
    axes = (int(ss * (0.34 + 0.02 * jit(1))), int(ss * (0.42 + 0.02 * jit(1))))
    cv2.ellipse(img, (int(cx), int(cy)), axes, 0, 0, 360, 0.72 + 0.04 * jit(1), -1)

    eye_y = cy - ss * 0.14
    eye_dx = ss * (0.15 + 0.01 * jit(1))
    for side in (-1, 1):
        ex = int(cx + side * eye_dx)
        cv2.ellipse(img, (ex, int(eye_y)), (int(ss * 0.055), int(ss * 0.03)), 0, 0, 360, 0.22, -1)
        brow_y = int(eye_y - ss * (0.065 + 0.008 * jit(1)))
        cv2.line(img, (ex - int(ss * 0.06), brow_y), (ex + int(ss * 0.06), brow_y - int(ss * 0.01)), 0.3, max(2, ss // 80))
    cv2.line(
        img,
        (int(cx), int(cy - ss * 0.05)),
        (int(cx + ss * 0.015 * jit(1)), int(cy + ss * 0.09)),
        0.45,
        max(2, ss // 100),
    )
    mouth_y = int(cy + ss * (0.22 + 0.01 * jit(1)))
    cv2.ellipse(img, (int(cx), mouth_y), (int(ss * 0.11), int(ss * 0.025)), 0, 0, 360, 0.25, -1)

    small = cv2.resize(img, (size, size), interpolation=cv2.INTER_AREA)
    coarse = rng.random((size // 8, size // 8)).astype(np.float32)
    texture = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    small = small + 0.06 * (texture - 0.5)
    small = cv2.GaussianBlur(small, (0, 0), 0.6)
    return np.clip(small, 0.0, 1.0)


def _bell(t: int, onset: int, apex: int, offset: int) -> float:
    """Raised-cosine intensity: 0 at onset/offset, 1 at the apex."""
    if t == apex:
        return 1.0
    if t < apex:
        span = max(apex - onset, 1)
        return 0.5 - 0.5 * np.cos(np.pi * (t - onset) / span)
    span = max(offset - apex, 1)
    return 0.5 - 0.5 * np.cos(np.pi * (offset - t) / span)


def _warp(base: np.ndarray, cy, cx, dir_y, dir_x, sigma, magnitude) -> np.ndarray:
    size = base.shape[0]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    bump = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma**2)).astype(np.float32)
    dy = magnitude * dir_y * bump
    dx = magnitude * dir_x * bump
    return cv2.remap(
        base, xs - dx, ys - dy, interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
    )


def synth_generate(cfg: SynthConfig, out_dir) -> Path:
    """Render the corpus and return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    t_count = cfg.frames_per_clip
    lines = []
    for s in range(cfg.num_subjects):
        subject_id = f"s{s:02d}"
        face = _render_face(rng, size)
        for ci in range(cfg.clips_per_subject):
            clip_id = f"{subject_id}_c{ci:02d}"
            mc = cfg.classes[(ci + s) % len(cfg.classes)]
            apex = int(rng.integers(int(t_count * 0.35), int(t_count * 0.65) + 1))
            amp = cfg.amplitude * float(rng.uniform(0.8, 1.0))
            cy = mc.center_y * size + float(rng.uniform(-1.5, 1.5))
            cx = mc.center_x * size + float(rng.uniform(-1.5, 1.5))
            norm = float(np.hypot(mc.dir_y, mc.dir_x))
            dyu, dxu = mc.dir_y / norm, mc.dir_x / norm
            clip_dir = out_dir / clip_id
            clip_dir.mkdir(exist_ok=True)
            for t in range(t_count):
                frame = _warp(face, cy, cx, dyu, dxu, mc.sigma * size, amp * _bell(t, 0, apex, t_count - 1))
                frame = frame + rng.normal(0.0, cfg.noise_sigma, frame.shape).astype(np.float32)
                u8 = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
                cv2.imwrite(str(clip_dir / (FRAME_NAME % t)), u8)
            lines.append(
                json.dumps(
                    {
                        "clip_id": clip_id,
                        "subject_id": subject_id,
                        "frames_dir": clip_id,
                        "onset": 0,
                        "apex": apex,
                        "offset": t_count - 1,
                        "label": mc.name,
                    }
                )
            )
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def motion_profile_sanity(manifest_path, flow_cfg: FlowConfig | None = None, tolerance: float = 0.05) -> float:
    """Fraction of clips whose frame-vs-apex flow magnitudes form a V shape.

    A clip passes when the magnitude is minimal at the apex and is monotone
    (within tolerance * peak) going outward on both sides; this is the
    generator's self-check that rendered motion matches the intended
    rise-peak-fall profile.
    """
    from .media_io import PreprocessConfig, load_clip, load_manifest
    from .midi import motion_profile

    flow_cfg = flow_cfg or FlowConfig()
    entries = load_manifest(manifest_path)
    good = 0
    for entry in entries:
        clip = load_clip(entry, PreprocessConfig(target_size=64))
        mags = motion_profile(clip, flow_cfg).magnitudes
        apex = clip.apex_index
        tol = tolerance * max(mags.max(), 1e-9)
        ok = mags.argmin() == apex
        left = mags[: apex + 1]
        right = mags[apex:]
        ok &= all(a >= b - tol for a, b in zip(left, left[1:]))
        ok &= all(b >= a - tol for a, b in zip(right, right[1:]))
        good += bool(ok)
    return good / len(entries)
