"""Dense two-frame optical flow and flow-file interop.

The estimator is a coarse-to-fine inverse-search patch matcher: at each
pyramid level the target frame is backward-warped by the current flow, every
patch on a stride grid does an integer SSD search within a small radius
(ties resolved toward the smallest displacement), a 1-D parabola fit per
axis adds sub-pixel precision, and the per-patch votes are densified by
distance-weighted averaging. Flow is upscaled and rescaled between levels.
Everything is deterministic; no variational refinement stage.

Middlebury .flo files are supported so an external estimator can be swapped
in for comparison.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import DataError

FLO_MAGIC = 202021.25  # little-endian bytes spell "PIEH"


@dataclass(frozen=True)
class FlowConfig:
    pyramid_scale: float = 0.5
    min_level_size: int = 16
    patch: int = 8
    stride: int = 4
    search_radius: int = 4

    def __post_init__(self):
        if not (0.0 < self.pyramid_scale < 1.0):
            raise ValueError("pyramid_scale must be in (0, 1)")
        for name in ("min_level_size", "patch", "stride", "search_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "pyramid_scale": self.pyramid_scale,
            "min_level_size": self.min_level_size,
            "patch": self.patch,
            "stride": self.stride,
            "search_radius": self.search_radius,
        }


@dataclass
class FlowField:
    """Dense displacement field: dx, dy in pixels, H x W each."""

    dx: np.ndarray
    dy: np.ndarray
    source_pair: tuple[int, int] = (-1, -1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape


def _luminance(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise ValueError(f"expected H x W or H x W x C image, got shape {img.shape}")
    return np.ascontiguousarray(arr)


def _grid_starts(extent: int, patch: int, stride: int) -> np.ndarray:
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return np.asarray(starts, dtype=np.int64)


def _patch_sums(integral: np.ndarray, ys: np.ndarray, xs: np.ndarray, patch: int) -> np.ndarray:
    """Box sums over patch windows from a zero-padded integral image."""
    y0, x0 = ys[:, None], xs[None, :]
    y1, x1 = y0 + patch, x0 + patch
    return integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]


def _level_residual(src: np.ndarray, dst_warped: np.ndarray, cfg: FlowConfig) -> np.ndarray:
    """Per-pixel residual flow between src and the already-warped target."""
    h, w = src.shape
    r = cfg.search_radius
    patch = min(cfg.patch, h, w)
    ys = _grid_starts(h, patch, cfg.stride)
    xs = _grid_starts(w, patch, cfg.stride)

    # Offsets ordered by magnitude so argmin tie-breaks toward zero motion.
    offs = [(du, dv) for dv in range(-r, r + 1) for du in range(-r, r + 1)]
    offs.sort(key=lambda o: (o[0] * o[0] + o[1] * o[1], o[1], o[0]))
    index_of = {o: i for i, o in enumerate(offs)}

    padded = np.pad(dst_warped, r, mode="edge")
    ssd = np.empty((len(offs), len(ys), len(xs)), dtype=np.float64)
    for i, (du, dv) in enumerate(offs):
        shifted = padded[r + dv : r + dv + h, r + du : r + du + w]
        diff = src - shifted
        sq = (diff * diff).astype(np.float64)
        integral = np.zeros((h + 1, w + 1), dtype=np.float64)
        np.cumsum(np.cumsum(sq, axis=0), axis=1, out=integral[1:, 1:])
        ssd[i] = _patch_sums(integral, ys, xs, patch)

    best = np.argmin(ssd, axis=0)
    ny, nx = best.shape
    flat = ssd.reshape(len(offs), -1)
    cell = np.arange(ny * nx)

    def ssd_at(du_arr, dv_arr, fallback):
        ok = (np.abs(du_arr) <= r) & (np.abs(dv_arr) <= r)
        idx = np.array(
            [index_of[(du, dv)] if k else 0 for du, dv, k in zip(du_arr, dv_arr, ok)],
            dtype=np.int64,
        )
        vals = flat[idx, cell]
        return np.where(ok, vals, fallback), ok

    best_offs = np.asarray(offs, dtype=np.float64)[best.ravel()]
    du0 = best_offs[:, 0].astype(np.int64)
    dv0 = best_offs[:, 1].astype(np.int64)
    s0 = flat[best.ravel(), cell]

    def parabola(sm, sp, ok_m, ok_p):
        # s0 == 0 is a perfect match; the vertex formula would drift off it.
        denom = sm - 2.0 * s0 + sp
        valid = ok_m & ok_p & (denom > 1e-12) & (s0 > 0.0)
        delta = np.where(valid, 0.5 * (sm - sp) / np.where(valid, denom, 1.0), 0.0)
        return np.clip(delta, -0.5, 0.5)

    sm_x, ok_mx = ssd_at(du0 - 1, dv0, s0)
    sp_x, ok_px = ssd_at(du0 + 1, dv0, s0)
    sm_y, ok_my = ssd_at(du0, dv0 - 1, s0)
    sp_y, ok_py = ssd_at(du0, dv0 + 1, s0)
    u = (du0 + parabola(sm_x, sp_x, ok_mx, ok_px)).reshape(ny, nx)
    v = (dv0 + parabola(sm_y, sp_y, ok_my, ok_py)).reshape(ny, nx)

    # Densify: every patch votes its residual over its footprint with
    # weights falling off with distance from the patch center.
    coords = np.arange(patch, dtype=np.float64) - (patch - 1) / 2.0
    stamp = 1.0 / (1.0 + coords[:, None] ** 2 + coords[None, :] ** 2)
    acc = np.zeros((2, h, w), dtype=np.float64)
    wsum = np.zeros((h, w), dtype=np.float64)
    for iy, y0 in enumerate(ys):
        for ix, x0 in enumerate(xs):
            acc[0, y0 : y0 + patch, x0 : x0 + patch] += stamp * u[iy, ix]
            acc[1, y0 : y0 + patch, x0 : x0 + patch] += stamp * v[iy, ix]
            wsum[y0 : y0 + patch, x0 : x0 + patch] += stamp
    np.maximum(wsum, 1e-12, out=wsum)
    return (acc / wsum).astype(np.float32)


def _warp(img: np.ndarray, flow_u: np.ndarray, flow_v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    return cv2.remap(
        img,
        gx + flow_u,
        gy + flow_v,
        interpolation=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REPLICATE,
    )


def estimate_flow(src, dst, cfg: FlowConfig = FlowConfig()) -> FlowField:
    """Dense flow mapping src-pixel positions to their location in dst."""
    a = _luminance(src)
    b = _luminance(dst)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < cfg.min_level_size:
        raise ValueError(
            f"image too small: {a.shape} with min_level_size {cfg.min_level_size}"
        )

    # Pyramid, finest first; coarsest level keeps min dim >= min_level_size.
    levels = [(a, b)]
    while True:
        prev_a, prev_b = levels[-1]
        nh = int(round(prev_a.shape[0] * cfg.pyramid_scale))
        nw = int(round(prev_a.shape[1] * cfg.pyramid_scale))
        if min(nh, nw) < cfg.min_level_size:
            break
        levels.append(
            (
                cv2.resize(prev_a, (nw, nh), interpolation=cv2.INTER_AREA),
                cv2.resize(prev_b, (nw, nh), interpolation=cv2.INTER_AREA),
            )
        )

    flow_u = np.zeros(levels[-1][0].shape, dtype=np.float32)
    flow_v = np.zeros_like(flow_u)
    for li in range(len(levels) - 1, -1, -1):
        la, lb = levels[li]
        if flow_u.shape != la.shape:
            sy = la.shape[0] / flow_u.shape[0]
            sx = la.shape[1] / flow_u.shape[1]
            flow_u = cv2.resize(flow_u, (la.shape[1], la.shape[0]), interpolation=cv2.INTER_LINEAR) * sx
            flow_v = cv2.resize(flow_v, (la.shape[1], la.shape[0]), interpolation=cv2.INTER_LINEAR) * sy
        warped = _warp(lb, flow_u, flow_v)
        residual = _level_residual(la, warped, cfg)
        flow_u = flow_u + residual[0]
        flow_v = flow_v + residual[1]
    return FlowField(dx=flow_u, dy=flow_v)


def mean_magnitude(field: FlowField) -> float:
    """Average per-pixel Euclidean flow magnitude, double-precision."""
    mag = np.hypot(field.dx.astype(np.float64), field.dy.astype(np.float64))
    return float(mag.mean())


def write_flo(field: FlowField, path) -> None:
    """Write a flow field in the Middlebury .flo layout."""
    dx = np.asarray(field.dx, dtype="<f4")
    dy = np.asarray(field.dy, dtype="<f4")
    if dx.shape != dy.shape or dx.ndim != 2:
        raise ValueError("dx and dy must be matching 2-D arrays")
    h, w = dx.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[:, :, 0] = dx
    data[:, :, 1] = dy
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<II", w, h))
        fh.write(data.tobytes())


def read_flo(path) -> FlowField:
    """Read a Middlebury .flo file, validating magic and payload size."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) != 4 or struct.unpack("<f", head)[0] != FLO_MAGIC:
            raise DataError(f"not a flo file: {path}")
        dims = fh.read(8)
        if len(dims) != 8:
            raise DataError(f"truncated flo header: {path}")
        w, h = struct.unpack("<II", dims)
        payload = fh.read(h * w * 2 * 4)
        if len(payload) != h * w * 2 * 4:
            raise DataError(f"truncated flo payload: {path}")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return FlowField(dx=data[:, :, 0].copy(), dy=data[:, :, 1].copy())
