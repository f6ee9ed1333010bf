"""Dataset manifests, frame loading, preprocessing, augmentation, and the
on-disk formats for images and dynamic-image tensors.

Manifests are JSON Lines: one clip per line with clip_id, subject_id,
frames_dir, onset, apex, offset, and label. Frames are PNG files named
``frame_%05d.png`` indexed from onset. Dynamic-image tensors use the DIT
format: magic ``DIT1``, u32 little-endian H, W, C, then H*W*C float32
little-endian values, row-major, channel-last.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError

FRAME_NAME = "frame_%05d.png"

DIT_MAGIC = b"DIT1"

_MANIFEST_FIELDS = ("clip_id", "subject_id", "frames_dir", "onset", "apex", "offset", "label")


@dataclass(frozen=True)
class PreprocessConfig:
    """Frame preprocessing: resize, channel handling, normalization."""

    target_size: int = 224
    grayscale3: bool = True
    normalize_mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    normalize_std: tuple[float, ...] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if any(s <= 0 for s in self.normalize_std):
            raise ValueError("normalize_std entries must be positive")

    def to_dict(self) -> dict:
        return {
            "target_size": self.target_size,
            "grayscale3": self.grayscale3,
            "normalize_mean": list(self.normalize_mean),
            "normalize_std": list(self.normalize_std),
        }


@dataclass(frozen=True)
class ClipManifestEntry:
    clip_id: str
    subject_id: str
    frames_dir: Path
    onset: int
    apex: int
    offset: int
    label: str

    @property
    def num_frames(self) -> int:
        return self.offset - self.onset + 1


@dataclass
class Frame:
    """A single decoded frame: H x W x C float pixels plus its source path."""

    pixels: np.ndarray
    source_path: Path | None = None


@dataclass
class Clip:
    """An ordered frame sequence with its manifest entry and preprocessing."""

    entry: ClipManifestEntry
    frames: list[Frame]
    preprocess: PreprocessConfig

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def apex_index(self) -> int:
        """Apex position re-indexed relative to onset."""
        return self.entry.apex - self.entry.onset

    def pixel_stack(self) -> np.ndarray:
        """All frames as one T x H x W x C array (no copy of frame data)."""
        return np.stack([f.pixels for f in self.frames], axis=0)

    def denormalized_stack(self) -> np.ndarray:
        """Frames mapped back to pre-normalization [0, 1] intensities."""
        stack = self.pixel_stack()
        mean = np.asarray(self.preprocess.normalize_mean, dtype=stack.dtype)
        std = np.asarray(self.preprocess.normalize_std, dtype=stack.dtype)
        return stack * std + mean


def load_manifest(path) -> list[ClipManifestEntry]:
    """Parse a JSON-Lines manifest, validating every entry.

    Raises DataError naming the offending line number for missing fields,
    malformed JSON, apex outside [onset, offset], too-short clips,
    nonexistent frame directories, and duplicate clip ids.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    entries: list[ClipManifestEntry] = []
    seen_ids: set[str] = set()
    base = path.parent
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in _MANIFEST_FIELDS if k not in obj]
            if missing:
                raise DataError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            try:
                onset, apex, offset = int(obj["onset"]), int(obj["apex"]), int(obj["offset"])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: onset/apex/offset must be integers") from None
            if not (onset <= apex <= offset):
                raise DataError(f"{path}:{lineno}: apex outside clip range [{onset}, {offset}]")
            if offset - onset + 1 < 2:
                raise DataError(f"{path}:{lineno}: clip must span at least two frames")
            clip_id = str(obj["clip_id"])
            if clip_id in seen_ids:
                raise DataError(f"{path}:{lineno}: duplicate clip_id {clip_id!r}")
            seen_ids.add(clip_id)
            frames_dir = Path(obj["frames_dir"])
            if not frames_dir.is_absolute():
                frames_dir = base / frames_dir
            if not frames_dir.is_dir():
                raise DataError(f"{path}:{lineno}: frames_dir does not exist: {frames_dir}")
            entries.append(
                ClipManifestEntry(
                    clip_id=clip_id,
                    subject_id=str(obj["subject_id"]),
                    frames_dir=frames_dir,
                    onset=onset,
                    apex=apex,
                    offset=offset,
                    label=str(obj["label"]),
                )
            )
    return entries


def _decode_frame(path: Path) -> np.ndarray:
    """Read a PNG as H x W x 3 (BGR order folded to RGB) or H x W x 1 float32 in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"cannot decode image: {path}")
    if img.dtype != np.uint8:
        raise DataError(f"unsupported bit depth in {path} (expected 8-bit)")
    if img.ndim == 2:
        img = img[:, :, None]
    elif img.ndim == 3 and img.shape[2] == 4:
        img = img[:, :, :3]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DataError(f"unsupported channel layout in {path}")
    if img.shape[2] == 3:
        img = img[:, :, ::-1]  # BGR -> RGB
    return np.ascontiguousarray(img, dtype=np.float32) / 255.0


def load_clip(entry: ClipManifestEntry, cfg: PreprocessConfig) -> Clip:
    """Load, resize, channel-expand, and normalize the frames of one clip.

    Frames must exist as ``frame_%05d.png`` for every index in
    [onset, offset] and share one decoded size.
    """
    frames: list[Frame] = []
    decoded_shape = None
    size = cfg.target_size
    mean = np.asarray(cfg.normalize_mean, dtype=np.float32)
    std = np.asarray(cfg.normalize_std, dtype=np.float32)
    for idx in range(entry.onset, entry.offset + 1):
        fpath = entry.frames_dir / (FRAME_NAME % idx)
        if not fpath.is_file():
            raise DataError(f"clip {entry.clip_id!r}: missing frame index {idx} ({fpath})")
        px = _decode_frame(fpath)
        if decoded_shape is None:
            decoded_shape = px.shape
        elif px.shape != decoded_shape:
            raise DataError(
                f"clip {entry.clip_id!r}: frame {idx} size {px.shape} != first frame {decoded_shape}"
            )
        if (px.shape[0], px.shape[1]) != (size, size):
            interp = cv2.INTER_AREA if px.shape[0] > size else cv2.INTER_LINEAR
            px = cv2.resize(px, (size, size), interpolation=interp)
            if px.ndim == 2:
                px = px[:, :, None]
        if cfg.grayscale3:
            if px.shape[2] == 3:
                px = cv2.cvtColor(px, cv2.COLOR_RGB2GRAY)[:, :, None]
            px = np.repeat(px, 3, axis=2)
        if px.shape[2] != mean.shape[0]:
            raise DataError(
                f"clip {entry.clip_id!r}: {px.shape[2]} channels but "
                f"{mean.shape[0]} normalization constants"
            )
        px = (px - mean) / std
        frames.append(Frame(pixels=np.ascontiguousarray(px, dtype=np.float32), source_path=fpath))
    return Clip(entry=entry, frames=frames, preprocess=cfg)


# Fixed augmentation menu: identity, horizontal flip, then rotations.
AUGMENT_ORDER = ("identity", "hflip", "rot+5", "rot-5", "rot+10", "rot-10")
_ROTATIONS = {"rot+5": 5.0, "rot-5": -5.0, "rot+10": 10.0, "rot-10": -10.0}


def _rotate(px: np.ndarray, degrees: float) -> np.ndarray:
    h, w = px.shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), degrees, 1.0)
    out = cv2.warpAffine(
        px, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
    )
    if out.ndim == 2:
        out = out[:, :, None]
    return out


def augment_clip(clip: Clip, seed: int = 0) -> list[Clip]:
    """Produce the six fixed training variants of a clip.

    Order: identity, horizontal flip, rot +5, rot -5, rot +10, rot -10.
    The same transform is applied to every frame; metadata is preserved.
    The seed is reserved for future stochastic transforms and currently
    has no effect.
    """
    del seed
    variants: list[Clip] = [clip]
    flipped = [
        Frame(pixels=np.ascontiguousarray(f.pixels[:, ::-1, :]), source_path=f.source_path)
        for f in clip.frames
    ]
    variants.append(Clip(entry=clip.entry, frames=flipped, preprocess=clip.preprocess))
    for name in AUGMENT_ORDER[2:]:
        deg = _ROTATIONS[name]
        rotated = [
            Frame(pixels=_rotate(f.pixels, deg), source_path=f.source_path)
            for f in clip.frames
        ]
        variants.append(Clip(entry=clip.entry, frames=rotated, preprocess=clip.preprocess))
    return variants


def write_dit(tensor: np.ndarray, path) -> None:
    """Write an H x W x C float32 tensor in the DIT format."""
    arr = np.asarray(tensor)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"DIT tensors are H x W x C, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError("refusing to write non-finite tensor")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(DIT_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(arr.tobytes())


def read_dit(path) -> np.ndarray:
    """Read a DIT tensor file back as H x W x C float32."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DIT_MAGIC:
            raise DataError(f"not a DIT file: {path}")
        header = fh.read(12)
        if len(header) != 12:
            raise DataError(f"truncated DIT header: {path}")
        h, w, c = struct.unpack("<III", header)
        payload = fh.read(h * w * c * 4)
        if len(payload) != h * w * c * 4:
            raise DataError(f"truncated DIT payload: {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()


def render_png(tensor: np.ndarray) -> np.ndarray:
    """Min-max rescale a float tensor to uint8 [0, 255]; flat inputs map to 128."""
    arr = np.asarray(tensor, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo <= 0.0:
        return np.full(arr.shape, 128, dtype=np.uint8)
    scaled = (arr - lo) * (255.0 / (hi - lo))
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def write_png(img_u8: np.ndarray, path) -> None:
    out = img_u8
    if out.ndim == 3 and out.shape[2] == 1:
        out = out[:, :, 0]
    elif out.ndim == 3 and out.shape[2] == 3:
        out = out[:, :, ::-1]  # RGB -> BGR for the encoder
    if not cv2.imwrite(str(path), out):
        raise DataError(f"failed to write PNG: {path}")


def write_dynamic_image(image, path_png, path_tensor) -> None:
    """Persist a dynamic image as a viewable PNG plus a bit-exact DIT tensor.

    ``image`` may be a DynamicImage or a bare H x W x C array. Non-finite
    values abort before any file is written.
    """
    tensor = np.asarray(getattr(image, "tensor", image))
    if tensor.ndim == 2:
        tensor = tensor[:, :, None]
    if not np.isfinite(tensor).all():
        raise DataError("dynamic image contains non-finite values; nothing written")
    write_png(render_png(tensor), path_png)
    write_dit(tensor, path_tensor)


def load_image(path) -> np.ndarray:
    """Load a single PNG as H x W x C float32 in [0, 1] (no preprocessing)."""
    return _decode_frame(Path(path))
