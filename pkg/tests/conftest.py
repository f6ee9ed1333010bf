import numpy as np
import pytest

from medi.media_io import Clip, ClipManifestEntry, Frame, PreprocessConfig


def make_clip(stack, apex=None, clip_id="c0", subject_id="s0", label="neutral", dtype=np.float32):
    """Wrap a T x H x W x C (or T x H x W) float array as a Clip.

    Frames are stored exactly as given, with an identity normalization
    config so pixel_stack() and denormalized_stack() both return the input.
    """
    stack = np.asarray(stack, dtype=dtype)
    if stack.ndim == 3:
        stack = stack[:, :, :, None]
    t, h, w, c = stack.shape
    if apex is None:
        apex = t // 2
    entry = ClipManifestEntry(
        clip_id=clip_id,
        subject_id=subject_id,
        frames_dir=None,
        onset=0,
        apex=apex,
        offset=t - 1,
        label=label,
    )
    cfg = PreprocessConfig(
        target_size=h,
        grayscale3=(c == 3),
        normalize_mean=(0.0,) * c,
        normalize_std=(1.0,) * c,
    )
    frames = [Frame(pixels=np.ascontiguousarray(stack[i])) for i in range(t)]
    return Clip(entry=entry, frames=frames, preprocess=cfg)


def smooth_texture(h, w, seed=0, cell=8, contrast=1.0):
    """Band-limited random texture in [0, 1]: upsampled low-res noise."""
    import cv2

    rng = np.random.default_rng(seed)
    coarse = rng.random((max(h // cell, 2), max(w // cell, 2))).astype(np.float32)
    tex = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-9)
    return 0.5 + contrast * (tex - 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps exactly-zero gradients (dead ReLU units, padding) from
    turning finite-difference roundoff into spurious relative error.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(loss_fn, arr, indices=None, eps=1e-5):
    """Central finite differences of scalar loss_fn w.r.t. entries of arr.

    arr is perturbed in place and restored. indices=None checks every entry.
    """
    flat = arr.reshape(-1)
    indices = list(range(flat.size)) if indices is None else list(indices)
    grads = np.empty(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = loss_fn()
        flat[i] = orig - eps
        fm = loss_fn()
        flat[i] = orig
        grads[j] = (fp - fm) / (2.0 * eps)
    return grads


def check_layer_gradients(layer, x, rng, tol=1e-4, check_input=True):
    """Projected-output finite-difference check of a layer's backward pass.

    Uses loss = sum(forward(x) * R) for a fixed random projection R, in
    double precision. Returns the worst relative error seen.
    """
    x = np.asarray(x, dtype=np.float64)
    out_shape = layer.forward(x).shape
    proj = rng.standard_normal(out_shape)

    def loss():
        return float((layer.forward(x) * proj).sum())

    for p in layer.params():
        p.zero_grad()
    layer.forward(x)
    dx = layer.backward(proj.copy())
    worst = 0.0
    if check_input:
        num = numeric_grad(loss, x)
        worst = max(worst, relative_error(dx.ravel(), num).max())
    for p in layer.params():
        num = numeric_grad(loss, p.data)
        worst = max(worst, relative_error(p.grad.ravel(), num).max())
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst
