"""The adaptive fusion network.

Two 3-channel dynamic images (temporal-ranked and motion-intensity) enter a
representation fusion block: each is encoded by its own conv+GN+ReLU branch,
a 1x1-conv attention generator turns the concatenated features into a
per-pixel two-way softmax over the sources, the attended features are summed,
projected back to 3 channels, and (optionally) added to the plain average of
the two inputs as a residual. The fused image then feeds the multi-scale
channel attention block: a conv stem, four parallel same-pad conv branches
with kernel sizes 1/3/5/7 blended by a learned (or fixed-uniform) convex
weight vector, an optional squeeze-excite stage, a conv head, global average
pooling, and a linear classifier.

A manual fusion mode replaces the fusion block with a fixed convex blend
lam * trdi + (1 - lam) * midi, which also provides the single-input modes
(lam = 1 or 0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, NumericalError
from .neural import (
    Conv2d,
    GlobalAvgPool,
    GroupNorm,
    Linear,
    MaxPool2,
    Param,
    ReLU,
    SEBlock,
    adam_step,
    cross_entropy,
    load_checkpoint,
    restore_params,
    save_checkpoint,
    softmax,
    softmax_backward,
)

FUSION_MODES = ("rfb", "manual")


@dataclass(frozen=True)
class AfnConfig:
    input_size: int = 64
    enc_channels: int = 16
    gn_groups: int = 4
    ms_channels: int = 32
    ms_kernels: tuple[int, ...] = (1, 3, 5, 7)
    se_reduction: int = 4
    head_channels: int = 64
    num_classes: int = 4
    rfb_attention: bool = True
    rfb_residual: bool = True
    mscab_alpha_learned: bool = True
    mscab_se: bool = True
    fusion_mode: str = "rfb"
    manual_lambda: float = 0.5

    def __post_init__(self):
        if any(k % 2 == 0 for k in self.ms_kernels):
            raise ValueError("multi-scale kernels must be odd")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if not (0.0 <= self.manual_lambda <= 1.0):
            raise ValueError("manual_lambda must lie in [0, 1]")
        if self.input_size % 4:
            raise ValueError("input_size must be divisible by 4 (two 2x2 pools)")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["ms_kernels"] = list(self.ms_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AfnConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "ms_kernels" in known:
            known["ms_kernels"] = tuple(known["ms_kernels"])
        return cls(**known)

    @classmethod
    def from_json(cls, path) -> "AfnConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def manual_fusion(trdi: np.ndarray, midi: np.ndarray, lam: float) -> np.ndarray:
    """Convex blend of the two inputs; lam = 1 or 0 are bitwise identities."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return trdi.copy()
    if lam == 0.0:
        return midi.copy()
    return lam * trdi + (1.0 - lam) * midi


class AfnModel:
    """Parameters, forward pass, and hand-chained backward pass."""

    def __init__(self, cfg: AfnConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        enc, g = cfg.enc_channels, cfg.gn_groups
        ms, head = cfg.ms_channels, cfg.head_channels

        if cfg.fusion_mode == "rfb":
            self.coef_conv = Conv2d(3, enc, 3, rng=rng, name="rfb.coef.conv", dtype=dtype, input_grad=False)
            self.coef_gn = GroupNorm(enc, g, name="rfb.coef.gn", dtype=dtype)
            self.motion_conv = Conv2d(3, enc, 3, rng=rng, name="rfb.motion.conv", dtype=dtype, input_grad=False)
            self.motion_gn = GroupNorm(enc, g, name="rfb.motion.gn", dtype=dtype)
            if cfg.rfb_attention:
                self.attn_conv1 = Conv2d(2 * enc, enc, 1, rng=rng, name="rfb.attn.conv1", dtype=dtype)
                self.attn_conv2 = Conv2d(enc, 2, 1, rng=rng, name="rfb.attn.conv2", dtype=dtype)
            self.final_conv = Conv2d(enc, 3, 1, rng=rng, name="rfb.final", dtype=dtype)

        # in manual fusion the stem consumes the blended image directly
        self.stem_conv = Conv2d(
            3, ms, 3, rng=rng, name="mscab.stem.conv", dtype=dtype, input_grad=(cfg.fusion_mode == "rfb")
        )
        self.stem_gn = GroupNorm(ms, g, name="mscab.stem.gn", dtype=dtype)
        self.branch_convs = []
        self.branch_gns = []
        for k in cfg.ms_kernels:
            self.branch_convs.append(Conv2d(ms, ms, k, rng=rng, name=f"mscab.branch{k}.conv", dtype=dtype))
            self.branch_gns.append(GroupNorm(ms, g, name=f"mscab.branch{k}.gn", dtype=dtype))
        if cfg.mscab_alpha_learned:
            self.branch_logits = Param("mscab.branch_logits", np.zeros(len(cfg.ms_kernels), dtype=dtype))
        if cfg.mscab_se:
            self.se = SEBlock(ms, cfg.se_reduction, rng=rng, name="mscab.se", dtype=dtype)
        self.head_conv = Conv2d(ms, head, 3, rng=rng, name="mscab.head.conv", dtype=dtype)
        self.head_gn = GroupNorm(head, g, name="mscab.head.gn", dtype=dtype)
        self.fc = Linear(head, cfg.num_classes, rng=rng, name="mscab.fc", dtype=dtype)

        self._relu = ReLU  # constructor alias for inline use
        self._cache = {}

    # -- parameter bookkeeping ------------------------------------------------

    def params(self) -> list[Param]:
        out: list[Param] = []
        cfg = self.cfg
        if cfg.fusion_mode == "rfb":
            for layer in (self.coef_conv, self.coef_gn, self.motion_conv, self.motion_gn):
                out += layer.params()
            if cfg.rfb_attention:
                out += self.attn_conv1.params() + self.attn_conv2.params()
            out += self.final_conv.params()
        out += self.stem_conv.params() + self.stem_gn.params()
        for conv, gn in zip(self.branch_convs, self.branch_gns):
            out += conv.params() + gn.params()
        if cfg.mscab_alpha_learned:
            out.append(self.branch_logits)
        if cfg.mscab_se:
            out += self.se.params()
        out += self.head_conv.params() + self.head_gn.params() + self.fc.params()
        return out

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def alpha_values(self) -> np.ndarray:
        if self.cfg.mscab_alpha_learned:
            return softmax(self.branch_logits.data[None, :], axis=1)[0]
        n = len(self.cfg.ms_kernels)
        return np.full(n, 1.0 / n, dtype=self.dtype)

    # -- fusion stage ----------------------------------------------------------

    def rfb_forward(self, trdi: np.ndarray, midi: np.ndarray):
        """Fused 3-channel image plus the per-pixel source attention maps."""
        if trdi.shape != midi.shape:
            raise ValueError(f"input shapes differ: {trdi.shape} vs {midi.shape}")
        c = self._cache
        c["coef_relu"] = ReLU()
        c["motion_relu"] = ReLU()
        cf = c["coef_relu"].forward(self.coef_gn.forward(self.coef_conv.forward(trdi)))
        mf = c["motion_relu"].forward(self.motion_gn.forward(self.motion_conv.forward(midi)))
        n, _, h, w = cf.shape
        if self.cfg.rfb_attention:
            cat = np.concatenate([cf, mf], axis=1)
            c["attn_relu"] = ReLU()
            hidden = c["attn_relu"].forward(self.attn_conv1.forward(cat))
            attn = softmax(self.attn_conv2.forward(hidden), axis=1)
        else:
            attn = np.full((n, 2, h, w), 0.5, dtype=cf.dtype)
        fused_feat = attn[:, 0:1] * cf + attn[:, 1:2] * mf
        out = self.final_conv.forward(fused_feat)
        if self.cfg.rfb_residual:
            out = out + (trdi + midi) / 2.0
        c.update(cf=cf, mf=mf, attn=attn)
        return out, attn

    def _rfb_backward(self, dout: np.ndarray):
        c = self._cache
        cf, mf, attn = c["cf"], c["mf"], c["attn"]
        dfused = self.final_conv.backward(dout)
        dcf = dfused * attn[:, 0:1]
        dmf = dfused * attn[:, 1:2]
        if self.cfg.rfb_attention:
            dattn = np.stack(
                [
                    np.einsum("nchw,nchw->nhw", dfused, cf),
                    np.einsum("nchw,nchw->nhw", dfused, mf),
                ],
                axis=1,
            )
            dlogits = softmax_backward(attn, dattn, axis=1)
            dhidden = self.attn_conv2.backward(dlogits)
            dcat = self.attn_conv1.backward(c["attn_relu"].backward(dhidden))
            enc = self.cfg.enc_channels
            dcf = dcf + dcat[:, :enc]
            dmf = dmf + dcat[:, enc:]
        self.coef_conv.backward(self.coef_gn.backward(c["coef_relu"].backward(dcf)))
        self.motion_conv.backward(self.motion_gn.backward(c["motion_relu"].backward(dmf)))

    # -- classification stage ---------------------------------------------------

    def mscab_forward(self, fused: np.ndarray) -> np.ndarray:
        c = self._cache
        c["stem_relu"] = ReLU()
        c["stem_pool"] = MaxPool2()
        s = c["stem_pool"].forward(
            c["stem_relu"].forward(self.stem_gn.forward(self.stem_conv.forward(fused)))
        )
        c["stem_out"] = s
        alpha = self.alpha_values().astype(s.dtype)
        branch_outs = []
        c["branch_relus"] = []
        for conv, gn in zip(self.branch_convs, self.branch_gns):
            relu = ReLU()
            c["branch_relus"].append(relu)
            branch_outs.append(relu.forward(gn.forward(conv.forward(s))))
        combined = alpha[0] * branch_outs[0]
        for a, b in zip(alpha[1:], branch_outs[1:]):
            combined += a * b
        c["branch_outs"] = branch_outs
        c["alpha"] = alpha
        gated = self.se.forward(combined) if self.cfg.mscab_se else combined
        c["head_relu"] = ReLU()
        c["head_pool"] = MaxPool2()
        h = c["head_pool"].forward(
            c["head_relu"].forward(self.head_gn.forward(self.head_conv.forward(gated)))
        )
        c["gap"] = GlobalAvgPool()
        return self.fc.forward(c["gap"].forward(h))

    def _mscab_backward(self, dlogits: np.ndarray) -> np.ndarray:
        c = self._cache
        dh = c["gap"].backward(self.fc.backward(dlogits))
        dgated = self.head_conv.backward(
            self.head_gn.backward(c["head_relu"].backward(c["head_pool"].backward(dh)))
        )
        dcombined = self.se.backward(dgated) if self.cfg.mscab_se else dgated
        alpha, branch_outs = c["alpha"], c["branch_outs"]
        if self.cfg.mscab_alpha_learned:
            dalpha = np.array(
                [float((dcombined * b).sum()) for b in branch_outs], dtype=np.float64
            )
            dlog = softmax_backward(
                alpha.astype(np.float64)[None, :], dalpha[None, :], axis=1
            )[0]
            self.branch_logits.grad += dlog.astype(self.branch_logits.grad.dtype)
        ds = None
        for a, conv, gn, relu in zip(alpha, self.branch_convs, self.branch_gns, c["branch_relus"]):
            d = conv.backward(gn.backward(relu.backward(a * dcombined)))
            ds = d if ds is None else ds + d
        dfused = self.stem_conv.backward(
            self.stem_gn.backward(c["stem_relu"].backward(c["stem_pool"].backward(ds)))
        )
        return dfused

    # -- full model ---------------------------------------------------------------

    def forward(self, trdi: np.ndarray, midi: np.ndarray) -> np.ndarray:
        if self.cfg.fusion_mode == "rfb":
            fused, _ = self.rfb_forward(trdi, midi)
        else:
            fused = manual_fusion(trdi, midi, self.cfg.manual_lambda)
        return self.mscab_forward(fused)

    def backward(self, dlogits: np.ndarray) -> None:
        dfused = self._mscab_backward(dlogits)
        if self.cfg.fusion_mode == "rfb":
            self._rfb_backward(dfused)
        self._cache = {}

    # -- persistence -----------------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.cfg.to_dict(), self.params())

    @classmethod
    def load(cls, path) -> "AfnModel":
        config, tensors, moments = load_checkpoint(path)
        model = cls(AfnConfig.from_dict(config), seed=0)
        restore_params(model.params(), tensors, moments)
        return model


@dataclass
class TrainResult:
    epoch_losses: list[float]
    epochs: int
    batch_size: int
    seed: int


def train(
    model: AfnModel,
    samples: list[tuple[np.ndarray, np.ndarray, int]],
    epochs: int = 50,
    batch_size: int = 16,
    seed: int = 0,
    lr: float = 1e-3,
    weight_decay: float = 1e-4,
    abort_checkpoint=None,
) -> TrainResult:
    """Seeded mini-batch Adam training on (trdi, midi, label) samples.

    Shuffling is reseeded per run, batches traverse a fixed permutation per
    epoch, and the mean per-epoch loss is recorded. A non-finite loss saves
    a diagnostic checkpoint (when a path is given) and aborts.
    """
    if not samples:
        raise DataError("no training samples")
    labels = np.array([s[2] for s in samples])
    present = set(labels.tolist())
    missing = [c for c in range(model.cfg.num_classes) if c not in present]
    if missing:
        raise DataError(f"empty class(es) in training data: {missing}")
    rng = np.random.default_rng(seed)
    params = model.params()
    dtype = model.dtype
    trdis = np.stack([np.asarray(s[0], dtype=dtype) for s in samples])
    midis = np.stack([np.asarray(s[1], dtype=dtype) for s in samples])
    epoch_losses: list[float] = []
    n = len(samples)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            logits = model.forward(trdis[idx], midis[idx])
            loss, dlogits = cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                if abort_checkpoint is not None:
                    model.save(abort_checkpoint)
                raise NumericalError(
                    f"non-finite loss at epoch {epoch + 1}"
                    + (f"; diagnostic checkpoint at {abort_checkpoint}" if abort_checkpoint else "")
                )
            model.zero_grads()
            model.backward(dlogits.astype(dtype))
            adam_step(params, lr=lr, weight_decay=weight_decay)
            total += loss * len(idx)
        epoch_losses.append(total / n)
    return TrainResult(epoch_losses=epoch_losses, epochs=epochs, batch_size=batch_size, seed=seed)


def predict(model: AfnModel, trdi: np.ndarray, midi: np.ndarray) -> np.ndarray:
    """Class indices for a batch of representation pairs."""
    logits = model.forward(
        np.asarray(trdi, dtype=model.dtype), np.asarray(midi, dtype=model.dtype)
    )
    return logits.argmax(axis=1)


def gradient_report(
    model: AfnModel,
    trdi: np.ndarray,
    midi: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    entries_per_param: int = 5,
    eps: float = 1e-6,
    tol: float = 1e-4,
) -> dict[str, float]:
    """Sampled central finite-difference check of every parameter tensor.

    Returns {param name: max relative error over validated entries}. Central
    differences are only a valid oracle where the loss is locally smooth; a
    perturbation that flips a ReLU sign or a pooling argmax makes the FD
    estimate itself wrong. Entries whose error exceeds tol are therefore
    re-estimated at eps/3: if the two FD values disagree with each other the
    point is non-smooth and another entry is sampled instead; if they agree,
    the discrepancy is genuine and is reported. The model should be built in
    float64 for meaningful tolerances.
    """

    def loss_fn() -> float:
        return cross_entropy(model.forward(trdi, midi), labels)[0]

    def central_diff(flat, i, step) -> float:
        orig = flat[i]
        flat[i] = orig + step
        fp = loss_fn()
        flat[i] = orig - step
        fm = loss_fn()
        flat[i] = orig
        return (fp - fm) / (2 * step)

    model.zero_grads()
    _, dlogits = cross_entropy(model.forward(trdi, midi), labels)
    model.backward(dlogits)
    report: dict[str, float] = {}
    for p in model.params():
        flat = p.data.reshape(-1)
        pool = rng.permutation(flat.size)
        worst = 0.0
        accepted = 0
        for i in pool:
            if accepted >= min(entries_per_param, flat.size):
                break
            numeric = central_diff(flat, i, eps)
            analytic = p.grad.reshape(-1)[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            if err >= tol:
                refined = central_diff(flat, i, eps / 3.0)
                spread = abs(numeric - refined) / max(abs(numeric), abs(refined), 1e-6)
                if spread >= 1e-5:
                    continue  # FD unstable here: non-smooth point, not evidence
            worst = max(worst, err)
            accepted += 1
        report[p.name] = worst
    return report
