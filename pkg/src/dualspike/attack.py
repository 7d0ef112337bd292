"""Backdoor embedding and trigger-target construction.

Training poisons nothing in pixel space. Instead, a subset of target-class
samples is additionally trained under a second spiking-neuron configuration
with the target label, so the shared weights learn to route anomalous spike
regimes toward that label. Trigger targets are then derived per sample by
blending a power-transform residual with a minimal adversarial perturbation
and grid-searching the blend ratio.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .engine import SGD, Tensor, no_grad, softmax_cross_entropy
from .data import Dataset, PoisonPartition, partition
from .network import SpikingNetwork, encode_static
from .neurons import NeuronConfig


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class BackdoorTrainPlan:
    """Everything one dual-configuration training run needs."""

    cfg_nominal: NeuronConfig
    cfg_malicious: NeuronConfig
    part: PoisonPartition
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 1.0
    poison_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.cfg_malicious.differs_from(self.cfg_nominal):
            raise ValueError("malicious config must differ from nominal in v_thr or tau")


@dataclass
class TrainLog:
    step_losses: list[float] = field(default_factory=list)
    dual_flags: list[bool] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)

    @property
    def has_dual_term(self) -> bool:
        return any(self.dual_flags)


def train_backdoor(net: SpikingNetwork, dataset: Dataset, plan: BackdoorTrainPlan) -> TrainLog:
    """Minimize clean cross-entropy plus the dual-configuration poison term.

    Every batch contributes CE under the nominal config against true labels;
    batch members of the poison subset additionally contribute CE under the
    malicious config against the target label. Both paths backpropagate into
    the one shared parameter set. With an empty poison subset this is exactly
    plain training (identical op sequence, identical rng consumption).
    """
    poison_set = set(plan.part.poison.tolist())
    y_t = plan.part.y_target
    opt = SGD(net.param_tensors(), plan.lr, plan.momentum)
    rng = np.random.default_rng([plan.seed, 21])
    log = TrainLog()
    for epoch in range(plan.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for lo in range(0, len(order), plan.batch_size):
            idx = order[lo : lo + plan.batch_size]
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            frames = encode_static(Tensor(xb), net.T, dataset.mu, dataset.sigma)
            logits, _ = net.forward_T(frames, plan.cfg_nominal)
            loss_sum = softmax_cross_entropy(logits, yb, reduction="sum")
            pmask = np.fromiter((int(i) in poison_set for i in idx), dtype=bool, count=len(idx))
            dual = bool(pmask.any())
            if dual:
                xp = xb[pmask]
                frames_p = encode_static(Tensor(xp), net.T, dataset.mu, dataset.sigma)
                logits_t, _ = net.forward_T(frames_p, plan.cfg_malicious)
                targets = np.full(len(xp), y_t, dtype=np.int64)
                ce_t = softmax_cross_entropy(logits_t, targets, reduction="sum")
                loss_sum = engine.add(loss_sum, engine.scale(ce_t, plan.poison_weight))
            loss = engine.scale(loss_sum, 1.0 / len(idx))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {len(log.step_losses)}"
                )
            loss.backward()
            opt.step()
            log.step_losses.append(value)
            log.dual_flags.append(dual)
            epoch_losses.append(value)
        log.epoch_means.append(float(np.mean(epoch_losses)))
        opt.lr *= plan.lr_decay
        net.epochs_trained += 1
    return log


def train_clean(net: SpikingNetwork, dataset: Dataset, cfg: NeuronConfig, epochs: int,
                batch_size: int = 32, lr: float = 0.05, momentum: float = 0.9,
                lr_decay: float = 1.0, seed: int = 0) -> TrainLog:
    """Plain training: the zero-poison special case of the dual loop."""
    empty = partition(dataset.labels, y_target=0, ratio=0.0, seed=seed)
    shifted = NeuronConfig(cfg.v_thr + 0.5, cfg.tau, cfg.v_rest, cfg.v_reset, cfg.surrogate)
    plan = BackdoorTrainPlan(cfg, shifted, empty, epochs=epochs, batch_size=batch_size,
                             lr=lr, momentum=momentum, lr_decay=lr_decay, seed=seed)
    return train_backdoor(net, dataset, plan)


# ---------------------------------------------------------------------------
# model closures
# ---------------------------------------------------------------------------

def make_model_fn(net: SpikingNetwork, cfg: NeuronConfig, mu: np.ndarray, sigma: np.ndarray):
    """Pixel-space classifier closure: Tensor [B,C,H,W] in [0,1] -> logits."""

    def model_fn(x: Tensor) -> Tensor:
        frames = encode_static(x, net.T, mu, sigma)
        logits, _ = net.forward_T(frames, cfg)
        return logits

    return model_fn


def predict(model_fn, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            logits = model_fn(Tensor(x[lo : lo + batch_size]))
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# power transform
# ---------------------------------------------------------------------------

def power_transform(x: np.ndarray, q: float) -> np.ndarray:
    """Elementwise x**q in pixel space; exact identity at q=1, fixes 0 and 1."""
    if q <= 0:
        raise ValueError(f"power ratio must be positive, got {q}")
    x = np.asarray(x, dtype=np.float32)
    return x ** np.float32(q)


# ---------------------------------------------------------------------------
# minimal adversarial perturbations
# ---------------------------------------------------------------------------

@dataclass
class DeepFoolResult:
    delta: np.ndarray
    iterations: int
    flipped: bool


def deepfool(model_fn, x: np.ndarray, n_classes: int, max_iter: int = 50,
             overshoot: float = 0.02) -> DeepFoolResult:
    """Iteratively project onto the nearest linearized class boundary.

    Per iteration the score differences f_k = logit_k - logit_orig and their
    input gradients w_k are obtained in one batched backward pass (one row
    per rival class); the step moves to the closest boundary l:

        r = |f_l| / ||w_l||^2 * w_l

    The perturbation returned is the accumulated step scaled by
    (1 + overshoot). A network with identically zero input gradients yields a
    zero perturbation with flipped=False.
    """
    x0 = np.asarray(x, dtype=np.float32)
    with no_grad():
        orig = int(model_fn(Tensor(x0[None])).data.argmax())
    rivals = [k for k in range(n_classes) if k != orig]
    sel = np.zeros((len(rivals), n_classes), dtype=np.float32)
    for row, k in enumerate(rivals):
        sel[row, k] = 1.0
        sel[row, orig] = -1.0
    r_tot = np.zeros_like(x0)
    iterations = 0
    for _ in range(max_iter):
        x_adv = x0 + (1.0 + overshoot) * r_tot
        with no_grad():
            pred = int(model_fn(Tensor(x_adv[None])).data.argmax())
        if pred != orig:
            return DeepFoolResult((1.0 + overshoot) * r_tot, iterations, True)
        xb = Tensor(np.repeat(x_adv[None], len(rivals), axis=0), requires_grad=True)
        logits = model_fn(xb)
        diff = engine.sum_all(engine.mul(logits, Tensor(sel)))
        diff.backward()
        f = (logits.data @ sel.T.astype(logits.data.dtype))[0]  # same input in each row
        w = xb.grad
        norms = np.sqrt((w.astype(np.float64) ** 2).sum(axis=tuple(range(1, w.ndim))))
        if not np.any(norms > 1e-12):
            return DeepFoolResult(np.zeros_like(x0), iterations, False)
        ratio = np.where(norms > 1e-12, np.abs(f) / np.maximum(norms, 1e-12), np.inf)
        l = int(np.argmin(ratio))
        r_tot = r_tot + (np.abs(f[l]) / norms[l] ** 2) * w[l]
        iterations += 1
    x_adv = x0 + (1.0 + overshoot) * r_tot
    with no_grad():
        pred = int(model_fn(Tensor(x_adv[None])).data.argmax())
    return DeepFoolResult((1.0 + overshoot) * r_tot, iterations, pred != orig)


# ---------------------------------------------------------------------------
# adaptive blending
# ---------------------------------------------------------------------------

@dataclass
class BlendResult:
    x_blend: np.ndarray
    delta_x: np.ndarray
    alpha: float
    success: bool


def blend_candidate(x: np.ndarray, tp_x: np.ndarray, adv_x: np.ndarray, alpha: float) -> np.ndarray:
    """Pre-clip blend: (1 - alpha) * |x - T_p(x)| + alpha * (x + delta)."""
    a = np.float32(alpha)
    return (np.float32(1.0) - a) * np.abs(x - tp_x) + a * adv_x


def adaptive_blend(model_fn, x: np.ndarray, y_target: int, q: float,
                   alpha_grid: np.ndarray, delta_df: np.ndarray | None = None,
                   n_classes: int | None = None, max_iter: int = 50,
                   overshoot: float = 0.02) -> BlendResult:
    """Pick the blend ratio whose clipped image lands on the target label.

    All grid candidates are classified in one batch; among the candidates
    predicted as the target the one with the smallest perturbation norm
    ||x - x_blend||_2 wins. If none succeed the alpha=0 candidate is returned
    with success=False.
    """
    x = np.asarray(x, dtype=np.float32)
    alpha_grid = np.asarray(alpha_grid, dtype=np.float64)
    if delta_df is None:
        if n_classes is None:
            raise ValueError("need n_classes to run the perturbation search")
        delta_df = deepfool(model_fn, x, n_classes, max_iter, overshoot).delta
    tp_x = power_transform(x, q)
    adv_x = x + delta_df
    cands = np.stack([np.clip(blend_candidate(x, tp_x, adv_x, a), 0.0, 1.0) for a in alpha_grid])
    preds = predict(model_fn, cands.astype(np.float32))
    deltas = np.abs(x[None] - cands)
    norms = np.sqrt((deltas.astype(np.float64) ** 2).sum(axis=tuple(range(1, deltas.ndim))))
    hits = np.flatnonzero(preds == y_target)
    if len(hits):
        best = hits[np.argmin(norms[hits])]
        return BlendResult(cands[best].astype(np.float32), deltas[best].astype(np.float32),
                           float(alpha_grid[best]), True)
    fallback = np.clip(blend_candidate(x, tp_x, adv_x, 0.0), 0.0, 1.0).astype(np.float32)
    return BlendResult(fallback, np.abs(x - fallback).astype(np.float32), 0.0, False)


# ---------------------------------------------------------------------------
# precomputed blend targets (sidecar file)
# ---------------------------------------------------------------------------

_SIDECAR_MAGIC = b"DSTG"
_SIDECAR_VERSION = 1


@dataclass
class BlendTargets:
    """Per-sample trigger-learning targets, restartable from disk."""

    indices: np.ndarray   # [n] int64 into the source dataset
    alphas: np.ndarray    # [n] float32
    success: np.ndarray   # [n] bool
    deltas: np.ndarray    # [n, C, H, W] float32

    def __len__(self):
        return len(self.indices)


def precompute_blend_targets(net: SpikingNetwork, dataset: Dataset, indices: np.ndarray,
                             cfg_nominal: NeuronConfig, y_target: int, q: float,
                             alpha_grid: np.ndarray, max_iter: int = 50,
                             overshoot: float = 0.02) -> BlendTargets:
    model_fn = make_model_fn(net, cfg_nominal, dataset.mu, dataset.sigma)
    indices = np.asarray(indices, dtype=np.int64)
    alphas = np.zeros(len(indices), dtype=np.float32)
    success = np.zeros(len(indices), dtype=bool)
    deltas = np.zeros((len(indices),) + dataset.in_shape, dtype=np.float32)
    for row, i in enumerate(indices):
        res = adaptive_blend(model_fn, dataset.images[i], y_target, q, alpha_grid,
                             n_classes=dataset.n_classes, max_iter=max_iter,
                             overshoot=overshoot)
        alphas[row] = res.alpha
        success[row] = res.success
        deltas[row] = res.delta_x
    return BlendTargets(indices, alphas, success, deltas)


def save_blend_targets(path, targets: BlendTargets):
    shape = targets.deltas.shape[1:]
    with open(path, "wb") as fh:
        fh.write(_SIDECAR_MAGIC)
        fh.write(struct.pack("<HH", _SIDECAR_VERSION, len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(struct.pack("<I", len(targets)))
        fh.write(targets.indices.astype("<i8").tobytes())
        fh.write(targets.alphas.astype("<f4").tobytes())
        fh.write(targets.success.astype(np.uint8).tobytes())
        fh.write(targets.deltas.astype("<f4").tobytes())


def load_blend_targets(path) -> BlendTargets:
    data = Path(path).read_bytes()
    if data[:4] != _SIDECAR_MAGIC:
        raise ValueError(f"{path}: not a blend-target sidecar (bad magic at byte 0)")
    version, ndim = struct.unpack("<HH", data[4:8])
    if version != _SIDECAR_VERSION:
        raise ValueError(f"{path}: unsupported sidecar version {version}")
    off = 8
    shape = struct.unpack(f"<{ndim}I", data[off : off + 4 * ndim])
    off += 4 * ndim
    (n,) = struct.unpack("<I", data[off : off + 4])
    off += 4
    per = int(np.prod(shape))
    expect = off + 8 * n + 4 * n + n + 4 * n * per
    if len(data) != expect:
        raise ValueError(f"{path}: truncated sidecar, expected {expect} bytes, found {len(data)}")
    indices = np.frombuffer(data, "<i8", count=n, offset=off).copy()
    off += 8 * n
    alphas = np.frombuffer(data, "<f4", count=n, offset=off).copy()
    off += 4 * n
    success = np.frombuffer(data, np.uint8, count=n, offset=off).astype(bool)
    off += n
    deltas = np.frombuffer(data, "<f4", count=n * per, offset=off).reshape((n,) + shape).copy()
    return BlendTargets(indices, alphas, success, deltas)
