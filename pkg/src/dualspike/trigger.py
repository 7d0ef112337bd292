"""Trigger families and the learned perturbation generator.

Three ways to turn a clean input into a backdoor-activating one:

  power:     raise pixels to q (static images)
  noise:     add uniform noise in [-beta, beta] and clip (spike frames)
  generator: add a learned, magnitude-capped perturbation field conditioned
             on the target label (static images)

The generator is a small three-level conv encoder-decoder with skip
connections; the target label enters as an extra constant input plane and the
output is bounded to [-m, m] by a scaled odd sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import SGD, Tensor, no_grad, softmax_cross_entropy
from .attack import BlendTargets, power_transform
from .data import Dataset, baseline_poison
from .network import SpikingNetwork, encode_static
from .neurons import NeuronConfig


class PowerTrigger:
    def __init__(self, q: float):
        if q <= 0:
            raise ValueError("power ratio must be positive")
        self.q = float(q)

    def apply(self, x: np.ndarray, rng=None) -> np.ndarray:
        return power_transform(x, self.q)

    def tag(self) -> str:
        return f"tp(q={self.q:g})"


class NoiseTrigger:
    """Uniform perturbation on spike frames; fresh noise per call unless an
    rng is supplied."""

    def __init__(self, beta: float):
        if beta < 0:
            raise ValueError("noise bound must be non-negative")
        self.beta = float(beta)

    def apply(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.beta == 0.0:
            return np.asarray(x, dtype=np.float32).copy()
        rng = rng or np.random.default_rng()
        eps = rng.uniform(-self.beta, self.beta, x.shape).astype(np.float32)
        return np.clip(x + eps, 0.0, 1.0)

    def tag(self) -> str:
        return f"ts(beta={self.beta:g})"


class StampTrigger:
    """Conventional data-poisoning trigger (baseline attacks)."""

    def __init__(self, kind: str, **params):
        self.kind = kind
        self.params = params

    def apply(self, x: np.ndarray, rng=None) -> np.ndarray:
        return baseline_poison(x, self.kind, **self.params)

    def tag(self) -> str:
        return self.kind


class GeneratorTrigger:
    def __init__(self, gen: "TriggerGenerator", y_target: int):
        self.gen = gen
        self.y_target = y_target

    def apply(self, x: np.ndarray, rng=None) -> np.ndarray:
        with no_grad():
            pert = self.gen.forward(Tensor(np.asarray(x, dtype=np.float32)), self.y_target)
        return np.clip(x + pert.data, 0.0, 1.0)

    def tag(self) -> str:
        return f"to(m={self.gen.magnitude_cap:g})"


# ---------------------------------------------------------------------------
# generator model
# ---------------------------------------------------------------------------

def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, shape).astype(np.float32), requires_grad=True)


def _conv_block(rng, c_in, c_out, k=3):
    kern = _glorot(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
    bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
    return kern, bias


class TriggerGenerator:
    """Conditional image-to-perturbation network, output in [-m, m]."""

    def __init__(self, in_channels: int, n_classes: int, magnitude_cap: float,
                 base_width: int = 8, seed: int = 0):
        if magnitude_cap < 0:
            raise ValueError("magnitude cap must be non-negative")
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.magnitude_cap = float(magnitude_cap)
        self.base_width = base_width
        rng = np.random.default_rng([seed, 31])
        w = base_width
        self.blocks = {
            "enc1": _conv_block(rng, in_channels + 1, w),
            "enc2": _conv_block(rng, w, 2 * w),
            "mid": _conv_block(rng, 2 * w, 4 * w),
            "dec2": _conv_block(rng, 6 * w, 2 * w),
            "dec1": _conv_block(rng, 3 * w, w),
            "out": _conv_block(rng, w, in_channels),
        }

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, (kern, bias) in self.blocks.items():
            out.append((f"{name}.kernels", kern))
            out.append((f"{name}.bias", bias))
        return out

    def param_tensors(self) -> list[Tensor]:
        return [p for _, p in self.parameters()]

    def _conv(self, name: str, x: Tensor, act: bool = True) -> Tensor:
        kern, bias = self.blocks[name]
        y = engine.conv2d(x, kern, bias, stride=1, padding=1)
        return engine.tanh(y) if act else y

    def forward(self, x: Tensor, y_target: int) -> Tensor:
        """Perturbation field with the same shape as x, bounded to [-m, m]."""
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {c}")
        level = y_target / max(self.n_classes - 1, 1)
        plane = Tensor(np.full((b, 1, h, w), level, dtype=np.float32))
        e1 = self._conv("enc1", engine.concat([x, plane], axis=1))
        e2 = self._conv("enc2", engine.avg_pool2d(e1))
        mid = self._conv("mid", engine.avg_pool2d(e2))
        d2 = self._conv("dec2", engine.concat([engine.upsample2x(mid), e2], axis=1))
        d1 = self._conv("dec1", engine.concat([engine.upsample2x(d2), e1], axis=1))
        raw = self._conv("out", d1, act=False)
        return engine.scale(engine.tanh(raw), self.magnitude_cap)


# ---------------------------------------------------------------------------
# generator training
# ---------------------------------------------------------------------------

@dataclass
class GeneratorTrainLog:
    total: list[float] = field(default_factory=list)
    sim: list[float] = field(default_factory=list)
    adv: list[float] = field(default_factory=list)
    wmse: list[float] = field(default_factory=list)


def similarity_loss(out: Tensor, delta: Tensor, delta_norms: np.ndarray) -> Tensor:
    """1 - mean cosine between generated and target perturbations."""
    dot = engine.sum_axes(engine.mul(out, delta), tuple(range(1, out.ndim)))
    out_norm = engine.sqrt(engine.shift(
        engine.sum_axes(engine.mul(out, out), tuple(range(1, out.ndim))), 1e-12))
    denom = engine.shift(engine.mul(out_norm, Tensor(delta_norms)), 1e-8)
    return engine.shift(engine.neg(engine.mean_all(engine.div(dot, denom))), 1.0)


def weighted_mse_loss(out: Tensor, delta: Tensor, weights: np.ndarray) -> Tensor:
    """Mean of w * (out - delta)^2 over every element."""
    err = engine.sub(out, delta)
    return engine.mean_all(engine.mul(Tensor(weights), engine.mul(err, err)))


def target_norms(deltas: np.ndarray) -> np.ndarray:
    return np.sqrt(
        (deltas.astype(np.float64) ** 2).sum(axis=tuple(range(1, deltas.ndim)))
    ).astype(np.float32)


def wmse_weights(deltas: np.ndarray, mode: str = "magnitude") -> np.ndarray:
    """Per-pixel weights for the reconstruction term, mean 1 per image.

    magnitude mode emphasizes regions the target perturbation touches;
    uniform mode is the ablation switch.
    """
    if mode == "uniform":
        return np.ones_like(deltas)
    if mode != "magnitude":
        raise ValueError(f"unknown weight mode {mode!r}")
    w = 1.0 + np.abs(deltas)
    means = w.mean(axis=tuple(range(1, w.ndim)), keepdims=True, dtype=np.float64)
    return (w / means).astype(np.float32)


def train_trigger_generator(gen: TriggerGenerator, net: SpikingNetwork, dataset: Dataset,
                            targets: BlendTargets, y_target: int, cfg_nominal: NeuronConfig,
                            lambdas: tuple[float, float, float] = (1.0, 0.1, 1.0),
                            epochs: int = 20, batch_size: int = 32, lr: float = 0.05,
                            momentum: float = 0.9, seed: int = 0,
                            weight_mode: str = "magnitude") -> GeneratorTrainLog:
    """Fit the generator to the precomputed blend targets.

    Loss: lambda1 * (1 - cosine(gen, target)) + lambda2 * CE of the clipped
    triggered image toward the target label under the nominal config +
    lambda3 * weighted MSE against the target. Only generator parameters
    update; the classifier is frozen and checked for gradient leakage every
    step.
    """
    l_sim_w, l_adv_w, l_wmse_w = lambdas
    net_params = net.param_tensors()
    prev_flags = [p.requires_grad for p in net_params]
    for p in net_params:
        p.requires_grad = False
        p.grad = None
    weights = wmse_weights(targets.deltas, weight_mode)
    norms = target_norms(targets.deltas)
    opt = SGD(gen.param_tensors(), lr, momentum)
    rng = np.random.default_rng([seed, 32])
    log = GeneratorTrainLog()
    try:
        for _ in range(epochs):
            order = rng.permutation(len(targets))
            for lo in range(0, len(order), batch_size):
                rows = order[lo : lo + batch_size]
                xb = Tensor(dataset.images[targets.indices[rows]])
                delta_t = Tensor(targets.deltas[rows])
                out = gen.forward(xb, y_target)

                l_sim = similarity_loss(out, delta_t, norms[rows])

                triggered = engine.clip(engine.add(xb, out), 0.0, 1.0)
                frames = encode_static(triggered, net.T, dataset.mu, dataset.sigma)
                logits, _ = net.forward_T(frames, cfg_nominal)
                l_adv = softmax_cross_entropy(
                    logits, np.full(len(rows), y_target, dtype=np.int64), reduction="mean")

                l_wmse = weighted_mse_loss(out, delta_t, weights[rows])

                total = engine.add(
                    engine.add(engine.scale(l_sim, l_sim_w), engine.scale(l_adv, l_adv_w)),
                    engine.scale(l_wmse, l_wmse_w))
                total.backward()
                leaked = [name for name, p in net.parameters()
                          if p.grad is not None and np.any(p.grad)]
                if leaked:
                    raise RuntimeError(f"frozen network received gradients: {leaked}")
                opt.step()
                log.total.append(float(total.data))
                log.sim.append(float(l_sim.data))
                log.adv.append(float(l_adv.data))
                log.wmse.append(float(l_wmse.data))
    finally:
        for p, flag in zip(net_params, prev_flags):
            p.requires_grad = flag
            p.grad = None
    return log
