"""Layered spiking networks run over a fixed number of timesteps.

A network is an ordered stack of conv / affine / pooling / spiking layers
sharing one parameter set. The spiking-neuron configuration is injected per
forward call and never touches the weights, so the same network can be
evaluated under nominal, malicious or intermediate regimes interchangeably.
Output logits are the arithmetic mean of the readout layer over timesteps.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .neurons import NeuronConfig, lif_step, plif_tau


@dataclass
class SpikeStats:
    """Hard-spike totals per spiking layer for one forward batch."""

    layer_totals: list[float]
    batch_size: int

    @property
    def n_spike(self) -> float:
        """Average spikes per sample across all spiking layers."""
        return sum(self.layer_totals) / self.batch_size


class ConvLayer:
    def __init__(self, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0):
        self.kernels = kernels
        self.bias = bias
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return engine.conv2d(x, self.kernels, self.bias, self.stride, self.padding)

    def params(self):
        return [("kernels", self.kernels), ("bias", self.bias)]


class AffineLayer:
    def __init__(self, w: Tensor, b: Tensor):
        self.w = w
        self.b = b

    def __call__(self, x: Tensor) -> Tensor:
        return engine.affine(x, self.w, self.b)

    def params(self):
        return [("w", self.w), ("b", self.b)]


class PoolLayer:
    def __call__(self, x: Tensor) -> Tensor:
        return engine.avg_pool2d(x, 2)

    def params(self):
        return []


class FlattenLayer:
    def __call__(self, x: Tensor) -> Tensor:
        return engine.flatten(x)

    def params(self):
        return []


class SpikeLayer:
    """Stateful threshold layer; membrane state lives in the forward call."""

    def __init__(self, kind: str = "lif", dtype=np.float32):
        if kind not in ("lif", "plif"):
            raise ValueError(f"neuron kind must be 'lif' or 'plif', got {kind!r}")
        self.kind = kind
        # logistic(0) = 0.5, the nominal decay
        self.w = Tensor(np.zeros((), dtype=dtype), requires_grad=True) if kind == "plif" else None

    def params(self):
        return [("tau_w", self.w)] if self.w is not None else []


class SpikingNetwork:
    """Shared weights plus a per-call neuron configuration.

    `layers` mixes stateless layers (conv, affine, pool, flatten) with
    SpikeLayer markers. `forward_T` consumes a list of T input frames and
    keeps per-layer membrane state only for the duration of the call.
    """

    def __init__(self, layers: list, T: int, arch: str, in_shape: tuple[int, int, int],
                 n_classes: int, neuron_kind: str = "lif"):
        self.layers = layers
        self.T = T
        self.arch = arch
        self.in_shape = tuple(in_shape)
        self.n_classes = n_classes
        self.neuron_kind = neuron_kind
        self.epochs_trained = 0

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params():
                out.append((f"layer{i}.{name}", p))
        return out

    def param_tensors(self) -> list[Tensor]:
        return [p for _, p in self.parameters()]

    def forward_T(self, frames: list[Tensor], cfg: NeuronConfig):
        """Run the stack once per timestep; returns (logits, SpikeStats).

        Membrane potentials start at v_rest and are discarded when the call
        returns, so repeated calls with different configs never interact.
        """
        if len(frames) != self.T:
            raise ValueError(f"expected {self.T} input frames, got {len(frames)}")
        batch = frames[0].shape[0]
        membranes: dict[int, Tensor] = {}
        counts: dict[int, float] = {}
        out_sum = None
        for t in range(self.T):
            h = frames[t]
            for i, layer in enumerate(self.layers):
                if isinstance(layer, SpikeLayer):
                    v = membranes.get(i)
                    if v is None:
                        init = np.full(h.shape, cfg.v_rest, dtype=h.data.dtype)
                        v = Tensor(init, dtype=h.data.dtype)
                    tau = plif_tau(layer.w) if layer.kind == "plif" else None
                    v, s = lif_step(v, h, cfg, tau=tau)
                    membranes[i] = v
                    counts[i] = counts.get(i, 0.0) + _hard_spike_count(s, cfg)
                    h = s
                else:
                    h = layer(h)
            out_sum = h if out_sum is None else engine.add(out_sum, h)
        logits = engine.scale(out_sum, 1.0 / self.T)
        stats = SpikeStats([counts[i] for i in sorted(counts)], batch)
        return logits, stats


def _hard_spike_count(s: Tensor, cfg: NeuronConfig) -> float:
    if cfg.surrogate.mode == "hard":
        return float(s.data.sum(dtype=np.float64))
    # soft forward has no binary spikes; count would-be crossings instead
    return float(np.count_nonzero(s.data >= 0.5))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

_CONV_RE = re.compile(r"^conv(\d+)(?:k(\d+))?$")


def _glorot(rng: np.random.Generator, shape, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True, dtype=dtype)


def build_network(arch: str, in_shape: tuple[int, int, int], n_classes: int, T: int,
                  neuron_kind: str = "lif", seed: int = 0, dtype=np.float32) -> SpikingNetwork:
    """Build a network from a compact layer descriptor.

    `arch` is a comma list of tokens: conv<K>[k<size>] (3x3 by default,
    stride 1, same padding), pool (2x2 average), spike, fc (readout to the
    class count). Example: "conv8,spike,pool,conv16,spike,pool,fc".
    """
    rng = np.random.default_rng([seed, 101])
    c, h, w = in_shape
    layers: list = []
    spatial = True
    for token in arch.split(","):
        token = token.strip()
        m = _CONV_RE.match(token)
        if m:
            if not spatial:
                raise ValueError(f"conv after flatten in arch {arch!r}")
            k = int(m.group(1))
            ksize = int(m.group(2) or 3)
            pad = ksize // 2
            fan_in = c * ksize * ksize
            kern = _glorot(rng, (k, c, ksize, ksize), fan_in, k * ksize * ksize, dtype)
            bias = Tensor(np.zeros(k, dtype=dtype), requires_grad=True, dtype=dtype)
            layers.append(ConvLayer(kern, bias, stride=1, padding=pad))
            c = k
        elif token == "pool":
            layers.append(PoolLayer())
            h //= 2
            w //= 2
        elif token == "spike":
            layers.append(SpikeLayer(neuron_kind, dtype=dtype))
        elif token == "fc":
            if spatial:
                layers.append(FlattenLayer())
                spatial = False
                flat = c * h * w
            wmat = _glorot(rng, (flat, n_classes), flat, n_classes, dtype)
            bias = Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True, dtype=dtype)
            layers.append(AffineLayer(wmat, bias))
        else:
            raise ValueError(f"unknown arch token {token!r} in {arch!r}")
    return SpikingNetwork(layers, T, arch, in_shape, n_classes, neuron_kind)


# ---------------------------------------------------------------------------
# input encoding
# ---------------------------------------------------------------------------

def normalize_op(x: Tensor, mu: np.ndarray, sigma: np.ndarray) -> Tensor:
    """(x - mu) / sigma as differentiable ops; mu, sigma are per-channel."""
    c = x.shape[1]
    scale = (1.0 / sigma).reshape(1, c, 1, 1).astype(x.data.dtype)
    shift = (-mu / sigma).reshape(1, c, 1, 1).astype(x.data.dtype)
    return engine.add(engine.mul(x, Tensor(scale, dtype=x.data.dtype)),
                      Tensor(shift, dtype=x.data.dtype))


def encode_static(x: Tensor | np.ndarray, T: int, mu: np.ndarray, sigma: np.ndarray) -> list[Tensor]:
    """Direct encoding: the normalized frame is presented at every timestep."""
    x = engine.as_tensor(x)
    frame = normalize_op(x, mu, sigma)
    return [frame] * T


def encode_events(frames: np.ndarray, dtype=np.float32) -> list[Tensor]:
    """Event tensors [T, batch, 2, H, W] become one input tensor per step."""
    if frames.ndim != 5:
        raise ValueError(f"event frames must be [T, batch, 2, H, W], got {frames.shape}")
    return [Tensor(frames[t], dtype=dtype) for t in range(frames.shape[0])]


# ---------------------------------------------------------------------------
# spike-count probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeRow:
    q: float
    n_spike: float
    accuracy: float


def spike_count_probe(net: SpikingNetwork, images: np.ndarray, labels: np.ndarray,
                      cfg: NeuronConfig, q_list: list[float], mu: np.ndarray,
                      sigma: np.ndarray, batch_size: int = 256) -> list[ProbeRow]:
    """Spike counts and accuracy after raising pixels to each power q.

    The transform acts in pixel space before encoding; q=1 is the untouched
    baseline. Requires q=1 to be present so the baseline is always recorded.
    """
    if 1.0 not in [float(q) for q in q_list]:
        raise ValueError("q_list must contain q=1 (the baseline)")
    if net.epochs_trained == 0:
        warnings.warn("probing an untrained network; accuracies will be near chance")
    rows = []
    for q in q_list:
        xq = images ** images.dtype.type(q)
        total_spikes = 0.0
        correct = 0
        with engine.no_grad():
            for lo in range(0, len(xq), batch_size):
                xb = xq[lo : lo + batch_size]
                yb = labels[lo : lo + batch_size]
                logits, stats = net.forward_T(encode_static(xb, net.T, mu, sigma), cfg)
                total_spikes += sum(stats.layer_totals)
                correct += int((logits.data.argmax(axis=1) == yb).sum())
        rows.append(ProbeRow(float(q), total_spikes / len(xq), correct / len(xq)))
    return rows
