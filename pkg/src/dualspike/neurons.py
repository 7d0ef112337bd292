"""Discrete-time leaky integrate-and-fire dynamics.

The membrane update treats tau as a per-step decay factor in (0, 1]:

    H      = v_rest + tau * (V - v_rest) + X
    S      = spike(H, v_thr)
    V_next = S * v_reset + (1 - S) * H        (hard reset)

Membrane resistance is folded into the synaptic weights, so the input X is
already a current in membrane-potential units. The parametric variant learns
tau through a logistic reparameterization, one learnable scalar per spiking
layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import engine
from .engine import SurrogateSpec, Tensor


@dataclass(frozen=True)
class NeuronConfig:
    """One spiking regime: threshold, decay, rest/reset levels, surrogate."""

    v_thr: float = 1.0
    tau: float = 0.5
    v_rest: float = 0.0
    v_reset: float = 0.0
    surrogate: SurrogateSpec = SurrogateSpec()

    def __post_init__(self):
        if not self.v_thr > self.v_reset:
            raise ValueError(f"v_thr ({self.v_thr}) must exceed v_reset ({self.v_reset})")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")

    def with_mode(self, mode: str) -> "NeuronConfig":
        return replace(self, surrogate=replace(self.surrogate, mode=mode))

    def differs_from(self, other: "NeuronConfig") -> bool:
        return self.v_thr != other.v_thr or self.tau != other.tau


def lif_step(V: Tensor, X: Tensor, cfg: NeuronConfig, tau: Tensor | None = None):
    """One membrane update. Returns (V_next, S).

    `tau` overrides cfg.tau with a learnable scalar tensor (parametric mode);
    gradients then flow into it through the decay term.
    """
    if V.shape != X.shape:
        raise ValueError(f"membrane shape {tuple(V.shape)} != input shape {tuple(X.shape)}")
    centered = V - cfg.v_rest if cfg.v_rest else V
    decayed = engine.mul(tau, centered) if tau is not None else centered * cfg.tau
    H = (decayed + X) + cfg.v_rest if cfg.v_rest else decayed + X
    S = engine.spike(H, cfg.v_thr, cfg.surrogate)
    V_next = (1.0 - S) * H
    if cfg.v_reset:
        V_next = S * cfg.v_reset + V_next
    return V_next, S


def plif_tau(w: Tensor) -> Tensor:
    """Learnable decay: tau = logistic(w), always inside (0, 1).

    The logistic saturates to exactly 0 or 1 in float32 for |w| above ~17, so
    the output is clamped just inside the open interval.
    """
    return engine.clip(engine.sigmoid(w), 1e-6, 1.0 - 1e-6)
