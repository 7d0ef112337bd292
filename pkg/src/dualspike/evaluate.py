"""Metrics, attack-hyperparameter sweeps, selection, defense, ablations.

Clean accuracy counts untriggered samples classified to their ground truth.
Attack success counts triggered samples classified to the target label,
always excluding samples whose ground truth already is the target. Sweep
cells are independent and seeded individually, so any evaluation order gives
identical numbers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .attack import train_clean
from .data import Dataset, EventDataset
from .engine import Tensor, no_grad
from .network import SpikingNetwork, encode_events, encode_static
from .neurons import NeuronConfig
from .trigger import NoiseTrigger

METRICS_HEADER = "experiment,vthr_a,tau_a,trigger,ca,asr_p,asr_o,n_eval,seed"
ABLATION_HEADER = "knob,value,ca,asr_p,asr_o,l2"
PROBE_HEADER = "experiment,q,vthr_a,tau_a,n_spike,accuracy,n_eval,seed"


@dataclass
class Corpus:
    """Evaluation data plus what the forward pass needs to consume it."""

    kind: str  # "static" | "events"
    x: np.ndarray
    labels: np.ndarray
    n_classes: int
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None

    @classmethod
    def from_dataset(cls, d: Dataset, stats_from: Dataset | None = None) -> "Corpus":
        src = stats_from or d
        return cls("static", d.images, d.labels, d.n_classes, src.mu, src.sigma)

    @classmethod
    def from_events(cls, d: EventDataset) -> "Corpus":
        return cls("events", d.frames, d.labels, d.n_classes)


def _forward(net: SpikingNetwork, xb: np.ndarray, cfg: NeuronConfig, corpus: Corpus):
    if corpus.kind == "static":
        frames = encode_static(Tensor(xb), net.T, corpus.mu, corpus.sigma)
    else:
        frames = encode_events(np.transpose(xb, (1, 0, 2, 3, 4)))
    return net.forward_T(frames, cfg)


def classify(net: SpikingNetwork, x: np.ndarray, cfg: NeuronConfig, corpus: Corpus,
             batch_size: int = 256) -> np.ndarray:
    preds = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            logits, _ = _forward(net, x[lo : lo + batch_size], cfg, corpus)
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def clean_accuracy(net: SpikingNetwork, corpus: Corpus, cfg: NeuronConfig,
                   batch_size: int = 256) -> tuple[float, int]:
    if not len(corpus.x):
        raise ValueError("empty evaluation set")
    preds = classify(net, corpus.x, cfg, corpus, batch_size)
    return 100.0 * float((preds == corpus.labels).mean()), len(corpus.x)


def attack_success(net: SpikingNetwork, corpus: Corpus, cfg: NeuronConfig, trig,
                   y_target: int, rng: np.random.Generator | None = None,
                   batch_size: int = 256) -> tuple[float, int]:
    """Fraction of triggered non-target samples predicted as the target."""
    eligible = corpus.labels != y_target
    if not eligible.any():
        raise ValueError("no samples outside the target class; cannot measure attack success")
    if corpus.kind == "static" and isinstance(trig, NoiseTrigger):
        warnings.warn("noise trigger applied to a static-image pipeline")
    triggered = trig.apply(corpus.x[eligible], rng)
    preds = classify(net, triggered, cfg, corpus, batch_size)
    return 100.0 * float((preds == y_target).mean()), int(eligible.sum())


@dataclass
class EvalFragment:
    ca: float | None
    asr: float | None
    n_ca: int
    n_asr: int


def evaluate(net: SpikingNetwork, corpus: Corpus, cfg: NeuronConfig, trig=None,
             y_target: int | None = None, rng: np.random.Generator | None = None,
             batch_size: int = 256) -> EvalFragment:
    ca, n_ca = clean_accuracy(net, corpus, cfg, batch_size)
    if trig is None:
        return EvalFragment(ca, None, n_ca, 0)
    if y_target is None:
        raise ValueError("attack evaluation needs the target label")
    asr, n_asr = attack_success(net, corpus, cfg, trig, y_target, rng, batch_size)
    return EvalFragment(ca, asr, n_ca, n_asr)


@dataclass
class MetricsReport:
    """The headline numbers for one trained attack model."""

    clean_ca: float | None
    base_ca: float
    ca: float
    asr_p: float | None
    asr_o: float | None
    n_eval: int
    cfg_nominal: NeuronConfig
    cfg_attack: NeuronConfig
    trigger_tags: str

    def __post_init__(self):
        for name in ("clean_ca", "base_ca", "ca", "asr_p", "asr_o"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} out of range: {v}")


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepCell:
    v_thr: float
    tau: float
    ca: float
    asr_p: float | None
    asr_o: float | None
    n_eval: int
    seed: int


@dataclass
class SweepGrid:
    vthr_axis: list[float]
    tau_axis: list[float]
    cells: list[list[SweepCell]]  # indexed [i_vthr][j_tau]
    nominal: NeuronConfig

    def cell(self, i: int, j: int) -> SweepCell:
        return self.cells[i][j]

    def flat(self):
        for row in self.cells:
            yield from row


def sweep(net: SpikingNetwork, corpus: Corpus, vthr_axis, tau_axis, cfg_base: NeuronConfig,
          triggers: dict[str, object], y_target: int, base_seed: int = 0,
          batch_size: int = 256) -> SweepGrid:
    """Evaluate every (v_thr, tau) cell; noise triggers get per-cell seeds.

    `triggers` maps "p" and/or "o" to trigger objects; missing entries leave
    the corresponding column unset.
    """
    if not len(vthr_axis) or not len(tau_axis):
        raise ValueError("sweep axes must be non-empty")
    cells = []
    for i, v in enumerate(vthr_axis):
        row = []
        for j, t in enumerate(tau_axis):
            row.append(sweep_cell(net, corpus, float(v), float(t), cfg_base, triggers,
                                  y_target, base_seed, i, j, batch_size))
        cells.append(row)
    return SweepGrid([float(v) for v in vthr_axis], [float(t) for t in tau_axis],
                     cells, cfg_base)


def sweep_cell(net, corpus, v_thr: float, tau: float, cfg_base: NeuronConfig,
               triggers: dict, y_target: int, base_seed: int, i: int, j: int,
               batch_size: int = 256) -> SweepCell:
    cfg = replace(cfg_base, v_thr=v_thr, tau=tau)
    cell_seed = int(np.random.SeedSequence([base_seed, 41, i, j]).generate_state(1)[0])
    ca, n = clean_accuracy(net, corpus, cfg, batch_size)
    asr_p = asr_o = None
    if "p" in triggers:
        rng = np.random.default_rng([base_seed, 41, i, j, 0])
        asr_p, _ = attack_success(net, corpus, cfg, triggers["p"], y_target, rng, batch_size)
    if "o" in triggers:
        rng = np.random.default_rng([base_seed, 41, i, j, 1])
        asr_o, _ = attack_success(net, corpus, cfg, triggers["o"], y_target, rng, batch_size)
    return SweepCell(v_thr, tau, ca, asr_p, asr_o, n, cell_seed)


# ---------------------------------------------------------------------------
# attack-config selection
# ---------------------------------------------------------------------------

@dataclass
class SelectionRule:
    strategy: str = "geomean"  # "geomean" | "constrained"
    ca_floor: float = 0.0
    metric: str = "asr_p"

    def __post_init__(self):
        if self.strategy not in ("geomean", "constrained"):
            raise ValueError(f"unknown selection strategy {self.strategy!r}")


@dataclass
class Selection:
    v_thr: float
    tau: float
    cell: SweepCell
    feasible: bool


def _cell_metric(cell: SweepCell, metric: str) -> float:
    value = getattr(cell, metric)
    if value is None:
        raise ValueError(f"selection needs {metric} but the sweep did not record it")
    return value


def select_attack_config(grid: SweepGrid, rule: SelectionRule) -> Selection:
    """Apply the rule; ties break toward the nominal hyperparameters."""
    nominal_v, nominal_t = grid.nominal.v_thr, grid.nominal.tau

    def tie_key(cell: SweepCell):
        return (abs(cell.v_thr - nominal_v), abs(cell.tau - nominal_t))

    cells = list(grid.flat())
    if rule.strategy == "geomean":
        def score(c):
            return float(np.sqrt(max(c.ca, 0.0) * max(_cell_metric(c, rule.metric), 0.0)))

        best = min(cells, key=lambda c: (-score(c),) + tie_key(c))
        return Selection(best.v_thr, best.tau, best, True)

    feasible = [c for c in cells if c.ca >= rule.ca_floor]
    if feasible:
        best = min(feasible, key=lambda c: (-_cell_metric(c, rule.metric),) + tie_key(c))
        return Selection(best.v_thr, best.tau, best, True)
    best = min(cells, key=lambda c: (-c.ca,) + tie_key(c))
    return Selection(best.v_thr, best.tau, best, False)


# ---------------------------------------------------------------------------
# fine-tuning defense
# ---------------------------------------------------------------------------

def finetune_defense(net: SpikingNetwork, holdout: Dataset, cfg_nominal: NeuronConfig,
                     cfg_attack: NeuronConfig, trig, y_target: int, fraction: float = 0.05,
                     epochs: int = 3, lr: float = 0.02, momentum: float = 0.9,
                     batch_size: int = 32, seed: int = 0, stats_from: Dataset | None = None):
    """Continue clean training on a small held-out subset, report CA/ASR shift.

    Returns (defended_net, before: EvalFragment, after: EvalFragment); both
    fragments are measured at the fixed attack config on the held-out samples
    not used for fine-tuning. Zero epochs leave the metrics untouched.
    """
    rng = np.random.default_rng([seed, 51])
    n_tune = max(1, int(round(fraction * len(holdout))))
    chosen = rng.choice(len(holdout), size=n_tune, replace=False)
    rest = np.setdiff1d(np.arange(len(holdout)), chosen)
    stats = stats_from or holdout
    tune_set = Dataset(holdout.images[chosen], holdout.labels[chosen],
                       holdout.n_classes).with_stats_from(stats)
    eval_set = Dataset(holdout.images[rest], holdout.labels[rest],
                       holdout.n_classes).with_stats_from(stats)
    corpus = Corpus.from_dataset(eval_set, stats_from=stats)
    eval_rng = lambda: np.random.default_rng([seed, 52])

    before = evaluate(net, corpus, cfg_attack, trig, y_target, eval_rng())
    defended = clone_network(net)
    if epochs > 0:
        train_clean(defended, tune_set, cfg_nominal, epochs=epochs, batch_size=batch_size,
                    lr=lr, momentum=momentum, seed=seed)
    after = evaluate(defended, corpus, cfg_attack, trig, y_target, eval_rng())
    return defended, before, after


def clone_network(net: SpikingNetwork) -> SpikingNetwork:
    from .network import build_network

    twin = build_network(net.arch, net.in_shape, net.n_classes, net.T, net.neuron_kind, seed=0)
    for (_, src), (_, dst) in zip(net.parameters(), twin.parameters()):
        dst.data = src.data.copy()
    twin.epochs_trained = net.epochs_trained
    return twin


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None else f"{x:.4f}"


def metrics_rows(experiment: str, grid: SweepGrid, trigger_tags: str) -> list[str]:
    rows = []
    for cell in grid.flat():
        rows.append(
            f"{experiment},{cell.v_thr:.4f},{cell.tau:.4f},{trigger_tags},"
            f"{_fmt(cell.ca)},{_fmt(cell.asr_p)},{_fmt(cell.asr_o)},{cell.n_eval},{cell.seed}"
        )
    return rows


def metrics_row(experiment: str, v_thr: float, tau: float, trigger_tag: str,
                fragment: EvalFragment, seed: int, asr_is_o: bool = False) -> str:
    asr_p = None if asr_is_o else fragment.asr
    asr_o = fragment.asr if asr_is_o else None
    n = fragment.n_ca or fragment.n_asr
    return (f"{experiment},{v_thr:.4f},{tau:.4f},{trigger_tag},"
            f"{_fmt(fragment.ca)},{_fmt(asr_p)},{_fmt(asr_o)},{n},{seed}")


def write_csv(path, header: str, rows: list[str]):
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


@dataclass
class AblationRow:
    knob: str
    value: str
    ca: float
    asr_p: float | None
    asr_o: float | None
    l2: float | None

    def render(self) -> str:
        return f"{self.knob},{self.value},{_fmt(self.ca)},{_fmt(self.asr_p)},{_fmt(self.asr_o)},{_fmt(self.l2)}"


def probe_rows(experiment: str, rows, cfg: NeuronConfig, n_eval: int, seed: int) -> list[str]:
    out = []
    for r in rows:
        out.append(f"{experiment},{r.q:g},{cfg.v_thr:.4f},{cfg.tau:.4f},"
                   f"{r.n_spike:.4f},{100.0 * r.accuracy:.4f},{n_eval},{seed}")
    return out


def mean_l2_distance(clean: np.ndarray, triggered: np.ndarray) -> float:
    d = (triggered.astype(np.float64) - clean.astype(np.float64)).reshape(len(clean), -1)
    return float(np.sqrt((d**2).sum(axis=1)).mean())
