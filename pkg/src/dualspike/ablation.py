"""Ablation drivers: poisoning ratio, perturbation magnitude, neuron kind,
and the vanilla fine-tuning defense comparison against a stamped baseline.

Each driver retrains what its knob touches and reports the selected attack
cell's clean accuracy and attack success, so a row is one point on the
corresponding curve.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import attack, data, evaluate, trigger
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, parse_axis
from .network import build_network
from .neurons import NeuronConfig


def _configs(cfg: ExperimentConfig):
    from .cli import neuron_configs

    return neuron_configs(cfg)


def _train_backdoor_model(cfg: ExperimentConfig, train: data.Dataset, ratio: float,
                          neuron: str | None = None):
    cfg_n, cfg_t = _configs(cfg)
    net = build_network(cfg.model.arch, train.in_shape, train.n_classes,
                        cfg.model.timesteps, neuron or cfg.model.neuron, seed=cfg.train.seed)
    part = data.partition(train.labels, cfg.attack.target_label, ratio, seed=cfg.train.seed)
    plan = attack.BackdoorTrainPlan(cfg_n, cfg_t, part, epochs=cfg.train.epochs,
                                    batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                                    momentum=cfg.train.momentum, lr_decay=cfg.train.lr_decay,
                                    poison_weight=cfg.attack.poison_weight, seed=cfg.train.seed)
    attack.train_backdoor(net, train, plan)
    return net


def _select(cfg: ExperimentConfig, net, train, test, gen=None):
    from .cli import run_sweep, selection_rule

    grid, _ = run_sweep(cfg, net, train, test, gen)
    return evaluate.select_attack_config(grid, selection_rule(cfg))


def ablate_poison_ratio(cfg: ExperimentConfig, train, test) -> list[evaluate.AblationRow]:
    rows = []
    for ratio in parse_axis(cfg.eval.ratio_axis):
        net = _train_backdoor_model(cfg, train, ratio)
        sel = _select(cfg, net, train, test)
        rows.append(evaluate.AblationRow("poison_ratio", f"{ratio:g}", sel.cell.ca,
                                         sel.cell.asr_p, sel.cell.asr_o, None))
    return rows


def ablate_magnitude(cfg: ExperimentConfig, train, test, outdir) -> list[evaluate.AblationRow]:
    """Retrain the perturbation generator per magnitude cap over a fixed
    backbone; blend targets are shared across caps."""
    net, meta = load_checkpoint(outdir / "backdoor.ckpt")
    targets = attack.load_blend_targets(outdir / "targets.bin")
    sel = _select(cfg, net, train, test)
    cfg_attack = replace(meta.cfg_nominal, v_thr=sel.v_thr, tau=sel.tau)
    corpus = evaluate.Corpus.from_dataset(test, stats_from=train)
    rows = []
    for cap in parse_axis(cfg.eval.magnitude_axis):
        gen = trigger.TriggerGenerator(train.in_shape[0], train.n_classes, cap,
                                       cfg.attack.generator_width,
                                       seed=cfg.attack.generator_seed)
        trigger.train_trigger_generator(
            gen, net, train, targets, cfg.attack.target_label, meta.cfg_nominal,
            lambdas=(cfg.attack.lambda_sim, cfg.attack.lambda_adv, cfg.attack.lambda_wmse),
            epochs=cfg.attack.generator_epochs, batch_size=cfg.train.batch_size,
            lr=cfg.attack.generator_lr, momentum=cfg.train.momentum,
            seed=cfg.attack.generator_seed, weight_mode=cfg.attack.weight_mode)
        gtrig = trigger.GeneratorTrigger(gen, cfg.attack.target_label)
        asr_o, _ = evaluate.attack_success(net, corpus, cfg_attack, gtrig,
                                           cfg.attack.target_label)
        ca, _ = evaluate.clean_accuracy(net, corpus, cfg_attack)
        l2 = evaluate.mean_l2_distance(test.images, gtrig.apply(test.images))
        rows.append(evaluate.AblationRow("magnitude", f"{cap:g}", ca, None, asr_o, l2))
    return rows


def ablate_neuron_kind(cfg: ExperimentConfig, train, test) -> list[evaluate.AblationRow]:
    """LIF vs parametric-LIF under a threshold-only malicious shift."""
    rows = []
    for kind in ("lif", "plif"):
        net = _train_backdoor_model(cfg, train, cfg.attack.poison_ratio, neuron=kind)
        sel = _select(cfg, net, train, test)
        rows.append(evaluate.AblationRow("neuron", kind, sel.cell.ca, sel.cell.asr_p,
                                         sel.cell.asr_o, None))
    return rows


def defense_comparison(cfg: ExperimentConfig, net, meta, train, test) -> list[str]:
    """Vanilla fine-tuning applied to this attack and to a stamped baseline.

    The dual-configuration model is evaluated at its selected attack config
    with the power trigger; the baseline is a classic patch-poisoned model
    evaluated under the nominal config with the same patch.
    """
    cfg_n = meta.cfg_nominal
    rows = []
    sel = _select(cfg, net, train, test)
    cfg_attack = replace(cfg_n, v_thr=sel.v_thr, tau=sel.tau)
    ptrig = trigger.PowerTrigger(cfg.attack.q)
    _, before, after = evaluate.finetune_defense(
        net, test, cfg_n, cfg_attack, ptrig, cfg.attack.target_label,
        fraction=cfg.eval.finetune_fraction, epochs=cfg.eval.finetune_epochs,
        lr=cfg.eval.finetune_lr, momentum=cfg.train.momentum,
        batch_size=cfg.train.batch_size, seed=cfg.eval.seed, stats_from=train)
    rows.append(evaluate.metrics_row("dualspike-before", sel.v_thr, sel.tau, ptrig.tag(),
                                     before, cfg.eval.seed))
    rows.append(evaluate.metrics_row("dualspike-after", sel.v_thr, sel.tau, ptrig.tag(),
                                     after, cfg.eval.seed))

    poisoned = data.poison_dataset_baseline(train, "badnet_patch", cfg.attack.baseline_ratio,
                                            cfg.attack.target_label, seed=cfg.train.seed)
    baseline = build_network(cfg.model.arch, train.in_shape, train.n_classes,
                             cfg.model.timesteps, cfg.model.neuron, seed=cfg.train.seed)
    attack.train_clean(baseline, poisoned, cfg_n, epochs=cfg.train.epochs,
                       batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                       momentum=cfg.train.momentum, lr_decay=cfg.train.lr_decay,
                       seed=cfg.train.seed)
    strig = trigger.StampTrigger("badnet_patch")
    _, b_before, b_after = evaluate.finetune_defense(
        baseline, test, cfg_n, cfg_n, strig, cfg.attack.target_label,
        fraction=cfg.eval.finetune_fraction, epochs=cfg.eval.finetune_epochs,
        lr=cfg.eval.finetune_lr, momentum=cfg.train.momentum,
        batch_size=cfg.train.batch_size, seed=cfg.eval.seed, stats_from=train)
    rows.append(evaluate.metrics_row("badnet-before", cfg_n.v_thr, cfg_n.tau, strig.tag(),
                                     b_before, cfg.eval.seed))
    rows.append(evaluate.metrics_row("badnet-after", cfg_n.v_thr, cfg_n.tau, strig.tag(),
                                     b_after, cfg.eval.seed))
    return rows
