"""Command-line pipeline: data generation through defense evaluation.

Every subcommand reads one config file plus optional overrides, writes its
artifacts under the configured output directory, records a run-manifest that
reproduces the run exactly, and prints a one-line summary.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import attack, data, evaluate, idx, network, trigger
from .checkpoint import (CheckpointError, CheckpointMeta, load_checkpoint, load_generator,
                         save_checkpoint, save_generator)
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config, parse_axis, \
    serialize_config
from .engine import SurrogateSpec
from .neurons import NeuronConfig

COMMANDS = ("gen-data", "train-clean", "train-backdoor", "precompute-targets",
            "train-trigger", "eval", "sweep", "ablate", "defend-finetune", "attack-demo")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dualspike",
                                     description="spiking-network backdoor experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", default=None, help="config file (INI)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE")
        if name == "ablate":
            p.add_argument("--knob", choices=("ratio", "magnitude", "neuron"), required=True)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
        apply_overrides(cfg, args.overrides)
        outdir = Path(cfg.output.dir)
        outdir.mkdir(parents=True, exist_ok=True)
        manifest = outdir / f"run-manifest-{args.command}.ini"
        manifest.write_text(serialize_config(cfg))
        handler = _HANDLERS[args.command]
        summary = handler(cfg, outdir, args)
        print(f"{args.command}: {summary}")
        return 0
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# shared construction
# ---------------------------------------------------------------------------

def build_corpora(cfg: ExperimentConfig):
    """Deterministic train/test pair from the dataset section."""
    d = cfg.dataset
    if d.kind in ("blobs", "bars"):
        train = data.synth_dataset(d.kind, d.classes, d.per_class, seed=d.seed, size=d.size)
        test = data.synth_dataset(d.kind, d.classes, d.test_per_class, seed=d.seed + 1,
                                  size=d.size).with_stats_from(train)
        return train, test
    if d.kind == "events":
        train = data.synth_events(d.classes, d.per_class, cfg.model.timesteps, d.density,
                                  seed=d.seed, size=d.size)
        test = data.synth_events(d.classes, d.test_per_class, cfg.model.timesteps, d.density,
                                 seed=d.seed + 1, size=d.size)
        return train, test
    if d.kind == "idx":
        base = Path(d.path)
        train = data.load_idx_images(base / "train-images.idx", base / "train-labels.idx")
        test = data.load_idx_images(base / "test-images.idx", base / "test-labels.idx")
        test.n_classes = train.n_classes
        return train, test.with_stats_from(train)
    raise ConfigError(f"dataset.kind: unsupported kind {d.kind!r}")


def neuron_configs(cfg: ExperimentConfig):
    a = cfg.attack
    surrogate = SurrogateSpec(slope=a.surrogate_slope)
    cfg_n = NeuronConfig(a.vthr_nominal, a.tau_nominal, surrogate=surrogate)
    cfg_t = NeuronConfig(a.vthr_malicious, a.tau_malicious, surrogate=surrogate)
    return cfg_n, cfg_t


def build_net(cfg: ExperimentConfig, in_shape, n_classes):
    return network.build_network(cfg.model.arch, in_shape, n_classes, cfg.model.timesteps,
                                 cfg.model.neuron, seed=cfg.train.seed)


def _is_events(cfg: ExperimentConfig) -> bool:
    return cfg.dataset.kind == "events"


def _corpus(cfg, test, train):
    if _is_events(cfg):
        return evaluate.Corpus.from_events(test)
    return evaluate.Corpus.from_dataset(test, stats_from=train)


def _asr_trigger(cfg: ExperimentConfig):
    if _is_events(cfg):
        return trigger.NoiseTrigger(cfg.attack.beta)
    return trigger.PowerTrigger(cfg.attack.q)


def _event_images(ds: data.EventDataset) -> data.Dataset:
    raise ConfigError("this stage needs a static-image dataset")


def run_sweep(cfg: ExperimentConfig, net, train, test, gen=None):
    corpus = _corpus(cfg, test, train)
    cfg_n, _ = neuron_configs(cfg)
    triggers = {"p": _asr_trigger(cfg)}
    if gen is not None:
        triggers["o"] = trigger.GeneratorTrigger(gen, cfg.attack.target_label)
    grid = evaluate.sweep(net, corpus, parse_axis(cfg.eval.vthr_axis),
                          parse_axis(cfg.eval.tau_axis), cfg_n, triggers,
                          cfg.attack.target_label, base_seed=cfg.eval.seed)
    return grid, triggers


def selection_rule(cfg: ExperimentConfig) -> evaluate.SelectionRule:
    return evaluate.SelectionRule(cfg.eval.selection, cfg.eval.ca_floor)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg, outdir, args):
    train, test = build_corpora(cfg)
    d = cfg.dataset
    if _is_events(cfg):
        for name, ds in (("train", train), ("test", test)):
            idx.write_idx(outdir / f"{name}-events.idx", ds.frames.astype(np.uint8))
            idx.write_idx(outdir / f"{name}-labels.idx", ds.labels.astype(np.uint8))
    else:
        for name, ds in (("train", train), ("test", test)):
            pixels = np.round(ds.images * 255.0).astype(np.uint8)
            idx.write_idx(outdir / f"{name}-images.idx", pixels)
            idx.write_idx(outdir / f"{name}-labels.idx", ds.labels.astype(np.uint8))
    data.write_dataset_manifest(outdir / "dataset-manifest.txt", d.kind, d.seed,
                                {"train": len(train), "test": len(test)},
                                {"classes": d.classes, "size": d.size})
    return f"wrote {len(train)} train / {len(test)} test samples to {outdir}"


def cmd_train_clean(cfg, outdir, args):
    train, test = build_corpora(cfg)
    cfg_n, cfg_t = neuron_configs(cfg)
    net = build_net(cfg, train.in_shape if not _is_events(cfg) else train.frames.shape[2:],
                    train.n_classes)
    if _is_events(cfg):
        log = _train_events(net, train, cfg, cfg_n, cfg_t, ratio=0.0)
    else:
        log = attack.train_clean(net, train, cfg_n, epochs=cfg.train.epochs,
                                 batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                                 momentum=cfg.train.momentum, lr_decay=cfg.train.lr_decay,
                                 seed=cfg.train.seed)
    meta = CheckpointMeta(cfg_n, cfg_t, cfg.train.seed, cfg.train.epochs, 0.0,
                          cfg.attack.target_label)
    save_checkpoint(outdir / "clean.ckpt", net, meta)
    ca, n = evaluate.clean_accuracy(net, _corpus(cfg, test, train), cfg_n)
    return f"clean model CA {ca:.2f}% over {n} samples, final loss {log.epoch_means[-1]:.4f}"


def _train_events(net, train_events, cfg, cfg_n, cfg_t, ratio):
    """Dual-configuration training over event corpora.

    Event frames differ per timestep, so this mirrors attack.train_backdoor
    with the event encoder in place of direct encoding.
    """
    from .engine import SGD, Tensor, scale, add, softmax_cross_entropy
    from .network import encode_events

    part = data.partition(train_events.labels, cfg.attack.target_label, ratio,
                          seed=cfg.train.seed)
    poison_set = set(part.poison.tolist())
    opt = SGD(net.param_tensors(), cfg.train.lr, cfg.train.momentum)
    rng = np.random.default_rng([cfg.train.seed, 21])
    log = attack.TrainLog()
    for epoch in range(cfg.train.epochs):
        order = rng.permutation(len(train_events))
        epoch_losses = []
        for lo in range(0, len(order), cfg.train.batch_size):
            sel = order[lo : lo + cfg.train.batch_size]
            xb = train_events.frames[sel]
            yb = train_events.labels[sel]
            frames = encode_events(np.transpose(xb, (1, 0, 2, 3, 4)))
            logits, _ = net.forward_T(frames, cfg_n)
            loss_sum = softmax_cross_entropy(logits, yb, reduction="sum")
            pmask = np.fromiter((int(i) in poison_set for i in sel), dtype=bool, count=len(sel))
            dual = bool(pmask.any())
            if dual:
                fp = encode_events(np.transpose(xb[pmask], (1, 0, 2, 3, 4)))
                logits_t, _ = net.forward_T(fp, cfg_t)
                y_t = np.full(int(pmask.sum()), cfg.attack.target_label, dtype=np.int64)
                ce_t = softmax_cross_entropy(logits_t, y_t, reduction="sum")
                loss_sum = add(loss_sum, scale(ce_t, cfg.attack.poison_weight))
            loss = scale(loss_sum, 1.0 / len(sel))
            value = float(loss.data)
            if not np.isfinite(value):
                raise attack.TrainingDiverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            log.step_losses.append(value)
            log.dual_flags.append(dual)
            epoch_losses.append(value)
        log.epoch_means.append(float(np.mean(epoch_losses)))
        opt.lr *= cfg.train.lr_decay
        net.epochs_trained += 1
    return log


def cmd_train_backdoor(cfg, outdir, args):
    train, test = build_corpora(cfg)
    cfg_n, cfg_t = neuron_configs(cfg)
    if _is_events(cfg):
        net = build_net(cfg, train.frames.shape[2:], train.n_classes)
        _train_events(net, train, cfg, cfg_n, cfg_t, ratio=cfg.attack.poison_ratio)
    else:
        net = build_net(cfg, train.in_shape, train.n_classes)
        part = data.partition(train.labels, cfg.attack.target_label, cfg.attack.poison_ratio,
                              seed=cfg.train.seed)
        plan = attack.BackdoorTrainPlan(cfg_n, cfg_t, part, epochs=cfg.train.epochs,
                                        batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                                        momentum=cfg.train.momentum, lr_decay=cfg.train.lr_decay,
                                        poison_weight=cfg.attack.poison_weight,
                                        seed=cfg.train.seed)
        attack.train_backdoor(net, train, plan)
    meta = CheckpointMeta(cfg_n, cfg_t, cfg.train.seed, cfg.train.epochs,
                          cfg.attack.poison_ratio, cfg.attack.target_label)
    save_checkpoint(outdir / "backdoor.ckpt", net, meta)
    base_ca, n = evaluate.clean_accuracy(net, _corpus(cfg, test, train), cfg_n)
    return f"backdoor model base CA {base_ca:.2f}% over {n} samples"


def cmd_precompute_targets(cfg, outdir, args):
    train, _ = build_corpora(cfg)
    if _is_events(cfg):
        _event_images(train)
    net, meta = load_checkpoint(outdir / "backdoor.ckpt")
    rng = np.random.default_rng([cfg.attack.generator_seed, 61])
    n = min(cfg.attack.generator_samples, len(train))
    indices = np.sort(rng.choice(len(train), size=n, replace=False))
    targets = attack.precompute_blend_targets(
        net, train, indices, meta.cfg_nominal, cfg.attack.target_label, cfg.attack.q,
        np.asarray(parse_axis(cfg.attack.alpha_grid)), cfg.attack.deepfool_max_iter,
        cfg.attack.deepfool_overshoot)
    attack.save_blend_targets(outdir / "targets.bin", targets)
    rate = 100.0 * float(targets.success.mean())
    return f"{len(targets)} blend targets, {rate:.1f}% landed on the target label"


def cmd_train_trigger(cfg, outdir, args):
    train, _ = build_corpora(cfg)
    if _is_events(cfg):
        _event_images(train)
    net, meta = load_checkpoint(outdir / "backdoor.ckpt")
    targets = attack.load_blend_targets(outdir / "targets.bin")
    gen = trigger.TriggerGenerator(train.in_shape[0], train.n_classes,
                                   cfg.attack.magnitude_cap, cfg.attack.generator_width,
                                   seed=cfg.attack.generator_seed)
    log = trigger.train_trigger_generator(
        gen, net, train, targets, cfg.attack.target_label, meta.cfg_nominal,
        lambdas=(cfg.attack.lambda_sim, cfg.attack.lambda_adv, cfg.attack.lambda_wmse),
        epochs=cfg.attack.generator_epochs, batch_size=cfg.train.batch_size,
        lr=cfg.attack.generator_lr, momentum=cfg.train.momentum,
        seed=cfg.attack.generator_seed, weight_mode=cfg.attack.weight_mode)
    save_generator(outdir / "generator.ckpt", gen)
    return f"generator trained, final loss {log.total[-1]:.4f}"


def cmd_sweep(cfg, outdir, args):
    train, test = build_corpora(cfg)
    net, meta = load_checkpoint(outdir / "backdoor.ckpt")
    gen_path = outdir / "generator.ckpt"
    gen = load_generator(gen_path) if gen_path.exists() and not _is_events(cfg) else None
    grid, triggers = run_sweep(cfg, net, train, test, gen)
    tags = "+".join(t.tag() for t in triggers.values())
    rows = evaluate.metrics_rows(cfg.eval.experiment, grid, tags)
    evaluate.write_csv(outdir / "sweep.csv", evaluate.METRICS_HEADER, rows)
    sel = evaluate.select_attack_config(grid, selection_rule(cfg))
    return (f"{len(rows)} cells -> selected vthr={sel.v_thr:.3f} tau={sel.tau:.3f} "
            f"ca={sel.cell.ca:.2f} asr_p={sel.cell.asr_p:.2f}")


def cmd_eval(cfg, outdir, args):
    train, test = build_corpora(cfg)
    net, meta = load_checkpoint(outdir / "backdoor.ckpt")
    gen_path = outdir / "generator.ckpt"
    gen = load_generator(gen_path) if gen_path.exists() and not _is_events(cfg) else None
    corpus = _corpus(cfg, test, train)
    cfg_n, _ = neuron_configs(cfg)
    grid, triggers = run_sweep(cfg, net, train, test, gen)
    sel = evaluate.select_attack_config(grid, selection_rule(cfg))
    base_ca, n = evaluate.clean_accuracy(net, corpus, cfg_n)
    rows = [evaluate.metrics_row(f"{cfg.eval.experiment}-base", cfg_n.v_thr, cfg_n.tau,
                                 "none", evaluate.EvalFragment(base_ca, None, n, 0),
                                 cfg.eval.seed)]
    tags = "+".join(t.tag() for t in triggers.values())
    cell = sel.cell
    rows.append(f"{cfg.eval.experiment}-attack,{cell.v_thr:.4f},{cell.tau:.4f},{tags},"
                f"{cell.ca:.4f},{evaluate._fmt(cell.asr_p)},{evaluate._fmt(cell.asr_o)},"
                f"{cell.n_eval},{cell.seed}")
    evaluate.write_csv(outdir / "metrics.csv", evaluate.METRICS_HEADER, rows)
    if not _is_events(cfg):
        probe = network.spike_count_probe(net, test.images, test.labels, cfg_n,
                                          parse_axis(cfg.eval.probe_q), train.mu, train.sigma)
        evaluate.write_csv(outdir / "probe.csv", evaluate.PROBE_HEADER,
                           evaluate.probe_rows(cfg.eval.experiment, probe, cfg_n, len(test),
                                               cfg.eval.seed))
    return (f"base CA {base_ca:.2f}%; attack (vthr={cell.v_thr:.3f}, tau={cell.tau:.3f}) "
            f"CA {cell.ca:.2f}% ASR_p {cell.asr_p:.2f}%"
            + (f" ASR_o {cell.asr_o:.2f}%" if cell.asr_o is not None else ""))


def cmd_ablate(cfg, outdir, args):
    from . import ablation

    train, test = build_corpora(cfg)
    if args.knob == "ratio":
        rows = ablation.ablate_poison_ratio(cfg, train, test)
    elif args.knob == "magnitude":
        rows = ablation.ablate_magnitude(cfg, train, test, outdir)
    else:
        rows = ablation.ablate_neuron_kind(cfg, train, test)
    path = outdir / f"ablation-{args.knob}.csv"
    evaluate.write_csv(path, evaluate.ABLATION_HEADER, [r.render() for r in rows])
    return f"{len(rows)} rows -> {path}"


def cmd_defend_finetune(cfg, outdir, args):
    from . import ablation

    train, test = build_corpora(cfg)
    if _is_events(cfg):
        _event_images(train)
    net, meta = load_checkpoint(outdir / "backdoor.ckpt")
    rows = ablation.defense_comparison(cfg, net, meta, train, test)
    evaluate.write_csv(outdir / "defense.csv", evaluate.METRICS_HEADER, rows)
    return f"{len(rows)} rows -> {outdir / 'defense.csv'}"


def cmd_attack_demo(cfg, outdir, args):
    cmd_gen_data(cfg, outdir, args)
    cmd_train_backdoor(cfg, outdir, args)
    if not _is_events(cfg):
        cmd_precompute_targets(cfg, outdir, args)
        cmd_train_trigger(cfg, outdir, args)
    cmd_sweep(cfg, outdir, args)
    summary = cmd_eval(cfg, outdir, args)
    if not _is_events(cfg):
        train, test = build_corpora(cfg)
        gen = load_generator(outdir / "generator.ckpt")
        gtrig = trigger.GeneratorTrigger(gen, cfg.attack.target_label)
        clean = test.images[:8]
        triggered = gtrig.apply(clean)
        np.savez(outdir / "demo-images.npz", clean=clean, triggered=triggered,
                 delta=np.abs(triggered - clean))
    return summary


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-clean": cmd_train_clean,
    "train-backdoor": cmd_train_backdoor,
    "precompute-targets": cmd_precompute_targets,
    "train-trigger": cmd_train_trigger,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "defend-finetune": cmd_defend_finetune,
    "attack-demo": cmd_attack_demo,
}


if __name__ == "__main__":
    sys.exit(main())
