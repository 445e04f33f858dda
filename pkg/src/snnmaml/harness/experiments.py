"""Experiment suite: meta-training, few-shot evaluation, adaptation-step and
layer-freezing sweeps, update-magnitude statistics and the transfer
baseline.

Every random draw is seeded from ``config.seed`` plus a purpose tag, so a
command re-run with the same configuration reproduces its metrics exactly
in 64-bit mode.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from .. import meta, snn
from ..errors import ConfigError, StructuralError
from ..eventdata import (DirectoryDataset, MetaSplit, SyntheticDataset, TaskDataset, make_meta_splits,
                         sample_episode, write_manifest)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .metrics import MetricsRecord, TrainLog, write_metrics, write_table, write_train_log

# seed tags, one per kind of random draw
_TRAIN, _VAL, _EVAL, _STATS, _BASELINE, _PRETRAIN, _TRANSFER = range(1, 8)


@dataclass
class Context:
    config: RunConfig
    dataset: TaskDataset
    split: MetaSplit
    spec: snn.NetworkSpec
    objective: snn.Objective


def make_dataset(cfg: RunConfig) -> TaskDataset:
    d = cfg.dataset
    if d.kind == "directory":
        return DirectoryDataset(d.path, d.samples_per_task, d.pairs, cfg.pipeline())
    return SyntheticDataset(d.n_classes, d.samples_per_task, d.width, d.height, d.duration_ms,
                            d.noise_rate, d.speed, d.pairs, cfg.pipeline(), d.data_seed)


def prepare(cfg: RunConfig) -> Context:
    ds = make_dataset(cfg)
    try:
        split = make_meta_splits(ds.labels, cfg.dataset.split_sizes, cfg.dataset.split_seed, cfg.dataset.pairs)
    except StructuralError as exc:
        raise ConfigError(str(exc)) from None
    steps = ds.frame_shape[0]
    window = cfg.network.loss_window or steps
    if window > steps:
        raise ConfigError(f"loss window {window} exceeds the {steps} frames per sample")
    spec = cfg.network_spec(ds.frame_shape[1:])
    return Context(cfg, ds, split, spec, snn.Objective(spec, steps - window, window))


def _episode(ctx: Context, part: str, seed, shots=None, query=None):
    e = ctx.config.episode
    return sample_episode(ctx.split.part(part), ctx.dataset, e.ways,
                          e.shots if shots is None else shots, e.query if query is None else query, seed)


def episode_accuracy(ctx: Context, params: dict, episode, hyper: meta.MetaHyper) -> float:
    """Query accuracy after adapting on the episode's support set."""
    adapted = meta.adapt(params, (episode.support_x, episode.support_y), hyper, ctx.objective,
                         record_second_order=False)
    return float(np.mean(ctx.objective.predict(adapted, episode.query_x) == episode.query_y))


def _write_timing(out_dir, name: str, seconds: float) -> None:
    path = os.path.join(out_dir, "timing.json")
    timing = {}
    if os.path.exists(path):
        with open(path) as fh:
            timing = json.load(fh)
    timing[name] = seconds
    with open(path, "w") as fh:
        json.dump(timing, fh, indent=2, sort_keys=True)


def _prepare_out(out_dir, cfg: RunConfig):
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.yaml"), "w") as fh:
            fh.write(cfg.to_yaml())


# -- meta-training and evaluation -------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    adam: meta.AdamState
    log: TrainLog
    context: Context


def validation_accuracy(ctx: Context, params: dict, hyper: meta.MetaHyper | None = None) -> float:
    hyper = hyper or ctx.config.meta_hyper()
    n = ctx.config.train.eval_episodes
    return float(np.mean([episode_accuracy(ctx, params, _episode(ctx, "val", [ctx.config.seed, _VAL, i]), hyper)
                          for i in range(n)]))


def run_meta_train(cfg: RunConfig, out_dir=None, progress=None) -> TrainResult:
    """Meta-train the initialisation with ADAM over episodes from the
    meta-train split; validates every ``train.eval_every`` iterations.

    With ``out_dir`` writes ``checkpoint.smck``, ``train_log.csv``,
    ``split.txt``, ``config.yaml`` and ``timing.json``.
    """
    start = time.perf_counter()
    _prepare_out(out_dir, cfg)
    with ad.default_dtype(cfg.precision):
        ctx = prepare(cfg)
        hyper = cfg.meta_hyper()
        params = snn.build_network(ctx.spec, cfg.seed)
        adam = meta.AdamState.zeros(params)
        log = TrainLog()
        t = cfg.train
        for it in range(t.meta_iterations):
            episodes = [_episode(ctx, "train", [cfg.seed, _TRAIN, it, j])
                        for j in range(hyper.tasks_per_meta_batch)]
            step = meta.meta_step(params, episodes, hyper, adam, ctx.objective)
            params, adam = step.params, step.adam
            log.losses.append(step.loss / len(episodes))
            if t.eval_every and (it + 1) % t.eval_every == 0:
                log.val[it + 1] = validation_accuracy(ctx, params, hyper)
            if progress is not None:
                progress(it + 1, log)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint.smck"), params, adam, cfg.model_hash())
        write_train_log(os.path.join(out_dir, "train_log.csv"), log)
        with open(os.path.join(out_dir, "split.txt"), "w") as fh:
            fh.write(write_manifest(ctx.split))
        _write_timing(out_dir, "meta-train", time.perf_counter() - start)
    return TrainResult(params, adam, log, ctx)


def load_params(cfg: RunConfig, path, force: bool = False) -> tuple[dict, meta.AdamState]:
    ckpt = load_checkpoint(path, cfg.model_hash(), force)
    dtype = ad.get_default_dtype()
    params = {k: ad.Node(p.value.astype(dtype), requires_grad=True) for k, p in ckpt.params.items()}
    return params, ckpt.adam


def _check_params(ctx: Context, params: dict) -> None:
    expected = ctx.spec.param_shapes()
    got = {k: tuple(p.shape) for k, p in params.items()}
    if got != {k: tuple(v) for k, v in expected.items()}:
        raise ConfigError("checkpoint parameters do not match the configured network")


def run_meta_eval(cfg: RunConfig, params: dict, hyper: meta.MetaHyper | None = None,
                  setting: str = "eval", context: Context | None = None) -> MetricsRecord:
    """Mean query accuracy per trial over ``eval.episodes_per_trial`` fresh
    episodes from ``eval.split``.  Episodes depend only on the seed, so
    every setting sees the same ones."""
    with ad.default_dtype(cfg.precision):
        ctx = context or prepare(cfg)
        _check_params(ctx, params)
        hyper = hyper or cfg.meta_hyper()
        e = cfg.eval
        record = MetricsRecord(setting)
        for trial in range(e.trials):
            accs = [episode_accuracy(ctx, params, _episode(ctx, e.split, [cfg.seed, _EVAL, trial, i]), hyper)
                    for i in range(e.episodes_per_trial)]
            record.accuracies.append(float(np.mean(accs)))
    return record


def sweep_adaptation_steps(cfg: RunConfig, params: dict, steps_list=None) -> list[MetricsRecord]:
    steps_list = list(cfg.experiment.steps_list if steps_list is None else steps_list)
    if not steps_list or any(int(s) != s or s < 0 for s in steps_list):
        raise ConfigError("steps list must be non-empty integers >= 0")
    ctx = prepare(cfg)
    return [run_meta_eval(cfg, params, cfg.meta_hyper(inner_steps=int(s)), f"steps={s}", ctx)
            for s in steps_list]


def sweep_freeze_layers(cfg: RunConfig, params: dict, plans: dict | None = None) -> list[MetricsRecord]:
    plans = dict(cfg.experiment.freeze_plans if plans is None else plans)
    ctx = prepare(cfg)
    names = {layer.name for layer in ctx.spec.layers if layer.kind != "pool"}
    records = []
    for name, layers in plans.items():
        unknown = sorted(set(layers) - names)
        if unknown:
            raise ConfigError(f"freeze plan {name!r} names unknown layers: {unknown}")
        records.append(run_meta_eval(cfg, params, cfg.meta_hyper(freeze_set=frozenset(layers)), name, ctx))
    return records


# -- update-magnitude study --------------------------------------------------------

REGIMES = ("maml-inner", "maml-inner-gated", "maml-outer", "non-meta")


@dataclass
class UpdateStudy:
    stats: dict  # regime -> meta.UpdateStats
    magnitudes: dict  # regime -> output-layer |update| values
    records: list  # accuracy with and without the gate
    threshold: float  # mean gate value over the study's episodes

    def ratio(self, layer: str = "out") -> float:
        """Mean inner-loop update over mean non-meta update."""
        base = self.stats["non-meta"].layer(layer).avg
        return self.stats["maml-inner"].layer(layer).avg / base if base else float("inf")


def _pooled_problem(ctx: Context):
    """The first ``ways`` meta-train tasks with all their samples, as one
    fixed classification problem."""
    tasks = ctx.split.train[:ctx.config.episode.ways]
    n = ctx.dataset.samples_per_task
    x = np.stack([ctx.dataset.frames(t, i) for t in tasks for i in range(n)], axis=1)
    return x, np.repeat(np.arange(len(tasks)), n)


def non_meta_training(ctx: Context, params: dict, iterations: int, lr: float, batch: int):
    """Plain minibatch SGD on the pooled problem; returns the parameters
    before and after the final iteration."""
    x, y = _pooled_problem(ctx)
    rng = np.random.default_rng([ctx.config.seed, _BASELINE])
    before = params
    for _ in range(iterations):
        idx = np.sort(rng.choice(len(y), size=min(batch, len(y)), replace=False))
        loss = ctx.objective(params, x[:, idx], y[idx])
        meta._finite(loss, "non-meta")
        grads = ad.backward(loss, params)
        before = params
        params = {k: ad.Node(p.value - lr * grads[k].value, requires_grad=True) for k, p in params.items()}
    return before, params


def run_update_stats(cfg: RunConfig, params: dict | None = None, adam: meta.AdamState | None = None,
                     out_dir=None) -> UpdateStudy:
    """Output-layer update statistics for the inner step (plain and gated),
    the outer ADAM step and a non-meta SGD step from the same seed-derived
    initialisation.  Without ``params`` the meta model is trained first."""
    start = time.perf_counter()
    _prepare_out(out_dir, cfg)
    if params is None:
        result = run_meta_train(cfg)
        params, adam = result.params, result.adam
    with ad.default_dtype(cfg.precision):
        ctx = prepare(cfg)
        _check_params(ctx, params)
        adam = adam or meta.AdamState.zeros(params)
        hyper = cfg.meta_hyper()
        gated = cfg.meta_hyper(threshold_fraction=cfg.experiment.threshold_fraction, update_threshold=None)
        episodes = [_episode(ctx, "train", [cfg.seed, _STATS, j]) for j in range(hyper.tasks_per_meta_batch)]
        mags = {r: [] for r in REGIMES}
        thresholds = []
        for ep in episodes:
            support = (ep.support_x, ep.support_y)
            plain = meta.inner_adapt(params, support, hyper, ctx.objective, record_second_order=False)
            mags["maml-inner"].append(meta.update_magnitudes(params, plain))
            gated_params = meta.thresholded_inner_adapt(params, support, gated, ctx.objective,
                                                        record_second_order=False)
            mags["maml-inner-gated"].append(meta.update_magnitudes(params, gated_params))
            thresholds.append(_first_gate(ctx, params, support, gated))
        step = meta.meta_step(params, episodes, hyper, adam, ctx.objective)
        mags["maml-outer"].append(meta.update_magnitudes(params, step.params))
        x = cfg.experiment
        init = snn.build_network(ctx.spec, cfg.seed)
        before, after = non_meta_training(ctx, init, x.baseline_iterations,
                                          x.baseline_lr if x.baseline_lr is not None else hyper.inner_lr,
                                          x.baseline_batch)
        mags["non-meta"].append(meta.update_magnitudes(before, after))
    merged = {r: {layer: np.concatenate([m[layer] for m in parts]) for layer in parts[0]}
              for r, parts in mags.items()}
    stats = {}
    for r, layers in merged.items():
        every = np.concatenate(list(layers.values()))
        stats[r] = meta.UpdateStats({k: meta.Stats.of(v) for k, v in layers.items()}, meta.Stats.of(every))
    records = [run_meta_eval(cfg, params, hyper, "ungated"), run_meta_eval(cfg, params, gated, "gated")]
    study = UpdateStudy(stats, {r: merged[r]["out"] for r in REGIMES}, records, float(np.mean(thresholds)))
    if out_dir is not None:
        write_update_stats(out_dir, study)
        _write_timing(out_dir, "update-stats", time.perf_counter() - start)
    return study


def _first_gate(ctx: Context, params: dict, support, hyper: meta.MetaHyper) -> float:
    """Gate value of the first inner step on ``support``."""
    trainable = [k for k in params if meta.layer_of(k) not in hyper.freeze_set]
    loss = ctx.objective(params, *support)
    grads = ad.backward(loss, {k: params[k] for k in trainable})
    steps = {k: hyper.inner_lr * g.value for k, g in grads.items()}
    if hyper.update_threshold is not None:
        return float(hyper.update_threshold)
    return meta.range_threshold(steps, hyper.threshold_fraction)


STATS_HEADER = ("regime", "layer", "avg", "sum", "max", "nonzero", "total")
HIST_HEADER = ("regime", "bin", "lo", "hi", "count")


def write_update_stats(out_dir, study: UpdateStudy) -> None:
    rows = []
    for regime, st in study.stats.items():
        for layer, s in list(st.layers.items()) + [("all", st.overall)]:
            rows.append((regime, layer, s.avg, s.sum, s.max, s.nonzero, s.total))
    write_table(os.path.join(out_dir, "update_stats.csv"), STATS_HEADER, rows)
    hist = []
    for regime, m in study.magnitudes.items():
        edges, counts = meta.log_histogram(m)
        hist.extend((regime, i, edges[i], edges[i + 1], int(c)) for i, c in enumerate(counts))
    write_table(os.path.join(out_dir, "update_histogram.csv"), HIST_HEADER, hist)
    write_metrics(os.path.join(out_dir, "gate_accuracy.csv"), study.records)


# -- transfer-learning baseline ----------------------------------------------------

@dataclass
class TransferResult:
    records: list  # one MetricsRecord per shot count 0..max_shots
    pretrain_accuracy: float
    pretrain_iterations: int

    def shots_to_reach(self, accuracy: float) -> int | None:
        """Fewest shots whose mean accuracy reaches ``accuracy``."""
        for shots, rec in enumerate(self.records):
            if rec.mean >= accuracy:
                return shots
        return None


def pretrain_classifier(ctx: Context) -> tuple[dict, snn.NetworkSpec, float, int]:
    """Plain classification over every meta-train task, with ADAM, until the
    training accuracy reaches the target or the iteration cap."""
    cfg, x = ctx.config, ctx.config.experiment
    tasks = ctx.split.train
    n = ctx.dataset.samples_per_task
    frames = np.stack([ctx.dataset.frames(t, i) for t in tasks for i in range(n)], axis=1)
    labels = np.repeat(np.arange(len(tasks)), n)
    spec = ctx.spec.with_ways(len(tasks))
    obj = snn.Objective(spec, ctx.objective.burn_in, ctx.objective.window)
    params = snn.build_network(spec, cfg.seed)
    adam = meta.AdamState.zeros(params)
    rng = np.random.default_rng([cfg.seed, _PRETRAIN])
    probe = np.sort(rng.choice(len(labels), size=min(200, len(labels)), replace=False))
    accuracy, done = 0.0, 0
    for it in range(x.pretrain_iterations):
        idx = np.sort(rng.choice(len(labels), size=min(x.pretrain_batch, len(labels)), replace=False))
        loss = obj(params, frames[:, idx], labels[idx])
        meta._finite(loss, "pre-training")
        grads = ad.backward(loss, params)
        params, adam = meta.adam_update(params, grads, adam, x.pretrain_lr)
        done = it + 1
        if done % 25 == 0 or done == x.pretrain_iterations:
            accuracy = float(np.mean(obj.predict(params, frames[:, probe]) == labels[probe]))
            if accuracy >= x.pretrain_target:
                break
    return params, spec, accuracy, done


def _train_readout(ctx: Context, params: dict, features: np.ndarray, labels: np.ndarray) -> dict:
    x = ctx.config.experiment
    name = ctx.spec.readout.name
    keys = [f"{name}.weight", f"{name}.bias"]
    head = {k: params[k] for k in keys}
    adam = meta.AdamState.zeros(head)
    obj = ctx.objective
    for _ in range(x.readout_iterations):
        merged = {**params, **head}
        membranes = snn.readout_forward(merged, features, ctx.spec, obj.burn_in, obj.window)
        loss = snn.readout_and_loss(membranes, labels)[1]
        meta._finite(loss, "readout")
        grads = ad.backward(loss, head)
        head, adam = meta.adam_update(head, grads, adam, x.readout_lr)
    return {**params, **head}


def _readout_accuracy(ctx: Context, params: dict, features: np.ndarray, labels: np.ndarray) -> float:
    obj = ctx.objective
    with ad.no_grad():
        membranes = snn.readout_forward(params, features, ctx.spec, obj.burn_in, obj.window)
    return float(np.mean(np.argmax(membranes.value.max(axis=0), axis=1) == labels))


def run_transfer_baseline(cfg: RunConfig, out_dir=None) -> TransferResult:
    """Pre-train on the meta-train tasks, re-initialise the readout, then
    train only the readout on 0..max_shots shots of held-out tasks and test
    on unseen query samples."""
    start = time.perf_counter()
    _prepare_out(out_dir, cfg)
    x = cfg.experiment
    with ad.default_dtype(cfg.precision):
        ctx = prepare(cfg)
        if x.max_shots + x.transfer_query > ctx.dataset.samples_per_task:
            raise ConfigError(f"transfer baseline needs {x.max_shots + x.transfer_query} samples per task, "
                              f"dataset has {ctx.dataset.samples_per_task}")
        pretrained, pre_spec, pre_acc, iters = pretrain_classifier(ctx)
        body = {k: v for k, v in pretrained.items() if meta.layer_of(k) != pre_spec.readout.name}
        records = [MetricsRecord(f"shots={s}") for s in range(x.max_shots + 1)]
        ways = cfg.episode.ways
        for trial in range(x.transfer_trials):
            ep = _episode(ctx, cfg.eval.split, [cfg.seed, _TRANSFER, trial], x.max_shots, x.transfer_query)
            params = snn.init_readout(ctx.spec, body, cfg.seed + trial + 1)
            sup = snn.feature_spikes(params, ep.support_x, ctx.spec)
            qry = snn.feature_spikes(params, ep.query_x, ctx.spec)
            for shots, rec in enumerate(records):
                if shots == 0:
                    trained = params
                else:
                    idx = np.concatenate([k * x.max_shots + np.arange(shots) for k in range(ways)])
                    trained = _train_readout(ctx, params, sup[:, idx], ep.support_y[idx])
                rec.accuracies.append(_readout_accuracy(ctx, trained, qry, ep.query_y))
    result = TransferResult(records, pre_acc, iters)
    if out_dir is not None:
        write_metrics(os.path.join(out_dir, "transfer.csv"), records)
        _write_timing(out_dir, "transfer-baseline", time.perf_counter() - start)
    return result
