"""Run configuration: nested dataclasses loaded from a YAML document.

Every section rejects unknown keys, and :func:`validate` checks all module
invariants before any compute starts.  ``RunConfig.to_dict`` is the
published schema with its defaults (``print-config``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .. import meta, snn
from ..errors import ConfigError, StructuralError
from ..eventdata import Pipeline


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # "synthetic" or "directory"
    path: str | None = None  # EVS1 tree for kind "directory"
    n_classes: int = 6
    samples_per_task: int = 30
    width: int = 16
    height: int = 16
    duration_ms: float = 100.0
    noise_rate: float = 0.1
    speed: float = 0.07
    data_seed: int = 0
    pairs: bool = True
    crop_ms: float | None = 100.0
    downsample: list = field(default_factory=lambda: [2, 2])
    bin_ms: float = 5.0
    binarize: bool = True
    split_sizes: list = field(default_factory=lambda: [24, 6, 6])
    split_seed: int = 0


@dataclass
class NetworkConfig:
    channels: list = field(default_factory=lambda: [8, 16, 16])
    kernel: int = 5
    pools: list = field(default_factory=lambda: [True, True, False])
    loss_window: int | None = None  # steps with lineage; None means the whole sequence


@dataclass
class NeuronSection:
    dt: float = 5.0
    tau_mem: float = 8.0
    tau_syn: float = 6.0
    tau_rfr: float = 6.0
    u_th: float = 0.1
    rho: float | None = None
    surrogate_beta: float = 10.0


@dataclass
class MetaSection:
    inner_lr: float = 3.0
    outer_lr: float = 1e-3
    inner_steps: int = 1
    tasks_per_meta_batch: int = 4
    mode: str = "second-order"
    update_threshold: float | None = None
    threshold_fraction: float | None = None
    freeze_set: list = field(default_factory=list)


@dataclass
class EpisodeConfig:
    ways: int = 5
    shots: int = 1
    query: int = 5


@dataclass
class TrainConfig:
    meta_iterations: int = 300
    eval_every: int = 50  # 0 disables periodic validation
    eval_episodes: int = 10


@dataclass
class EvalConfig:
    trials: int = 10
    episodes_per_trial: int = 10
    split: str = "test"


@dataclass
class ExperimentConfig:
    steps_list: list = field(default_factory=lambda: [0, 1, 2, 5])
    # name -> layers frozen during adaptation
    freeze_plans: dict = field(default_factory=lambda: {
        "none": [], "conv1": ["conv1"], "conv1-2": ["conv1", "conv2"],
        "all-conv": ["conv1", "conv2", "conv3"], "all": ["conv1", "conv2", "conv3", "out"]})
    threshold_fraction: float = 0.05
    # plain SGD on pooled classes for the non-meta comparison; lr None means inner_lr
    baseline_iterations: int = 100
    baseline_lr: float | None = None
    baseline_batch: int = 25
    # transfer baseline
    pretrain_lr: float = 1e-3
    pretrain_iterations: int = 300
    pretrain_target: float = 0.95
    pretrain_batch: int = 25
    readout_lr: float = 1e-2
    readout_iterations: int = 100
    max_shots: int = 10
    transfer_query: int = 20
    transfer_trials: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f64"
    out: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    neuron: NeuronSection = field(default_factory=NeuronSection)
    meta: MetaSection = field(default_factory=MetaSection)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    # -- derived objects --------------------------------------------------------

    def neuron_config(self) -> snn.NeuronConfig:
        return snn.NeuronConfig(**dataclasses.asdict(self.neuron))

    def pipeline(self) -> Pipeline:
        d = self.dataset
        return Pipeline(d.crop_ms, tuple(d.downsample), d.bin_ms, d.binarize)

    def meta_hyper(self, **overrides) -> meta.MetaHyper:
        fields = dataclasses.asdict(self.meta)
        fields["freeze_set"] = frozenset(fields["freeze_set"])
        fields.update(overrides)
        return meta.MetaHyper(**fields)

    def network_spec(self, input_shape: tuple) -> snn.NetworkSpec:
        n = self.network
        layers = []
        for i, (ch, pool) in enumerate(zip(n.channels, n.pools), start=1):
            layers.append(snn.LayerSpec("conv", f"conv{i}", out=int(ch), kernel=n.kernel))
            if pool:
                layers.append(snn.LayerSpec("pool", f"pool{i}"))
        layers.append(snn.LayerSpec("dense", "out", out=self.episode.ways))
        return snn.NetworkSpec(tuple(input_shape), tuple(layers), self.neuron_config())

    def model_hash(self) -> str:
        """Digest of everything that fixes parameter shapes and dynamics."""
        payload = {"network": dataclasses.asdict(self.network),
                   "neuron": dataclasses.asdict(self.neuron),
                   "ways": self.episode.ways,
                   "input": [self.dataset.width, self.dataset.height, list(self.dataset.downsample),
                             self.dataset.pairs]}
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


_SECTIONS = {"dataset": DatasetConfig, "network": NetworkConfig, "neuron": NeuronSection,
             "meta": MetaSection, "episode": EpisodeConfig, "train": TrainConfig,
             "eval": EvalConfig, "experiment": ExperimentConfig}


def _coerce(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(map(str, unknown))}")
    return cls(**data)


def from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(map(str, unknown))}")
    kwargs = {k: v for k, v in data.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _coerce(cls, data.get(name), name)
    cfg = RunConfig(**kwargs)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return from_dict(data)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate(cfg: RunConfig) -> None:
    """Check every invariant up front; raises :class:`ConfigError`."""
    _require(_is_int(cfg.seed) and cfg.seed >= 0, "seed must be a non-negative integer")
    _require(cfg.precision in ("f32", "f64"), "precision must be 'f32' or 'f64'")
    d = cfg.dataset
    _require(d.kind in ("synthetic", "directory"), "dataset.kind must be 'synthetic' or 'directory'")
    if d.kind == "directory":
        _require(bool(d.path), "dataset.path is required for kind 'directory'")
    else:
        _require(_is_int(d.n_classes) and d.n_classes >= 1, "dataset.n_classes must be >= 1")
        _require(d.width >= 8 and d.height >= 8, "synthetic geometry must be at least 8x8")
        _require(d.duration_ms >= 50, "synthetic duration must be at least 50 ms")
        _require(d.noise_rate >= 0, "dataset.noise_rate must be non-negative")
        _require(d.speed > 0, "dataset.speed must be positive")
        _require(d.crop_ms is None or d.crop_ms <= d.duration_ms, "dataset.crop_ms exceeds duration_ms")
    _require(_is_int(d.samples_per_task) and d.samples_per_task >= 1, "dataset.samples_per_task must be >= 1")
    _require(len(d.downsample) == 2 and all(_is_int(f) and f >= 1 for f in d.downsample),
             "dataset.downsample must be two integers >= 1")
    _require(d.bin_ms > 0, "dataset.bin_ms must be positive")
    _require(d.crop_ms is None or d.crop_ms > 0, "dataset.crop_ms must be positive")
    _require(len(d.split_sizes) == 3 and all(_is_int(s) and s >= 0 for s in d.split_sizes),
             "dataset.split_sizes must be three non-negative integers")
    if d.kind == "synthetic":
        n_tasks = d.n_classes ** 2 if d.pairs else d.n_classes
        _require(sum(d.split_sizes) <= n_tasks,
                 f"split sizes {list(d.split_sizes)} exceed the {n_tasks} available tasks")

    n = cfg.network
    _require(len(n.channels) >= 1 and all(_is_int(c) and c >= 1 for c in n.channels),
             "network.channels must be positive integers")
    _require(len(n.pools) == len(n.channels), "network.pools needs one flag per conv layer")
    _require(_is_int(n.kernel) and n.kernel >= 1 and n.kernel % 2 == 1, "network.kernel must be odd")
    _require(n.loss_window is None or (_is_int(n.loss_window) and n.loss_window >= 1),
             "network.loss_window must be >= 1")
    _require(abs(cfg.neuron.dt - d.bin_ms) < 1e-12, "neuron.dt must equal dataset.bin_ms (one frame per step)")
    try:
        cfg.neuron_config()
        hyper = cfg.meta_hyper()
    except (StructuralError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    layer_names = {f"conv{i}" for i in range(1, len(n.channels) + 1)} | {"out"}
    unknown = sorted(set(hyper.freeze_set) - layer_names)
    _require(not unknown, f"meta.freeze_set names unknown layers: {unknown}")

    e = cfg.episode
    _require(_is_int(e.ways) and e.ways >= 1, "episode.ways must be >= 1")
    _require(_is_int(e.shots) and e.shots >= 1, "episode.shots must be >= 1")
    _require(_is_int(e.query) and e.query >= 1, "episode.query must be >= 1")
    _require(e.shots + e.query <= d.samples_per_task, "episode needs more samples than samples_per_task")
    _require(e.ways <= d.split_sizes[0], "meta-train split has fewer tasks than episode.ways")

    t = cfg.train
    _require(_is_int(t.meta_iterations) and t.meta_iterations >= 0, "train.meta_iterations must be >= 0")
    _require(_is_int(t.eval_every) and t.eval_every >= 0, "train.eval_every must be >= 0")
    _require(_is_int(t.eval_episodes) and t.eval_episodes >= 1, "train.eval_episodes must be >= 1")
    v = cfg.eval
    _require(_is_int(v.trials) and v.trials >= 1, "eval.trials must be >= 1")
    _require(_is_int(v.episodes_per_trial) and v.episodes_per_trial >= 1, "eval.episodes_per_trial must be >= 1")
    _require(v.split in ("train", "val", "test"), "eval.split must be train, val or test")

    x = cfg.experiment
    _require(len(x.steps_list) >= 1 and all(_is_int(s) and s >= 0 for s in x.steps_list),
             "experiment.steps_list must be non-empty integers >= 0")
    for name, plan in x.freeze_plans.items():
        bad = sorted(set(plan) - layer_names)
        _require(not bad, f"freeze plan {name!r} names unknown layers: {bad}")
    _require(0 <= x.threshold_fraction <= 1, "experiment.threshold_fraction must lie in [0, 1]")
    _require(x.baseline_lr is None or x.baseline_lr > 0, "experiment.baseline_lr must be positive")
    for key in ("baseline_iterations", "pretrain_iterations", "readout_iterations", "baseline_batch",
                "pretrain_batch", "transfer_query", "transfer_trials"):
        _require(_is_int(getattr(x, key)) and getattr(x, key) >= 1, f"experiment.{key} must be >= 1")
    _require(_is_int(x.max_shots) and x.max_shots >= 1, "experiment.max_shots must be >= 1")
    _require(x.pretrain_lr > 0 and x.readout_lr > 0, "experiment learning rates must be positive")
    _require(0 < x.pretrain_target <= 1, "experiment.pretrain_target must lie in (0, 1]")


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """Copy with ``section={field: value}`` (or top-level field) overrides,
    re-validated."""
    data = cfg.to_dict()
    for key, value in sections.items():
        if isinstance(value, dict) and key in _SECTIONS:
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return from_dict(data)
