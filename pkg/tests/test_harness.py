import os

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from snnmaml import autodiff as ad
from snnmaml import meta, snn
from snnmaml.errors import ConfigError, FormatError, NumericalError
from snnmaml.harness import checkpoint as ck
from snnmaml.harness import cli
from snnmaml.harness import config as cf
from snnmaml.harness import experiments as ex
from snnmaml.harness import metrics as mt

from helpers import tiny_config


@pytest.fixture(scope="module")
def tiny():
    return tiny_config()


@pytest.fixture(scope="module")
def trained(tiny):
    return ex.run_meta_train(tiny)


# -- configuration ------------------------------------------------------------------

def test_defaults_validate_and_roundtrip_through_yaml():
    cfg = cf.RunConfig()
    cf.validate(cfg)
    assert cf.from_dict(yaml.safe_load(cfg.to_yaml())) == cfg


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"meta": {"inner_lr": 1.0, "learning_rate": 2}},
    {"dataset": {"colour": "red"}},
])
def test_unknown_keys_are_rejected(data):
    with pytest.raises(ConfigError, match="unknown"):
        cf.from_dict(data)


@pytest.mark.parametrize("data", [
    {"precision": "f16"},
    {"neuron": {"dt": 2.0}},
    {"neuron": {"u_th": -1.0}},
    {"meta": {"mode": "zeroth-order"}},
    {"meta": {"freeze_set": ["conv9"]}},
    {"network": {"pools": [True]}},
    {"dataset": {"split_sizes": [30, 6, 6]}},
    {"episode": {"shots": 20, "query": 20}},
    {"eval": {"split": "holdout"}},
    {"experiment": {"freeze_plans": {"x": ["fc"]}}},
    {"seed": -1},
])
def test_invalid_values_fail_before_compute(data):
    with pytest.raises(ConfigError):
        cf.from_dict(data)


def test_load_config_reports_bad_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("meta: [unclosed\n")
    with pytest.raises(ConfigError):
        cf.load_config(path)


def test_network_spec_follows_config(tiny):
    spec = tiny.network_spec((2, 4, 8))
    assert [l.name for l in spec.layers] == ["conv1", "pool1", "conv2", "pool2", "conv3", "out"]
    assert spec.ways == 2


def test_model_hash_tracks_network_neuron_and_ways(tiny):
    h = tiny.model_hash()
    assert h == tiny_config().model_hash()
    assert tiny_config(meta={"inner_lr": 0.5}).model_hash() == h
    assert tiny_config(network={"channels": [2, 2, 3]}).model_hash() != h
    assert tiny_config(neuron={"u_th": 0.2}).model_hash() != h
    assert tiny_config(episode={"ways": 3}, dataset={"split_sizes": [5, 2, 2]}).model_hash() != h


# -- checkpoints ----------------------------------------------------------------------

def _params(seed=0):
    spec = tiny_config().network_spec((2, 4, 8))
    return snn.build_network(spec, seed)


def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    params = _params()
    adam = meta.AdamState.zeros(params)
    grads = {k: np.full(p.shape, 0.25) for k, p in params.items()}
    params, adam = meta.adam_update(params, grads, adam, 1e-3)
    path = tmp_path / "c.smck"
    ck.save_checkpoint(path, params, adam, "ab" * 32)
    back = ck.load_checkpoint(path, "ab" * 32)
    assert back.model_hash == "ab" * 32 and back.adam.t == 1
    for k in params:
        assert back.params[k].value.tobytes() == params[k].value.tobytes()
        assert back.adam.m[k].tobytes() == adam.m[k].tobytes()
        assert back.adam.v[k].tobytes() == adam.v[k].tobytes()
    assert ck.encode(back) == path.read_bytes()


def test_checkpoint_keeps_f32():
    with ad.default_dtype("f32"):
        params = _params()
    data = ck.encode(ck.Checkpoint(params, meta.AdamState.zeros(params), "0" * 64))
    back = ck.decode(data)
    assert all(p.value.dtype == np.float32 for p in back.params.values())


def test_checkpoint_hash_guard(tmp_path):
    params = _params()
    path = tmp_path / "c.smck"
    ck.save_checkpoint(path, params, meta.AdamState.zeros(params), "a" * 64)
    with pytest.raises(ConfigError, match="different"):
        ck.load_checkpoint(path, "b" * 64)
    assert ck.load_checkpoint(path, "b" * 64, force=True).model_hash == "a" * 64


def test_truncated_checkpoint_reports_offset():
    params = _params()
    data = ck.encode(ck.Checkpoint(params, meta.AdamState.zeros(params), "a" * 64))
    for cut in (10, ck.HEADER.size + 1, len(data) - 3):
        with pytest.raises(FormatError) as info:
            ck.decode(data[:cut])
        assert info.value.offset is not None and info.value.offset <= cut
    with pytest.raises(FormatError, match="magic"):
        ck.decode(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="trailing"):
        ck.decode(data + b"\0")


# -- metrics files ----------------------------------------------------------------------

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text(st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=8)
                       .filter(lambda s: s.strip() == s and "\r" not in s and "\n" not in s),
                       st.lists(finite, min_size=1, max_size=5), min_size=1, max_size=4))
def test_metrics_csv_roundtrip(tmp_path_factory, table):
    path = tmp_path_factory.mktemp("m") / "m.csv"
    records = [mt.MetricsRecord(k, v) for k, v in table.items()]
    mt.write_metrics(path, records)
    assert mt.read_metrics(path) == records


def test_train_log_roundtrip(tmp_path):
    log = mt.TrainLog([1.5, 0.1 + 0.2, 1e-300], {2: 0.6, 3: 1 / 3})
    mt.write_train_log(tmp_path / "t.csv", log)
    assert mt.read_train_log(tmp_path / "t.csv") == log


def test_metrics_mean_std_from_trials():
    rec = mt.MetricsRecord("x", [0.5, 1.0])
    assert rec.mean == 0.75 and rec.std == 0.25
    assert mt.MetricsRecord("x", [0.4]).std == 0.0


def test_metrics_reader_rejects_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n")
    with pytest.raises(FormatError):
        mt.read_metrics(tmp_path / "m.csv")


# -- experiments -----------------------------------------------------------------------

def test_zero_iterations_return_the_initialisation():
    cfg = tiny_config(train={"meta_iterations": 0})
    result = ex.run_meta_train(cfg)
    init = snn.build_network(result.context.spec, cfg.seed)
    assert all(np.array_equal(result.params[k].value, init[k].value) for k in init)
    assert result.adam.t == 0 and result.log.losses == []


def test_meta_train_is_deterministic(tmp_path, tiny, trained):
    a, b = tmp_path / "a", tmp_path / "b"
    ex.run_meta_train(tiny, a)
    ex.run_meta_train(tiny, b)
    for name in ("checkpoint.smck", "train_log.csv", "split.txt", "config.yaml"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len(trained.log.losses) == 2 and set(trained.log.val) == {1, 2}
    assert any(not np.array_equal(trained.params[k].value, p.value)
               for k, p in snn.build_network(trained.context.spec, 0).items())


def test_meta_train_modes_differ(tiny, trained):
    fo = ex.run_meta_train(cf.with_overrides(tiny, meta={"mode": "first-order"}))
    assert fo.log.losses[0] == trained.log.losses[0]
    assert any(not np.array_equal(fo.params[k].value, trained.params[k].value) for k in fo.params)


def test_meta_eval_single_trial_has_zero_std(tiny, trained):
    rec = ex.run_meta_eval(cf.with_overrides(tiny, eval={"trials": 1}), trained.params)
    assert len(rec.accuracies) == 1 and rec.std == 0.0


def test_step_sweep_consistency(tiny, trained):
    records = ex.sweep_adaptation_steps(tiny, trained.params, [0, 1])
    assert records[1].accuracies == ex.run_meta_eval(tiny, trained.params).accuracies
    zero = ex.run_meta_eval(tiny, trained.params, tiny.meta_hyper(inner_steps=0))
    assert records[0].accuracies == zero.accuracies


def test_freeze_plans(tiny, trained):
    records = ex.sweep_freeze_layers(tiny, trained.params,
                                     {"none": [], "all": ["conv1", "conv2", "conv3", "out"]})
    assert records[0].accuracies == ex.run_meta_eval(tiny, trained.params).accuracies
    zero = ex.sweep_adaptation_steps(tiny, trained.params, [0])[0]
    assert records[1].accuracies == zero.accuracies
    with pytest.raises(ConfigError):
        ex.sweep_freeze_layers(tiny, trained.params, {"bad": ["fc9"]})


def test_checkpoint_shape_mismatch_is_refused(tiny):
    params = snn.build_network(tiny_config(network={"channels": [3, 2, 2]}).network_spec((2, 4, 8)), 0)
    with pytest.raises(ConfigError):
        ex.run_meta_eval(tiny, params)


def test_update_stats_study(tmp_path, tiny, trained):
    study = ex.run_update_stats(tiny, trained.params, trained.adam, tmp_path)
    assert set(study.stats) == set(ex.REGIMES)
    inner, gated = study.stats["maml-inner"].layer("out"), study.stats["maml-inner-gated"].layer("out")
    assert gated.nonzero <= inner.nonzero and gated.total == inner.total
    assert study.stats["maml-outer"].overall.nonzero > 0
    for name in ("update_stats.csv", "update_histogram.csv", "gate_accuracy.csv", "timing.json"):
        assert (tmp_path / name).exists()
    hist = mt.read_table(tmp_path / "update_histogram.csv", ex.HIST_HEADER)
    assert len(hist) == 50 * len(ex.REGIMES)
    assert study.ratio() > 0


def test_update_stats_share_initialisation(tiny):
    init = snn.build_network(tiny.network_spec((2, 4, 8)), tiny.seed)
    ctx = ex.prepare(tiny)
    before, _ = ex.non_meta_training(ctx, init, 1, 0.1, 4)
    assert all(np.array_equal(before[k].value, init[k].value) for k in init)


def test_zero_step_gives_zero_stats(tiny):
    ctx = ex.prepare(tiny)
    params = snn.build_network(ctx.spec, 0)
    ep = ex._episode(ctx, "train", 0)
    adapted = meta.inner_adapt(params, (ep.support_x, ep.support_y), tiny.meta_hyper(inner_lr=0.0),
                               ctx.objective)
    stats = meta.update_stats(params, adapted)
    assert stats.overall.sum == 0 and stats.overall.nonzero == 0 and stats.overall.avg == 0
    assert stats.overall.total == sum(p.value.size for p in params.values())


def test_transfer_baseline(tmp_path, tiny):
    result = ex.run_transfer_baseline(tiny, tmp_path)
    assert [r.setting for r in result.records] == ["shots=0", "shots=1", "shots=2"]
    assert all(len(r.accuracies) == 2 for r in result.records)
    assert result.pretrain_iterations <= 2
    assert mt.read_metrics(tmp_path / "transfer.csv") == result.records
    assert result.shots_to_reach(-1.0) == 0
    assert result.shots_to_reach(2.0) is None


def test_transfer_needs_enough_samples(tiny):
    with pytest.raises(ConfigError):
        ex.run_transfer_baseline(cf.with_overrides(tiny, experiment={"max_shots": 3}))


# -- command line ----------------------------------------------------------------------

def _write_config(tmp_path, cfg):
    path = tmp_path / "run.yaml"
    path.write_text(cfg.to_yaml())
    return str(path)


def test_cli_print_config(capsys):
    assert cli.main(["print-config", "--seed", "7"]) == 0
    printed = yaml.safe_load(capsys.readouterr().out)
    assert printed["seed"] == 7 and cf.from_dict(printed).seed == 7


def test_cli_end_to_end(tmp_path, tiny, capsys):
    conf = _write_config(tmp_path, tiny)
    out = str(tmp_path / "run")
    assert cli.main(["meta-train", "--config", conf, "--out", out]) == 0
    assert cli.main(["meta-eval", "--config", conf, "--out", out, "--trials", "1"]) == 0
    rec = mt.read_metrics(os.path.join(out, "eval.csv"))
    assert len(rec) == 1 and len(rec[0].accuracies) == 1
    assert cli.main(["sweep-steps", "--config", conf, "--out", out, "--steps", "0", "1"]) == 0
    assert [r.setting for r in mt.read_metrics(os.path.join(out, "sweep_steps.csv"))] == ["steps=0", "steps=1"]
    assert cli.main(["freeze-layers", "--config", conf, "--out", out]) == 0
    assert cli.main(["update-stats", "--config", conf, "--out", out]) == 0
    assert cli.main(["transfer-baseline", "--config", conf, "--out", out]) == 0
    assert "shots" in capsys.readouterr().out


def test_cli_mode_and_precision_flags(tmp_path, tiny):
    conf = _write_config(tmp_path, tiny)
    out = str(tmp_path / "fo")
    assert cli.main(["meta-train", "--config", conf, "--out", out, "--mode", "fomaml", "--precision", "f32"]) == 0
    saved = cf.load_config(os.path.join(out, "config.yaml"))
    assert saved.meta.mode == "first-order" and saved.precision == "f32"
    params, _ = ex.load_params(saved, os.path.join(out, "checkpoint.smck"))
    assert ck.load_checkpoint(os.path.join(out, "checkpoint.smck")).params["out.weight"].value.dtype == np.float32


def test_cli_gen_synth(tmp_path):
    conf = _write_config(tmp_path, tiny_config())
    out = tmp_path / "data"
    assert cli.main(["gen-synth", "--config", conf, "--out", str(out)]) == 0
    assert sorted(os.listdir(out)) == ["0", "1", "2"]
    assert len(os.listdir(out / "0")) == 8


def test_cli_exit_codes(tmp_path, tiny, monkeypatch):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    assert cli.main(["print-config", "--config", str(bad)]) == cli.EXIT_CONFIG
    conf = _write_config(tmp_path, tiny)
    out = tmp_path / "run"
    out.mkdir()
    (out / "checkpoint.smck").write_bytes(b"SMCK\x01")
    assert cli.main(["meta-eval", "--config", conf, "--out", str(out)]) == cli.EXIT_DATA
    assert cli.main(["meta-eval", "--config", conf, "--out", str(out),
                     "--checkpoint", str(tmp_path / "missing.smck")]) == cli.EXIT_DATA
    other = tiny_config(network={"channels": [2, 2, 3]})
    params = snn.build_network(other.network_spec((2, 4, 8)), 0)
    ck.save_checkpoint(out / "checkpoint.smck", params, meta.AdamState.zeros(params), other.model_hash())
    assert cli.main(["meta-eval", "--config", conf, "--out", str(out)]) == cli.EXIT_CONFIG

    def explode(*args, **kwargs):
        raise NumericalError("non-finite query loss")

    monkeypatch.setattr(ex, "run_meta_train", explode)
    assert cli.main(["meta-train", "--config", conf, "--out", str(out)]) == cli.EXIT_NUMERICAL


def test_cli_force_loads_mismatched_checkpoint(tmp_path, tiny):
    conf = _write_config(tmp_path, tiny)
    out = tmp_path / "run"
    out.mkdir()
    params = snn.build_network(tiny.network_spec((2, 4, 8)), 0)
    ck.save_checkpoint(out / "checkpoint.smck", params, meta.AdamState.zeros(params), "f" * 64)
    assert cli.main(["meta-eval", "--config", conf, "--out", str(out)]) == cli.EXIT_CONFIG
    assert cli.main(["meta-eval", "--config", conf, "--out", str(out), "--force"]) == 0
