import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sinkdistill import cli
from sinkdistill import config as cfgmod
from sinkdistill.attention_cache import EmaSinkCache
from sinkdistill.config import CacheSection, DistillSection, ExperimentConfig
from sinkdistill.errors import ConfigError


def tiny(preset="dynamics", **flat):
    """Small, fast config for end-to-end command tests."""
    cfg = cli.apply_preset(ExperimentConfig(), preset)
    cfg = cfg.with_overrides(
        distill__steps=4,
        distill__batch=4,
        distill__fake_updates=1,
        distill__eval_every=2,
        distill__eval_batch=4,
        distill__hidden=8,
        cache__head_dim=8,
        cache__window_size=3,
    )
    return cfg.with_overrides(**flat)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- config ------------------------------------------------------------------------


def test_text_roundtrip_and_comments():
    cfg = ExperimentConfig(seed=7, cache=CacheSection(alpha=0.9, window_size=5))
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg
    text = "# comment\nseed = 3   # trailing\ncache.alpha = 0.5\ndistill.preset = gaussian\n"
    got = cfgmod.loads(text)
    assert (got.seed, got.cache.alpha, got.distill.preset) == (3, 0.5, "gaussian")


def test_json_roundtrip(tmp_path):
    cfg = ExperimentConfig(seed=2, distill=DistillSection(beta=0.2))
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfgmod.to_dict(cfg)))
    assert cfgmod.load(path) == cfg


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**31),
    st.floats(0.001, 0.999),
    st.integers(1, 40),
    st.floats(0.01, 10.0),
    st.integers(1, 5000),
)
def test_roundtrip_property(seed, alpha, window, beta, steps):
    cfg = ExperimentConfig(seed=seed).with_overrides(cache__alpha=alpha, cache__window_size=window, distill__beta=beta, distill__steps=steps)
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


def test_validation_names_every_bad_field():
    with pytest.raises(ConfigError) as e:
        ExperimentConfig().with_overrides(cache__alpha=1.5, distill__beta=-1.0, distill__batch=1, data__rho=1.0)
    assert set(e.value.fields) == {"cache.alpha", "distill.beta", "distill.batch", "data.rho"}


def test_unknown_and_malformed_keys():
    with pytest.raises(ConfigError) as e:
        cfgmod.loads("cache.colour = 1\nbogus.key = 2\n")
    assert "cache.colour" in e.value.fields
    with pytest.raises(ConfigError):
        cfgmod.loads("distill.steps = 2.5\n")
    with pytest.raises(ConfigError):
        cfgmod.loads("just some words\n")


def test_overrides_skip_none():
    cfg = ExperimentConfig()
    assert cfg.with_overrides(seed=None, cache__alpha=None) == cfg
    assert cfg.with_overrides(seed=4).seed == 4


def test_named_rng_streams_are_independent_and_stable():
    cfg = ExperimentConfig(seed=1)
    a = cfg.rng("distill").standard_normal(4)
    np.testing.assert_array_equal(a, cfg.rng("distill").standard_normal(4))
    assert not np.array_equal(a, cfg.rng("rollout").standard_normal(4))
    assert not np.array_equal(a, replace(cfg, seed=2).rng("distill").standard_normal(4))


def test_presets_apply_defaults():
    cfg = cli.apply_preset(ExperimentConfig(), "gaussian-tilt")
    assert (cfg.distill.preset, cfg.distill.reward, cfg.distill.steps) == ("gaussian-tilt", "linear", 2000)


def test_dynamics_reward_needs_dynamics_preset():
    cfg = tiny("gaussian").with_overrides(distill__reward="dynamics")
    with pytest.raises(ConfigError):
        cli._reward(cfg)


# -- cache-bench ---------------------------------------------------------------------


def test_cache_bench_table(tmp_path):
    rows = cli.cmd_cache_bench(ExperimentConfig(), tmp_path, windows=(3, 5), long_len=24)
    table = read_csv(tmp_path / "cache_bench.csv")
    assert list(table[0]) == ["window_size", "seq_len", "throughput", "memory_bytes", "dense_equiv_error"]
    assert len(table) == len(rows) == 8
    for r in rows:
        if r["seq_len"] <= r["window_size"]:
            assert r["dense_equiv_error"] < 1e-10
        else:
            assert math.isnan(r["dense_equiv_error"])
        assert r["throughput"] > 0
    for w in (3, 5):
        mem = [r["memory_bytes"] for r in rows if r["window_size"] == w and r["seq_len"] >= w]
        assert len(set(mem)) == 1


def test_cache_bench_window_nine_dense_equivalence(tmp_path):
    rows = cli.cmd_cache_bench(ExperimentConfig(), tmp_path, windows=(9,), long_len=32)
    (cell,) = [r for r in rows if r["seq_len"] == 9]
    assert cell["dense_equiv_error"] < 1e-10


def test_cache_bench_throughput_falls_with_window(tmp_path):
    rows = cli.cmd_cache_bench(ExperimentConfig(), tmp_path)
    long = [r["throughput"] for r in rows if r["seq_len"] == 256]
    assert len(long) == len(cli.BENCH_WINDOWS)
    assert all(b <= a for a, b in zip(long, long[1:])), long


def test_cache_bench_rerun_identical_except_throughput(tmp_path):
    cfg = ExperimentConfig(seed=5)
    a = cli.cmd_cache_bench(cfg, tmp_path / "a", windows=(3,), long_len=10)
    b = cli.cmd_cache_bench(cfg, tmp_path / "b", windows=(3,), long_len=10)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "throughput"} for r in rows]
    assert repr(strip(a)) == repr(strip(b))


# -- distill -------------------------------------------------------------------------


@pytest.mark.parametrize("preset", ["gaussian", "gaussian-tilt", "dynamics"])
def test_distill_writes_artifacts_and_reruns_bytewise(tmp_path, preset):
    cfg = tiny(preset)
    cli.cmd_distill(cfg, tmp_path / "a")
    cli.cmd_distill(cfg, tmp_path / "b")
    for name in ("config.txt", "log.jsonl", "samples.csv", "checkpoint.bin", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert cfgmod.load(tmp_path / "a" / "config.txt") == cfg
    log = [json.loads(line) for line in (tmp_path / "a" / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log if "loss_dmd" in r] == [1, 2, 3, 4]


def test_distill_tilt_report_target(tmp_path):
    cfg = tiny("gaussian-tilt")
    d = cfg.data
    report = cli.cmd_distill(cfg, tmp_path)
    want = np.asarray(d.mean) + np.asarray(d.std) ** 2 * np.asarray(d.direction) / cfg.distill.beta
    np.testing.assert_allclose(report["target_mean"], want, rtol=0, atol=1e-15)


def test_tilt_preset_reaches_tilted_mean(tmp_path):
    report = cli.cmd_distill(cli.apply_preset(ExperimentConfig(), "gaussian-tilt"), tmp_path)
    assert max(abs(e) for e in report["mean_error"]) < 0.1


def test_dynamics_report_series(tmp_path):
    report = cli.cmd_distill(tiny(), tmp_path)
    assert [s for s, _ in report["dynamics_series"]] == [0, 2, 4]
    assert report["dynamics_final"] == report["dynamics_series"][-1][1]


def test_constant_reward_log_matches_dmd(tmp_path):
    cli.cmd_distill(tiny("gaussian", distill__reward="none"), tmp_path / "dmd")
    cli.cmd_distill(tiny("gaussian", distill__reward="constant"), tmp_path / "const")
    dmd = [json.loads(x) for x in (tmp_path / "dmd" / "log.jsonl").read_text().splitlines()]
    const = [json.loads(x) for x in (tmp_path / "const" / "log.jsonl").read_text().splitlines()]
    for a, b in zip(dmd, const):
        for key in ("loss_dmd", "loss_fake", "gen_mean", "gen_std", "t"):
            assert a[key] == b[key]
    assert (tmp_path / "dmd" / "samples.csv").read_bytes() == (tmp_path / "const" / "samples.csv").read_bytes()


# -- ablate --------------------------------------------------------------------------


def test_ablate_enumerates_grid(tmp_path, monkeypatch):
    calls = []
    real = cli.long_horizon_metrics

    def short(cfg, task):
        calls.append(cfg)
        return real(cfg, task, n_streams=2, n_chunks=12, chunks_per_clip=3)

    monkeypatch.setattr(cli, "long_horizon_metrics", short)
    rows = cli.cmd_ablate(tiny(), "beta", tmp_path, grid=(1.0, 0.5))
    assert [c.distill.beta for c in calls] == [1.0, 0.5]
    table = read_csv(tmp_path / "ablate_beta.csv")
    assert [float(r["beta"]) for r in table] == [1.0, 0.5]
    assert all(math.isfinite(r["drift"]) and r["dynamics_degree"] > 0 for r in rows)
    assert (tmp_path / "beta_0.5" / "checkpoint.bin").is_file()


def test_ablate_alpha_covers_grid_and_reruns_bytewise(tmp_path, monkeypatch):
    real = cli.long_horizon_metrics
    monkeypatch.setattr(cli, "long_horizon_metrics", lambda cfg, task: real(cfg, task, n_streams=2, n_chunks=6, chunks_per_clip=3))
    rows = cli.cmd_ablate(tiny(), "alpha", tmp_path / "a")
    assert [r["alpha"] for r in rows] == list(cli.ALPHA_GRID)
    cli.cmd_ablate(tiny(), "alpha", tmp_path / "b")
    assert (tmp_path / "a" / "ablate_alpha.csv").read_bytes() == (tmp_path / "b" / "ablate_alpha.csv").read_bytes()


def test_ablate_window_reports_throughput(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "long_horizon_metrics", lambda cfg, task: (0.0, 1.0))
    monkeypatch.setattr(cli, "cmd_cache_bench", lambda cfg, out, windows: [{"throughput": 10.0 * windows[0]}])
    rows = cli.cmd_ablate(tiny(), "window", tmp_path, grid=(2, 4))
    assert [(r["window"], r["throughput"]) for r in rows] == [(2, 20.0), (4, 40.0)]


def test_ablate_unknown_axis(tmp_path):
    with pytest.raises(ConfigError):
        cli.cmd_ablate(tiny(), "gamma", tmp_path)


# -- rollout -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    cli.cmd_distill(tiny(), out)
    return out / "checkpoint.bin"


def test_rollout_switch_keeps_prefix(tmp_path, checkpoint):
    cfg = tiny()
    base, _ = cli.cmd_rollout(cfg, checkpoint, tmp_path / "base", n_chunks=14)
    switched, _ = cli.cmd_rollout(cfg, checkpoint, tmp_path / "sw", n_chunks=14, switch_at=10, c_new=2.0)
    for i in range(10):
        assert base[i].tokens.tobytes() == switched[i].tokens.tobytes()
    for i in range(10, 14):
        assert not np.array_equal(base[i].tokens, switched[i].tokens)
    table = read_csv(tmp_path / "sw" / "sequence.csv")
    assert sorted({int(r["chunk_index"]) for r in table}) == list(range(14))


def test_rollout_noop_switch_is_identical(tmp_path, checkpoint):
    cfg = tiny()
    base, _ = cli.cmd_rollout(cfg, checkpoint, tmp_path / "a", n_chunks=12, cond=0.5)
    same, _ = cli.cmd_rollout(cfg, checkpoint, tmp_path / "b", n_chunks=12, cond=0.5, switch_at=10, c_new=0.5)
    for a, b in zip(base, same):
        np.testing.assert_array_equal(a.tokens, b.tokens)
    assert (tmp_path / "a" / "cache.emsk").read_bytes() == (tmp_path / "b" / "cache.emsk").read_bytes()


def test_rollout_cache_snapshot_loads(tmp_path, checkpoint):
    _, stream = cli.cmd_rollout(tiny(), checkpoint, tmp_path, n_chunks=5)
    loaded = EmaSinkCache.load(tmp_path / "cache.emsk")
    assert loaded.to_bytes() == stream.cache.to_bytes()


def test_rollout_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        cli.cmd_rollout(tiny(), tmp_path / "nope.bin", tmp_path)


# -- main ----------------------------------------------------------------------------


def test_main_exit_codes(tmp_path, capsys):
    assert cli.main(["cache-bench", "--alpha", "2.0", "--out", str(tmp_path)]) == 2
    assert cli.main(["rollout", "--checkpoint", str(tmp_path / "x.bin"), "--out", str(tmp_path)]) == 1
    assert cli.main(["rollout", "--checkpoint", "x", "--switch-at", "3", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "cache.alpha" in err and "not found" in err


def test_main_distill_with_config_file(tmp_path, capsys):
    path = tmp_path / "run.txt"
    cfgmod.save(tiny("gaussian"), path)
    out = tmp_path / "out"
    assert cli.main(["distill", "--config", str(path), "--seed", "3", "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["preset"] == "gaussian"
    assert cfgmod.load(out / "config.txt").seed == 3
