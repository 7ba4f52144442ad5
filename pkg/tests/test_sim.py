import json

import numpy as np
import pytest

from mabrfl_sim.data import Dataset
from mabrfl_sim.mabrfl import MabRflParams
from mabrfl_sim.sim import (
    CSV_HEADER,
    ConfigError,
    DataConfig,
    RoundOutcome,
    SimConfig,
    apply_attack,
    build_environment,
    controlled_selection_fraction,
    fig1a_preset,
    load_config,
    rational_vs_random_demo,
    read_metrics,
    run_experiment,
    save_config,
    sweep,
    write_demo,
    write_metrics,
)
from mabrfl_sim.training import Architecture, ModelParams, accuracy, init_params

SMALL_DATA = DataConfig(num_classes=4, dim=40, samples_per_class=60, min_size=10, max_size=30)


def small(**kw) -> SimConfig:
    base = dict(num_clients=10, rounds=3, data=SMALL_DATA)
    base.update(kw)
    return SimConfig(**base)


class TestConfig:
    def test_defaults_match_reference_setting(self):
        cfg = load_config()
        assert cfg.num_clients == 50 and cfg.rounds == 100
        assert cfg.mabrfl == MabRflParams(c_max=0.7, c_min=0.3, alpha=-0.1, lam=0.1)
        assert cfg.training.local_epochs == 3

    def test_round_trip(self, tmp_path):
        cfg = small(attack="agrt", defense="krum", attacker_fraction=0.3, seed=7)
        cfg = cfg.replace(mabrfl=MabRflParams(alpha=0.2), record_timing=True)
        save_config(cfg, tmp_path / "c.ini")
        assert load_config(tmp_path / "c.ini") == cfg

    def test_partial_file_keeps_defaults(self, tmp_path):
        (tmp_path / "c.ini").write_text("[sim]\nrounds = 7\n[mabrfl]\nlam = 0.2\n[defense]\nkrum_f = none\n")
        cfg = load_config(tmp_path / "c.ini")
        assert cfg.rounds == 7 and cfg.mabrfl.lam == 0.2 and cfg.num_clients == 50
        assert cfg.defense_params.krum_f is None

    def test_unknown_key_named(self, tmp_path):
        (tmp_path / "c.ini").write_text("[sim]\nrounds = 7\nbogus_key = 1\n")
        with pytest.raises(ConfigError, match="bogus_key"):
            load_config(tmp_path / "c.ini")

    def test_unknown_section(self, tmp_path):
        (tmp_path / "c.ini").write_text("[nope]\na = 1\n")
        with pytest.raises(ConfigError, match="nope"):
            load_config(tmp_path / "c.ini")

    def test_bad_value_named(self, tmp_path):
        (tmp_path / "c.ini").write_text("[sim]\nrounds = many\n")
        with pytest.raises(ConfigError, match="rounds"):
            load_config(tmp_path / "c.ini")

    def test_invalid_values_rejected(self, tmp_path):
        (tmp_path / "c.ini").write_text("[mabrfl]\nc_min = 0.9\n")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.ini")

    @pytest.mark.parametrize("kw", [dict(attack="x"), dict(defense="y"), dict(attacker_fraction=0.5), dict(rounds=0)])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            SimConfig(**kw)

    def test_controlled_count(self):
        assert SimConfig(attacker_fraction=0.4).num_controlled == 20
        assert SimConfig(num_clients=10, attacker_fraction=0.25).num_controlled == 3


class TestMetrics:
    def test_csv_and_sidecar(self, tmp_path):
        outs = [RoundOutcome(1, 0.5, 1.25, [0, 2, 3], [2], [], 0.0), RoundOutcome(2, 0.75, 0.5, [1], [], [1], 0.0)]
        cfg = small()
        path = write_metrics(outs, tmp_path / "sub" / "m.csv", cfg)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        assert lines[1] == "1,0.500000,1.25,0;2;3,2,,0.000"
        rows = read_metrics(path)
        assert rows[1]["flagged_nonsybil"] == "1"
        assert json.loads(path.with_suffix(".json").read_text())["num_clients"] == 10

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            write_metrics([], blocker / "m.csv")


class TestEnvironment:
    def test_lf_only_poisons_controlled(self):
        env = build_environment(small(attack="lf", attacker_fraction=0.3))
        assert env.controlled == (0, 1, 2)
        assert sorted(env.poisoned_shards) == [0, 1, 2]
        for c, shard in env.poisoned_shards.items():
            np.testing.assert_array_equal(shard.labels, 3 - env.shards[c].labels)
            np.testing.assert_array_equal(shard.features, env.shards[c].features)

    @pytest.mark.parametrize("attack", ["lie", "agrt"])
    def test_attack_leaves_benign_untouched(self, attack):
        env = build_environment(small(attack=attack, attacker_fraction=0.3))
        ups = {c: env.honest_update(env.init, 1, c) for c in range(10)}
        before = {c: v.copy() for c, v in ups.items()}
        out = apply_attack(env, ups, 1)
        for c in env.benign:
            assert out[c].tobytes() == before[c].tobytes()
            assert ups[c].tobytes() == before[c].tobytes()
        assert any(not np.array_equal(out[c], before[c]) for c in env.controlled)

    def test_attack_needs_two_known(self):
        env = build_environment(small(attack="lie", attacker_fraction=0.3))
        ups = {0: np.ones(env.arch.num_params), 5: np.zeros(env.arch.num_params)}
        assert apply_attack(env, ups, 1) is ups

    def test_weights_are_proportions(self):
        env = build_environment(small())
        w = env.weights([0, 1, 2])
        assert sum(w.values()) == pytest.approx(1.0)
        assert w[0] == pytest.approx(env.sizes[0] / env.sizes[:3].sum())


def test_accuracy_on_ten_samples():
    # weights pick class 1 when x1 > x0; 7 of 10 samples agree with labels
    arch = Architecture(2, 2)
    params = ModelParams(arch, [1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    x = np.array([[1, 0], [0, 1], [2, 1], [1, 2], [3, 0], [0, 3], [1, 5], [5, 1], [2, 3], [3, 2]], float)
    y = np.array([0, 1, 0, 1, 1, 0, 1, 0, 0, 0])
    assert accuracy(params, Dataset(x, y, 2)) == 0.7
    assert accuracy(init_params(arch), Dataset(x, y, 2)) == 0.6


class TestRun:
    def test_clean_fedavg_learns_separable(self):
        data = DataConfig(num_classes=4, dim=40, samples_per_class=100, class_separation=6.0)
        outs = run_experiment(SimConfig(num_clients=20, rounds=30, data=data))
        assert outs[-1].accuracy >= 0.9

    @pytest.mark.parametrize("defense", ["fedavg", "krum", "faba", "median", "dnc", "cc", "mabrfl"])
    def test_every_defense_runs_and_is_deterministic(self, defense, tmp_path):
        cfg = small(defense=defense, attack="agrt", attacker_fraction=0.2)
        a = write_metrics(run_experiment(cfg), tmp_path / "a.csv", cfg)
        b = write_metrics(run_experiment(cfg), tmp_path / "b.csv", cfg)
        assert a.read_bytes() == b.read_bytes()
        assert a.with_suffix(".json").read_bytes() == b.with_suffix(".json").read_bytes()

    def test_random_baseline_selection(self):
        outs = run_experiment(small(baseline_selection="random", clients_per_round=4))
        assert all(len(o.selected) == 4 for o in outs)

    def test_seed_changes_outcome(self):
        a = run_experiment(small(defense="mabrfl", seed=0))
        b = run_experiment(small(defense="mabrfl", seed=1))
        assert [o.selected for o in a] != [o.selected for o in b]

    def test_controlled_fraction(self):
        outs = [RoundOutcome(1, 0, 0, [0, 1, 5]), RoundOutcome(2, 0, 0, [5, 6]), RoundOutcome(3, 0, 0, [])]
        assert controlled_selection_fraction(outs, [0, 1], 3) == pytest.approx((2 / 3 + 0) / 2)


class TestDemo:
    def test_identical_without_attackers(self):
        curves = rational_vs_random_demo(small(rounds=4))
        assert curves["random_a"] == curves["random_b"] == curves["rational"]

    def test_curves_written(self, tmp_path):
        curves = rational_vs_random_demo(small(rounds=2, attack="lf", attacker_fraction=0.3))
        path = write_demo(curves, tmp_path / "d.csv")
        assert path.read_text().splitlines()[0] == "round,random_a,random_b,rational"
        assert len(path.read_text().splitlines()) == 3

    def test_preset(self):
        cfg = fig1a_preset()
        assert (cfg.attack, cfg.attacker_fraction, cfg.num_clients, cfg.clients_per_round) == ("lf", 0.4, 50, 10)


def test_sweep_layout(tmp_path):
    path = sweep(small(rounds=1), [0.2], ["lf", "lie"], ["fedavg", "median"], tmp_path)
    lines = path.read_text().splitlines()
    assert lines[0] == "attackers,attack,fedavg,median"
    assert [ln.split(",")[:2] for ln in lines[1:]] == [["0.00", "none"], ["0.20", "lf"], ["0.20", "lie"]]
    assert (tmp_path / "lie_0.20_median.csv").exists()
    with pytest.raises(ConfigError):
        sweep(small(rounds=1), [0.2], ["bogus"], ["fedavg"], tmp_path)


def test_readme_example_config_loads(tmp_path):
    text = """
[sim]
attacker_fraction = 0.4
attack = agrt            ; none | lf | lie | agrt
defense = mabrfl         ; fedavg | krum | faba | median | dnc | cc | mabrfl
baseline_selection = all ; or random
[defense]
krum_f = none            ; none = number of controlled clients
"""
    (tmp_path / "c.ini").write_text(text)
    cfg = load_config(tmp_path / "c.ini")
    assert (cfg.attack, cfg.defense, cfg.attacker_fraction) == ("agrt", "mabrfl", 0.4)
    assert cfg.defense_params.krum_f is None


def test_idx_source_end_to_end(tmp_path):
    import struct

    rng = np.random.default_rng(0)
    n = 120
    labels = rng.integers(0, 3, n).astype(np.uint8)
    images = (rng.integers(0, 60, (n, 4, 4)) + 60 * labels[:, None, None]).astype(np.uint8)
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 2051, n, 4, 4) + images.tobytes())
    (tmp_path / "lbl").write_bytes(struct.pack(">II", 2049, n) + labels.tobytes())
    data = DataConfig(source="idx", num_classes=3, images_path=str(tmp_path / "img"), labels_path=str(tmp_path / "lbl"), min_size=5, max_size=10)
    cfg = SimConfig(num_clients=6, rounds=2, data=data, defense="mabrfl")
    env = build_environment(cfg)
    assert env.arch.hidden == (32,) and env.arch.input_dim == 16
    outs = run_experiment(cfg)
    assert len(outs) == 2 and 0.0 <= outs[-1].accuracy <= 1.0
