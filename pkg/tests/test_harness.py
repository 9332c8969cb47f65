"""Tests for config loading, manifests, analysis tools, and the CLI."""

import json
import math
import subprocess
import sys

import numpy as np
import pytest

from bstlab.analysis import (
    AblationSpec,
    ablate_cdq,
    analyze_morse,
    density_fraction,
    deviation_histogram,
    emit_heatmap,
    write_rows_csv,
)
from bstlab.cli import main
from bstlab.config import load_config, resolve_path
from bstlab.datasets import ReplayDataset, four_mode_dataset
from bstlab.errors import ConfigError, StateError
from bstlab.manifest import RunManifest, content_hash
from bstlab.morse import MorseNet


SMALL_MORSE = dict(hidden_layers=2, hidden_units=64, n_steps=1500, batch_size=64)


def write_config(tmp_path, body, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(body))
    return path


class TestConfig:
    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(ConfigError, match="nowhere.json"):
            load_config(tmp_path / "nowhere.json")

    def test_bad_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = write_config(tmp_path, {"enviroment": {}})
        with pytest.raises(ConfigError, match="enviroment"):
            load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path, {"morse": {"n_stpes": 5}})
        with pytest.raises(ConfigError, match="n_stpes"):
            load_config(path)

    def test_non_object_section_rejected(self, tmp_path):
        path = write_config(tmp_path, {"env": [1, 2]})
        with pytest.raises(ConfigError, match="must be an object"):
            load_config(path)

    def test_valid_config_loads(self, tmp_path):
        body = {
            "env": {"kind": "four_mode_bandit"},
            "dataset": {"n_transitions": 64},
            "morse": {"scale": 1.0},
        }
        assert load_config(write_config(tmp_path, body)) == body

    def test_relative_paths_resolve_against_config_dir(self, tmp_path):
        config = tmp_path / "sub" / "run.json"
        assert resolve_path(config, "data.bstd") == (
            tmp_path / "sub" / "data.bstd"
        ).resolve()
        assert resolve_path(config, "/abs/data.bstd") == resolve_path(
            config, "/abs/data.bstd"
        )


class TestManifest:
    def test_write_records_everything(self, tmp_path):
        m = RunManifest(tmp_path, {"env": {"kind": "four_mode_bandit"}}, 42)
        s1 = m.derive_seed("generate")
        with m.phase("generate"):
            pass
        (tmp_path / "x.csv").write_text("a\n")
        m.add_artifact("x.csv")
        m.warn("something odd")
        m.extra["note"] = 1
        path = m.write()
        data = json.loads(path.read_text())
        assert data["seeds"]["master"] == 42
        assert data["seeds"]["phases"]["generate"] == s1
        assert "rule" in data["seeds"]
        assert data["artifacts"] == ["x.csv"]
        assert data["warnings"] == ["something odd"]
        assert data["phase_seconds"]["generate"] >= 0.0
        assert data["extra"] == {"note": 1}

    def test_missing_artifact_blocks_write(self, tmp_path):
        m = RunManifest(tmp_path, {}, 0)
        m.add_artifact("ghost.csv")
        with pytest.raises(StateError, match="ghost.csv"):
            m.write()

    def test_seed_derivation_deterministic(self, tmp_path):
        a = RunManifest(tmp_path, {}, 7)
        b = RunManifest(tmp_path, {}, 7)
        assert a.derive_seed("p1") == b.derive_seed("p1")
        assert a.derive_seed("p2") == b.derive_seed("p2")
        assert a.phase_seeds["p1"] != a.phase_seeds["p2"]

    def test_duplicate_phase_seed_rejected(self, tmp_path):
        m = RunManifest(tmp_path, {}, 0)
        m.derive_seed("p")
        with pytest.raises(StateError):
            m.derive_seed("p")

    def test_input_hash_stable(self, tmp_path):
        f = tmp_path / "in.bin"
        f.write_bytes(b"\x00\x01\x02")
        m = RunManifest(tmp_path, {}, 0)
        assert m.add_input("f", f) == content_hash(b"\x00\x01\x02")
        assert m.add_input("f2", f) == m.input_hashes["f"]

    def test_config_snapshot_is_a_copy(self, tmp_path):
        cfg = {"env": {"kind": "point_maze"}}
        m = RunManifest(tmp_path, cfg, 0)
        cfg["env"]["kind"] = "mutated"
        assert m.config["env"]["kind"] == "point_maze"


@pytest.fixture(scope="module")
def bandit_model():
    d = four_mode_dataset(128, seed=0)
    model = MorseNet(scale=1.0, **SMALL_MORSE, seed=0).fit(d.states, d.actions)
    return model, d


class TestAnalyzeMorse:
    def test_untrained_model_rejected(self):
        d = four_mode_dataset(16, seed=0)
        with pytest.raises(ConfigError, match="trained"):
            analyze_morse(MorseNet(), d)

    def test_dim_mismatch_rejected(self, bandit_model):
        model, _ = bandit_model
        rng = np.random.default_rng(0)
        wide = ReplayDataset(
            states=rng.normal(size=(8, 3)),
            actions=rng.uniform(-1, 1, size=(8, 2)),
            rewards=np.zeros(8),
            next_states=rng.normal(size=(8, 3)),
            dones=np.ones(8, dtype=bool),
        )
        with pytest.raises(ConfigError, match="dims"):
            analyze_morse(model, wide)

    def test_population_shapes_and_ranges(self, bandit_model):
        model, d = bandit_model
        result = analyze_morse(model, d, seed=1)
        n = len(d)
        assert result["data"].shape == (n,)
        assert result["permuted"].shape == (10, n)
        assert result["uniform"].shape == (10, n)
        for block in ("data", "permuted", "uniform"):
            assert np.all(result[block] >= 0.0)
            assert np.all(result[block] <= 1.0)

    def test_data_beats_uniform(self, bandit_model):
        model, d = bandit_model
        means = analyze_morse(model, d, seed=1)["means"]
        assert means["data"] - means["uniform"] >= 0.5

    def test_csv_bytes_deterministic(self, bandit_model, tmp_path):
        model, d = bandit_model
        analyze_morse(model, d, seed=3, path=tmp_path / "a.csv")
        analyze_morse(model, d, seed=3, path=tmp_path / "b.csv")
        a = (tmp_path / "a.csv").read_bytes()
        assert a == (tmp_path / "b.csv").read_bytes()
        header, first = a.decode().split("\n")[:2]
        assert header == "population,state_index,sample_index,certainty"
        assert first.startswith("data,0,0,")
        assert a.decode().rstrip("\n").split("\n")[-1].startswith("means,")

    def test_different_seed_changes_samples(self, bandit_model):
        model, d = bandit_model
        r1 = analyze_morse(model, d, seed=1)
        r2 = analyze_morse(model, d, seed=2)
        assert not np.array_equal(r1["uniform"], r2["uniform"])
        np.testing.assert_array_equal(r1["data"], r2["data"])


class TestHeatmap:
    def test_quantization_bytes(self, tmp_path):
        pgm, csv_path = emit_heatmap([[0.0, 1.0], [1.0, 0.0]], tmp_path / "m.pgm")
        data = pgm.read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n")
        assert data[-4:] == bytes([0, 255, 255, 0])
        assert csv_path.read_text() == "0.0,1.0\n1.0,0.0\n"

    def test_all_black_and_all_white(self, tmp_path):
        black, _ = emit_heatmap(np.zeros((3, 4)), tmp_path / "b.pgm")
        assert black.read_bytes()[-12:] == bytes(12)
        white, _ = emit_heatmap(np.ones((3, 4)), tmp_path / "w.pgm")
        assert white.read_bytes()[-12:] == bytes([255] * 12)

    def test_out_of_range_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_heatmap([[0.0, 1.2]], tmp_path / "m.pgm")
        with pytest.raises(ValueError):
            emit_heatmap([[-0.1, 0.5]], tmp_path / "m.pgm")
        with pytest.raises(ValueError):
            emit_heatmap([[np.nan, 0.5]], tmp_path / "m.pgm")

    def test_non_2d_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_heatmap([0.0, 1.0], tmp_path / "m.pgm")

    def test_header_dimensions_width_by_height(self, tmp_path):
        pgm, _ = emit_heatmap(np.zeros((2, 5)), tmp_path / "m.pgm")
        assert pgm.read_bytes().startswith(b"P5\n5 2\n255\n")


class TestSweepSpecs:
    def test_empty_values_rejected(self):
        with pytest.raises(ConfigError, match="at least one value"):
            AblationSpec(variable="lambda", values=())

    def test_bad_variable_rejected(self):
        with pytest.raises(ConfigError, match="variable"):
            AblationSpec(variable="sigma", values=(1.0,))

    def test_zero_seeds_rejected(self):
        with pytest.raises(ConfigError, match="n_seeds"):
            AblationSpec(variable="lambda", values=(1.0,), n_seeds=0)

    def test_cdq_values_must_be_pairs(self):
        with pytest.raises(ConfigError, match="pairs"):
            AblationSpec(variable="cdq", values=(2.0,))
        with pytest.raises(ConfigError, match="pairs"):
            AblationSpec(variable="cdq", values=((2, "median"),))

    def test_reserved_params_rejected(self):
        with pytest.raises(ConfigError, match="morse parameter"):
            AblationSpec(variable="lambda", values=(1.0,), morse_params={"seed": 3})
        with pytest.raises(ConfigError, match="agent parameter"):
            AblationSpec(variable="lambda", values=(1.0,), agent_params={"morse": 1})
        with pytest.raises(ConfigError, match="agent parameter"):
            AblationSpec(
                variable="lambda", values=(1.0,), agent_params={"n_stpes": 9}
            )

    def test_cdq_baseline_required(self):
        spec = AblationSpec(variable="cdq", values=((2, "independent"),), n_seeds=1)
        with pytest.raises(ConfigError, match="baseline"):
            ablate_cdq(spec, four_mode_dataset(16, 0), None, None)

    def test_deviation_histogram_covers_box(self):
        rows = deviation_histogram([0.0, 1.0, 2.0 * math.sqrt(2.0) - 1e-9], 2)
        assert len(rows) == 40
        assert rows[0]["bin_left"] == 0.0
        assert rows[-1]["bin_right"] == pytest.approx(2.0 * math.sqrt(2.0))
        assert sum(r["count"] for r in rows) == 3

    def test_write_rows_csv_formats(self, tmp_path):
        path = write_rows_csv(
            tmp_path / "t.csv",
            ("a", "b", "c"),
            [{"a": 1, "b": 0.5, "c": None}, {"a": 2, "b": "x", "c": True}],
        )
        assert path.read_text() == "a,b,c\n1,0.5,\n2,x,True\n"


class TestDensityFraction:
    def test_fraction_in_unit_interval(self, bandit_model):
        model, d = bandit_model
        frac = density_fraction(model, np.zeros(2))
        assert 0.0 < frac < 1.0


def run_cli(args):
    return main(list(args))


@pytest.fixture(scope="module")
def bandit_run(tmp_path_factory):
    """Full CLI pipeline on the bandit: gen-data, train-morse, train-agent."""
    root = tmp_path_factory.mktemp("bandit_cli")
    config = {
        "env": {"kind": "four_mode_bandit"},
        "dataset": {"n_transitions": 128, "path": "data/dataset.bstd"},
        "morse": {
            "scale": 1.0, "hidden_layers": 1, "hidden_units": 32,
            "n_steps": 600, "batch_size": 64, "path": "morse/morse.bstm",
        },
        "agent": {
            "n_steps": 400, "batch_size": 64, "hidden_layers": 1,
            "hidden_units": 32, "eval_every": 200, "eval_episodes": 5,
            "path": "agent/policy.bstw",
        },
    }
    config_path = root / "run.json"
    config_path.write_text(json.dumps(config))
    for cmd, out in (
        ("gen-data", "data"),
        ("train-morse", "morse"),
        ("train-agent", "agent"),
    ):
        code = run_cli(
            [cmd, "--config", str(config_path), "--seed", "3", "--out",
             str(root / out)]
        )
        assert code == 0, f"{cmd} failed"
    return root, config_path


class TestCli:
    def test_help_exits_zero(self, capsys):
        assert run_cli(["--help"]) == 0
        assert "gen-data" in capsys.readouterr().out

    def test_subcommand_help_exits_zero(self, capsys):
        assert run_cli(["train-agent", "--help"]) == 0
        assert "--config" in capsys.readouterr().out

    def test_missing_config_names_path(self, capsys, tmp_path):
        code = run_cli(
            ["train-agent", "--config", str(tmp_path / "missing.json")]
        )
        assert code == 1
        assert "missing.json" in capsys.readouterr().err

    def test_unknown_flag_exits_one(self, capsys):
        assert run_cli(["gen-data", "--config", "x.json", "--frobnicate"]) == 1

    def test_no_command_exits_one(self, capsys):
        assert run_cli([]) == 1

    def test_unknown_config_key_exits_one(self, capsys, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"agent": {"n_stpes": 3}}))
        code = run_cli(["train-agent", "--config", str(path)])
        assert code == 1
        assert "n_stpes" in capsys.readouterr().err

    def test_pipeline_artifacts_exist(self, bandit_run):
        root, _ = bandit_run
        assert (root / "data" / "dataset.bstd").is_file()
        assert (root / "data" / "manifest.json").is_file()
        assert (root / "morse" / "morse.bstm").is_file()
        assert (root / "morse" / "morse_loss.csv").is_file()
        agent_dir = root / "agent"
        for name in (
            "policy.bstw", "policy_target.bstw", "policy_opt.bsto",
            "critic_0.bstw", "critic_target_0.bstw", "critic_opt_0.bsto",
            "critic_1.bstw", "metrics.csv", "normalizer.json", "manifest.json",
        ):
            assert (agent_dir / name).is_file(), name

    def test_manifest_names_only_existing_artifacts(self, bandit_run):
        root, _ = bandit_run
        for sub in ("data", "morse", "agent"):
            data = json.loads((root / sub / "manifest.json").read_text())
            for rel in data["artifacts"]:
                assert (root / sub / rel).is_file(), rel
            assert data["seeds"]["master"] == 3
            assert data["input_hashes"]
            assert data["phase_seconds"]

    def test_metrics_csv_has_contract_columns(self, bandit_run):
        root, _ = bandit_run
        header = (root / "agent" / "metrics.csv").read_text().splitlines()[0]
        assert header == "step,critic_loss,policy_loss,mean_w,mean_c,z_q,eval_return"

    def test_evaluate_and_analyze(self, bandit_run, tmp_path):
        root, config_path = bandit_run
        code = run_cli(
            ["evaluate", "--config", str(config_path), "--seed", "5", "--out",
             str(root / "eval")]
        )
        assert code == 0
        data = json.loads((root / "eval" / "manifest.json").read_text())
        assert "mean_return" in data["extra"]
        assert (root / "eval" / "evaluation.csv").is_file()
        assert (root / "eval" / "deviations.csv").is_file()

        code = run_cli(
            ["analyze-morse", "--config", str(config_path), "--seed", "5",
             "--out", str(root / "analysis")]
        )
        assert code == 0
        assert (root / "analysis" / "certainty.csv").is_file()
        assert (root / "analysis" / "density.pgm").is_file()
        assert (root / "analysis" / "density.csv").is_file()

    def test_evaluate_without_policy_exits_one(self, capsys, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"env": {"kind": "four_mode_bandit"}}))
        code = run_cli(["evaluate", "--config", str(path), "--out", str(tmp_path)])
        assert code == 1
        assert "agent.path" in capsys.readouterr().err

    def test_corrupt_dataset_exits_one(self, capsys, tmp_path):
        bad = tmp_path / "bad.bstd"
        bad.write_bytes(b"WRONGMAGIC" + bytes(64))
        config = {
            "env": {"kind": "four_mode_bandit"},
            "dataset": {"path": str(bad)},
            "morse": {"n_steps": 10},
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(config))
        code = run_cli(
            ["train-morse", "--config", str(path), "--out", str(tmp_path / "o")]
        )
        assert code == 1
        assert "magic" in capsys.readouterr().err

    def test_ablate_mu_sweep(self, bandit_run):
        root, _ = bandit_run
        config = {
            "env": {"kind": "four_mode_bandit"},
            "dataset": {"path": "data/dataset.bstd"},
            "morse": {"path": "morse/morse.bstm"},
            "agent": {
                "n_steps": 200, "batch_size": 64, "hidden_layers": 1,
                "hidden_units": 32, "eval_every": 0,
            },
            "ablation": {
                "variable": "mu", "values": [0.5, 2.0], "n_seeds": 1,
                "eval_episodes": 5,
            },
        }
        config_path = root / "ablate.json"
        config_path.write_text(json.dumps(config))
        code = run_cli(
            ["ablate", "--config", str(config_path), "--seed", "1", "--out",
             str(root / "ablate")]
        )
        assert code == 0
        table = (root / "ablate" / "ablation.csv").read_text().splitlines()
        assert table[0] == "mu,n_seeds,mean_score,std_score"
        assert len(table) == 3

    def test_module_entrypoint_runs(self):
        proc = subprocess.run(
            [sys.executable, "-m", "bstlab.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "gen-data" in proc.stdout


class TestCliDeterminism:
    def test_gen_data_reproducible(self, tmp_path):
        config = {
            "env": {"kind": "four_mode_bandit"},
            "dataset": {"n_transitions": 64},
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(config))
        for out in ("a", "b"):
            assert run_cli(
                ["gen-data", "--config", str(path), "--seed", "9", "--out",
                 str(tmp_path / out)]
            ) == 0
        a = (tmp_path / "a" / "dataset.bstd").read_bytes()
        assert a == (tmp_path / "b" / "dataset.bstd").read_bytes()
