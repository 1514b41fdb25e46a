import json

import numpy as np
import pytest

from settransport import cli, config
from settransport import sinkhorn as sk


TINY = {
    "seed": 3,
    "model": {"kind": "sequence", "blocks": [1], "base_channels": 8,
              "m": 4, "seq_len": 8, "input_dim": 6},
    "nystrom": {"k": 4},
    "sinkhorn": {"max_iter": 20},
    "train": {"steps": 4, "batch_size": 8, "eval_every": 2},
    "data": {"task": "needle", "n_train": 16, "n_test": 8},
}


def write_config(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


class TestConfigModule:
    def test_defaults_validate(self):
        eff = config.load_config(None)
        assert eff["seed"] == 0
        config.build_model_config(eff)
        config.build_train_settings(eff)

    def test_all_presets_validate(self):
        for name in config.PRESETS:
            eff = config.load_config(name)
            config.build_model_config(eff)
            config.build_train_settings(eff)

    def test_unknown_source(self):
        with pytest.raises(config.ConfigError, match="neither a preset"):
            config.load_config("no-such-thing")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{nope")
        with pytest.raises(config.ConfigError, match="invalid JSON"):
            config.load_config(str(p))

    def test_unknown_key_reports_pointer(self, tmp_path):
        src = write_config(tmp_path, {"model": {"wat": 1}})
        with pytest.raises(config.ConfigError, match="/model/wat"):
            config.load_config(src)

    def test_type_error_reports_pointer(self, tmp_path):
        src = write_config(tmp_path, {"train": {"lr": "fast"}})
        with pytest.raises(config.ConfigError, match="/train/lr"):
            config.load_config(src)

    def test_file_can_extend_preset(self, tmp_path):
        src = write_config(tmp_path, {"preset": "needle",
                                      "train": {"steps": 3}})
        eff = config.load_config(src)
        assert eff["train"]["steps"] == 3
        assert eff["model"]["m"] == 16  # inherited from the preset

    @pytest.mark.parametrize("m", [100, 300, 500, 750, 800, 1000])
    def test_large_reference_counts_accepted(self, tmp_path, m):
        src = write_config(tmp_path, {"preset": "imagenet-like",
                                      "model": {"m": m}})
        eff = config.load_config(src)
        mcfg = config.build_model_config(eff)
        assert mcfg.m[0] == m
        # per-stage clamp keeps Sinkhorn marginals feasible
        assert mcfg.stage_m(0) <= mcfg.stage_tokens(0)

    def test_idx_task_requires_paths(self):
        eff = config.load_config(None)
        eff["data"]["task"] = "idx"
        with pytest.raises(config.ConfigError, match="/data/images"):
            config.build_datasets(eff, 0)

    def test_model_errors_carry_pointer(self):
        eff = config.load_config(None)
        eff["model"]["heads"] = 7  # does not divide base_channels
        with pytest.raises(config.ConfigError, match="/model"):
            config.build_model_config(eff)


class TestThreads:
    def test_flag_wins(self):
        assert cli._resolve_threads(2) == 2

    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv("SET_TRANSPORT_THREADS", "3")
        assert cli._resolve_threads(None) == 3

    def test_env_must_be_integer(self, monkeypatch):
        monkeypatch.setenv("SET_TRANSPORT_THREADS", "many")
        with pytest.raises(config.ConfigError):
            cli._resolve_threads(None)

    def test_env_error_becomes_exit_2(self, monkeypatch, tmp_path, capsys):
        monkeypatch.setenv("SET_TRANSPORT_THREADS", "many")
        code = cli.main(["verify", "--out", str(tmp_path)])
        assert code == 2
        assert "config error" in capsys.readouterr().err


class TestVerifyCommand:
    def test_filter_without_match_is_usage_error(self, tmp_path, capsys):
        code = cli.main(["verify", "--filter", "zzz", "--out", str(tmp_path)])
        assert code == 2
        assert "no suite matches" in capsys.readouterr().err

    def test_single_suite_passes_and_reports(self, tmp_path, capsys):
        code = cli.main(["verify", "--filter", "ky", "--threads", "1",
                         "--out", str(tmp_path)])
        captured = capsys.readouterr().out
        assert code == 0
        assert "PASS ky-identity" in captured
        assert "feasibility" not in captured
        report = json.loads((tmp_path / "verify_report.json").read_text())
        assert report["filter"] == "ky"
        assert [s["name"] for s in report["suites"]] == ["ky-identity"]
        assert (tmp_path / "effective_config.json").exists()

    def test_broken_solver_is_caught(self, tmp_path, capsys, monkeypatch):
        # corrupt the factored coupling: the suite must notice, not pass
        original = sk.transport_factored
        monkeypatch.setattr(sk, "transport_factored",
                            lambda a, b: 1.001 * original(a, b))
        code = cli.main(["verify", "--filter", "factored",
                         "--out", str(tmp_path)])
        assert code == 1
        assert "FAIL factored-coupling" in capsys.readouterr().out

    def test_seed_override_lands_in_effective_config(self, tmp_path):
        cli.main(["verify", "--filter", "ky", "--seed", "7",
                  "--out", str(tmp_path)])
        eff = json.loads((tmp_path / "effective_config.json").read_text())
        assert eff["seed"] == 7


class TestTrainCommand:
    def test_end_to_end_artifacts(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TINY)
        out = tmp_path / "run"
        code = cli.main(["train", "--config", cfg, "--out", str(out)])
        assert code == 0
        stdout = capsys.readouterr().out
        summary = json.loads(stdout.splitlines()[0])
        assert summary["steps"] == 4
        metrics = (out / "metrics.csv").read_text()
        assert metrics.startswith("step,epoch,split,loss,accuracy,lr,seconds")
        assert (out / "checkpoint.bin").exists()
        assert (out / "effective_config.json").exists()

    def test_rerun_metrics_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, TINY)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["train", "--config", cfg, "--out", str(out_a)]) == 0
        assert cli.main(["train", "--config", cfg, "--out", str(out_b)]) == 0
        assert (out_a / "metrics.csv").read_bytes() == \
            (out_b / "metrics.csv").read_bytes()

    def test_bad_config_is_exit_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"model": {"heads": 7}})
        code = cli.main(["train", "--config", cfg, "--out",
                         str(tmp_path / "x")])
        assert code == 2
        assert "config error" in capsys.readouterr().err

    @pytest.mark.parametrize("m", [100, 500, 750, 1000])
    def test_reference_sweep_runs_end_to_end(self, tmp_path, m):
        payload = json.loads(json.dumps(TINY))
        payload["model"]["m"] = m
        payload["train"]["steps"] = 2
        payload["train"]["eval_every"] = 2
        cfg = write_config(tmp_path, payload, name=f"m{m}.json")
        out = tmp_path / f"run{m}"
        assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "checkpoint.bin").exists()


class TestExportCommand:
    def train_tiny(self, tmp_path, extra=None):
        payload = json.loads(json.dumps(TINY))
        if extra:
            for key, sub in extra.items():
                payload.setdefault(key, {}).update(sub)
        cfg = write_config(tmp_path, payload, name="export_cfg.json")
        out = tmp_path / "trained"
        assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
        return cfg, str(out / "checkpoint.bin")

    def test_plan_export_roundtrip(self, tmp_path, capsys):
        cfg, ckpt = self.train_tiny(tmp_path)
        out = tmp_path / "export"
        code = cli.main(["export-attention", "--config", cfg,
                         "--checkpoint", ckpt, "--out", str(out)])
        assert code == 0
        lines = (out / "plan_layer0.csv").read_text().strip().split("\n")
        assert lines[0] == "i,j,value"
        assert len(lines) == 1 + 8 * 4
        first = lines[1].split(",")
        assert first[0] == "1" and first[1] == "1"  # 1-based indices
        values = np.array([float(l.split(",")[2]) for l in lines[1:]])
        plan = values.reshape(8, 4)
        assert plan.min() >= 0
        assert np.allclose(plan.sum(axis=1), 1 / 8, atol=1e-6)
        marg = (out / "marginals_layer0.csv").read_text().strip().split("\n")
        assert marg[0] == "axis,index,value"
        assert len(marg) == 1 + 8 + 4

    def test_layer_out_of_range(self, tmp_path, capsys):
        cfg, ckpt = self.train_tiny(tmp_path)
        code = cli.main(["export-attention", "--config", cfg,
                         "--checkpoint", ckpt, "--layer", "9",
                         "--out", str(tmp_path / "e2")])
        assert code == 2
        assert "out of range" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TINY)
        code = cli.main(["export-attention", "--config", cfg,
                         "--checkpoint", str(tmp_path / "nope.bin"),
                         "--out", str(tmp_path / "e3")])
        assert code == 2

    def test_dpsa_model_has_no_plans(self, tmp_path, capsys):
        cfg, ckpt = self.train_tiny(
            tmp_path, extra={"model": {"attention": "dpsa"}})
        code = cli.main(["export-attention", "--config", cfg,
                         "--checkpoint", ckpt,
                         "--out", str(tmp_path / "e4")])
        assert code == 2
        assert "no transport-attention" in capsys.readouterr().err

    def test_single_token_single_reference_plan(self, tmp_path):
        payload = json.loads(json.dumps(TINY))
        payload["model"].update({"seq_len": 8, "m": 1})
        cfg = write_config(tmp_path, payload, name="m1.json")
        out = tmp_path / "m1run"
        assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
        exp = tmp_path / "m1exp"
        assert cli.main(["export-attention", "--config", cfg,
                         "--checkpoint", str(out / "checkpoint.bin"),
                         "--out", str(exp)]) == 0
        lines = (exp / "plan_layer0.csv").read_text().strip().split("\n")
        # single reference: every token sends its full 1/n mass to it
        values = [float(l.split(",")[2]) for l in lines[1:]]
        assert values == pytest.approx([1 / 8] * 8, abs=1e-12)


class TestBenchCommand:
    def test_tiny_bench_writes_csv(self, tmp_path):
        payload = {"bench": {"n": [8, 16], "m": 4, "d": 8, "k": 4,
                             "reps": 2, "iterations": 3}}
        cfg = write_config(tmp_path, payload, name="bench.json")
        out = tmp_path / "bench"
        code = cli.main(["bench", "--config", cfg, "--out", str(out)])
        assert code == 0
        lines = (out / "bench.csv").read_text().strip().split("\n")
        assert lines[0] == ("mechanism,n,m,d,reps,median_seconds,mads,"
                            "multiply_adds")
        assert len(lines) == 5  # two mechanisms at two sizes
        info = json.loads((out / "bench_info.json").read_text())
        assert "numpy" in info
