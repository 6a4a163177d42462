import json

import numpy as np
import pytest
from skipgate.checkpoint import load_checkpoint
from skipgate.cli import main
from skipgate.config import (
    RunConfig,
    dump_run_config,
    load_run_config,
    run_config_from_dict,
    run_config_to_dict,
)
from skipgate.errors import ConfigError


def small_run_config() -> dict:
    return {
        "model": {
            "vocab_size": 256, "d_model": 32, "n_layers": 4, "n_heads": 4,
            "head_dim": 8, "mlp_hidden": 64, "max_seq_len": 64,
        },
        "plan": {"target": "attention", "granularity": "sequence"},
        "pretrain": {"steps": 30, "batch_size": 4, "seq_len": 32},
        "train": {"steps": 25, "batch_size": 4, "seq_len": 32, "max_windows": 400},
        "eval": {"batch_size": 8},
        "bench": {"batch": 1, "seq_len": 16, "gen_len": 4, "repeats": 1},
        "seed": 3,
    }


class TestRunConfig:
    def test_round_trip(self):
        cfg = run_config_from_dict(small_run_config())
        assert run_config_from_dict(run_config_to_dict(cfg)) == cfg

    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert run_config_from_dict(run_config_to_dict(cfg)) == cfg

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown config key: bogus"):
            run_config_from_dict({"bogus": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="unknown config key: train.bogus"):
            run_config_from_dict({"train": {"bogus": 1}})

    def test_file_round_trip(self, tmp_path):
        cfg = run_config_from_dict(small_run_config())
        path = tmp_path / "cfg.json"
        dump_run_config(cfg, path)
        assert load_run_config(path) == cfg

    def test_moe_section(self):
        cfg = run_config_from_dict(
            {"model": {"d_model": 32, "n_heads": 4, "head_dim": 8,
                       "moe": {"n_experts": 4, "top_k": 2}}}
        )
        assert cfg.model.moe.top_k == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """init -> pretrain -> attach-routers -> train-router, small config."""
    out = tmp_path_factory.mktemp("pipeline")
    cfg_path = out / "cfg.json"
    cfg_path.write_text(json.dumps(small_run_config()))
    c = str(cfg_path)
    o = str(out)
    assert main(["init", "--config", c, "--out", o, "--write-corpus", "60000"]) == 0
    corpus = str(out / "corpus.txt")
    assert main(["pretrain", "--config", c, "--out", o, "--corpus", corpus,
                 "--checkpoint", str(out / "model.ckpt")]) == 0
    assert main(["attach-routers", "--config", c, "--out", o,
                 "--checkpoint", str(out / "pretrained.ckpt")]) == 0
    assert main(["train-router", "--config", c, "--out", o, "--corpus", corpus,
                 "--checkpoint", str(out / "routed.ckpt")]) == 0
    return out, c, corpus


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        out, _, _ = pipeline
        for name in (
            "model.ckpt", "pretrained.ckpt", "routed.ckpt", "trained.ckpt",
            "corpus.txt", "pretrain_log.jsonl", "train_log.jsonl",
            "resolved_config.init.json", "resolved_config.pretrain.json",
            "resolved_config.attach-routers.json", "resolved_config.train-router.json",
        ):
            assert (out / name).exists(), name

    def test_attach_used_default_plan(self, pipeline):
        out, _, _ = pipeline
        bundle = load_checkpoint(out / "routed.ckpt")
        assert bundle.plan.layers() == [2]  # deepest half of 4 layers minus last
        assert bundle.plan.tau == 0.5
        assert all(
            np.array_equal(r.W.data, np.zeros_like(r.W.data))
            for r in bundle.routers.values()
        )

    def test_train_log_is_jsonl(self, pipeline):
        out, _, _ = pipeline
        lines = (out / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 25
        entry = json.loads(lines[0])
        assert {"step", "task_loss", "mod_loss", "capacity"} <= set(entry)

    def test_eval_and_trace_and_bench(self, pipeline, capsys):
        out, c, corpus = pipeline
        assert main(["eval", "--config", c, "--out", str(out), "--corpus", corpus,
                     "--checkpoint", str(out / "trained.ckpt")]) == 0
        report = json.loads((out / "eval_report.json").read_text())
        assert report["ppl"] > 0 and report["capacity"] is not None
        assert main(["trace", "--config", c, "--out", str(out), "--corpus", corpus,
                     "--checkpoint", str(out / "trained.ckpt"), "--csv"]) == 0
        assert (out / "trace.jsonl").exists() and (out / "trace.csv").exists()
        summary = json.loads((out / "trace_summary.json").read_text())
        assert all(0.0 <= v <= 1.0 for v in summary["keep_fraction"].values())
        assert main(["bench", "--config", c, "--out", str(out),
                     "--checkpoint", str(out / "trained.ckpt"), "--csv"]) == 0
        cost = json.loads((out / "cost_report.json").read_text())
        assert cost["dense"]["flops_total"] > 0
        assert (out / "cost_report.csv").exists()

    def test_drop_baseline_with_comparison(self, pipeline):
        out, c, corpus = pipeline
        assert main(["drop-baseline", "--config", c, "--out", str(out),
                     "--corpus", corpus, "--checkpoint", str(out / "trained.ckpt"),
                     "--drop-count", "0"]) == 0
        report = json.loads((out / "drop_report.json").read_text())
        assert report["plan"]["dropped"] == []
        assert "equal_compute" in report

    def test_lambda_zero_eval_matches_dense(self, pipeline, tmp_path):
        out, c, corpus = pipeline
        o2 = str(tmp_path)
        assert main(["train-router", "--config", c, "--out", o2, "--corpus", corpus,
                     "--checkpoint", str(out / "routed.ckpt"),
                     "--lambda", "0", "--steps", "200"]) == 0
        assert main(["eval", "--config", c, "--out", o2, "--corpus", corpus,
                     "--checkpoint", f"{o2}/trained.ckpt"]) == 0
        routed = json.load(open(f"{o2}/eval_report.json"))
        assert main(["eval", "--config", c, "--out", o2, "--corpus", corpus,
                     "--checkpoint", f"{o2}/trained.ckpt", "--dense"]) == 0
        dense = json.load(open(f"{o2}/eval_report.json"))
        assert abs(routed["ppl"] - dense["ppl"]) < 1e-6


class TestErrorCodes:
    def test_missing_checkpoint_is_3(self, tmp_path, capsys):
        code = main(["eval", "--out", str(tmp_path), "--corpus", "x.txt",
                     "--checkpoint", str(tmp_path / "missing.ckpt")])
        assert code == 3
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "CheckpointError"

    def test_malformed_config_is_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code = main(["init", "--config", str(bad), "--out", str(tmp_path)])
        assert code == 2
        assert json.loads(capsys.readouterr().err)["code"] == 2

    def test_unknown_key_is_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"bogus_field": 1}}))
        code = main(["init", "--config", str(bad), "--out", str(tmp_path)])
        assert code == 2
        assert "bogus_field" in json.loads(capsys.readouterr().err)["message"]

    def test_routerless_checkpoint_is_4(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(small_run_config()))
        main(["init", "--config", str(cfg), "--out", str(tmp_path),
              "--write-corpus", "20000"])
        code = main(["train-router", "--config", str(cfg), "--out", str(tmp_path),
                     "--corpus", str(tmp_path / "corpus.txt"),
                     "--checkpoint", str(tmp_path / "model.ckpt")])
        assert code == 4
        assert json.loads(capsys.readouterr().err)["error"] == "PlanError"

    def test_missing_corpus_is_5(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(small_run_config()))
        main(["init", "--config", str(cfg), "--out", str(tmp_path)])
        code = main(["pretrain", "--config", str(cfg), "--out", str(tmp_path),
                     "--corpus", str(tmp_path / "nope.txt"),
                     "--checkpoint", str(tmp_path / "model.ckpt")])
        assert code == 5


class TestMoECommands:
    @pytest.fixture(scope="class")
    def moe_setup(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("moe")
        cfg = small_run_config()
        cfg["model"]["moe"] = {"n_experts": 4, "top_k": 2, "expert_hidden": 32}
        cfg["train"]["steps"] = 20
        cfg_path = out / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        c, o = str(cfg_path), str(out)
        assert main(["init", "--config", c, "--out", o, "--write-corpus", "50000"]) == 0
        return out, c, str(out / "corpus.txt")

    def test_moe_train_exports_load_report(self, moe_setup):
        out, c, corpus = moe_setup
        assert main(["moe-train", "--config", c, "--out", str(out), "--corpus", corpus,
                     "--checkpoint", str(out / "model.ckpt")]) == 0
        rows = [json.loads(line)
                for line in (out / "expert_load.jsonl").read_text().splitlines()]
        assert len(rows) == 4 * 4  # layers x experts
        assert all(r["executed"] <= r["assigned"] for r in rows)
        bundle = load_checkpoint(out / "moe_trained.ckpt")
        assert bundle.expert_routers is not None

    def test_expert_drop_report(self, moe_setup):
        out, c, corpus = moe_setup
        assert main(["expert-drop", "--config", c, "--out", str(out), "--corpus", corpus,
                     "--checkpoint", str(out / "model.ckpt"),
                     "--drop-fraction", "0.25"]) == 0
        report = json.loads((out / "expert_drop_report.json").read_text())
        assert report["n_dropped"] == 4  # floor(0.25 * 16)
        assert report["dense_ppl"] > 0 and report["pruned_ppl"] > 0
        survivors = sum(len(v) for v in report["survivors"].values())
        assert survivors == 16 - 4

    def test_expert_drop_rejects_dense_model(self, moe_setup, tmp_path, capsys):
        out, c, corpus = moe_setup
        cfg = small_run_config()
        cfg_path = tmp_path / "dense.json"
        cfg_path.write_text(json.dumps(cfg))
        assert main(["init", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
        code = main(["expert-drop", "--config", str(cfg_path), "--out", str(tmp_path),
                     "--corpus", corpus, "--checkpoint", str(tmp_path / "model.ckpt")])
        assert code == 4


class TestGridFlag:
    def test_train_router_grid_writes_results_and_uses_best(self, tmp_path):
        cfg = small_run_config()
        cfg["train"]["steps"] = 4
        cfg["train"]["lr_grid"] = [1e-4, 2e-4]
        cfg["train"]["lambda_grid"] = [0.0, 0.1]
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        c, o = str(cfg_path), str(tmp_path)
        assert main(["init", "--config", c, "--out", o, "--write-corpus", "50000"]) == 0
        corpus = str(tmp_path / "corpus.txt")
        assert main(["attach-routers", "--config", c, "--out", o,
                     "--checkpoint", f"{o}/model.ckpt"]) == 0
        assert main(["train-router", "--config", c, "--out", o, "--corpus", corpus,
                     "--checkpoint", f"{o}/routed.ckpt", "--grid"]) == 0
        grid = json.loads((tmp_path / "grid_results.json").read_text())
        assert len(grid["cells"]) == 4
        assert grid["best"]["lam"] in (0.0, 0.1)
        bundle = load_checkpoint(tmp_path / "trained.ckpt")
        assert bundle.routers is not None


class TestDefaultPlanExample:
    def test_sixteen_block_model_gets_layers_8_to_14(self, tmp_path):
        cfg = {
            "model": {"vocab_size": 64, "d_model": 16, "n_layers": 16, "n_heads": 2,
                      "head_dim": 8, "mlp_hidden": 32, "max_seq_len": 32},
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert main(["init", "--config", str(path), "--out", str(tmp_path)]) == 0
        assert main(["attach-routers", "--config", str(path), "--out", str(tmp_path),
                     "--checkpoint", str(tmp_path / "model.ckpt")]) == 0
        bundle = load_checkpoint(tmp_path / "routed.ckpt")
        assert bundle.plan.layers() == [8, 9, 10, 11, 12, 13, 14]
        assert bundle.plan.tau == 0.5
