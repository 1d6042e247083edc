"""Subcommand behavior: exit codes, artifacts, overrides, and determinism."""

import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from beamsight import cli
from beamsight import config as cfgmod
from beamsight import resnet as rn
from beamsight import synth
from beamsight.dataset import SplitSpec


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture()
def tiny_corpus(tmp_path):
    corpus = tmp_path / "corpus"
    cfg = synth.SynthConfig(image_size=32, seed=5)
    synth.generate_corpus(4, 4, cfg, corpus)
    return corpus


class TestExitCodes:
    def test_generate_zero_count_is_usage_error(self, tmp_path):
        assert run("generate", "--n-hazard", "0", "--out", str(tmp_path)) == cli.EXIT_USAGE

    def test_unknown_subcommand_is_usage_error(self, tmp_path):
        assert run("frobnicate") == cli.EXIT_USAGE

    def test_missing_corpus_is_data_error(self, tmp_path):
        assert run("preprocess", "--corpus", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o")) == cli.EXIT_DATA

    def test_bad_map_is_data_error(self, tmp_path):
        bad = tmp_path / "m.json"
        bad.write_text("{not json")
        assert run("stats", "--map", str(bad), "--out", str(tmp_path / "o")) == cli.EXIT_DATA

    def test_missing_checkpoint_is_data_error(self, tiny_corpus, tmp_path):
        assert run("evaluate", "--checkpoint", str(tmp_path / "none.ckpt"),
                   "--corpus", str(tiny_corpus), "--out", str(tmp_path / "o")) == cli.EXIT_DATA

    def test_selftest_exits_zero(self, tmp_path):
        assert run("selftest", "--gradient-instances", "2",
                   "--out", str(tmp_path / "o")) == cli.EXIT_OK
        report = (tmp_path / "o" / "selftest" / "selftest.txt").read_text()
        assert "gradient-check" in report and "FAIL" not in report


class TestGenerate:
    def test_writes_corpus_layout(self, tmp_path):
        corpus = tmp_path / "c"
        rc = run("generate", "--n-hazard", "3", "--n-safe", "2", "--image-size", "32",
                 "--corpus", str(corpus), "--out", str(tmp_path / "o"))
        assert rc == cli.EXIT_OK
        assert len(list((corpus / "hazard").glob("*.png"))) == 3
        assert len(list((corpus / "nonhazard").glob("*.png"))) == 2
        assert len(list((corpus / "masks").glob("*.png"))) == 5
        assert (corpus / "manifest.tsv").exists()
        assert (tmp_path / "o" / "generate" / "resolved_config.json").exists()

    def test_worker_count_does_not_change_pixels(self, tmp_path):
        rc1 = run("generate", "--n-hazard", "2", "--n-safe", "2", "--image-size", "32",
                  "--corpus", str(tmp_path / "c1"), "--out", str(tmp_path / "o1"),
                  "--workers", "1")
        rc2 = run("generate", "--n-hazard", "2", "--n-safe", "2", "--image-size", "32",
                  "--corpus", str(tmp_path / "c2"), "--out", str(tmp_path / "o2"),
                  "--workers", "2")
        assert rc1 == rc2 == cli.EXIT_OK
        for rel in sorted(p.relative_to(tmp_path / "c1")
                          for p in (tmp_path / "c1").rglob("*.png")):
            assert filecmp.cmp(tmp_path / "c1" / rel, tmp_path / "c2" / rel, shallow=False)


class TestStats:
    def test_bundled_sample_map(self, tmp_path):
        rc = run("stats", "--out", str(tmp_path))
        assert rc == cli.EXIT_OK
        out = tmp_path / "stats"
        assert (out / "summary.tsv").exists()
        assert (out / "summary.txt").exists()
        assert (out / "group_comparison.png").exists()
        text = (out / "summary.txt").read_text()
        for row in ("Mean", "SD", "df", "t", "P-val"):
            assert row in text


class TestPreprocess:
    def test_counts_json(self, tiny_corpus, tmp_path):
        rc = run("preprocess", "--corpus", str(tiny_corpus), "--out", str(tmp_path))
        assert rc == cli.EXIT_OK
        counts = json.loads((tmp_path / "preprocess" / "counts.json").read_text())
        assert counts["tiles"] == {"hazard": 16, "nonhazard": 16}
        assert counts["train"]["hazard"] + counts["val"]["hazard"] == 16

    def test_split_tsv_group_integrity(self, tiny_corpus, tmp_path):
        run("preprocess", "--corpus", str(tiny_corpus), "--out", str(tmp_path))
        rows = (tmp_path / "preprocess" / "split.tsv").read_text().strip().splitlines()[1:]
        subset_by_source = {}
        for row in rows:
            source, _tile, _label, subset = row.split("\t")
            subset_by_source.setdefault(source, set()).add(subset)
        assert all(len(v) == 1 for v in subset_by_source.values())


class TestConfigHandling:
    def test_flags_override_config_file(self, tmp_path):
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps({
            "schema_version": 1, "seed": 3,
            "synth": {"image_size": 32, "seed": 3},
            "generate": {"n_hazard": 2, "n_safe": 2},
            "paths": {"corpus_root": str(tmp_path / "c")},
        }))
        before = cfg_path.read_text()
        rc = run("generate", "--config", str(cfg_path), "--n-hazard", "1",
                 "--out", str(tmp_path / "o"))
        assert rc == cli.EXIT_OK
        assert len(list((tmp_path / "c" / "hazard").glob("*.png"))) == 1  # flag won
        assert cfg_path.read_text() == before  # original file untouched
        resolved = json.loads((tmp_path / "o" / "generate" / "resolved_config.json").read_text())
        assert resolved["generate"]["n_hazard"] == 1
        assert resolved["seed"] == 3

    def test_resolved_config_reloads(self, tmp_path):
        run("generate", "--n-hazard", "1", "--n-safe", "1", "--image-size", "32",
            "--corpus", str(tmp_path / "c"), "--out", str(tmp_path / "o"))
        resolved = tmp_path / "o" / "generate" / "resolved_config.json"
        cfg = cfgmod.load_config(resolved)
        assert cfg.generate.n_hazard == 1
        assert cfg.synth.image_size == 32

    def test_out_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cfgmod.OUT_ENV_VAR, str(tmp_path / "envout"))
        rc = run("stats")
        assert rc == cli.EXIT_OK
        assert (tmp_path / "envout" / "stats" / "summary.tsv").exists()

    def test_unknown_config_key_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"schema_version": 1, "nonsense": {}}))
        assert run("stats", "--config", str(p), "--out", str(tmp_path)) == cli.EXIT_USAGE


def _train_tiny(tmp_path, corpus):
    cfg_path = tmp_path / "train.json"
    cfg_path.write_text(json.dumps({
        "schema_version": 1, "seed": 2,
        "paths": {"corpus_root": str(corpus), "out_root": str(tmp_path / "o")},
        "model": {"input_channels": 1, "input_size": 16, "stem_channels": 4,
                  "blocks_per_stage": [1], "num_classes": 2, "dropout_p": 0.5},
        "hparams": {"batch_size": 8, "epochs": 2, "learning_rate": 0.02,
                    "momentum": 0.9, "seed": 2},
        "split": {"val_fraction": 0.25, "seed": 2},
    }))
    return run("train", "--config", str(cfg_path))


class TestTrainEvaluateAttribute:
    def test_train_then_evaluate_then_attribute(self, tiny_corpus, tmp_path):
        assert _train_tiny(tmp_path, tiny_corpus) == cli.EXIT_OK
        out = tmp_path / "o" / "train"
        assert (out / "history.tsv").exists()
        assert (out / "accuracy_curves.png").exists()
        assert (out / "best.ckpt").exists()
        assert (out / "confusion.txt").exists()
        model = rn.load_checkpoint(out / "best.ckpt")
        assert model.config.input_size == 16

        rc = run("evaluate", "--checkpoint", str(out / "best.ckpt"),
                 "--corpus", str(tiny_corpus), "--out", str(tmp_path / "o2"))
        assert rc == cli.EXIT_OK
        assert (tmp_path / "o2" / "evaluate" / "confusion.txt").exists()

        rc = run("attribute", "--checkpoint", str(out / "best.ckpt"),
                 "--corpus", str(tiny_corpus), "--out", str(tmp_path / "o3"),
                 "--steps", "8", "--limit", "2")
        assert rc == cli.EXIT_OK
        att = tmp_path / "o3" / "attribution"
        pngs = list(att.rglob("*.png"))
        sidecars = list(att.rglob("*.json"))
        assert len(pngs) == 4  # 2 per label
        assert len([s for s in sidecars if s.name != "resolved_config.json"]) == 4
        tsv = (att / "attribution.tsv").read_text().strip().splitlines()
        assert len(tsv) == 5


class TestDeterministicRerun:
    def test_stats_rerun_bit_exact(self, tmp_path):
        assert run("stats", "--out", str(tmp_path / "a"), "--workers", "1") == cli.EXIT_OK
        resolved = tmp_path / "a" / "stats" / "resolved_config.json"
        assert run("stats", "--config", str(resolved), "--out", str(tmp_path / "b"),
                   "--workers", "1") == cli.EXIT_OK
        for rel in ("summary.tsv", "summary.txt", "group_comparison.png"):
            assert (tmp_path / "a" / "stats" / rel).read_bytes() == \
                (tmp_path / "b" / "stats" / rel).read_bytes(), rel

    def test_generate_rerun_bit_exact(self, tmp_path):
        args = ["--n-hazard", "2", "--n-safe", "2", "--image-size", "32", "--workers", "1"]
        assert run("generate", *args, "--corpus", str(tmp_path / "c1"),
                   "--out", str(tmp_path / "o1")) == cli.EXIT_OK
        resolved = tmp_path / "o1" / "generate" / "resolved_config.json"
        assert run("generate", "--config", str(resolved), "--corpus", str(tmp_path / "c2"),
                   "--out", str(tmp_path / "o2"), "--workers", "1") == cli.EXIT_OK
        files1 = sorted(p.relative_to(tmp_path / "c1") for p in (tmp_path / "c1").rglob("*") if p.is_file())
        files2 = sorted(p.relative_to(tmp_path / "c2") for p in (tmp_path / "c2").rglob("*") if p.is_file())
        assert files1 == files2
        for rel in files1:
            assert (tmp_path / "c1" / rel).read_bytes() == (tmp_path / "c2" / rel).read_bytes(), rel
