import csv
import io
import json
import socket
import subprocess
import sys
import time

import pytest

from speclab.blockmask import MaskParams, build_blockmask, render_mask
from speclab.cli import git_blob_hash, main
from speclab.config import ConfigError, RunConfig, from_dict, load_config, to_dict

TINY = {
    "corpus": {
        "n_samples": 60,
        "grammar": {"vocab_size": 32, "max_len": 24, "prompt_len": [3, 6], "response_len": [4, 10]},
    },
    "target": {
        "model": {"vocab_size": 32, "n_layers": 3, "d_model": 16, "n_heads": 2, "d_ff": 32},
        "pretrain": {"epochs": 1, "batch_size": 8, "lr": 0.01},
    },
    "draft": {"d_ff": 32, "draft_vocab": 24},
    "train": {"ttt_len": 2, "epochs": 1, "batch_size": 8, "q_len": 24, "block": 8},
    "specdec": {"configs": [[3, 1, 4], [2, 2, 3]], "max_new": 8, "n_prompts": 4},
}


def _config(tmp_path, doc=TINY):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return str(p)


def run_pipeline(root, cfg):
    """gen-corpus -> pretrain-target -> train-draft -> bench; returns the output dir."""
    out = str(root)
    assert main(["gen-corpus", "--config", cfg, "--out", out]) == 0
    corpus = str(root / "corpus.jsonl")
    assert main(["pretrain-target", "--config", cfg, "--corpus", corpus, "--out", out]) == 0
    target = str(root / "target.spfg")
    assert main(["train-draft", "--config", cfg, "--corpus", corpus, "--target", target, "--out", out]) == 0
    assert main(["bench", "--config", cfg, "--corpus", corpus, "--draft", str(root / "draft.spfg"), "--target", target, "--out", out]) == 0
    return root


class TestSmallCommands:
    def test_mask(self, capsys):
        assert main(["mask", "--qlen", "4", "--seqlen", "3", "--step", "1"]) == 0
        want = render_mask(build_blockmask(MaskParams(4, 3, 1, 4)))
        assert capsys.readouterr().out.strip() == want

    def test_mask_bad_params(self, capsys):
        assert main(["mask", "--qlen", "4", "--seqlen", "5"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_sweep(self, capsys):
        assert main(["sweep", "--alpha", "0.8", "--gamma", "4", "--cost", "0.05"]) == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert len(rows) == 1 and float(rows[0]["speedup"]) == pytest.approx(2.8013, abs=1e-4)

    def test_sweep_writes_manifest(self, tmp_path):
        assert main(["sweep", "--alpha", "0.5", "0.9", "--gamma", "1", "2", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "sweep.csv").exists()
        m = json.loads((tmp_path / "manifest.sweep.json").read_text())
        assert m["command"] == "sweep" and m["argv"][0] == "sweep"

    def test_usage_error(self):
        assert main(["mask"]) == 2
        assert main(["nope"]) == 2

    def test_missing_input_file(self, tmp_path, capsys):
        rc = main(["pretrain-target", "--corpus", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)])
        assert rc == 2 and "--corpus" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = _config(tmp_path, {"train": {"ttt_lenn": 3}})
        assert main(["gen-corpus", "--config", cfg, "--out", str(tmp_path)]) == 2
        assert "train.ttt_lenn" in capsys.readouterr().err

    def test_wrong_type(self, tmp_path, capsys):
        cfg = _config(tmp_path, {"train": {"ttt_len": "seven"}})
        assert main(["gen-corpus", "--config", cfg, "--out", str(tmp_path)]) == 2
        assert "train.ttt_len" in capsys.readouterr().err

    def test_unreadable_checkpoint_is_config_error(self, tmp_path):
        bad = tmp_path / "t.spfg"
        bad.write_bytes(b"SPFG\x01\x00\x00\x00")
        corpus = tmp_path / "c.jsonl"
        corpus.write_text('{"tokens": [1, 2, 3], "mask": [0, 1, 1]}\n')
        assert main(["train-draft", "--corpus", str(corpus), "--target", str(bad), "--out", str(tmp_path)]) == 2

    def test_runtime_error_is_one(self, tmp_path, capsys):
        doc = json.loads(json.dumps(TINY))
        doc["train"]["q_len"] = 8
        cfg = _config(tmp_path, doc)
        out = str(tmp_path)
        assert main(["gen-corpus", "--config", cfg, "--out", out]) == 0
        assert main(["pretrain-target", "--config", cfg, "--corpus", out + "/corpus.jsonl", "--out", out]) == 0
        rc = main(["train-draft", "--config", cfg, "--corpus", out + "/corpus.jsonl", "--target", out + "/target.spfg", "--out", out])
        assert rc == 1 and "q_len" in capsys.readouterr().err

    def test_gen_corpus_manifest_and_seed(self, tmp_path):
        cfg = _config(tmp_path)
        assert main(["gen-corpus", "--config", cfg, "--seed", "5", "--out", str(tmp_path)]) == 0
        m = json.loads((tmp_path / "manifest.gen-corpus.json").read_text())
        assert m["seed"] == 5 and m["config"]["train"]["seed"] == 5
        assert m["config"]["corpus"]["n_samples"] == 60

    def test_blob_hash_matches_git(self):
        assert git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


class TestConfig:
    def test_defaults_round_trip(self):
        assert from_dict(RunConfig, to_dict(RunConfig())) == RunConfig()

    def test_nested_override(self):
        cfg = from_dict(RunConfig, {"target": {"model": {"d_model": 32}}, "specdec": {"mode": "stochastic"}})
        assert cfg.target.model.d_model == 32 and cfg.specdec.mode.value == "stochastic"
        assert cfg.draft_config().d_model == 32

    def test_validation_errors_name_path(self):
        with pytest.raises(ConfigError) as e:
            from_dict(RunConfig, {"corpus": {"grammar": {"zipf": [1]}}})
        assert e.value.path == "corpus.grammar.zipf"
        with pytest.raises(ConfigError) as e:
            from_dict(RunConfig, {"train": {"ttt_len": 0}})
        assert e.value.path == "train"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "nope.json"))

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        with pytest.raises(ConfigError):
            load_config(str(p))


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestPipeline:
    def test_end_to_end(self, tmp_path):
        cfg = _config(tmp_path)
        root = run_pipeline(tmp_path, cfg)
        for name in ("corpus.jsonl", "target.spfg", "draft.spfg", "metrics.jsonl", "bench.csv"):
            assert (root / name).exists(), name
        for cmd in ("gen-corpus", "pretrain-target", "train-draft", "bench"):
            assert (root / f"manifest.{cmd}.json").exists()
        rows = list(csv.DictReader(io.StringIO((root / "bench.csv").read_text())))
        assert [r["config"] for r in rows] == ["(3,1,4)", "(2,2,3)"]
        assert all(float(r["tau"]) >= 1 for r in rows)
        m = json.loads((root / "manifest.train-draft.json").read_text())
        assert m["inputs"]["target"]["hash"] == git_blob_hash((root / "target.spfg").read_bytes())

        # the same bench against a served checkpoint
        port = _free_port()
        proc = subprocess.Popen(
            [sys.executable, "-m", "speclab", "serve", "--checkpoint", str(root / "target.spfg"), "--listen", f"127.0.0.1:{port}"],
        )
        try:
            for _ in range(100):
                try:
                    socket.create_connection(("127.0.0.1", port), timeout=1).close()
                    break
                except OSError:
                    time.sleep(0.1)
            remote = tmp_path / "remote"
            args = ["bench", "--config", cfg, "--corpus", str(root / "corpus.jsonl"), "--draft", str(root / "draft.spfg")]
            assert main(args + ["--engine", f"127.0.0.1:{port}", "--target", str(root / "target.spfg"), "--out", str(remote)]) == 0
            assert (remote / "bench.csv").read_bytes() == (root / "bench.csv").read_bytes()
        finally:
            proc.terminate()
            proc.wait(timeout=10)

    def test_regen_data(self, tmp_path):
        cfg = _config(tmp_path)
        assert main(["gen-corpus", "--config", cfg, "--out", str(tmp_path)]) == 0
        assert main(["pretrain-target", "--config", cfg, "--corpus", str(tmp_path / "corpus.jsonl"), "--out", str(tmp_path)]) == 0
        out = tmp_path / "regen"
        rc = main(["regen-data", "--config", cfg, "--corpus", str(tmp_path / "corpus.jsonl"), "--target", str(tmp_path / "target.spfg"), "--out", str(out)])
        assert rc == 0 and len((out / "corpus.jsonl").read_text().splitlines()) == 60
