from __future__ import annotations

import json

import pytest
from conftest import write_lines

from nstr.benchmark import generate_benchmark
from nstr.cli import main

FAST = "model.dim = 16\npipeline.pool_size = 20\n"


@pytest.fixture
def data(tmp_path):
    generate_benchmark(0, 200, 40, 20, out_dir=tmp_path / "raw")
    (tmp_path / "fast.txt").write_text(FAST)
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def ingest(data, run_dir):
    raw = data / "raw"
    return run("ingest", "--run-dir", run_dir, "--passages", raw / "passages.tsv",
               "--queries", raw / "train_queries.tsv", "--qrels", raw / "train_qrels.tsv",
               "--eval-queries", raw / "eval_queries.tsv", "--eval-qrels", raw / "eval_qrels.tsv")


class TestChain:
    def test_stage_by_stage(self, data, capsys):
        rd = data / "run"
        common = ("--run-dir", rd, "--config", data / "fast.txt")
        assert ingest(data, rd) == 0
        assert json.loads((rd / "ingest.json").read_text())["queries"] == 40
        for cmd in ("build-vocab", "bm25-index", "train-teacher", "gen-queries"):
            assert run(cmd, *common) == 0, cmd
        assert run("bm25-search", *common, "--k", 5) == 0
        assert len((rd / "bm25.run").read_text().splitlines()) <= 200
        assert run("mine-negatives", *common) == 0
        assert run("mine-negatives", *common, "--synthetic-pairs", "--out", "synthetic_pools.tsv") == 0
        assert run("soft-label", *common) == 0
        assert run("pretrain", *common) == 0
        assert run("finetune", *common) == 0
        assert run("eval", *common, "--checkpoint", rd / "finetune.ckpt") == 0
        assert "mrr@10" in capsys.readouterr().out
        assert run("rerank-train", *common) == 0
        assert run("rerank", *common, "--queries", rd / "eval_queries.tsv") == 0
        assert run("robustness", *common, "--checkpoint", rd / "finetune.ckpt") == 0
        assert len((rd / "robustness.csv").read_text().splitlines()) == 7
        assert run("encode-corpus", *common) == 0
        assert (rd / "embeddings.nste").read_bytes()[:4] == b"NSTE"

    def test_self_train_manifest(self, data):
        rd = data / "s"
        ingest(data, rd)
        assert run("self-train", "--run-dir", rd, "--config", data / "fast.txt") == 0
        manifest = json.loads((rd / "manifest.json").read_text())
        assert len(manifest["checkpoints"]) == 4
        for name in list(manifest["checkpoints"].values()) + list(manifest["soft_label_files"].values()):
            assert (rd / name).exists()
        assert [m["iteration"] for m in manifest["metrics"]] == [0, 1]

    def test_self_train_deterministic_and_replayable(self, data):
        dirs = [data / "a", data / "b", data / "c"]
        for rd in dirs[:2]:
            ingest(data, rd)
            assert run("self-train", "--run-dir", rd, "--config", data / "fast.txt", "--seed", 3) == 0
        ingest(data, dirs[2])
        assert run("self-train", "--run-dir", dirs[2], "--config", dirs[0] / "config.txt") == 0
        texts = [(rd / "manifest.json").read_bytes() for rd in dirs]
        assert texts[0] == texts[1] == texts[2]
        assert json.loads(texts[0])["seed"] == 3


class TestEval:
    def test_perfect_oracle(self, tmp_path, capsys):
        write_lines(tmp_path / "passages.tsv", ["1\talpha text", "2\tbeta text"])
        write_lines(tmp_path / "eval_queries.tsv", ["10\tq1\talpha", "11\tq2\tbeta"])
        write_lines(tmp_path / "eval_qrels.tsv", ["10\t0\t1\t1", "11\t0\t2\t1"])
        write_lines(tmp_path / "dense.run", ["10 Q0 1 1 2.0 x", "11 Q0 2 1 2.0 x"])
        assert run("eval", "--run-dir", tmp_path) == 0
        rows = (tmp_path / "metrics.csv").read_text().splitlines()[1:]
        assert rows and all(row.endswith(",1") for row in rows)
        assert {r.split(",")[0] for r in rows} == {"mrr", "recall", "ndcg", "answer_recall"}


class TestErrors:
    def test_clobber_refused(self, data, capsys):
        rd = data / "run"
        assert ingest(data, rd) == 0
        assert ingest(data, rd) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("nstr: error: ClobberError:")
        assert run("ingest", "--run-dir", rd, "--overwrite", "--passages", data / "raw" / "passages.tsv") == 0

    def test_missing_input(self, tmp_path, capsys):
        assert run("build-vocab", "--run-dir", tmp_path) == 1
        assert capsys.readouterr().err.startswith("nstr: error: FileNotFoundError:")

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("nope = 1\n")
        assert run("bench", "--run-dir", tmp_path, "--config", tmp_path / "c.txt") == 1
        assert "c.txt:1" in capsys.readouterr().err

    def test_bad_qrel_reference(self, tmp_path, capsys):
        write_lines(tmp_path / "p.tsv", ["1\ttext"])
        write_lines(tmp_path / "q.tsv", ["10\tquery"])
        write_lines(tmp_path / "r.tsv", ["10\t0\t99\t1"])
        assert run("ingest", "--run-dir", tmp_path / "o", "--passages", tmp_path / "p.tsv",
                   "--queries", tmp_path / "q.tsv", "--qrels", tmp_path / "r.tsv") == 1
        assert "ReferentialError" in capsys.readouterr().err

    def test_usage_errors_exit_2(self):
        with pytest.raises(SystemExit) as info:
            run("no-such-command")
        assert info.value.code == 2

    def test_bad_thread_env(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("NSTR_THREADS", "many")
        assert run("build-vocab", "--run-dir", tmp_path) == 1
        assert "NSTR_THREADS" in capsys.readouterr().err


def test_bench_small(tmp_path, capsys):
    (tmp_path / "c.txt").write_text(FAST + "bench.n_passages = 200\nbench.n_train = 40\nbench.n_eval = 20\n"
                                    "bench.n_seeds = 1\n")
    assert run("bench", "--run-dir", tmp_path, "--config", tmp_path / "c.txt") == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 4 and all(line.split()[0] in ("PASS", "FAIL") for line in out)
    summary = json.loads((tmp_path / "bench_summary.json").read_text())
    assert set(summary["checks"]) and "student" in summary["medians"]
    assert len((tmp_path / "bench.csv").read_text().splitlines()) == 2
    assert (tmp_path / "data" / "passages.tsv").exists()
