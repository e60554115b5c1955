import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from embeval import cli, store
from embeval.cli import main, parse_and_validate
from embeval.contrastive import load_head
from embeval.metrics import parse_metric_tsv
from embeval.store import load_embeddings

import workspace


@pytest.fixture
def files(tmp_path):
    inputs = tmp_path / "in"
    inputs.mkdir()
    return workspace.build(inputs)


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err if capsys is not None else ""
    return code, err


class TestParse:
    def test_no_arguments(self, capsys):
        code, err = run([], capsys)
        assert code == 2 and "usage" in err.lower()

    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"], capsys)[0] == 2

    def test_unknown_flag(self, capsys, files):
        assert run(["search", "--queries", files["queries"], "--corpus", files["corpus"], "--k", "1", "--bogus"], capsys)[0] == 2

    def test_missing_required_flag(self, capsys, files):
        code, err = run(["search", "--queries", files["queries"], "--k", "3"], capsys)
        assert code == 2 and "--corpus" in err

    def test_k_zero(self, capsys, files):
        code, err = run(["eval-retrieval", "--queries", files["queries"], "--corpus", files["corpus"],
                         "--qrels", files["qrels"], "--k", "0"], capsys)
        assert code == 4 and "--k" in err

    @pytest.mark.parametrize("flag, value", [("--k", "ten"), ("--workers", "0")])
    def test_bad_parameter(self, capsys, files, flag, value):
        argv = ["search", "--queries", files["queries"], "--corpus", files["corpus"], "--k", "2", flag, value]
        assert run(argv, capsys)[0] == 4

    def test_missing_file(self, capsys, files, tmp_path):
        code, err = run(["search", "--queries", tmp_path / "nope.emb", "--corpus", files["corpus"], "--k", "1"], capsys)
        assert code == 3 and "nope.emb" in err

    def test_retrieval_config(self, files):
        config = parse_and_validate(["eval-retrieval", "--queries", str(files["queries"]), "--corpus",
                                     str(files["corpus"]), "--qrels", str(files["qrels"]), "--k", "100"])
        assert config.subcommand == "eval-retrieval"
        assert config.params["k"] == 100
        assert config.inputs["qrels"] == files["qrels"]

    def test_config_file_and_override(self, files, tmp_path):
        cfg = workspace.write(tmp_path / "run.cfg",
                              f"# sweep\nqueries = {files['queries']}\ncorpus={files['corpus']}\nk = 7\n")
        assert parse_and_validate(["search", "--config", str(cfg)]).params["k"] == 7
        assert parse_and_validate(["search", "--config", str(cfg), "--k", "2"]).params["k"] == 2

    def test_config_file_errors(self, files, tmp_path, capsys):
        bad_key = workspace.write(tmp_path / "a.cfg", "colour = blue\n")
        assert run(["search", "--config", bad_key], capsys)[0] == 4
        bad_value = workspace.write(tmp_path / "b.cfg", "k = 0\n")
        assert run(["search", "--config", bad_value, "--queries", files["queries"], "--corpus", files["corpus"]], capsys)[0] == 4
        assert run(["search", "--config", tmp_path / "none.cfg"], capsys)[0] == 3

    def test_workers_left_out_of_invocation(self, files):
        base = ["search", "--queries", str(files["queries"]), "--corpus", str(files["corpus"]), "--k", "2"]
        assert parse_and_validate(base + ["--workers", "4"]).invocation == parse_and_validate(base).invocation


class TestWorkflows:
    def test_eval_retrieval_recall(self, files, tmp_path):
        out = tmp_path / "out"
        argv = workspace.workflow_argvs(files, out)["eval-retrieval"]
        assert main(argv) == 0
        text = (out / "recall.tsv").read_text()
        assert parse_metric_tsv(text) == {"q0": 0.5, "q1": 1.0, "q2": 0.0}
        mean_line = [line for line in text.splitlines() if line.startswith("# mean")][0]
        assert float(mean_line.split("\t")[1]) == pytest.approx(workspace.RETRIEVAL_RECALL_AT_5, abs=1e-9)
        neighbors = (out / "neighbors.tsv").read_text().splitlines()
        rows = [line.split("\t") for line in neighbors if not line.startswith("#")]
        assert [r[2] for r in rows if r[0] == "q0"] == ["d0", "d1", "d2", "d3", "d4"]

    def test_diagnose_align_zero(self, files, tmp_path):
        out = tmp_path / "out"
        assert main(workspace.workflow_argvs(files, out)["diagnose"] + ["--label", "herbert"]) == 0
        row = [line for line in (out / "diag.tsv").read_text().splitlines() if not line.startswith("#")]
        label, align, uniform = row[0].split("\t")
        assert label == "herbert" and float(align) == pytest.approx(0.0, abs=1e-6) and float(uniform) <= 0

    def test_diagnose_append(self, files, tmp_path):
        out = tmp_path / "out"
        argv = workspace.workflow_argvs(files, out)["diagnose"]
        assert main(argv + ["--label", "m1", "--recall", "0.5"]) == 0
        assert main(argv + ["--label", "m2", "--recall", "0.75", "--append"]) == 0
        rows = [line.split("\t") for line in (out / "diag.tsv").read_text().splitlines() if not line.startswith("#")]
        assert [r[0] for r in rows] == ["m1", "m2"] and rows[1][3] == "0.750000000"

    def test_eval_ranking(self, files, tmp_path):
        out = tmp_path / "out"
        assert main(workspace.workflow_argvs(files, out)["eval-ranking"]) == 0
        values = parse_metric_tsv((out / "ndcg.tsv").read_text())
        assert set(values) == {"L1", "L2"} and all(0 <= v <= 1 for v in values.values())

    def test_compare(self, files, tmp_path):
        out = tmp_path / "out"
        assert main(workspace.workflow_argvs(files, out)["compare"]) == 0
        (row,) = [line for line in (out / "significance.tsv").read_text().splitlines() if not line.startswith("#")]
        a, b, t, p = row.split("\t")
        assert (a, b) == ("run_a", "run_b")
        assert 0 < float(p) < 1 and float(t) > 0

    def test_train_head_and_apply(self, files, tmp_path):
        out = tmp_path / "out"
        assert main(workspace.workflow_argvs(files, out)["train-head"]) == 0
        head = load_head(out / "head.emb", out / "head_meta.tsv")
        assert head.bias is not None and head.d_in == 6
        projected = load_embeddings(out / "s.projected.emb")
        original = load_embeddings(files["sentences"])
        assert projected.ids == original.ids
        np.testing.assert_allclose(projected.values, head(original.values.astype(np.float64)), rtol=1e-5, atol=1e-5)
        assert "loss_history" in (out / "head_meta.tsv").read_text()

    def test_filter_nli(self, files, tmp_path):
        out = tmp_path / "out"
        assert main(workspace.workflow_argvs(files, out)["filter-nli"]) == 0
        stats = dict(line.split("\t") for line in (out / "filter_stats.tsv").read_text().splitlines() if not line.startswith("#"))
        retained = [line for line in (out / "retained.txt").read_text().splitlines() if not line.startswith("#")]
        triplets = [line for line in (out / "filtered_triplets.tsv").read_text().splitlines() if not line.startswith("#")]
        assert int(stats["input_count"]) == 32 and int(stats["output_count"]) == len(retained)
        assert [line.split("\t")[0] for line in triplets] == retained
        best = [line.split("\t") for line in (out / "best_translation.tsv").read_text().splitlines() if not line.startswith("#")]
        assert len(best) == 40

    def test_every_report_has_header(self, files, tmp_path):
        for name in workspace.workflow_argvs(files, tmp_path).keys():
            assert main(workspace.workflow_argvs(files, tmp_path / name)[name]) == 0, name
        for path in tmp_path.rglob("*"):
            if path.suffix in (".tsv", ".txt") and path.parent.name != "in":
                lines = path.read_text().splitlines()
                assert lines[0].startswith("# embeval ") and lines[1].startswith("# seed="), path


class TestDeterminism:
    @pytest.mark.parametrize("name", ["search", "eval-retrieval", "eval-ranking", "compare", "diagnose", "train-head", "filter-nli"])
    def test_byte_identical_reruns(self, files, tmp_path, name):
        first, second = tmp_path / "one", tmp_path / "two"
        argv_one = workspace.workflow_argvs(files, first)[name]
        argv_two = workspace.workflow_argvs(files, second)[name]
        assert main(argv_one) == 0 and main(argv_two) == 0
        # the out dir is part of the recorded invocation, so compare with it masked
        one = {k: v.replace(str(first).encode(), b"OUT") for k, v in workspace.snapshot(first).items()}
        two = {k: v.replace(str(second).encode(), b"OUT") for k, v in workspace.snapshot(second).items()}
        assert one == two and one

    def test_same_out_dir_twice(self, files, tmp_path):
        out = tmp_path / "out"
        argv = workspace.workflow_argvs(files, out)["train-head"]
        assert main(argv) == 0
        before = workspace.snapshot(out)
        assert main(argv) == 0
        assert workspace.snapshot(out) == before

    def test_workers_env(self, files, tmp_path, monkeypatch):
        out = {}
        for workers in ("1", str(cli.simsearch.os.cpu_count() or 4)):
            monkeypatch.setenv("EMBEVAL_WORKERS", workers)
            target = tmp_path / "same"
            assert main(workspace.workflow_argvs(files, target)["eval-retrieval"]) == 0
            out[workers] = workspace.snapshot(target)
        assert len({tuple(v.items()) for v in out.values()}) == 1


class TestFailures:
    def test_module_error_writes_nothing(self, files, tmp_path, capsys):
        out = tmp_path / "out"
        bad_qrels = workspace.write(tmp_path / "bad.tsv", "q0\tmissing_doc\n")
        code, err = run(["diagnose", "--queries", files["queries"], "--docs", files["corpus"],
                         "--qrels", bad_qrels, "--out-dir", out], capsys)
        assert code == 1 and "missing_doc" in err
        assert not out.exists() or not any(out.iterdir())

    def test_corrupt_embedding_file(self, files, tmp_path, capsys):
        broken = tmp_path / "broken.emb"
        broken.write_bytes(files["queries"].read_bytes()[:-3])
        code, err = run(["search", "--queries", broken, "--corpus", files["corpus"], "--k", "1",
                         "--out-dir", tmp_path / "out"], capsys)
        assert code == 1 and "broken.emb" in err

    def test_failure_midway_leaves_no_partial_reports(self, files, tmp_path, monkeypatch):
        out = tmp_path / "out"
        argv = workspace.workflow_argvs(files, out)["eval-retrieval"]
        assert main(argv) == 0
        before = workspace.snapshot(out)
        (out / "recall.tsv").unlink()
        before.pop("recall.tsv")
        real_replace = store.os.replace
        installs = []

        def flaky(src, dst):
            # fail on the second report being moved into place
            if not Path(dst).name.startswith("."):
                installs.append(dst)
                if len(installs) == 2:
                    raise OSError("disk full")
            return real_replace(src, dst)

        monkeypatch.setattr(store.os, "replace", flaky)
        assert main(argv + ["--k", "3"]) == 1
        assert len(installs) >= 2  # later entries are the rollback restoring old files
        # the old neighbors.tsv is back, no new recall.tsv, no temp files
        assert workspace.snapshot(out) == before

    def test_empty_filter_result_still_succeeds(self, files, tmp_path):
        out = tmp_path / "out"
        assert main(["filter-nli", "--scores", str(files["scores"]), "--threshold", "5", "--out-dir", str(out)]) == 0
        stats = (out / "filter_stats.tsv").read_text()
        assert "output_count\t0\n" in stats and "removed_fraction\t1\n" in stats


def test_module_entry_point(files, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "embeval"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr.lower()
    out = tmp_path / "out"
    proc = subprocess.run([sys.executable, "-m", "embeval", *workspace.workflow_argvs(files, out)["search"]],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (out / "neighbors.tsv").exists()
