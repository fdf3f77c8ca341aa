import csv
import json
import subprocess
import sys

import pytest

from lrbp.cli import EXIT_DATA, EXIT_FORMAT, EXIT_MISSING, EXIT_USAGE, parse_range
from lrbp.cli import main as cli_main


def main(argv):
    return cli_main([str(a) for a in argv])


def run(*argv):
    return subprocess.run([sys.executable, "-m", "lrbp.cli", *map(str, argv)], capture_output=True, text=True)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--classes", "3", "--per-class", "80", "--h", "3", "--w", "3", "--c", "8", "--out", d / "d.bin"]) == 0
    assert main(["train", "--data", d / "d.bin", "--model", "full", "--epochs", "5", "--lr", "1e-2", "--out", d / "full.bin"]) == 0
    return d


def test_defaults_end_to_end(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d.bin")]) == 0
    capsys.readouterr()
    code = main(
        ["train", "--data", str(tmp_path / "d.bin"), "--model", "lowrank", "--rank", "8",
         "--out", str(tmp_path / "m.bin"), "--report", str(tmp_path / "r.csv")]
    )
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["accuracy"] >= 0.95
    rows = read_csv(tmp_path / "r.csv")
    assert len(rows) == 30 and {"epoch", "objective", "test_accuracy"} <= set(rows[0])


def test_eval_metrics_schema(workdir):
    out = workdir / "metrics.json"
    assert main(["eval", "--data", workdir / "d.bin", "--model", workdir / "full.bin", "--out", out]) == 0
    metrics = json.loads(out.read_text())
    assert {"accuracy", "per_class", "confusion"} <= set(metrics)
    assert len(metrics["per_class"]) == 3
    assert sum(map(sum, metrics["confusion"])) == 120
    assert metrics["normalization"] == "pooled"


def test_truncate_full_rank_is_lossless(workdir):
    assert main(["truncate", "--model", workdir / "full.bin", "--rank", "8", "--out", workdir / "t.bin"]) == 0
    accs = []
    for name in ("full.bin", "t.bin"):
        out = workdir / f"{name}.metrics.json"
        assert main(["eval", "--data", workdir / "d.bin", "--model", workdir / name, "--out", out]) == 0
        accs.append(json.loads(out.read_text())["accuracy"])
    assert accs[0] == accs[1]


def test_codecompose_and_eval(workdir):
    assert main(["truncate", "--model", workdir / "full.bin", "--rank", "4", "--out", workdir / "l.bin"]) == 0
    assert main(["codecompose", "--model", workdir / "l.bin", "--m", "4", "--out", workdir / "cd.bin"]) == 0
    assert json.loads((workdir / "cd.bin.json").read_text())["normalization"] == "pooled"
    out = workdir / "cd.json"
    assert main(["eval", "--data", workdir / "d.bin", "--model", workdir / "cd.bin", "--out", out]) == 0
    assert 0.0 <= json.loads(out.read_text())["accuracy"] <= 1.0


def test_spectrum_schema(workdir):
    out = workdir / "spec.csv"
    assert main(["spectrum", "--model", workdir / "full.bin", "--out", out]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["rank_index", "mean_eig", "std_eig"] and len(rows) == 8


def test_sweep_schema(workdir):
    out = workdir / "sweep.csv"
    code = main(["sweep", "--data", workdir / "d.bin", "--full-model", workdir / "full.bin",
                 "--ranks", "2,4", "--ms", "2,4,16", "--out", out])
    assert code == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["m", "r", "accuracy", "psnr_db", "param_bytes"] and len(rows) == 6
    assert [r["accuracy"] for r in rows if r["m"] == "16"] == ["nan", "nan"]


def test_bench_rows(tmp_path, capsys):
    out = tmp_path / "b.csv"
    code = main(["bench", "--grid", "c=16..32", "hw=4..16", "--reps", "5", "--K", "4", "--m", "8", "--r", "2",
                 "--d", "32", "--out", str(out)])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["skipped"] == [{"method": "tensor_sketch", "reason": "analytic-only"}]
    assert {row["method"] for row in summary["analytic"]} >= {"tensor_sketch"}
    rows = read_csv(out)
    assert list(rows[0])[:11] == ["method", "h", "w", "c", "K", "m", "r", "d", "feature_ms", "classify_ms", "reps"]
    # star grid: c in {16, 32} at hw=16, hw in {4, 16} at c=32 -> 3 shapes per method
    assert len(rows) == 4 * 3
    assert all(r["feature_ms"] not in ("", "nan") and r["classify_ms"] not in ("", "nan") for r in rows)


@pytest.mark.parametrize(
    "text, expect",
    [
        ("c=64..1024", ("c", [64, 128, 256, 512, 1024])),
        ("hw=49..3136", ("hw", [49, 196, 784, 3136])),
        ("hw=10..40", ("hw", [10, 20, 40])),
        ("c=8..64:4", ("c", [8, 32])),
        ("c=3,5,7", ("c", [3, 5, 7])),
    ],
)
def test_parse_range(text, expect):
    assert parse_range(text) == expect


def test_help_documents_exit_codes():
    res = run("--help")
    assert res.returncode == 0
    for text in ("2 usage", "3 missing file", "4 format", "5 invalid data"):
        assert text in res.stdout


def _error(res):
    lines = res.stderr.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_unknown_flag(tmp_path):
    res = run("synth", "--bogus", "--out", tmp_path / "x")
    assert res.returncode == EXIT_USAGE and _error(res)["error"] == "usage"


def test_missing_file(tmp_path):
    res = run("eval", "--data", tmp_path / "nope.bin", "--model", tmp_path / "m.bin")
    assert res.returncode == EXIT_MISSING and _error(res)["error"] == "missing_file"


def test_schema_mismatch(workdir):
    res = run("eval", "--data", workdir / "d.bin", "--model", workdir / "d.bin")
    assert res.returncode == EXIT_FORMAT and _error(res)["error"] == "format"
    res = run("codecompose", "--model", workdir / "full.bin", "--m", "2", "--out", workdir / "x.bin")
    assert res.returncode == EXIT_FORMAT


def test_invalid_data(workdir):
    res = run("truncate", "--model", workdir / "full.bin", "--rank", "99", "--out", workdir / "x.bin")
    assert res.returncode == EXIT_DATA and _error(res)["error"] == "data"


def test_codes_distinct():
    assert len({EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT, EXIT_DATA}) == 4
