import json
from pathlib import Path

import pytest

from daa.cli import main, run

DATA = Path(__file__).resolve().parents[1] / "data" / "synthetic"
INPUTS = ["--counts", str(DATA / "counts.tsv"), "--labels", str(DATA / "labels.tsv")]


def _rows(path):
    lines = path.read_text().splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, line.split("\t"))) for line in lines[1:]]


def test_bundled_assoc_example(tmp_path):
    code = run(["assoc", *INPUTS, "--method", "daa", "--norm", "tss", "--lambda-min", "0.01",
                "--permutations", "10000", "--fdr", "0.05", "--seed", "7", "--out", str(tmp_path)])
    assert code == 0
    rows = _rows(tmp_path / "assoc_daa.tsv")
    planted = {p["taxon"] for p in json.loads((DATA / "truth.json").read_text())["planted"]}
    significant = {r["taxon"] for r in rows if r["significant"] == "1"}
    assert 40 <= len(rows) <= 47  # rare taxa fall to the prevalence filter
    assert significant <= planted and len(significant) <= 6


def test_synth_example(tmp_path):
    code = main(["synth", "--preset", "table-s2-main", "--n-cases", "275", "--n-controls", "189",
                 "--seed", "1", "--out", str(tmp_path)])
    assert code == 0
    for name in ("counts.tsv", "labels.tsv", "logabundance.tsv", "truth.json", "spec.json",
                 "ground_truth.json", "manifest.json"):
        assert (tmp_path / name).is_file()
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["n_cases"] == 275 and truth["n_controls"] == 189
    assert [p["index"] for p in truth["planted"]] == [0, 10, 18, 26, 32, 44]
    header = (tmp_path / "counts.tsv").read_text().splitlines()[0].split("\t")
    assert len(header) == 1 + 464
    # the bundled data set is exactly this command's output
    for name in ("counts.tsv", "labels.tsv", "truth.json", "spec.json"):
        assert (tmp_path / name).read_bytes() == (DATA / name).read_bytes()


def test_manifest_contents(tmp_path):
    assert main(["fit", *INPUTS, "--out", str(tmp_path), "--jobs", "2"]) == 0
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["command"] == "fit" and doc["seed"] == 0
    assert len(doc["inputs"]["counts"]["sha256"]) == 64
    assert {"daa", "numpy", "scipy", "python"} <= set(doc["versions"])
    assert "jobs" not in doc["config"] and "out" not in doc["config"]
    assert doc["config"]["lambda_min"] == 0.01
    spectrum = (tmp_path / "spectrum.csv").read_text().splitlines()
    assert spectrum[0] == "index,eigenvalue,retained"
    model = json.loads((tmp_path / "model.json").read_text())
    assert len(spectrum) == 1 + len(model["taxa"])


def test_validate_subcommand(tmp_path):
    assert main(["validate", "--logabund", str(tmp_path / "missing.tsv"), "--labels",
                 str(DATA / "labels.tsv"), "--out", str(tmp_path)]) == 1
    log_dir = tmp_path / "s"
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"planted": [{"index": 1, "delta": 0.3}],
                                "n_cases": 40, "n_controls": 30}))
    assert main(["synth", "--spec", str(spec), "--dim", "8", "--out", str(log_dir)]) == 0
    assert len((log_dir / "labels.tsv").read_text().splitlines()) == 71
    assert main(["validate", "--logabund", str(log_dir / "logabundance.tsv"), "--labels",
                 str(log_dir / "labels.tsv"), "--out", str(tmp_path / "v")]) == 0
    doc = json.loads((tmp_path / "v" / "moments.json").read_text())
    assert doc["n_triples"] == 120 and doc["n_quadruples"] == 330


def test_classify_named_subsets(tmp_path):
    code = main(["classify", *INPUTS, "--features", "a=taxon_01,taxon_11", "--features",
                 "b=taxon_02", "--repeats", "2", "--penalty", "0.01", "--out", str(tmp_path)])
    assert code == 0
    summary = (tmp_path / "cv_summary.csv").read_text().splitlines()
    assert summary[0] == "subset_name,mean_accuracy,sd"
    assert [line.split(",")[0] for line in summary[1:]] == ["a", "b"]
    assert (tmp_path / "cv_a.json").is_file()


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["assoc", "--out", "x"],
    ["assoc", *INPUTS, "--out", "x", "--fdr", "1.5"],
    ["assoc", *INPUTS, "--out", "x", "--permutations", "0"],
    ["assoc", *INPUTS, "--out", "x", "--seed", "-3"],
    ["curve", *INPUTS, "--out", "x", "--sizes", "a,b"],
])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_data_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("taxon\ts1\nx\t-4\n")
    code = main(["assoc", "--counts", str(bad), "--labels", str(DATA / "labels.tsv"),
                 "--out", str(tmp_path / "o")])
    assert code == 1
    assert "negative count" in capsys.readouterr().err
    code = main(["curve", *INPUTS, "--sizes", "5000", "--out", str(tmp_path / "o")])
    assert code == 1


def test_inputs_not_modified(tmp_path):
    before = {p.name: p.read_bytes() for p in DATA.iterdir()}
    assert main(["network", *INPUTS, "--permutations", "20", "--out", str(tmp_path)]) == 0
    assert {p.name: p.read_bytes() for p in DATA.iterdir()} == before
    for kind in ("interaction", "correlation"):
        head = (tmp_path / f"network_{kind}.tsv").read_text().splitlines()[0]
        assert head == "taxon_a\ttaxon_b\tkind\tweight\tq"
