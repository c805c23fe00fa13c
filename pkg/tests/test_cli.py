import csv
import json
import time

import pytest

from cldistill import experiment
from cldistill.cli import main


@pytest.fixture(autouse=True)
def _cache(tmp_path, monkeypatch):
    monkeypatch.setenv("CLDISTILL_CACHE", str(tmp_path / "cache"))


def _config(tmp_path, **doc):
    doc.setdefault("scenario", "tiny")
    path = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*')))}.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def _rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_tiny_ft_run(tmp_path):
    cfg = _config(tmp_path, method="ft", seeds=[0])
    start = time.perf_counter()
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    assert time.perf_counter() - start < 60
    rows = _rows(tmp_path / "out" / "results.csv")
    assert rows and {r["method"] for r in rows} == {"ft"}
    manifest = json.loads((tmp_path / "out" / "MANIFEST").read_text())
    assert manifest["status"] == "complete"
    assert (tmp_path / "out" / "runs" / "000" / "checkpoint_t1.ckpt").exists()


def test_existing_output_needs_overwrite(tmp_path):
    cfg = _config(tmp_path, method="ft")
    out = str(tmp_path / "out")
    assert main(["run", "--config", cfg, "--out", out]) == 0
    assert main(["run", "--config", cfg, "--out", out]) == 2
    assert main(["run", "--config", cfg, "--out", out, "--overwrite"]) == 0


@pytest.mark.parametrize(
    "doc",
    [
        {"method": "icarl"},
        {"method": "ft", "colour": 1},
        {"method": "ft", "seeds": []},
        {"method": "ft", "scenario": "nope"},
        {"method": "ft", "train": {"weights": {"beta": -1}}},
    ],
)
def test_invalid_config_exit_2(tmp_path, doc):
    assert main(["run", "--config", _config(tmp_path, **doc), "--out", str(tmp_path / "o")]) == 2


def test_runtime_failure_exit_1_keeps_partial_results(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = experiment.run_sequence

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("boom")
        return real(*a, **k)

    monkeypatch.setattr(experiment, "run_sequence", flaky)
    cfg = _config(tmp_path, methods=["ft", "wa"])
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out), "--no-cache"]) == 1
    manifest = json.loads((out / "MANIFEST").read_text())
    assert manifest["status"] == "incomplete" and "boom" in manifest["error"]
    assert [r["done"] for r in manifest["runs"]] == [True, False]
    assert {r["method"] for r in _rows(out / "results.csv")} == {"ft"}


def test_toggle_flag_matches_ablation_row(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", _config(tmp_path, method="full"), "--out", str(a), "--no-rp"]) == 0
    assert main(["run", "--config", _config(tmp_path, ablation=True), "--out", str(b)]) == 0
    flag_rows = _rows(a / "results.csv")
    abl = [r for r in _rows(b / "results.csv") if r["run"] == "SH+WA"]
    strip = lambda rows: [{k: v for k, v in r.items() if k not in ("method", "run")} for r in rows]
    assert strip(flag_rows) == strip(abl)


def test_identical_runs_give_identical_csv(tmp_path):
    cfg = _config(tmp_path, methods=["ft", "full"], seeds=[0, 1])
    main(["run", "--config", cfg, "--out", str(tmp_path / "a"), "--no-cache"])
    main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--no-cache", "--jobs", "2"])
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_cache_hit_reuses_runs(tmp_path, monkeypatch):
    cfg = _config(tmp_path, methods=["ft", "full"])
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0

    def fail(*a, **k):
        raise AssertionError("should have been served from the cache")

    monkeypatch.setattr(experiment, "run_sequence", fail)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_grid_cap(tmp_path):
    temps = [[20 + i, 10] for i in range(30)]
    cfg = _config(tmp_path, method="full", seeds=list(range(9)), grid={"temps": temps})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_compare(tmp_path, capsys):
    assert main(["compare", "--config", _config(tmp_path, method="ft")]) == 2
    cfg = _config(tmp_path, methods=["ft", "full"], seeds=[0, 1])
    assert main(["compare", "--config", cfg, "--out", str(tmp_path / "cmp")]) == 0
    table = capsys.readouterr().out
    for g in ("old_no", "overlap", "new_no"):
        assert f"| ft | {g} |" in table and f"| full | {g} |" in table
    assert (tmp_path / "cmp" / "plot_data.csv").exists()


def test_compare_rejects_mixed_scenarios(tmp_path):
    cfg = _config(tmp_path, methods=[{"method": "ft"}, {"method": "full", "scenario": "paper-mirror"}])
    assert main(["compare", "--config", cfg]) == 2


def test_report_formats(tmp_path):
    out = tmp_path / "out"
    cfg = _config(tmp_path, methods=["ft", "full"], seeds=[0, 1])
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0

    assert main(["report", str(out), "--format", "md"]) == 0
    lines = [l for l in (out / "report.md").read_text().splitlines() if l.startswith("| ft") or l.startswith("| full")]
    assert len(lines) == 2 * 4

    assert main(["report", str(out), "--format", "csv"]) == 0
    rows = _rows(out / "report.csv")
    doc = json.loads((out / "report.json").read_text())
    expect = {(r["run"], r["group"], r["metric"]): r["mean"] for r in experiment.final_group_table(doc)}
    assert {(r["run"], r["group"], r["metric"]): float(r["mean"]) for r in rows} == expect

    assert main(["report", str(out), "--format", "png-data"]) == 0
    series = {}
    for r in _rows(out / "plot_data.csv"):
        series.setdefault((r["run"], r["group"]), []).append(int(r["t"]))
    assert series and all(ts == sorted(ts) for ts in series.values())


def test_report_missing_or_corrupt(tmp_path):
    assert main(["report", str(tmp_path), "--format", "md"]) == 2
    (tmp_path / "report.json").write_text("{")
    assert main(["report", str(tmp_path), "--format", "md"]) == 2


def test_provenance_recoverable_from_rows(tmp_path):
    cfg = _config(tmp_path, method="full", grid={"temps": [[30, 10]], "weights": [[1, 2.5, 5]]})
    out = tmp_path / "o"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    row = _rows(out / "results.csv")[0]
    assert (float(row["T_op"]), float(row["T_on"])) == (30.0, 10.0)
    assert (float(row["alpha"]), float(row["beta"]), float(row["gamma"])) == (1.0, 2.5, 5.0)
    assert (row["rp"], row["sh"], row["wa"]) == ("1", "1", "1")
