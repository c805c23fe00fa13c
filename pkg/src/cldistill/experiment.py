"""Experiment configs, run expansion, the results cache and report emission."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .distill import TemperaturePair
from .evaluate import CSV_COLUMNS, GROUPS, PeriodReport
from .losses import LossWeights
from .taskgen import ScenarioError, ScenarioSpec, load_scenario
from .trainer import METHODS, TrainConfig, run_sequence

MAX_RUNS = 256
CODE_TAG = f"cldistill-{__version__}"
PROVENANCE_COLUMNS = ["run", "scenario", "rp", "sh", "wa", "lkd", "plain_fallback",
                      "T_op", "T_on", "alpha", "beta", "gamma", "mu", "lam"]

# Ablation toggle rows: every {rp, sh, wa} combination except all-off.
ABLATION_ROWS = [
    dict(rp=rp, sh=sh, wa=wa)
    for rp, sh, wa in itertools.product([True, False], repeat=3)
    if rp or sh or wa
]

_TOP_KEYS = {"scenario", "methods", "method", "toggles", "ablation", "grid", "seeds", "train"}
_TRAIN_KEYS = {"batch_size", "lam", "lkd_T", "epochs", "lrs", "plain_fallback",
               "calibrated_heads", "calibrated_eval", "d_h", "weights", "temps"}


class ConfigError(ValueError):
    """The experiment config is malformed or asks for something unsafe."""


@dataclass
class ExperimentConfig:
    scenario: ScenarioSpec
    methods: list[str]
    seeds: list[int]
    toggles: dict[str, bool] = field(default_factory=dict)
    ablation: bool = False
    temps: list[tuple[float, float]] = field(default_factory=list)
    weights: list[tuple[float, float, float]] = field(default_factory=list)
    train: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunSpec:
    label: str
    cfg: TrainConfig

    @property
    def seed(self) -> int:
        return self.cfg.seed


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")


def parse_config(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "config")
    if "scenario" not in doc:
        raise ConfigError("config needs a 'scenario'")

    methods_raw = doc.get("methods", [doc.get("method", "full")])
    if isinstance(methods_raw, str):
        methods_raw = [methods_raw]
    methods: list[str] = []
    scenarios = []
    for m in methods_raw:
        if isinstance(m, dict):
            _check_keys(m, {"method", "scenario"}, "methods entry")
            scenarios.append(json.dumps(m.get("scenario", doc["scenario"]), sort_keys=True))
            m = m.get("method")
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {sorted(METHODS)}")
        methods.append(m)
    if len(set(scenarios)) > 1 or (scenarios and scenarios[0] != json.dumps(doc["scenario"], sort_keys=True)):
        raise ConfigError("methods refer to different scenarios")
    if not methods:
        raise ConfigError("no methods given")

    ref = doc["scenario"]
    if isinstance(ref, str) and base_dir is not None and (base_dir / ref).is_file():
        ref = base_dir / ref
    try:
        scenario = load_scenario(ref)
    except (ScenarioError, OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad scenario: {exc}") from exc

    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a nonempty list of integers")

    toggles = doc.get("toggles", {})
    _check_keys(toggles, {"rp", "sh", "wa"}, "toggles")

    grid = doc.get("grid", {})
    _check_keys(grid, {"temps", "weights"}, "grid")
    try:
        temps = [(float(a), float(b)) for a, b in grid.get("temps", [])]
        weights = [(float(a), float(b), float(g)) for a, b, g in grid.get("weights", [])]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad grid: {exc}") from exc

    train = doc.get("train", {})
    _check_keys(train, _TRAIN_KEYS, "train")
    cfg = ExperimentConfig(scenario, methods, [int(s) for s in seeds], dict(toggles),
                           bool(doc.get("ablation", False)), temps, weights, dict(train))
    base_train_config(cfg, 0)  # fail early on bad train values
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(doc, path.parent)


def base_train_config(exp: ExperimentConfig, seed: int) -> TrainConfig:
    kw = dict(exp.train)
    try:
        if "weights" in kw:
            kw["weights"] = LossWeights(**kw["weights"])
        if "temps" in kw:
            kw["temps"] = TemperaturePair(**kw["temps"])
        for k in ("epochs", "lrs"):
            if kw.get(k) is not None:
                kw[k] = tuple(kw[k])
        return TrainConfig(seed=seed, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train section: {exc}") from exc


def expand_runs(exp: ExperimentConfig) -> list[RunSpec]:
    """Every (method or toggle row) x grid cell x seed, in a fixed order."""
    rows: list[dict] = []
    if exp.ablation:
        rows = [dict(r, lkd=False) for r in ABLATION_ROWS]
    else:
        for m in exp.methods:
            rows.append({**METHODS[m], **exp.toggles})
    temps = exp.temps or [None]
    weights = exp.weights or [None]
    gridded = bool(exp.temps or exp.weights)

    runs = []
    for toggles, tp, w in itertools.product(rows, temps, weights):
        for seed in exp.seeds:
            cfg = replace(base_train_config(exp, seed), **toggles)
            if tp is not None:
                cfg = replace(cfg, temps=TemperaturePair(*tp))
            if w is not None:
                cfg = replace(cfg, weights=replace(cfg.weights, alpha=w[0], beta=w[1], gamma=w[2]))
            label = _row_label(toggles) if exp.ablation else cfg.method_id
            if gridded:
                label += (f" T={cfg.temps.T_op:g}/{cfg.temps.T_on:g}"
                          f" a={cfg.weights.alpha:g} b={cfg.weights.beta:g} g={cfg.weights.gamma:g}")
            runs.append(RunSpec(label, cfg))
    return runs


def _row_label(toggles: dict) -> str:
    return "+".join(k.upper() for k in ("rp", "sh", "wa") if toggles[k])


# -- cache ---------------------------------------------------------------------


def cache_dir() -> Path:
    env = os.environ.get("CLDISTILL_CACHE")
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "cldistill"


def run_key(scenario: ScenarioSpec, cfg: TrainConfig) -> str:
    doc = {"scenario": scenario.to_json(), "config": cfg.to_json(), "seed": cfg.seed, "code": CODE_TAG}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def execute_run(scenario: ScenarioSpec, run: RunSpec, run_dir: Path, use_cache: bool = True) -> list[dict]:
    """Run one sequence into ``run_dir`` (or copy it from the cache); returns report dicts."""
    key = run_key(scenario, run.cfg)
    cached = cache_dir() / key
    if use_cache and (cached / "reports.json").is_file():
        if run_dir.exists():
            shutil.rmtree(run_dir)
        shutil.copytree(cached, run_dir)
        reports = json.loads((run_dir / "reports.json").read_text(encoding="utf-8"))
        # the key ignores the display label, so restamp it
        for r in reports:
            r["method"] = run.label
        return reports

    run_dir.mkdir(parents=True, exist_ok=True)
    reports = [r.to_json() for r in run_sequence(scenario, run.cfg, out_dir=run_dir, method=run.label)]
    (run_dir / "reports.json").write_text(json.dumps(reports, sort_keys=True, indent=1), encoding="utf-8")
    if use_cache:
        cached.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=cached.parent))
        shutil.copytree(run_dir, tmp / "entry")
        try:
            os.replace(tmp / "entry", cached)
        except OSError:
            pass  # another worker won the race
        shutil.rmtree(tmp, ignore_errors=True)
    return reports


def _execute(args):
    return execute_run(*args)


# -- running -------------------------------------------------------------------


def run_experiment(
    exp: ExperimentConfig,
    out: Path,
    jobs: int = 1,
    force: bool = False,
    use_cache: bool = True,
) -> dict:
    """Run every cell of ``exp`` into ``out``; returns the report document."""
    runs = expand_runs(exp)
    if len(runs) > MAX_RUNS and not force:
        raise ConfigError(f"{len(runs)} runs exceeds the cap of {MAX_RUNS}; pass --force to proceed")
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "incomplete", runs, done=[])

    tasks = [(exp.scenario, r, out / "runs" / f"{i:03d}", use_cache) for i, r in enumerate(runs)]
    results: list[list[dict] | None] = [None] * len(runs)
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for i, res in enumerate(pool.map(_execute, tasks)):
                    results[i] = res
                    _write_manifest(out, "incomplete", runs, done=[j for j, r in enumerate(results) if r])
        else:
            for i, task in enumerate(tasks):
                results[i] = _execute(task)
                _write_manifest(out, "incomplete", runs, done=list(range(i + 1)))
    except Exception as exc:
        done = [(r, res) for r, res in zip(runs, results) if res is not None]
        _write_outputs(out, exp, done)
        _write_manifest(out, "incomplete", runs, done=[i for i, res in enumerate(results) if res], error=repr(exc))
        raise

    doc = _write_outputs(out, exp, list(zip(runs, results)))
    _write_manifest(out, "complete", runs, done=list(range(len(runs))))
    return doc


def _write_manifest(out: Path, status: str, runs: list[RunSpec], done: list[int], error: str | None = None):
    doc = {
        "status": status,
        "code": CODE_TAG,
        "runs": [{"index": i, "label": r.label, "seed": r.seed, "done": i in done} for i, r in enumerate(runs)],
    }
    if error:
        doc["error"] = error
    (out / "MANIFEST").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_outputs(out: Path, exp: ExperimentConfig, done) -> dict:
    doc = {
        "scenario": exp.scenario.name,
        "scenario_hash": exp.scenario.digest(),
        "code": CODE_TAG,
        "runs": [
            {"label": r.label, "seed": r.seed, "config": r.cfg.to_json(), "reports": reports}
            for r, reports in done
        ],
    }
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    (out / "results.csv").write_text(results_csv(doc), encoding="utf-8")
    return doc


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def result_rows(doc: dict) -> list[dict]:
    rows = []
    for run in doc["runs"]:
        for rep in run["reports"]:
            for row in PeriodReport.from_json(rep).rows():
                row["run"] = run["label"]
                row["scenario"] = doc["scenario"]
                rows.append(row)
    return rows


def results_csv(doc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = CSV_COLUMNS + PROVENANCE_COLUMNS
    w.writerow(cols)
    for row in result_rows(doc):
        w.writerow([_fmt(row.get(c)) for c in cols])
    return buf.getvalue()


# -- summaries -------------------------------------------------------------------


def load_report(results_dir) -> dict:
    path = Path(results_dir) / "report.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("runs"), list):
        raise ConfigError(f"{path} is not a results report")
    return doc


def final_group_table(doc: dict) -> list[dict]:
    """Final-period pooled metrics per (run label, group): mean, min and max over seeds."""
    by_label: dict[str, list[dict]] = {}
    for run in doc["runs"]:
        if run["reports"]:
            by_label.setdefault(run["label"], []).append(run["reports"][-1]["overall"])
    table = []
    for label, finals in by_label.items():
        for g in GROUPS:
            for metric in ("acc", "bal_acc", "miou"):
                vals = [f[g][metric] for f in finals if f.get(g) and f[g][metric] is not None]
                if not vals:
                    continue
                table.append({"run": label, "group": g, "metric": metric, "mean": float(np.mean(vals)),
                              "min": float(np.min(vals)), "max": float(np.max(vals)), "seeds": len(vals)})
    return table


def plot_data(doc: dict) -> list[dict]:
    """Mean pooled accuracy per (run label, group, period), ordered by period."""
    acc: dict[tuple[str, str, int], list[float]] = {}
    for run in doc["runs"]:
        for rep in run["reports"]:
            for g in GROUPS:
                m = rep["overall"].get(g)
                if m is not None:
                    acc.setdefault((run["label"], g, rep["t"]), []).append(m["acc"])
    keys = sorted(acc, key=lambda k: (k[0], GROUPS.index(k[1]), k[2]))
    return [{"run": k[0], "group": k[1], "t": k[2], "acc": float(np.mean(acc[k]))} for k in keys]


def csv_text(rows: list[dict], cols: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def markdown_table(doc: dict) -> str:
    table = [r for r in final_group_table(doc)]
    cells = {(r["run"], r["group"], r["metric"]): r for r in table}
    labels = list(dict.fromkeys(r["run"] for r in table))
    lines = [
        f"Final period, scenario `{doc['scenario']}` (mean over seeds, [min, max])",
        "",
        "| method | group | Acc | bal. Acc | mIoU |",
        "|---|---|---|---|---|",
    ]
    for label in labels:
        for g in GROUPS:
            if (label, g, "acc") not in cells:
                continue
            parts = []
            for metric in ("acc", "bal_acc", "miou"):
                c = cells.get((label, g, metric))
                parts.append(f"{c['mean']:.3f} [{c['min']:.3f}, {c['max']:.3f}]" if c else "-")
            lines.append(f"| {label} | {g} | " + " | ".join(parts) + " |")
    return "\n".join(lines) + "\n"


def emit_report(results_dir, fmt: str) -> Path:
    results_dir = Path(results_dir)
    doc = load_report(results_dir)
    if fmt == "md":
        path, text = results_dir / "report.md", markdown_table(doc)
    elif fmt == "csv":
        path, text = results_dir / "report.csv", csv_text(final_group_table(doc),
                                                        ["run", "group", "metric", "mean", "min", "max", "seeds"])
    elif fmt == "png-data":
        path, text = results_dir / "plot_data.csv", csv_text(plot_data(doc), ["run", "group", "t", "acc"])
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    path.write_text(text, encoding="utf-8")
    return path
