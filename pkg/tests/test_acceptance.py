"""Acceptance suite: one test per criterion, each recording a pass/fail line."""
import json
import time
import warnings
from dataclasses import replace

import numpy as np

from cldistill import model as model_io
from cldistill.cli import main
from cldistill.continual import partition_classes, weight_align
from cldistill.distill import (
    TemperaturePair,
    build_pseudo_teacher,
    fkd_loss,
    lkd_loss,
    rkd_loss,
    self_calibrate,
)
from cldistill.losses import (
    LossWeights,
    cross_entropy,
    giou,
    giou_loss,
    iou,
    l1_box,
    total_loss,
    vqla_loss,
)
from cldistill.model import CheckpointError, ToyVQLAModel, expand_classifier, freeze_snapshot
from cldistill.numerics import finite_diff_check, kl_divergence
from cldistill.taskgen import load_scenario
from cldistill.trainer import TrainConfig, batch_loss, run_sequence

import oracles

SEEDS = range(10)
TOL = 1e-4
GRID_TEMPS = [(15, 10), (20, 10), (20, 15), (25, 10), (25, 15), (25, 20), (30, 10), (30, 15), (30, 20), (30, 25)]
GRID_FACTORS = [(1, 1, 5), (1, 1, 10), (1, 5, 5), (1, 2.5, 5)]


def _boxes(rng, n):
    xy = np.sort(rng.uniform(0.05, 0.95, size=(n, 2, 2)), axis=1)
    return np.concatenate([xy[:, 0], xy[:, 1]], axis=1)


def _loss_cases(rng):
    labels = rng.integers(0, 5, size=4)
    gt = _boxes(rng, 4)
    pseudo = build_pseudo_teacher(rng.normal(size=(4, 5)))
    old_logits = rng.normal(size=(4, 5))
    F_old = rng.normal(size=(4, 3, 6))
    w = LossWeights()

    def vqla(z):
        return vqla_loss(z[:, :5], labels, z[:, 5:], gt, w)

    box_feat = rng.normal(size=(4, 1, 4))

    def total(z):
        rkd = rkd_loss(pseudo, z[:, :5], [0, 2], [1, 3, 4])
        fkd = fkd_loss(box_feat, self_calibrate(z[:, 5:].reshape(4, 1, 4)))
        return total_loss(vqla(z), rkd, fkd, t=1, w=w)

    # losses are checked on their own inputs (corner boxes); the centre-size
    # head is covered by the end-to-end check
    joint = np.concatenate([rng.normal(size=(4, 5)), _boxes(rng, 4)], axis=1)
    return {
        "cross_entropy": (lambda z: cross_entropy(z, labels), rng.normal(size=(4, 5))),
        "l1_box": (lambda z: l1_box(z, gt), _boxes(rng, 4)),
        "1-giou": (lambda z: giou_loss(z, gt), _boxes(rng, 4)),
        "rkd_loss": (lambda z: rkd_loss(pseudo, z, [0, 2], [1, 3, 4]), rng.normal(size=(4, 5))),
        "fkd_loss": (lambda z: fkd_loss(F_old, self_calibrate(z)), rng.normal(size=(4, 3, 6))),
        "lkd_loss": (lambda z: lkd_loss(old_logits, z), rng.normal(size=(4, 5))),
        "vqla_loss": (vqla, joint),
        "total_loss": (total, joint.copy()),
    }


def _end_to_end_error(seed):
    rng = np.random.default_rng(seed)
    m = ToyVQLAModel.create([0, 1, 2], d_img=4, d_h=5, vocab=7, seed=seed)
    old = freeze_snapshot(m)
    expand_classifier(m, [3])
    x, q = rng.normal(size=(3, 4)), rng.integers(0, 7, size=(3, 2))
    y, gt = np.array([0, 2, 3]), _boxes(rng, 3)
    cfg = TrainConfig.for_method("full")
    worst = 0.0
    for name in list(m.params):
        orig = m.params[name]

        def f(t):
            m.params[name] = t
            try:
                return batch_loss(m, old, x, q, y, gt, 1, cfg, ([2], [0, 1]))
            finally:
                m.params[name] = orig

        worst = max(worst, finite_diff_check(f, orig.data, h=1e-5))
    return worst


def test_criterion_1_gradients(criterion):
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in SEEDS:
        for name, (f, x) in _loss_cases(np.random.default_rng(seed)).items():
            worst[name] = max(worst.get(name, 0.0), finite_diff_check(f, x, h=1e-5))
        worst["end_to_end"] = max(worst.get("end_to_end", 0.0), _end_to_end_error(seed))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < TOL and elapsed < 30
    criterion(1, ok, f"max rel err {max(worst.values()):.2e} (< {TOL:g}), {elapsed:.1f}s (< 30s)")
    assert ok, worst


def test_criterion_2_weight_align(criterion):
    rng = np.random.default_rng(0)
    gap = cos_gap = 0.0
    argmax_ok = True
    for _ in range(100):
        n_old, n_new, d = rng.integers(1, 8), rng.integers(1, 6), rng.integers(2, 10)
        W = rng.normal(size=(n_old + n_new, d)) * rng.uniform(0.1, 5, size=(n_old + n_new, 1))
        old, new = list(range(n_old)), list(range(n_old, n_old + n_new))
        A = weight_align(W, old, new)
        norms = np.linalg.norm(A, axis=1)
        gap = max(gap, abs(norms[new].mean() - norms[old].mean()))
        cos = np.sum(A[new] * W[new], axis=1) / (norms[new] * np.linalg.norm(W[new], axis=1))
        cos_gap = max(cos_gap, float(np.max(1 - cos)))
        x = rng.normal(size=(20, d))
        argmax_ok &= bool(np.all(np.argmax(x @ A[new].T, axis=1) == np.argmax(x @ W[new].T, axis=1)))
    ok = gap < 1e-9 and cos_gap <= 1e-12 and argmax_ok
    criterion(2, ok, f"norm gap {gap:.1e}, 1-cos {cos_gap:.1e}, new-class argmax kept={argmax_ok}")
    assert ok


def test_criterion_3_pseudo_teacher(criterion):
    logits = np.random.default_rng(1).normal(size=11)
    p = build_pseudo_teacher(logits, 0.9)
    top = int(np.argmax(logits))
    ok = p[top] == 0.9 and bool(np.all(np.delete(p, top) == (1 - 0.9) / (11 - 1)))
    criterion(3, ok, f"max {float(p[top])}, others {sorted(set(np.delete(p, top).tolist()))}")
    assert ok


def test_criterion_4_rkd_oracle(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 7))
        perm = rng.permutation(n)
        k = int(rng.integers(0, n + 1))
        op, on = sorted(perm[:k].tolist()), sorted(perm[k:].tolist())
        T_op, T_on = rng.uniform(1, 30), rng.uniform(1, 30)
        pseudo = build_pseudo_teacher(rng.normal(size=n), rng.uniform(0.2, 0.95))
        logits = rng.normal(size=n) * 3
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # random pairs may have T_op <= T_on
            got = rkd_loss(pseudo, logits, op, on, TemperaturePair(T_op, T_on)).item()
        worst = max(worst, abs(got - oracles.rkd(pseudo.tolist(), logits.tolist(), op, on, T_op, T_on)))
    # one empty group: the loss is the full KL, hence non-negative
    full_ok = True
    for _ in range(20):
        n = int(rng.integers(2, 7))
        pseudo = build_pseudo_teacher(rng.normal(size=n))
        logits = rng.normal(size=n)
        got = rkd_loss(pseudo, logits, list(range(n)), [], TemperaturePair(25, 20)).item()
        ref = kl_divergence(oracles.soften(pseudo.tolist(), 25), oracles.softmax(logits.tolist(), 25))
        full_ok &= abs(got - ref) < 1e-10 and got >= 0
    ok = worst < 1e-10 and full_ok
    criterion(4, ok, f"max |rkd - oracle| {worst:.1e} over 50 cases, empty-group = full KL >= 0: {full_ok}")
    assert ok


def test_criterion_5_fkd_oracle(criterion):
    rng = np.random.default_rng(5)
    worst = 0.0
    zero_ok = True
    for _ in range(50):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=3))
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        worst = max(worst, abs(fkd_loss(a, b).item() - oracles.fkd(a.tolist(), b.tolist())))
        zero_ok &= fkd_loss(a, a).item() == 0.0 and fkd_loss(a, b).item() > 0
    ok = worst < 1e-10 and zero_ok
    criterion(5, ok, f"max |fkd - oracle| {worst:.1e}, zero iff equal: {zero_ok}")
    assert ok


def test_criterion_6_giou(criterion):
    same = giou([0.1, 0.2, 0.4, 0.9], [0.1, 0.2, 0.4, 0.9]).item()
    disjoint = giou([0, 0, 1, 1], [2, 2, 3, 3]).item()
    overlap = giou([0, 0, 2, 2], [1, 1, 3, 3]).item()
    cases_ok = abs(same - 1) < 1e-9 and abs(disjoint + 7 / 9) < 1e-9 and abs(overlap + 5 / 63) < 1e-9
    rng = np.random.default_rng(6)
    a, b = _boxes(rng, 1000), _boxes(rng, 1000)
    bound_ok = bool(np.all(giou(a, b).data <= iou(a, b).data + 1e-15))
    ok = cases_ok and bound_ok
    criterion(6, ok, f"worked cases {same:.6f}, {disjoint:.6f}, {overlap:.6f}; giou<=iou on 1000 pairs: {bound_ok}")
    assert ok


def test_criterion_7_degeneracies(criterion, tmp_path):
    spec = load_scenario("tiny")
    ft = TrainConfig.for_method("ft", seed=3)
    zero = replace(ft, rp=True, sh=True, weights=LossWeights(beta=0, gamma=0))
    run_sequence(spec, ft, out_dir=tmp_path / "ft", method="x")
    run_sequence(spec, zero, out_dir=tmp_path / "zero", method="x")
    ckpts = sorted(p.name for p in (tmp_path / "ft").glob("*.ckpt"))
    bitwise = all((tmp_path / "ft" / n).read_bytes() == (tmp_path / "zero" / n).read_bytes() for n in ckpts)
    curves = (tmp_path / "ft" / "loss_curves.json").read_bytes() == (tmp_path / "zero" / "loss_curves.json").read_bytes()

    rng = np.random.default_rng(7)
    logits, labels = rng.normal(size=(3, 4)), np.array([0, 3, 1])
    pred, gt = _boxes(rng, 3), _boxes(rng, 3)
    v = vqla_loss(logits, labels, pred, gt)
    first_branch = total_loss(v, t=0).item() == v.item()
    no_ce = vqla_loss(logits, labels, pred, gt, LossWeights(mu=0)).item() == (l1_box(pred, gt) + giou_loss(pred, gt)).item()
    ok = bitwise and curves and first_branch and no_ce
    criterion(7, ok, f"beta=gamma=0 bitwise FT: {bitwise and curves}; t=0 total==vqla: {first_branch}; mu=0 drops CE: {no_ce}")
    assert ok


def test_criterion_8_directional_forgetting(criterion):
    spec = load_scenario("paper-mirror")
    _, on, _ = partition_classes(spec.registry(), spec.total_periods - 1)
    start = time.perf_counter()
    a_hits = b_hits = 0
    lines = []
    for seed in range(5):
        ft = run_sequence(spec, TrainConfig.for_method("ft", seed=seed))
        full = run_sequence(spec, TrainConfig.for_method("full", seed=seed))
        ref = ft[0].group_accuracy(on)
        f, u = ft[-1].overall, full[-1].overall
        a_hits += f["old_no"]["acc"] < 0.5 * ref
        b_hits += (
            u["old_no"]["acc"] > f["old_no"]["acc"]
            and u["overlap"]["acc"] > f["overlap"]["acc"]
            and abs(u["new_no"]["acc"] - f["new_no"]["acc"]) <= 0.15
        )
        lines.append(
            f"seed {seed}: ref {ref:.2f} | ft {f['old_no']['acc']:.2f}/{f['overlap']['acc']:.2f}/{f['new_no']['acc']:.2f}"
            f" | full {u['old_no']['acc']:.2f}/{u['overlap']['acc']:.2f}/{u['new_no']['acc']:.2f}"
        )
    elapsed = time.perf_counter() - start
    print("\n".join(lines))
    ok = a_hits >= 4 and b_hits >= 4 and elapsed < 300
    criterion(8, ok, f"(a) FT forgets in {a_hits}/5 seeds; (b) full beats FT in {b_hits}/5 seeds; {elapsed:.0f}s")
    assert ok, "\n".join(lines)


def test_criterion_9_ablation_harness(criterion, tmp_path, monkeypatch):
    monkeypatch.setenv("CLDISTILL_CACHE", str(tmp_path / "cache"))
    abl_cfg = tmp_path / "abl.json"
    abl_cfg.write_text(json.dumps({"scenario": "tiny", "ablation": True, "seeds": [0]}))
    rc_abl = main(["run", "--config", str(abl_cfg), "--out", str(tmp_path / "abl"), "--jobs", "4"])
    doc = json.loads((tmp_path / "abl" / "report.json").read_text())
    rows = {(r["config"]["rp"], r["config"]["sh"], r["config"]["wa"]) for r in doc["runs"]}
    expected = {(a, b, c) for a in (True, False) for b in (True, False) for c in (True, False)} - {(False, False, False)}
    header = (tmp_path / "abl" / "results.csv").read_text().splitlines()[0].split(",")
    prov = all(k in header for k in ("rp", "sh", "wa", "T_op", "T_on", "alpha", "beta", "gamma", "mu", "lam"))

    grid_cfg = tmp_path / "grid.json"
    grid_cfg.write_text(json.dumps({
        "scenario": "tiny", "method": "full", "seeds": [0],
        "grid": {"temps": [list(t) for t in GRID_TEMPS], "weights": [list(w) for w in GRID_FACTORS]},
    }))
    rc_grid = main(["run", "--config", str(grid_cfg), "--out", str(tmp_path / "grid"), "--jobs", "4"])
    grid_runs = len(json.loads((tmp_path / "grid" / "report.json").read_text())["runs"])
    ok = rc_abl == 0 and rows == expected and len(doc["runs"]) == 7 and prov and rc_grid == 0 and grid_runs == 40
    criterion(9, ok, f"ablation rows {len(rows)}/7, provenance columns: {prov}, grid runs {grid_runs}/40 (exit {rc_grid})")
    assert ok


def test_criterion_10_determinism_and_persistence(criterion, tmp_path, monkeypatch):
    monkeypatch.setenv("CLDISTILL_CACHE", str(tmp_path / "cache"))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scenario": "tiny", "methods": ["ft", "full"], "seeds": [0, 1]}))
    for d in ("a", "b"):
        main(["run", "--config", str(cfg), "--out", str(tmp_path / d), "--no-cache"])
    same_csv = (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()

    ck = tmp_path / "a" / "runs" / "001" / "checkpoint_t1.ckpt"
    m = model_io.load(ck)
    resaved = model_io.save(m, tmp_path / "re.ckpt")
    round_trip = resaved.read_bytes() == ck.read_bytes()

    raw = ck.read_bytes()
    head, _, blob = raw.partition(b"\n")
    bad_versions = [raw[:-3], head + b"\n" + blob[:-8] + bytes(8), b"[" + raw[1:], head]
    errors = 0
    for i, bad in enumerate(bad_versions):
        p = tmp_path / f"bad{i}.ckpt"
        p.write_bytes(bad)
        try:
            model_io.load(p)
        except CheckpointError:
            errors += 1
    ok = same_csv and round_trip and errors == len(bad_versions)
    criterion(10, ok, f"results.csv identical: {same_csv}; checkpoint round trip bit-exact: {round_trip}; "
                      f"corruptions caught {errors}/{len(bad_versions)}")
    assert ok
