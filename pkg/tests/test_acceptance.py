"""Acceptance suite: one pass/fail line per criterion.

Runs under pytest (lines go straight to the terminal) or standalone with
``python3 tests/test_acceptance.py``.
"""
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mdcl import active, cli, data, gradcheck, train
from mdcl import autodiff as ad
from mdcl.losses import inter_contrastive, intra_contrastive
from mdcl.model import ModelConfig, init_model, predict_proba
from mdcl.train import TrainConfig, domain_accuracy, train_mdcl
from conftest import changed_groups, small_dataset, small_model, snapshot
from oracles import inter_loss, intra_loss, margins_sorted_select

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"

GRAD_TOL, GRAD_SECONDS = 1e-4, 60.0
ORACLE_TOL = 1e-9
ZERO_TOL = 1e-9
CONFUSION_BAND = 0.10
DIRECTION_SLACK = 0.005
TABLE_SECONDS = 600.0


@pytest.fixture
def emit(capsys):
    """Print one PASS/FAIL line past pytest's output capture."""
    def _emit(num, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num:>2}: {title} | {detail}", flush=True)
        return ok
    return _emit


def c(v):
    return ad.constant(np.asarray(v, dtype=float))


# --- 1 ---------------------------------------------------------------------------------

def test_criterion_01_gradients(emit):
    t0 = time.perf_counter()
    worst = gradcheck.run_suite(trials=100, seed=0)
    secs = time.perf_counter() - t0
    top = max(worst.values())
    parts = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    ok = top <= GRAD_TOL and secs < GRAD_SECONDS
    assert emit(1, "analytic vs finite-difference gradients, 100 toy models", ok,
                f"max rel err {top:.2e} (tol {GRAD_TOL:g}) [{parts}], {secs:.1f}s (limit {GRAD_SECONDS:g}s)")


# --- 2 ---------------------------------------------------------------------------------

def test_criterion_02_loss_oracle(emit):
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(1, 7))  # 2N <= 12
        d = int(rng.integers(2, 9))
        tau = (0.01, 0.1, 1.0)[trial % 3]
        reps = rng.normal(size=(2 * n, d))
        labels = np.tile(rng.integers(0, 3, size=n), 2)
        worst = max(worst,
                    abs(inter_contrastive(c(reps), labels, tau).item() - inter_loss(reps.tolist(), labels.tolist(), tau)),
                    abs(intra_contrastive(c(reps), tau).item() - intra_loss(reps.tolist(), tau)))
    assert emit(2, "vectorized contrastive losses vs brute-force oracle, 100 batches", worst <= ORACLE_TOL,
                f"max abs diff {worst:.2e} (tol {ORACLE_TOL:g})")


# --- 3 ---------------------------------------------------------------------------------

def test_criterion_03_zero_cases(emit):
    rng = np.random.default_rng(3)
    worst_zero, worst_eq = 0.0, 0.0
    for tau in (0.01, 0.1, 1.0):
        for _ in range(10):
            pair = c(rng.normal(size=(2, 4)))
            worst_zero = max(worst_zero, abs(inter_contrastive(pair, [1, 1], tau).item()),
                             abs(intra_contrastive(pair, tau).item()))
            n = int(rng.integers(2, 7))
            reps = c(rng.normal(size=(2 * n, 4)))
            labels = np.tile(np.arange(n), 2)
            worst_eq = max(worst_eq, abs(inter_contrastive(reps, labels, tau).item() - intra_contrastive(reps, tau).item()))
    ok = worst_zero <= ZERO_TOL and worst_eq <= ZERO_TOL
    assert emit(3, "single-pair losses vanish, distinct labels make inter equal intra", ok,
                f"max |loss| at N=1 {worst_zero:.1e}, max |inter-intra| {worst_eq:.1e} (tol {ZERO_TOL:g})")


# --- 4 ---------------------------------------------------------------------------------

def test_criterion_04_phase_isolation(monkeypatch, emit):
    touched = {"inter": set(), "adversarial": set(), "main": set()}
    snap = {}
    steps, identity_bad = 0, 0
    real = train.main_objective

    def recording(model, batches, cfg):
        nonlocal steps, identity_bad
        total, parts = real(model, batches, cfg)
        steps += 1
        identity_bad += parts["L_Fs"] != -parts["L_D_main"]
        return total, parts

    def hook(phase, when, model):
        if when == "before":
            snap["p"] = snapshot(model)
        else:
            touched[phase] |= changed_groups(model, snap["p"])

    monkeypatch.setattr(train, "main_objective", recording)
    for seed in range(3):
        ds = small_dataset(num_domains=3, seed=seed)
        cfg = TrainConfig(max_epochs=5, iters_per_epoch=2, batch_size=4, learning_rate=3e-3, seed=seed)
        train_mdcl(small_model(ds, seed=seed), ds, cfg, hook=hook)
    ok = (touched["inter"] == {"Fs"} and touched["adversarial"] == {"D"}
          and "D" not in touched["main"] and steps > 0 and identity_bad == 0)
    detail = ", ".join(f"{k} -> {sorted(v)}" for k, v in touched.items())
    assert emit(4, "phase parameter isolation and L_Fs = -L_D every step", ok,
                f"{detail}; identity violated {identity_bad}/{steps} steps")


# --- 5 ---------------------------------------------------------------------------------

def test_criterion_05_domain_confusion(emit):
    k = 4
    accs = []
    for seed in range(3):
        spec = data.SyntheticSpec(num_domains=k, dim=50, per_domain_n=400, domain_shift=0.0,
                                  domain_rotation=0.0, seed=seed)
        ds = data.seed_labels(data.generate_synthetic(spec), 0.05, seed=seed)
        model = init_model(ModelConfig(input_dim=50, num_domains=k, num_classes=2, init_seed=seed))
        cfg = TrainConfig.from_preset("mnist_usps")
        cfg.max_epochs, cfg.iters_per_epoch, cfg.seed = 30, 10, seed
        train_mdcl(model, ds, cfg)
        accs.append(domain_accuracy(model, ds, "test"))
    gap = max(abs(a - 1 / k) for a in accs)
    assert emit(5, "discriminator near chance on identical domains", gap <= CONFUSION_BAND,
                f"held-out domain acc {', '.join(f'{a:.3f}' for a in accs)} vs chance {1 / k:.2f}, "
                f"max gap {gap:.3f} (band {CONFUSION_BAND:.2f})")


# --- 6 and 7 -----------------------------------------------------------------------------

ARMS = ("baseline", "inter_only", "intra_only", "full")


@pytest.fixture(scope="module")
def ablation_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("table")
    out, secs = {}, {}
    for arm in ARMS:
        t0 = time.perf_counter()
        code = cli.main(["train", "--config", str(CONFIGS / "synthetic_k4.json"), "--out", str(root / arm),
                         "--set", f'train.ablation="{arm}"'])
        secs[arm] = time.perf_counter() - t0
        out[arm] = (code, root / arm)
    return out, secs, root


def test_criterion_06_directional(ablation_runs, emit):
    runs, secs, root = ablation_runs
    m = {a: json.loads((runs[a][1] / "metrics.json").read_text()) for a in ("baseline", "full")}
    table = root / "accuracy.csv"
    cli.main(["summarize", str(runs["baseline"][1]), str(runs["full"][1]), "--out", str(table)])
    rows = list(csv.reader(table.open()))
    reports = {r[0]: r[6] for r in rows[1:]}
    fmt_ok = all(len(r) == 7 and r[6] == f"{float(r[4]):.4f} ({float(r[5]):.4f})" for r in rows[1:])
    elapsed = secs["baseline"] + secs["full"]
    diff = m["full"]["mean"] - m["baseline"]["mean"]
    ok = (diff >= -DIRECTION_SLACK and fmt_ok and len(rows) == 3 and elapsed < TABLE_SECONDS
          and all(runs[a][0] == 0 for a in ("baseline", "full")))
    assert emit(6, "MDCL(full) >= MAN - 0.005 on synthetic K=4, 5% labels, 5 seeds", ok,
                f"{', '.join(f'{k} {v}' for k, v in sorted(reports.items()))}; diff {diff:+.4f}; "
                f"{elapsed:.0f}s (limit {TABLE_SECONDS:g}s)")


def _log_columns(run_dir, name):
    vals = []
    for log in sorted(run_dir.glob("seed_*/log.csv")):
        with open(log) as fh:
            vals += [float(r[name]) for r in csv.DictReader(fh)]
    return vals


def test_criterion_07_ablation_table(ablation_runs, emit):
    runs, _, root = ablation_runs
    table = root / "ablation.csv"
    cli.main(["summarize"] + [str(runs[a][1]) for a in ARMS] + ["--out", str(table)])
    rows = list(csv.reader(table.open()))[1:]
    full_inter, full_intra = _log_columns(runs["full"][1], "L_inter"), _log_columns(runs["full"][1], "L_intra")
    base_inter, base_intra = _log_columns(runs["baseline"][1], "L_inter"), _log_columns(runs["baseline"][1], "L_intra")
    ok = (all(runs[a][0] == 0 for a in ARMS) and len(rows) == 4
          and {r[0] for r in rows} == {"MAN", "MDCL(Inter)", "MDCL(Intra)", "MDCL(+MAN)"}
          and all(v != 0 for v in full_inter + full_intra) and all(v == 0 for v in base_inter + base_intra)
          and bool(full_inter) and bool(base_inter))
    assert emit(7, "four ablation arms complete with a 4-row table", ok,
                "; ".join(f"{r[0]} {r[6]}" for r in rows)
                + f"; full L_inter/L_intra nonzero in {sum(v != 0 for v in full_inter + full_intra)}/{len(full_inter + full_intra)}"
                + f", baseline zero in {sum(v == 0 for v in base_inter + base_intra)}/{len(base_inter + base_intra)}")


# --- 8 ---------------------------------------------------------------------------------

def test_criterion_08_bvsb_exact(emit):
    rng = np.random.default_rng(8)
    agree = 0
    for trial in range(50):
        n = int(rng.integers(20, 201))
        ds = small_dataset(num_domains=2, n=n, fraction=float(rng.uniform(0.05, 0.5)), seed=trial,
                           dim=int(rng.integers(2, 8)))
        model = small_model(ds, seed=trial)
        p = ds.pools[trial % 2]
        budget = int(rng.integers(0, len(p.unlabeled) + 1))
        budgets = [budget if d == p.domain_id else 0 for d in range(2)]
        got = active.select("bvsb", model, ds, budgets)[p.domain_id]
        probs = predict_proba(model, p.unlabeled_x(), p.domain_id).tolist()
        want = p.unlabeled[margins_sorted_select(probs, budget)]
        agree += set(got.tolist()) == set(want.tolist())
    assert emit(8, "BvSB selection equals exhaustive sort, 50 pools", agree == 50, f"{agree}/50 trials identical")


# --- 9 ---------------------------------------------------------------------------------

def test_criterion_09_aulc(tmp_path, emit):
    a = active.aulc([0.8] * 10)
    b = active.aulc([0.6, 0.8])
    res = active.MDALResult(aulcs=[82.0912, 81.0, 83.18])
    row = active.summary_row("MDCL", "bvsb", res)
    active.write_summary_csv([row], tmp_path / "s.csv")
    written = list(csv.reader((tmp_path / "s.csv").open()))
    fmt_ok = (written[0] == active.SUMMARY_HEADER and written[1][4] == f"{res.aulc_mean:.2f} ({res.aulc_std:.2f})"
              and all(len(v.split(".")[-1]) == 2 for v in written[1][2:4]))
    ok = f"{a:.2f}" == "80.00" and f"{b:.2f}" == "70.00" and math.isclose(a, 80.0) and math.isclose(b, 70.0) and fmt_ok
    assert emit(9, "AULC arithmetic and two-decimal summary layout", ok,
                f"constant 0.8 -> {a:.2f}, (0.6, 0.8) -> {b:.2f}, summary '{written[1][4]}'")


# --- 10 --------------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path, emit):
    cfg = CONFIGS / "mdal_small.json"
    tcfg = CONFIGS / "synthetic_k4.json"
    for d in ("a", "b"):
        assert cli.main(["train", "--config", str(tcfg), "--seed", "0", "1", "--out", str(tmp_path / d / "train")]) == 0
        assert cli.main(["mdal", "--config", str(cfg), "--set", "al.repeats=2", "--out", str(tmp_path / d / "mdal")]) == 0
    files = [Path("train/seed_0/log.csv"), Path("train/seed_1/log.csv"), Path("mdal/curves.csv"), Path("mdal/summary.csv")]
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    assert emit(10, "repeated train and mdal runs give byte-identical logs", all(same),
                f"{sum(same)}/{len(same)} files identical ({', '.join(str(f) for f in files)})")


# --- 11 --------------------------------------------------------------------------------

def test_criterion_11_bookkeeping(tmp_path, emit):
    rng = np.random.default_rng(11)
    violations, sequences = 0, 20
    for s in range(sequences):
        ds = small_dataset(num_domains=3, n=80, fraction=0.05, seed=s)
        totals = [p.n_train for p in ds.pools]
        for _ in range(10):
            picks = {}
            for d, p in enumerate(ds.pools):
                k = int(rng.integers(0, len(p.unlabeled) // 4 + 2))
                picks[d] = rng.choice(p.unlabeled, size=min(k, len(p.unlabeled)), replace=False)
            ds = data.acquire_labels(ds, picks)
            ds.check()
            for p, t in zip(ds.pools, totals):
                violations += bool(np.intersect1d(p.labeled, p.unlabeled).size) or len(p.labeled) + len(p.unlabeled) != t
    x = rng.normal(size=(40, 6)) * 10.0 ** rng.integers(-300, 300, size=(40, 6))
    labels = rng.integers(-1, 3, size=40)
    data.save_domain_csv(tmp_path / "d.csv", x, labels)
    back, lab = data.read_domain_csv(tmp_path / "d.csv")
    rt = back.tobytes() == x.tobytes() and np.array_equal(lab, labels)
    assert emit(11, "disjointness and conservation over 10 acquisition rounds, bit-exact CSV", violations == 0 and rt,
                f"{violations} violations over {sequences} sequences x 10 rounds; CSV round trip "
                f"{'bit-exact' if rt else 'differs'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
