"""Command-line entry point: ``mdcl <subcommand> [options]``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 when
a run fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import active, config, data, gradcheck
from .errors import ConfigError
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .train import evaluate, train_mdcl

log = logging.getLogger("mdcl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage problems map to 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def load_resolved(args) -> dict:
    try:
        raw = config.load_raw(args.config)
        for item in args.set or []:
            config.apply_override(raw, item)
        if getattr(args, "seed", None):
            raw["seeds"] = list(args.seed)
        base = Path(args.config).parent if args.config else Path(".")
        return config.resolve(raw, base)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def method_name(resolved) -> str:
    ablation = resolved["train"]["ablation"]
    base = "MAN" if resolved["model"]["shared_classifier"] else "ASPMTL"
    return {"baseline": base, "full": f"MDCL(+{base})",
            "inter_only": "MDCL(Inter)", "intra_only": "MDCL(Intra)"}[ablation]


def base_dataset(resolved) -> data.MultiDomainDataset:
    """The dataset as configured, before any label seeding."""
    d = resolved["dataset"]
    if "synthetic" in d:
        return data.generate_synthetic(data.SyntheticSpec(**d["synthetic"]))
    if "csv_dir" in d:
        return data.load_dataset_dir(d["csv_dir"])
    return data.load_dataset(d["csv"])


def build_dataset(resolved, seed) -> data.MultiDomainDataset:
    ds = base_dataset(resolved)
    lf = resolved["dataset"]["label_fraction"]
    return data.seed_labels(ds, lf, seed) if lf is not None else ds


def model_config(resolved, ds, seed) -> ModelConfig:
    cfg = ModelConfig(input_dim=ds.feature_dim, num_domains=ds.num_domains,
                      num_classes=ds.num_classes, init_seed=seed, **resolved["model"])
    cfg.validate()
    return cfg


def run_dir(resolved, args, suffix="") -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(resolved["output_dir"]) / (resolved["name"] + suffix)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def fmt_acc(mean, std) -> str:
    return f"{mean:.4f} ({std:.4f})"


def _pool(jobs):
    return ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None


def _map(jobs, fn, items):
    pool = _pool(jobs)
    if pool is None:
        return [fn(*it) for it in items]
    with pool:
        futures = [pool.submit(fn, *it) for it in items]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    resolved = load_resolved(args)
    if "synthetic" not in resolved["dataset"]:
        raise ConfigError("gen-data needs a synthetic dataset section")
    spec = data.SyntheticSpec(**resolved["dataset"]["synthetic"])
    out = Path(args.out) if args.out else Path(resolved["output_dir"]) / resolved["name"] / "data"
    out.mkdir(parents=True, exist_ok=True)
    manifest = data.write_dataset(data.generate_synthetic(spec), out, spec)
    write_json(out / "resolved_config.json", resolved)
    print(f"wrote {manifest}")
    return EXIT_OK


def train_one(resolved, seed, out_dir) -> dict:
    """Train one seed and write its log, checkpoint and metrics."""
    ds = build_dataset(resolved, seed)
    model = init_model(model_config(resolved, ds, seed))
    tcfg = config.train_config(resolved, seed)
    report = train_mdcl(model, ds, tcfg)
    sdir = Path(out_dir) / f"seed_{seed}"
    sdir.mkdir(parents=True, exist_ok=True)
    report.write_log_csv(sdir / "log.csv")
    save_checkpoint(model, sdir / "checkpoint.bin")
    metrics = {"seed": seed, "test_acc": report.test_acc, "test_mean": report.test_mean,
               "best_epoch": report.best_epoch, "best_val": report.best_val,
               "epochs": len(report.epochs), "stop_reason": report.stop_reason}
    write_json(sdir / "metrics.json", metrics)
    return metrics


def cmd_train(args) -> int:
    resolved = load_resolved(args)
    out = run_dir(resolved, args)
    write_json(out / "resolved_config.json", resolved)
    t0 = time.perf_counter()
    per_seed = _map(args.jobs, train_one, [(resolved, s, out) for s in resolved["seeds"]])
    means = [m["test_mean"] for m in per_seed]
    method = method_name(resolved)
    summary = {
        "kind": "accuracy",
        "method": method,
        "dataset": resolved["dataset"]["name"],
        "label_fraction": resolved["dataset"]["label_fraction"],
        "seeds": resolved["seeds"],
        "test_means": means,
        "mean": float(np.mean(means)),
        "std": float(np.std(means)),
        "per_domain_mean": np.mean([m["test_acc"] for m in per_seed], axis=0).tolist(),
    }
    write_json(out / "metrics.json", summary)
    for m in per_seed:
        print(f"seed {m['seed']}: test mean {m['test_mean']:.4f} after {m['epochs']} epochs ({m['stop_reason']})")
    print(f"{method}\t{summary['dataset']}\t{fmt_acc(summary['mean'], summary['std'])}")
    log.info("train finished in %.1fs", time.perf_counter() - t0)
    return EXIT_OK


def cmd_eval(args) -> int:
    resolved = load_resolved(args)
    model = load_checkpoint(args.checkpoint)
    ds = build_dataset(resolved, resolved["seeds"][0])
    accs, mean = evaluate(model, ds, args.split)
    for d, a in enumerate(accs):
        print(f"domain {d}: {a:.4f}")
    print(f"mean: {mean:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    worst = gradcheck.run_suite(trials=args.trials, seed=args.seed[0] if args.seed else 0)
    for name, err in worst.items():
        print(f"{name}: max relative error {err:.3e}")
    top = max(worst.values())
    print(f"max relative error {top:.3e} over {args.trials} toy models ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK if top <= GRAD_TOL else EXIT_RUNTIME


def _al_config(resolved, args) -> active.ALConfig:
    al = active.ALConfig(**(resolved["al"] or {}))
    if args.seed:
        al = replace(al, seed=args.seed[0])
    al.validate()
    return al


def mdal_one(resolved, al_dict, r):
    al = active.ALConfig(**al_dict)
    ds = base_dataset(resolved)
    mcfg = model_config(resolved, ds, resolved["seeds"][0])
    tcfg = config.train_config(resolved)
    return active.mdal_repeat(ds, mcfg, tcfg, al, r)


def cmd_mdal(args) -> int:
    resolved = load_resolved(args)
    al = _al_config(resolved, args)
    resolved["al"] = asdict(al)
    out = run_dir(resolved, args, "-mdal")
    write_json(out / "resolved_config.json", resolved)
    reps = _map(args.jobs, mdal_one, [(resolved, resolved["al"], r) for r in range(al.repeats)])
    result = active.collect(reps)
    k = len(result.rows[0]) - 4
    active.write_results_csv(result, out / "curves.csv", k)
    method = method_name(resolved)
    row = active.summary_row(method, al.strategy, result)
    active.write_summary_csv([row], out / "summary.csv")
    write_json(out / "metrics.json", {
        "kind": "aulc",
        "method": method,
        "strategy": al.strategy,
        "dataset": resolved["dataset"]["name"],
        "label_fraction": al.final_fraction,
        "aulcs": result.aulcs,
        "mean": result.aulc_mean,
        "std": result.aulc_std,
    })
    print(f"{method}\t{al.strategy}\tAULC {row[-1]}")
    return EXIT_OK


SUMMARY_COLUMNS = ["method", "dataset", "label_fraction", "metric", "mean", "std", "report"]


def summarize_rows(run_dirs):
    """Collect rows from run directories; returns ``(rows, missing)``."""
    rows, missing = [], []
    for d in run_dirs:
        path = Path(d) / "metrics.json"
        if not path.exists():
            missing.append(str(d))
            continue
        m = json.loads(path.read_text(encoding="utf-8"))
        if m.get("kind") == "aulc":
            report = f"{m['mean']:.2f} ({m['std']:.2f})"
            method = f"{m['method']} {m['strategy']}"
        else:
            report = fmt_acc(m["mean"], m["std"])
            method = m["method"]
        frac = m.get("label_fraction")
        rows.append([method, m.get("dataset", ""), "" if frac is None else f"{frac:g}",
                     m.get("kind", "accuracy"), repr(float(m["mean"])), repr(float(m["std"])), report])
    rows.sort(key=lambda r: (r[0], r[1], float(r[2]) if r[2] else -1.0))
    return rows, missing


def cmd_summarize(args) -> int:
    rows, missing = summarize_rows(args.run_dirs)
    for d in missing:
        print(f"warning: no metrics.json in {d}, skipped", file=sys.stderr)
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p, jobs=False, out=True):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. train.learning_rate=0.003 (repeatable)")
    p.add_argument("--seed", type=int, nargs="+", help="seed list replacing the config's seeds")
    if out:
        p.add_argument("--out", help="output directory (default: <output_dir>/<name>, with a -mdal "
                                     "suffix for mdal and /data for gen-data)")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdcl", description="Multi-domain contrastive learning lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as per-domain CSVs")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model per seed")
    _common(p, jobs=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check on random toy models")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, nargs="+")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("mdal", help="multi-domain active learning experiment")
    _common(p, jobs=True)
    p.set_defaults(func=cmd_mdal)

    p = sub.add_parser("summarize", help="comparison table from run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1 or getattr(args, "trials", 1) < 1:
        print("mdcl: error: --jobs and --trials must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mdcl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a failed run
        log.debug("run failed", exc_info=True)
        print(f"mdcl: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
