"""Multi-domain active learning: margin-based selection, learning curves, AULC."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from . import data as data_mod
from .autodiff import Tensor
from .data import MultiDomainDataset
from .errors import ConfigError, SelectionError
from .model import ModelConfig, init_model, predict_proba
from .train import TrainConfig, evaluate, train_mdcl

STRATEGIES = ("bvsb", "random")


@dataclass
class ALConfig:
    strategy: str = "bvsb"
    seed_fraction: float = 0.05
    round_budget_fraction: float = 0.05
    final_fraction: float = 0.5
    per_domain_budget: bool = True
    retrain: str = "scratch"
    repeats: int = 5
    seed: int = 0

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"al.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0 < self.seed_fraction < self.final_fraction <= 1:
            raise ConfigError("need 0 < seed_fraction < final_fraction <= 1")
        if self.round_budget_fraction <= 0:
            raise ConfigError("al.round_budget_fraction must be > 0")
        if self.retrain not in ("scratch", "warm"):
            raise ConfigError("al.retrain must be 'scratch' or 'warm'")
        if self.repeats < 1:
            raise ConfigError("al.repeats must be >= 1")

    def n_points(self) -> int:
        return int(round((self.final_fraction - self.seed_fraction) / self.round_budget_fraction)) + 1

    def nominal_fraction(self, i: int) -> float:
        return min(self.final_fraction, self.seed_fraction + i * self.round_budget_fraction)


@dataclass
class LearningCurve:
    fractions: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)

    def add(self, fraction, acc):
        if self.fractions and fraction <= self.fractions[-1]:
            raise ValueError(f"fractions must increase ({fraction} after {self.fractions[-1]})")
        self.fractions.append(float(fraction))
        self.accuracies.append(float(acc))

    def __len__(self):
        return len(self.fractions)


def bvsb_scores(class_probs) -> np.ndarray:
    """Best-minus-second-best probability per row; small means uncertain."""
    p = class_probs.values if isinstance(class_probs, Tensor) else np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ConfigError(f"BvSB needs at least 2 classes, got shape {p.shape}")
    if p.shape[0] == 0:
        return np.empty(0)
    return _kernels.margins(p)


def aulc(curve) -> float:
    """100 x mean accuracy over the curve's checkpoints."""
    accs = curve.accuracies if isinstance(curve, LearningCurve) else list(curve)
    if not accs:
        raise ValueError("AULC of an empty curve")
    return 100.0 * math.fsum(accs) / len(accs)


def _split_budget(budget, k):
    base, extra = divmod(int(budget), k)
    return [base + (1 if d < extra else 0) for d in range(k)]


def select(strategy: str, model, ds: MultiDomainDataset, budget, seed=0, per_domain=True):
    """Pick unlabeled ids to annotate; returns ``{domain: ids}``.

    ``budget`` is either a total (split evenly across domains when
    ``per_domain``) or a per-domain sequence. Margin ties go to the lower
    instance id (then lower domain in global mode).
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    k = ds.num_domains
    rng = np.random.default_rng(seed)
    if np.ndim(budget) == 0 and not per_domain:
        total_unl = sum(len(p.unlabeled) for p in ds.pools)
        if budget > total_unl:
            raise SelectionError(f"budget {budget} exceeds {total_unl} unlabeled instances")
        owners = np.concatenate([np.full(len(p.unlabeled), p.domain_id) for p in ds.pools])
        ids = np.concatenate([p.unlabeled for p in ds.pools])
        if strategy == "random":
            chosen = rng.choice(len(ids), size=int(budget), replace=False)
        else:
            margins = np.concatenate([_pool_margins(model, p) for p in ds.pools])
            chosen = np.lexsort((ids, owners, margins))[:int(budget)]
        return {d: np.sort(ids[chosen][owners[chosen] == d]) for d in range(k)}

    budgets = _split_budget(budget, k) if np.ndim(budget) == 0 else [int(b) for b in budget]
    if len(budgets) != k:
        raise ConfigError(f"{len(budgets)} budgets for {k} domains")
    out = {}
    for p, b in zip(ds.pools, budgets):
        if b > len(p.unlabeled):
            raise SelectionError(f"domain {p.domain_id}: budget {b} exceeds {len(p.unlabeled)} unlabeled")
        if b == 0:
            out[p.domain_id] = np.empty(0, dtype=np.int64)
        elif strategy == "random":
            out[p.domain_id] = np.sort(rng.choice(p.unlabeled, size=b, replace=False))
        else:
            order = np.lexsort((p.unlabeled, _pool_margins(model, p)))
            out[p.domain_id] = np.sort(p.unlabeled[order[:b]])
    return out


def _pool_margins(model, pool):
    if len(pool.unlabeled) == 0:
        return np.empty(0)
    return bvsb_scores(predict_proba(model, pool.unlabeled_x(), pool.domain_id))


@dataclass
class MDALResult:
    curves: list = field(default_factory=list)
    aulcs: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    @property
    def aulc_mean(self):
        return float(np.mean(self.aulcs))

    @property
    def aulc_std(self):
        return float(np.std(self.aulcs))


def _round_budget(ds, al, i):
    f = al.nominal_fraction(i)
    if al.per_domain_budget:
        return [min(len(p.unlabeled), max(0, data_mod.n_for_fraction(f, p.n_train) - len(p.labeled)))
                for p in ds.pools]
    total = sum(p.n_train for p in ds.pools)
    have = sum(len(p.labeled) for p in ds.pools)
    unl = sum(len(p.unlabeled) for p in ds.pools)
    return min(unl, max(0, data_mod.n_for_fraction(f, total) - have))


@dataclass
class RepeatResult:
    repeat: int
    curve: LearningCurve
    aulc: float
    rows: list


def mdal_repeat(ds: MultiDomainDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                al_cfg: ALConfig, r: int, on_round=None) -> RepeatResult:
    """One repetition: seed labels, then alternate train / evaluate / select / acquire.

    Repeats are independent, so they can run in separate processes.
    ``on_round(repeat, round, ds)`` runs after each acquisition.
    """
    al_cfg.validate()
    seed_r = al_cfg.seed + r
    cur = data_mod.seed_labels(ds, al_cfg.seed_fraction, seed_r)
    conserved = [p.n_train for p in cur.pools]
    total = sum(conserved)
    curve, rows = LearningCurve(), []
    model = None
    for i in range(al_cfg.n_points()):
        if model is None or al_cfg.retrain == "scratch":
            model = init_model(replace(model_cfg, init_seed=model_cfg.init_seed + r))
        tcfg = replace(train_cfg, seed=train_cfg.seed + 1000 * r + i)
        train_mdcl(model, cur, tcfg)
        accs, mean = evaluate(model, cur, "test")
        frac = sum(len(p.labeled) for p in cur.pools) / total
        curve.add(frac, mean)
        rows.append([r, i, frac] + accs + [mean])
        if i == al_cfg.n_points() - 1:
            break
        picks = select(al_cfg.strategy, model, cur, _round_budget(cur, al_cfg, i + 1),
                       seed=[seed_r, i], per_domain=al_cfg.per_domain_budget)
        for d, ids in picks.items():
            if np.intersect1d(ids, cur.pools[d].labeled).size:
                raise SelectionError(f"domain {d}: selected an already labeled instance")
        cur = data_mod.acquire_labels(cur, picks)
        cur.check()
        if [p.n_train for p in cur.pools] != conserved:
            raise SelectionError("instance count changed during acquisition")
        if on_round:
            on_round(r, i, cur)
    return RepeatResult(r, curve, aulc(curve), rows)


def collect(repeats) -> MDALResult:
    result = MDALResult()
    for rep in sorted(repeats, key=lambda x: x.repeat):
        result.curves.append(rep.curve)
        result.aulcs.append(rep.aulc)
        result.rows.extend(rep.rows)
    return result


def mdal_run(ds: MultiDomainDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
             al_cfg: ALConfig, on_round=None) -> MDALResult:
    """All ``al_cfg.repeats`` repetitions in sequence."""
    al_cfg.validate()
    return collect(mdal_repeat(ds, model_cfg, train_cfg, al_cfg, r, on_round)
                   for r in range(al_cfg.repeats))


def write_results_csv(result: MDALResult, path, num_domains: int):
    header = ["repeat", "round", "labeled_fraction"] + [f"acc_domain_{d}" for d in range(num_domains)] + ["mean_acc"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in result.rows:
            w.writerow([str(row[0]), str(row[1])] + [repr(float(v)) for v in row[2:]])


def summary_row(method: str, strategy: str, result: MDALResult):
    m, s = result.aulc_mean, result.aulc_std
    return [method, strategy, f"{m:.2f}", f"{s:.2f}", f"{m:.2f} ({s:.2f})"]


SUMMARY_HEADER = ["method", "strategy", "AULC_mean", "AULC_std", "AULC"]


def write_summary_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)
