"""Alternating three-phase training loop with early stopping.

Each outer iteration runs an inter-domain alignment phase (shared extractor
only), a discriminator phase (discriminator only, shared features detached)
and one joint main step over extractors and classifier(s).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from .data import MultiDomainDataset
from .errors import ConfigError, ShapeError, StateError, TrainingError
from .losses import (LossWeights, cross_entropy, discriminator_objective,
                     inter_contrastive, intra_contrastive, total_main_loss)
from .model import (SPModel, discriminate, forward, shared_features)

log = logging.getLogger(__name__)

ABLATIONS = ("full", "inter_only", "intra_only", "baseline")

# Optimizer settings per benchmark; the discriminator weight is 0.05 throughout.
PRESETS = {
    "amazon": dict(optimizer="adam", learning_rate=3e-4, lr_decay_factor=None, batch_size=8,
                   weight_decay=0.05, early_stop_patience=20,
                   lambda_inter=1.0, tau_inter=0.1, lambda_intra=1.0, tau_intra=0.01),
    "mnist_usps": dict(optimizer="adam", learning_rate=3e-3, lr_decay_factor=0.33, batch_size=8,
                       weight_decay=0.001, early_stop_patience=30,
                       lambda_inter=0.1, tau_inter=0.1, lambda_intra=1.0, tau_intra=0.1),
    "office_home": dict(optimizer="adam", learning_rate=1e-2, lr_decay_factor=0.33, batch_size=8,
                        weight_decay=0.001, early_stop_patience=15,
                        lambda_inter=1.0, tau_inter=0.01, lambda_intra=1.0, tau_intra=0.01),
    "fdumtl": dict(optimizer="adam", learning_rate=3e-4, lr_decay_factor=0.1, batch_size=8,
                   weight_decay=0.001, early_stop_patience=30,
                   lambda_inter=0.1, tau_inter=0.01, lambda_intra=1.0, tau_intra=0.01),
    "pacs": dict(optimizer="sgd", learning_rate=1e-3, lr_decay_factor=0.1, batch_size=8,
                 weight_decay=0.001, early_stop_patience=15,
                 lambda_inter=0.1, tau_inter=1.0, lambda_intra=1.0, tau_intra=0.1),
}


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    k_inter: int = 1
    k_adv: int = 5
    optimizer: str = "adam"
    learning_rate: float = 3e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_factor: float | None = None
    batch_size: int = 8
    early_stop_patience: int = 20
    max_epochs: int = 100
    iters_per_epoch: int = 1
    noise_std: float = 0.01
    seed: int = 0
    ablation: str = "full"
    confusion: str = "nll"
    disc_include_labeled: bool = False
    normalize: bool = True

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls.from_dict({**PRESETS[name], **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            d = {**PRESETS[preset], **d}
        wnames = {f.name for f in fields(LossWeights)}
        wdict = dict(d.pop("weights", {}) or {})
        for k in list(d):
            if k in wnames:
                wdict[k] = d.pop(k)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        cfg = cls(weights=LossWeights(**wdict), **d)
        cfg.validate()
        return cfg

    def validate(self):
        self.weights.validate()
        if self.k_inter < 0 or self.k_adv < 0:
            raise ConfigError("k_inter and k_adv must be >= 0")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.iters_per_epoch < 1:
            raise ConfigError("batch_size, max_epochs and iters_per_epoch must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")

    def effective(self) -> "TrainConfig":
        """Copy with the ablation arm applied to the weights and k_inter."""
        w = self.weights
        if self.ablation == "inter_only":
            w = replace(w, lambda_intra=0.0)
        elif self.ablation == "intra_only":
            w = replace(w, lambda_inter=0.0)
        elif self.ablation == "baseline":
            w = replace(w, lambda_inter=0.0, lambda_intra=0.0)
        k_inter = 0 if self.ablation == "baseline" else self.k_inter
        return replace(self, weights=w, k_inter=k_inter)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def optimizer_step(p: np.ndarray, g: np.ndarray, state: dict, cfg: TrainConfig, lr=None):
    """Update ``p`` in place. Weight decay is decoupled for both optimizers."""
    if p.shape != g.shape:
        raise ShapeError(f"parameter shape {p.shape} != gradient shape {g.shape}")
    lr = cfg.learning_rate if lr is None else lr
    wd = cfg.weight_decay
    if cfg.optimizer == "sgd":
        p -= lr * (g + wd * p)
        return state
    if not state:
        state.update(t=0, m=np.zeros_like(p), v=np.zeros_like(p))
    state["t"] += 1
    t = state["t"]
    state["m"] = cfg.beta1 * state["m"] + (1 - cfg.beta1) * g
    state["v"] = cfg.beta2 * state["v"] + (1 - cfg.beta2) * g * g
    m_hat = state["m"] / (1 - cfg.beta1 ** t)
    v_hat = state["v"] / (1 - cfg.beta2 ** t)
    p -= lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + wd * p)
    return state


class Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.state: dict[str, dict] = {}

    def step(self, params):
        # grads are consumed so a tensor missed by the next backward is skipped
        for t in params:
            if t.grad is None:
                continue
            optimizer_step(t.values, t.grad, self.state.setdefault(t.name, {}), self.cfg, self.lr)
            t.grad = None


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------

@dataclass
class Streams:
    """Independent RNG streams so that skipping a phase never shifts another."""
    inter: np.random.Generator
    adv: np.random.Generator
    labeled: np.random.Generator
    unlabeled: np.random.Generator
    aug: np.random.Generator

    @classmethod
    def from_seed(cls, seed):
        return cls(*[np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)])


def _finite(name, value):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {name} loss ({value})")
    return value


def inter_phase(model: SPModel, ds: MultiDomainDataset, cfg: TrainConfig, opt: Optimizer, rngs: Streams):
    """k_inter supervised-contrastive updates of the shared extractor."""
    w = cfg.weights
    values = []
    if w.lambda_inter == 0:
        return values
    for _ in range(cfg.k_inter):
        x, y, _ = data_mod.sample_mixed_labeled(ds, cfg.batch_size, rngs.inter)
        xa = data_mod.two_view_augment(x, cfg.noise_std, rngs.inter)
        z = shared_features(model, ad.constant(xa))
        l_inter = inter_contrastive(z, np.concatenate([y, y]), w.tau_inter, cfg.normalize)
        values.append(_finite("L_inter", l_inter.item()))
        ad.backward(ad.scale(l_inter, w.lambda_inter))
        opt.step(model.params("Fs"))
    return values


def adversarial_phase(model: SPModel, ds: MultiDomainDataset, cfg: TrainConfig, opt: Optimizer, rngs: Streams):
    """k_adv discriminator updates on detached shared features."""
    values = []
    for _ in range(cfg.k_adv):
        terms = []
        for d in range(ds.num_domains):
            x = data_mod.sample_unlabeled(ds, d, cfg.batch_size, rngs.adv, cfg.disc_include_labeled)
            z_s = shared_features(model, ad.constant(x)).detach()
            l_d, _ = discriminator_objective(discriminate(model, z_s), d, cfg.confusion)
            terms.append(l_d)
        l_d = ad.add_n(terms)
        values.append(_finite("L_D", l_d.item()))
        ad.backward(l_d)
        opt.step(model.params("D"))
    return values


@dataclass
class MainBatches:
    labeled: list        # (x, y) per domain
    unlabeled: list      # x per domain, or None when no unlabeled term is active
    augmented: list      # two-view stack per domain, or None


def sample_main_batches(ds: MultiDomainDataset, cfg: TrainConfig, rngs: Streams) -> MainBatches:
    w = cfg.weights
    k = ds.num_domains
    labeled = [data_mod.sample_labeled(ds, d, cfg.batch_size, rngs.labeled) for d in range(k)]
    unlabeled, augmented = [None] * k, [None] * k
    if w.lambda_d > 0 or w.lambda_intra > 0:
        for d in range(k):
            xu = data_mod.sample_unlabeled(ds, d, cfg.batch_size, rngs.unlabeled, cfg.disc_include_labeled)
            unlabeled[d] = xu
            if w.lambda_intra > 0:
                augmented[d] = data_mod.two_view_augment(xu, cfg.noise_std, rngs.aug)
    return MainBatches(labeled, unlabeled, augmented)


def main_objective(model: SPModel, batches: MainBatches, cfg: TrainConfig):
    """Joint objective on fixed batches. Returns ``(loss, parts)``.

    ``parts`` also carries ``L_D_main``, the discriminator loss on the very
    batches behind ``L_Fs``.
    """
    w = cfg.weights
    cls_terms, fs_terms, intra_terms, d_terms = [], [], [], []
    for d, (x, y) in enumerate(batches.labeled):
        out = forward(model, ad.constant(x), d)
        cls_terms.append(cross_entropy(out.class_logits, y))
    for d, xu in enumerate(batches.unlabeled):
        if xu is not None and w.lambda_d > 0:
            z_s = shared_features(model, ad.constant(xu))
            l_d, l_fs = discriminator_objective(discriminate(model, z_s), d, cfg.confusion)
            d_terms.append(l_d)
            fs_terms.append(l_fs)
        xa = batches.augmented[d]
        if xa is not None and w.lambda_intra > 0:
            out = forward(model, ad.constant(xa), d)
            intra_terms.append(intra_contrastive(out.class_probs, w.tau_intra, cfg.normalize))
    total, parts = total_main_loss(cls_terms, fs_terms, intra_terms, w)
    parts["L_D_main"] = ad.add_n(d_terms).item()
    for name in ("L_C", "L_Fs", "L_intra", "total"):
        _finite(name, parts[name])
    return total, parts


def main_loss(model: SPModel, ds: MultiDomainDataset, cfg: TrainConfig, rngs: Streams):
    return main_objective(model, sample_main_batches(ds, cfg, rngs), cfg)


def main_phase(model: SPModel, ds: MultiDomainDataset, cfg: TrainConfig, opt: Optimizer, rngs: Streams):
    total, parts = main_loss(model, ds, cfg, rngs)
    ad.backward(total)
    opt.step(model.params("Fs", "Fd", "C"))
    return parts


# ---------------------------------------------------------------------------
# evaluation and the outer loop
# ---------------------------------------------------------------------------

def evaluate(model: SPModel, ds: MultiDomainDataset, split: str = "test"):
    """Per-domain accuracy and their unweighted mean."""
    accs = []
    for p in ds.pools:
        x, y = p.split_xy(split)
        if len(y) == 0:
            raise StateError(f"domain {p.domain_id} has an empty {split} split")
        probs = forward(model, ad.constant(x), p.domain_id).class_probs.values
        accs.append(float(np.mean(probs.argmax(axis=1) == y)))
    return accs, float(np.mean(accs))


def domain_accuracy(model: SPModel, ds: MultiDomainDataset, split: str = "test") -> float:
    """How often the discriminator names the right domain, pooled over domains."""
    hits = total = 0
    for p in ds.pools:
        x, _ = p.split_xy(split)
        if len(x) == 0:
            raise StateError(f"domain {p.domain_id} has an empty {split} split")
        logits = discriminate(model, shared_features(model, ad.constant(x))).values
        hits += int(np.sum(logits.argmax(axis=1) == p.domain_id))
        total += len(x)
    return hits / total


@dataclass
class EpochRecord:
    epoch: int
    L_C: float
    L_inter: float
    L_intra: float
    L_D: float
    L_Fs: float
    L_D_main: float
    val_acc: list
    val_mean: float
    lr: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("-inf")
    stop_reason: str = ""
    test_acc: list = field(default_factory=list)
    test_mean: float = float("nan")

    def log_rows(self):
        k = len(self.epochs[0].val_acc) if self.epochs else 0
        header = ["epoch", "L_C", "L_inter", "L_intra", "L_D"] + [f"val_acc_d{i}" for i in range(k)] + ["val_mean", "lr"]
        rows = [header]
        for r in self.epochs:
            rows.append([str(r.epoch)] + [repr(float(v)) for v in (r.L_C, r.L_inter, r.L_intra, r.L_D)]
                        + [repr(float(v)) for v in r.val_acc] + [repr(float(r.val_mean)), repr(float(r.lr))])
        return rows

    def write_log_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.log_rows())


def _mean(xs):
    return float(np.mean(xs)) if xs else 0.0


def train_mdcl(model: SPModel, ds: MultiDomainDataset, cfg: TrainConfig, hook=None) -> TrainReport:
    """Train in place and restore the best-validation parameters.

    ``hook(phase, when, model)`` is called around every phase with
    ``when`` in ``("before", "after")``; tests use it for parameter diffs.
    """
    cfg.validate()
    eff = cfg.effective()
    for p in ds.pools:
        if len(p.labeled) == 0:
            raise StateError(f"domain {p.domain_id} has no labeled instances")
    if model.cfg.num_domains != ds.num_domains:
        raise ConfigError(f"model has {model.cfg.num_domains} domains, dataset has {ds.num_domains}")
    opt = Optimizer(eff)
    rngs = Streams.from_seed(eff.seed)
    report = TrainReport()
    best_state = model.state()
    since_best = since_decay = 0
    decay_every = math.ceil(eff.early_stop_patience / 2)

    def run(phase, fn):
        if hook:
            hook(phase, "before", model)
        out = fn(model, ds, eff, opt, rngs)
        if hook:
            hook(phase, "after", model)
        return out

    for epoch in range(1, eff.max_epochs + 1):
        inter, adv, mains = [], [], []
        for _ in range(eff.iters_per_epoch):
            inter += run("inter", inter_phase)
            adv += run("adversarial", adversarial_phase)
            mains.append(run("main", main_phase))
        val_acc, val_mean = evaluate(model, ds, "val")
        rec = EpochRecord(
            epoch=epoch,
            L_C=_mean([m["L_C"] for m in mains]),
            L_inter=_mean(inter),
            L_intra=_mean([m["L_intra"] for m in mains]),
            L_D=_mean(adv),
            L_Fs=_mean([m["L_Fs"] for m in mains]),
            L_D_main=_mean([m["L_D_main"] for m in mains]),
            val_acc=val_acc, val_mean=val_mean, lr=opt.lr,
        )
        report.epochs.append(rec)
        log.debug("epoch %d L_C=%.4f val=%.4f", epoch, rec.L_C, val_mean)
        if val_mean > report.best_val:
            report.best_val, report.best_epoch = val_mean, epoch
            best_state = model.state()
            since_best = since_decay = 0
        else:
            since_best += 1
            since_decay += 1
            if eff.lr_decay_factor and since_decay >= decay_every:
                opt.lr *= eff.lr_decay_factor
                since_decay = 0
            if since_best >= eff.early_stop_patience:
                report.stop_reason = "early_stop"
                break
    else:
        report.stop_reason = "max_epochs"
    model.load_state(best_state)
    report.test_acc, report.test_mean = evaluate(model, ds, "test")
    return report
