"""Finite-difference verification of every objective on small random models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from .losses import (LossWeights, cross_entropy, discriminator_objective,
                     inter_contrastive, intra_contrastive)
from .model import ModelConfig, discriminate, forward, init_model, shared_features
from .train import Streams, TrainConfig, main_objective, sample_main_batches

LOSSES = ("L_C", "L_inter", "L_intra", "L_D", "main")


@dataclass
class ToyProblem:
    model: object
    ds: object
    cfg: TrainConfig
    x: np.ndarray
    y: np.ndarray
    domain: int
    taus: tuple


def random_toy(rng: np.random.Generator, max_dim=8, max_batch=6) -> ToyProblem:
    k = int(rng.integers(2, 5))
    c = int(rng.integers(2, 4))
    d_in = int(rng.integers(2, max_dim + 1))
    spec = data_mod.SyntheticSpec(num_domains=k, num_classes=c, dim=d_in, per_domain_n=30,
                                  class_separation=2.0, domain_shift=0.5, noise_std=0.5,
                                  seed=int(rng.integers(1 << 30)))
    ds = data_mod.seed_labels(data_mod.generate_synthetic(spec), 0.3, seed=int(rng.integers(1 << 30)))
    mcfg = ModelConfig(input_dim=d_in, shared_dim=int(rng.integers(2, max_dim + 1)),
                       private_dim=int(rng.integers(2, max_dim + 1)), num_domains=k,
                       num_classes=c, shared_classifier=bool(rng.integers(2)),
                       init_seed=int(rng.integers(1 << 30)), init_scale=2.0)
    model = init_model(mcfg)
    # move biases off zero so their gradients are exercised too
    for t in model.params():
        if t.name.endswith(".b"):
            t.values[...] = rng.normal(0, 0.5, t.values.shape)
    taus = (float(rng.choice([0.1, 0.5, 1.0])), float(rng.choice([0.1, 0.5])))
    n = int(rng.integers(2, max_batch + 1))
    w = LossWeights(lambda_d=float(rng.uniform(0.05, 1)), lambda_inter=1.0,
                    lambda_intra=float(rng.uniform(0.1, 1)), tau_inter=taus[0], tau_intra=taus[1])
    cfg = TrainConfig(weights=w, batch_size=n, noise_std=0.1, seed=int(rng.integers(1 << 30)))
    x = rng.normal(size=(n, d_in))
    y = rng.integers(0, c, size=n)
    return ToyProblem(model, ds, cfg, x, y, int(rng.integers(k)), taus)


def _objectives(p: ToyProblem):
    m = p.model
    x = ad.constant(p.x)
    xa = ad.constant(np.concatenate([p.x, p.x + 0.1 * np.sin(np.arange(p.x.size)).reshape(p.x.shape)]))
    yy = np.concatenate([p.y, p.y])

    def l_c(_):
        return cross_entropy(forward(m, x, p.domain).class_logits, p.y)

    def l_inter(_):
        return inter_contrastive(shared_features(m, xa), yy, p.taus[0])

    def l_intra(_):
        return intra_contrastive(forward(m, xa, p.domain).class_probs, p.taus[1])

    def l_d(_):
        return discriminator_objective(discriminate(m, shared_features(m, x)), p.domain)[0]

    batches = sample_main_batches(p.ds, p.cfg, Streams.from_seed(p.cfg.seed))

    def main(_):
        return main_objective(m, batches, p.cfg)[0]

    fd = f"Fd[{p.domain}]"
    own_c = "C" if m.cfg.shared_classifier else f"C[{p.domain}]"
    reg = m.registry
    return {
        "L_C": (l_c, reg["Fs"] + reg[fd] + reg[own_c]),
        "L_inter": (l_inter, reg["Fs"]),
        "L_intra": (l_intra, reg["Fs"] + reg[fd] + reg[own_c]),
        "L_D": (l_d, reg["Fs"] + reg["D"]),
        "main": (main, m.params("Fs", "Fd", "C")),
    }


# two-point differences at a small step are accurate to ~1e-7 relative once a
# gradient entry exceeds ~1e-4; below that, round-off over a tiny step swamps
# the estimate, so those entries get a fourth-order stencil at a wide step
SUITE_STEP = 1e-5
SUITE_ORDER = "auto"
SUITE_STEP4 = 1e-3
SUITE_SWITCH = 1e-4


def check_problem(p: ToyProblem, h=SUITE_STEP, order=SUITE_ORDER) -> dict[str, float]:
    """Max relative error per objective over the parameters it depends on."""
    return {name: ad.finite_diff_check(f, params, h, order, h4=SUITE_STEP4, switch=SUITE_SWITCH)
            for name, (f, params) in _objectives(p).items()}


def run_suite(trials=100, seed=0, h=SUITE_STEP, order=SUITE_ORDER) -> dict[str, float]:
    """Worst relative error per objective across ``trials`` random toys."""
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(LOSSES, 0.0)
    for _ in range(trials):
        for name, err in check_problem(random_toy(rng), h, order).items():
            worst[name] = max(worst[name], err)
    return worst
