"""Objective terms: classification, the two contrastive losses, adversarial pair."""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError


@dataclass
class LossWeights:
    lambda_d: float = 0.05
    lambda_inter: float = 1.0
    lambda_intra: float = 1.0
    tau_inter: float = 0.1
    tau_intra: float = 0.01

    def validate(self):
        for name in ("lambda_d", "lambda_inter", "lambda_intra"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("tau_inter", "tau_intra"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range for {c} classes: {labels.tolist()}")
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    if not labels.size:
        raise ContractError("cross_entropy of an empty batch")
    return ad.softmax_cross_entropy(logits, labels)


def view_pairing(m: int) -> np.ndarray:
    """Partner index j(i) for a two-view batch of ``m`` rows."""
    if m % 2:
        raise ContractError(f"two-view batch needs an even row count, got {m}")
    n = m // 2
    return np.concatenate([np.arange(n, m), np.arange(n)])


def positive_mask(labels) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    return pos


@functools.lru_cache(maxsize=64)
def _pairing_mask(m: int) -> np.ndarray:
    pos = np.zeros((m, m), dtype=bool)
    pos[np.arange(m), view_pairing(m)] = True
    pos.setflags(write=False)
    return pos


def pairing_mask(m: int) -> np.ndarray:
    """Boolean mask with ``pos[i, j(i)]`` set; cached and read-only."""
    return _pairing_mask(int(m))


def _check(reps, tau):
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if reps.shape[0] < 2:
        raise ContractError(f"contrastive loss needs at least 2 rows, got {reps.shape[0]}")


def inter_contrastive(reps: Tensor, labels, tau: float, normalize: bool = True) -> Tensor:
    """Supervised NT-Xent: every same-label row is a positive of the anchor.

    ``labels`` holds one id per row of ``reps`` (both views included).
    """
    _check(reps, tau)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != reps.shape[0]:
        raise ContractError(f"{labels.shape[0]} labels for {reps.shape[0]} rows")
    u = ad.l2_normalize_rows(reps) if normalize else reps
    return ad.contrastive(u, positive_mask(labels), tau)


def intra_contrastive(reps: Tensor, tau: float, normalize: bool = True) -> Tensor:
    """Unsupervised NT-Xent where row i's only positive is its other view."""
    _check(reps, tau)
    m = reps.shape[0]
    u = ad.l2_normalize_rows(reps) if normalize else reps
    return ad.contrastive(u, pairing_mask(m), tau)


def discriminator_objective(domain_logits: Tensor, true_domain: int, variant: str = "nll"):
    """Returns ``(L_D, L_Fs)`` for a batch drawn from ``true_domain``.

    With ``variant="nll"`` the confusion loss is exactly ``-L_D``. The
    ``"entropy"`` variant instead minimizes the negative entropy of the
    discriminator's prediction.
    """
    k = domain_logits.shape[1]
    if not 0 <= true_domain < k:
        raise IndexError(f"domain {true_domain} out of range for {k} domains")
    n = domain_logits.shape[0]
    if not n:
        raise ContractError("discriminator objective of an empty batch")
    l_d = ad.softmax_cross_entropy(domain_logits, np.full(n, true_domain))
    if variant == "nll":
        l_fs = ad.scale(l_d, -1.0)
    elif variant == "entropy":
        logp = ad.log_softmax_rows(domain_logits)
        p = ad.softmax_rows(domain_logits)
        l_fs = ad.mean_all(ad.sum_rows(ad.mul(p, logp)))
    else:
        raise ConfigError(f"unknown confusion variant {variant!r}")
    return l_d, l_fs


def total_main_loss(cls_losses, fs_losses, intra_losses, weights: LossWeights):
    """Weighted main-iteration objective and a float breakdown for logging.

    Each argument is a list of per-domain scalar tensors (empty lists are
    allowed). Returns ``(loss, parts)``.
    """
    l_c = ad.add_n(list(cls_losses))
    l_fs = ad.add_n(list(fs_losses))
    l_intra = ad.add_n(list(intra_losses))
    terms = [l_c]
    if fs_losses and weights.lambda_d:
        terms.append(ad.scale(l_fs, weights.lambda_d))
    if intra_losses and weights.lambda_intra:
        terms.append(ad.scale(l_intra, weights.lambda_intra))
    total = ad.add_n(terms)
    parts = {
        "L_C": l_c.item(),
        "L_Fs": l_fs.item(),
        "L_intra": l_intra.item(),
        "total": total.item(),
    }
    return total, parts
