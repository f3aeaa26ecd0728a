"""Per-domain pools, synthetic generation, CSV ingestion and batch sampling."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, SelectionError, StateError

UNLABELED = -1
SPLIT = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class DomainPool:
    """All instances of one domain plus the id sets that partition them.

    ``y`` holds the true label of every instance, ``-1`` when nobody knows
    it. Labels of ``unlabeled`` ids are only read by :func:`acquire_labels`.
    """
    domain_id: int
    x: np.ndarray
    y: np.ndarray
    labeled: np.ndarray
    unlabeled: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    def labeled_xy(self):
        return self.x[self.labeled], self.y[self.labeled]

    def unlabeled_x(self):
        return self.x[self.unlabeled]

    def split_xy(self, split: str):
        if split == "train":
            ids = self.labeled
        elif split in ("val", "test"):
            ids = getattr(self, split)
        else:
            raise ConfigError(f"unknown split {split!r}")
        return self.x[ids], self.y[ids]

    def check(self):
        sets = [set(self.labeled.tolist()), set(self.unlabeled.tolist()),
                set(self.val.tolist()), set(self.test.tolist())]
        total = sum(len(s) for s in sets)
        if len(set().union(*sets)) != total:
            raise StateError(f"domain {self.domain_id}: id sets overlap")
        if total != len(self.x):
            raise StateError(f"domain {self.domain_id}: {total} ids for {len(self.x)} instances")


@dataclass(frozen=True)
class MultiDomainDataset:
    pools: tuple
    num_classes: int
    feature_dim: int
    rng_seed: int = 0

    @property
    def num_domains(self) -> int:
        return len(self.pools)

    def labeled_fraction(self) -> float:
        lab = sum(len(p.labeled) for p in self.pools)
        return lab / max(1, sum(p.n_train for p in self.pools))

    def check(self):
        for p in self.pools:
            p.check()
            if p.x.shape[1] != self.feature_dim:
                raise StateError(f"domain {p.domain_id}: width {p.x.shape[1]} != {self.feature_dim}")


def _ids(a):
    return np.asarray(a, dtype=np.int64)


def _frozen(a):
    a = np.asarray(a)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    num_domains: int = 4
    num_classes: int = 2
    dim: int = 50
    per_domain_n: int = 400
    class_separation: float = 3.0
    domain_shift: float = 1.0
    domain_rotation: float = 0.5
    noise_std: float = 1.0
    seed: int = 0

    def validate(self):
        for name in ("num_domains", "num_classes", "dim", "per_domain_n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synthetic.{name} must be >= 1")
        if self.class_separation <= 0 or self.noise_std <= 0:
            raise ConfigError("synthetic.class_separation and noise_std must be > 0")
        if self.num_classes > self.per_domain_n:
            raise ConfigError(
                f"synthetic.num_classes={self.num_classes} exceeds per_domain_n={self.per_domain_n}")


def _split_sizes(n):
    n_train = int(round(SPLIT[0] * n))
    n_val = int(round(SPLIT[1] * n))
    return n_train, n_val, n - n_train - n_val


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _plane_rotation(rng, dim, angle):
    if dim < 2 or angle == 0:
        return np.eye(dim)
    q, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    a, b = q[:, 0], q[:, 1]
    c, s = math.cos(angle), math.sin(angle)
    return (np.eye(dim) + (c - 1.0) * (np.outer(a, a) + np.outer(b, b))
            + s * (np.outer(b, a) - np.outer(a, b)))


def generate_synthetic(spec: SyntheticSpec) -> MultiDomainDataset:
    """Gaussian class clusters shared by every domain, each domain's copy
    rotated in a random plane and shifted along a random direction."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = np.stack([_unit(rng, spec.dim) for _ in range(spec.num_classes)])
    means *= spec.class_separation / 2.0
    pools = []
    n_train, n_val, _ = _split_sizes(spec.per_domain_n)
    for k in range(spec.num_domains):
        rot = _plane_rotation(rng, spec.dim, spec.domain_rotation)
        shift = spec.domain_shift * _unit(rng, spec.dim)
        y = np.arange(spec.per_domain_n) % spec.num_classes
        rng.shuffle(y)
        raw = means[y] + spec.noise_std * rng.standard_normal((spec.per_domain_n, spec.dim))
        x = raw @ rot.T + shift
        ids = np.arange(spec.per_domain_n)
        pools.append(DomainPool(
            domain_id=k, x=_frozen(x), y=_frozen(y.astype(np.int64)),
            labeled=ids[:n_train], unlabeled=_ids([]),
            val=ids[n_train:n_train + n_val], test=ids[n_train + n_val:],
        ))
    return MultiDomainDataset(tuple(pools), spec.num_classes, spec.dim, spec.seed)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def save_domain_csv(path, x, labels):
    x = np.asarray(x, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(x.shape[1])])
        for row, lab in zip(x, labels):
            w.writerow([int(lab)] + [format(v, ".17g") for v in row])


def read_domain_csv(path, expected_dim=None):
    """Parse one domain file into ``(x, labels)``."""
    rows, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(path, 1, "missing header")
        if not header or header[0].strip() != "label":
            raise ParseError(path, 1, "header must start with 'label'")
        dim = len(header) - 1
        for i, name in enumerate(header[1:]):
            if name.strip() != f"f{i}":
                raise ParseError(path, 1, f"expected column f{i}, got {name!r}")
        if expected_dim is not None and dim != expected_dim:
            raise ParseError(path, 1, f"feature width {dim} differs from other domains ({expected_dim})")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != dim + 1:
                raise ParseError(path, lineno, f"expected {dim + 1} fields, got {len(rec)}")
            try:
                lab = int(rec[0])
                vals = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise ParseError(path, lineno, f"non-numeric field ({exc})") from None
            if lab < UNLABELED:
                raise ParseError(path, lineno, f"invalid label {lab}")
            labels.append(lab)
            rows.append(vals)
    x = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return x, np.array(labels, dtype=np.int64)


def load_domain_csv(path, domain_id: int, expected_dim=None) -> DomainPool:
    """Rows labeled ``-1`` become the unlabeled pool; val/test stay empty."""
    x, labels = read_domain_csv(path, expected_dim)
    ids = np.arange(len(labels))
    return DomainPool(
        domain_id=domain_id, x=_frozen(x), y=_frozen(labels),
        labeled=ids[labels >= 0], unlabeled=ids[labels < 0],
        val=_ids([]), test=_ids([]),
    )


def write_dataset(ds: MultiDomainDataset, out_dir, spec: SyntheticSpec | None = None):
    """One CSV per domain and split plus ``manifest.json``.

    Instances of the unlabeled pool are written with label ``-1``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for p in ds.pools:
        entry = {}
        for split in ("train", "val", "test"):
            if split == "train":
                ids = np.concatenate([p.labeled, p.unlabeled])
                labs = np.concatenate([p.y[p.labeled], np.full(len(p.unlabeled), UNLABELED)])
            else:
                ids = getattr(p, split)
                labs = p.y[ids]
            name = f"domain{p.domain_id}_{split}.csv"
            save_domain_csv(out / name, p.x[ids], labs)
            entry[split] = name
        files.append(entry)
    manifest = {
        "num_domains": ds.num_domains,
        "num_classes": ds.num_classes,
        "feature_dim": ds.feature_dim,
        "rng_seed": ds.rng_seed,
        "files": files,
        "synthetic_spec": asdict(spec) if spec is not None else None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return out / "manifest.json"


def _holdout(labeled, rng):
    """Carve val/test slices out of labeled ids when no files are given."""
    ids = rng.permutation(labeled)
    n_train, n_val, _ = _split_sizes(len(ids))
    return np.sort(ids[:n_train]), np.sort(ids[n_train:n_train + n_val]), np.sort(ids[n_train + n_val:])


def load_dataset(domains, num_classes=None, rng_seed=0) -> MultiDomainDataset:
    """Build a dataset from per-domain file dicts ``{"train", "val"?, "test"?}``.

    Without val/test files, 10%/20% of each domain's labeled rows are held out.
    """
    pools = []
    dim = None
    for k, entry in enumerate(domains):
        if isinstance(entry, (str, Path)):
            entry = {"train": entry}
        x, y = read_domain_csv(entry["train"], dim)
        dim = x.shape[1]
        ids = np.arange(len(y))
        labeled, unlabeled = ids[y >= 0], ids[y < 0]
        if entry.get("val") or entry.get("test"):
            parts = [x]
            labs = [y]
            extra = {}
            offset = len(y)
            for split in ("val", "test"):
                if entry.get(split):
                    xs, ys = read_domain_csv(entry[split], dim)
                    if (ys < 0).any():
                        raise ParseError(entry[split], 0, f"{split} file contains unlabeled rows")
                    parts.append(xs)
                    labs.append(ys)
                    extra[split] = np.arange(offset, offset + len(ys))
                    offset += len(ys)
                else:
                    extra[split] = _ids([])
            x, y = np.concatenate(parts), np.concatenate(labs)
            val, test = extra["val"], extra["test"]
        else:
            labeled, val, test = _holdout(labeled, np.random.default_rng([rng_seed, k]))
        pools.append(DomainPool(k, _frozen(x), _frozen(y), labeled, unlabeled, val, test))
    if dim is None:
        raise ConfigError("no domains given")
    if num_classes is None:
        num_classes = int(max(int(p.y.max()) if len(p.y) else 0 for p in pools)) + 1
    return MultiDomainDataset(tuple(pools), num_classes, dim, rng_seed)


def load_dataset_dir(path) -> MultiDomainDataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    domains = [{s: str(path / name) for s, name in entry.items()} for entry in manifest["files"]]
    return load_dataset(domains, manifest["num_classes"], manifest.get("rng_seed", 0))


# ---------------------------------------------------------------------------
# label seeding, sampling, augmentation, acquisition
# ---------------------------------------------------------------------------

def n_for_fraction(fraction, n):
    # tolerance keeps e.g. 0.1 * 70 from rounding up to 8
    return min(n, int(math.ceil(fraction * n - 1e-9)))


def seed_labels(ds: MultiDomainDataset, fraction: float, seed=0) -> MultiDomainDataset:
    """Keep ceil(fraction * |train|) labels per domain, one per class first."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"label fraction must be in (0, 1], got {fraction}")
    pools = []
    for p in ds.pools:
        rng = np.random.default_rng([ds.rng_seed, seed, p.domain_id])
        train = np.sort(np.concatenate([p.labeled, p.unlabeled]))
        known = train[p.y[train] >= 0]
        unknown = train[p.y[train] < 0]
        k = n_for_fraction(fraction, len(known))
        classes = np.unique(p.y[known])
        chosen = []
        if k >= len(classes):
            for c in classes:
                chosen.append(rng.choice(known[p.y[known] == c]))
        rest = np.setdiff1d(known, chosen)
        chosen.extend(rng.choice(rest, size=k - len(chosen), replace=False).tolist())
        labeled = np.sort(_ids(chosen))
        unlabeled = np.sort(np.concatenate([np.setdiff1d(known, labeled), unknown]))
        pools.append(replace(p, labeled=labeled, unlabeled=unlabeled))
    return replace(ds, pools=tuple(pools))


def _rng(seed):
    return np.random.default_rng(seed)


def sample_mixed_labeled(ds: MultiDomainDataset, batch_n: int, seed):
    """Uniform draw with replacement from the union of all labeled sets."""
    owners = np.concatenate([np.full(len(p.labeled), p.domain_id) for p in ds.pools])
    ids = np.concatenate([p.labeled for p in ds.pools])
    if len(ids) == 0:
        raise StateError("no labeled instances in any domain")
    pick = _rng(seed).integers(0, len(ids), size=batch_n)
    dom = owners[pick]
    x = np.stack([ds.pools[d].x[i] for d, i in zip(dom, ids[pick])]) if batch_n else np.empty((0, ds.feature_dim))
    y = np.array([ds.pools[d].y[i] for d, i in zip(dom, ids[pick])], dtype=np.int64)
    return x, y, dom


def sample_labeled(ds: MultiDomainDataset, domain: int, batch_n: int, seed):
    p = ds.pools[domain]
    if len(p.labeled) == 0:
        raise StateError(f"domain {domain} has no labeled instances")
    ids = p.labeled[_rng(seed).integers(0, len(p.labeled), size=batch_n)]
    return p.x[ids], p.y[ids]


def sample_unlabeled(ds: MultiDomainDataset, domain: int, batch_n: int, seed, include_labeled=False):
    """Draw from the domain's unlabeled pool (falls back to labeled if empty)."""
    p = ds.pools[domain]
    src = np.concatenate([p.unlabeled, p.labeled]) if include_labeled else p.unlabeled
    if len(src) == 0:
        src = p.labeled
    if len(src) == 0:
        raise StateError(f"domain {domain} has no training instances")
    return p.x[src[_rng(seed).integers(0, len(src), size=batch_n)]]


def two_view_augment(features, noise_std: float, seed) -> np.ndarray:
    """Stack two independently noised copies; row i pairs with row i + N."""
    if noise_std < 0:
        raise ConfigError("noise_std must be >= 0")
    x = np.asarray(features, dtype=np.float64)
    rng = _rng(seed)
    v1 = x + noise_std * rng.standard_normal(x.shape)
    v2 = x + noise_std * rng.standard_normal(x.shape)
    return np.concatenate([v1, v2], axis=0)


def acquire_labels(ds: MultiDomainDataset, per_domain_indices) -> MultiDomainDataset:
    """Move the given unlabeled instance ids into the labeled sets.

    ``per_domain_indices`` maps domain -> instance ids (a list indexed by
    domain also works).
    """
    if not isinstance(per_domain_indices, dict):
        per_domain_indices = dict(enumerate(per_domain_indices))
    pools = list(ds.pools)
    for d, idx in per_domain_indices.items():
        idx = _ids(idx).reshape(-1)
        if len(idx) == 0:
            continue
        if not 0 <= d < len(pools):
            raise SelectionError(f"domain {d} out of range")
        p = pools[d]
        if len(np.unique(idx)) != len(idx):
            raise SelectionError(f"domain {d}: duplicate ids in selection")
        stale = np.setdiff1d(idx, p.unlabeled)
        if len(stale):
            raise SelectionError(f"domain {d}: ids {stale.tolist()} are not in the unlabeled pool")
        if (p.y[idx] < 0).any():
            raise SelectionError(f"domain {d}: no oracle label for some selected ids")
        pools[d] = replace(p, labeled=np.sort(np.concatenate([p.labeled, idx])),
                           unlabeled=np.setdiff1d(p.unlabeled, idx))
    return replace(ds, pools=tuple(pools))
