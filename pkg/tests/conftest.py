import numpy as np
import pytest

from mdcl import data
from mdcl.model import ModelConfig, init_model


def small_dataset(num_domains=3, dim=6, n=60, fraction=0.2, seed=0, **kw):
    spec = data.SyntheticSpec(num_domains=num_domains, num_classes=2, dim=dim, per_domain_n=n, seed=seed, **kw)
    return data.seed_labels(data.generate_synthetic(spec), fraction, seed=seed)


def small_model(ds, seed=0, **kw):
    cfg = dict(input_dim=ds.feature_dim, shared_dim=5, private_dim=4, num_domains=ds.num_domains,
               num_classes=ds.num_classes, init_seed=seed)
    cfg.update(kw)
    return init_model(ModelConfig(**cfg))


def snapshot(model):
    return {name: t.values.copy() for name, t in model.named_params()}


def changed_groups(model, before):
    out = set()
    for key, ts in model.registry.items():
        if any(not np.array_equal(before[t.name], t.values) for t in ts):
            out.add(key.split("[")[0])
    return out


@pytest.fixture
def tiny():
    ds = small_dataset()
    return ds, small_model(ds)
