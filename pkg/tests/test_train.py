import math
from dataclasses import replace

import numpy as np
import pytest

from mdcl import autodiff as ad
from mdcl.errors import ConfigError, ShapeError, StateError, TrainingError
from mdcl.losses import LossWeights, cross_entropy
from mdcl.model import forward
from mdcl.train import (PRESETS, Optimizer, Streams, TrainConfig, evaluate, main_loss,
                        optimizer_step, sample_main_batches, train_mdcl)
from conftest import changed_groups, small_dataset, small_model, snapshot


def quick(**kw):
    base = dict(learning_rate=3e-3, weight_decay=0.001, max_epochs=4, iters_per_epoch=2, batch_size=4, seed=1)
    base.update(kw)
    return TrainConfig(**base)


# --- optimizer ----------------------------------------------------------------------

@pytest.mark.parametrize("opt", ["adam", "sgd"])
def test_zero_grad_no_decay_is_identity(opt):
    p = np.array([[1.0, -2.0]])
    optimizer_step(p, np.zeros_like(p), {}, TrainConfig(optimizer=opt, weight_decay=0.0))
    assert np.array_equal(p, [[1.0, -2.0]])


def test_sgd_arithmetic():
    p = np.array([[1.0]])
    optimizer_step(p, np.array([[1.0]]), {}, TrainConfig(optimizer="sgd", learning_rate=0.1, weight_decay=0.0))
    assert p[0, 0] == pytest.approx(0.9, abs=1e-15)


def test_adam_first_step_closed_form():
    p = np.array([[0.5]])
    cfg = TrainConfig(optimizer="adam", learning_rate=1e-3, weight_decay=0.0)
    optimizer_step(p, np.array([[1.0]]), {}, cfg)
    # bias-corrected moments equal g and g^2 after one step
    assert 0.5 - p[0, 0] == pytest.approx(1e-3 * 1.0 / (math.sqrt(1.0) + 1e-8), rel=1e-12)


def test_adam_decoupled_decay():
    p = np.array([[2.0]])
    cfg = TrainConfig(optimizer="adam", learning_rate=0.1, weight_decay=0.5)
    optimizer_step(p, np.zeros((1, 1)), {}, cfg)
    assert p[0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_optimizer_shape_mismatch():
    with pytest.raises(ShapeError):
        optimizer_step(np.zeros((1, 2)), np.zeros((2, 1)), {}, TrainConfig())


def test_optimizer_skips_and_consumes_grads():
    a, b = ad.parameter([[1.0]], name="a"), ad.parameter([[1.0]], name="b")
    a.grad = np.array([[1.0]])
    Optimizer(TrainConfig(optimizer="sgd", learning_rate=0.5, weight_decay=0.0)).step([a, b])
    assert a.values[0, 0] == 0.5 and b.values[0, 0] == 1.0 and a.grad is None


# --- config ---------------------------------------------------------------------------

def test_presets_follow_hyperparameter_table():
    assert PRESETS["amazon"]["learning_rate"] == 3e-4 and PRESETS["amazon"]["weight_decay"] == 0.05
    assert PRESETS["pacs"]["optimizer"] == "sgd"
    assert PRESETS["office_home"]["tau_inter"] == 0.01
    assert all(p["batch_size"] == 8 for p in PRESETS.values())
    cfg = TrainConfig.from_preset("mnist_usps")
    assert (cfg.weights.lambda_inter, cfg.weights.tau_intra, cfg.lr_decay_factor) == (0.1, 0.1, 0.33)
    assert cfg.weights.lambda_d == 0.05


def test_from_dict_unknown_field():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learnin_rate": 1.0})


def test_from_dict_accepts_flat_and_nested_weights():
    a = TrainConfig.from_dict({"tau_inter": 0.5})
    b = TrainConfig.from_dict({"weights": {"tau_inter": 0.5}})
    assert a.weights == b.weights


@pytest.mark.parametrize("kw", [dict(k_inter=-1), dict(early_stop_patience=0), dict(optimizer="rmsprop"),
                                dict(ablation="half"), dict(learning_rate=0.0)])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw).validate()


def test_ablation_arms():
    assert TrainConfig(ablation="inter_only").effective().weights.lambda_intra == 0
    assert TrainConfig(ablation="intra_only").effective().weights.lambda_inter == 0
    base = TrainConfig(ablation="baseline").effective()
    assert (base.weights.lambda_inter, base.weights.lambda_intra, base.k_inter) == (0, 0, 0)
    assert base.weights.lambda_d == 0.05


# --- loop -------------------------------------------------------------------------------

def test_deterministic_trace(tiny):
    ds, _ = tiny
    logs = []
    for _ in range(2):
        rep = train_mdcl(small_model(ds), ds, quick())
        logs.append(rep.log_rows())
    assert logs[0] == logs[1]


def test_seed_changes_trace(tiny):
    ds, _ = tiny
    a = train_mdcl(small_model(ds), ds, quick(seed=1)).log_rows()
    b = train_mdcl(small_model(ds), ds, quick(seed=2)).log_rows()
    assert a != b


def test_phase_isolation(tiny):
    ds, model = tiny
    seen = {}

    def hook(phase, when, m):
        if when == "before":
            seen["snap"] = snapshot(m)
        else:
            seen.setdefault(phase, set()).update(changed_groups(m, seen["snap"]))

    train_mdcl(model, ds, quick(max_epochs=2), hook=hook)
    assert seen["inter"] == {"Fs"}
    assert seen["adversarial"] == {"D"}
    assert "D" not in seen["main"] and {"Fs", "Fd", "C"} <= seen["main"]


def test_confusion_identity_every_step(tiny):
    ds, model = tiny
    cfg = quick()
    rngs = Streams.from_seed(0)
    for _ in range(5):
        _, parts = main_loss(model, ds, cfg, rngs)
        assert parts["L_Fs"] == -parts["L_D_main"]
    rep = train_mdcl(model, ds, cfg)
    assert all(r.L_Fs == -r.L_D_main for r in rep.epochs)


def test_zero_weights_match_plain_classification(tiny):
    ds, _ = tiny
    cfg = quick(weights=LossWeights(lambda_d=0, lambda_inter=0, lambda_intra=0), max_epochs=3,
                early_stop_patience=10)
    rep = train_mdcl(small_model(ds), ds, cfg)

    model = small_model(ds)
    opt = Optimizer(cfg)
    rngs = Streams.from_seed(cfg.seed)
    trace = []
    for _ in range(cfg.max_epochs):
        vals = []
        for _ in range(cfg.iters_per_epoch):
            b = sample_main_batches(ds, cfg, rngs)
            loss = ad.add_n([cross_entropy(forward(model, ad.constant(x), d).class_logits, y)
                             for d, (x, y) in enumerate(b.labeled)])
            vals.append(loss.item())
            ad.backward(loss)
            opt.step(model.params("Fs", "Fd", "C"))
        trace.append(float(np.mean(vals)))
    assert [r.L_C for r in rep.epochs] == trace
    assert all(r.L_inter == 0 and r.L_intra == 0 for r in rep.epochs)


def test_separable_data_high_accuracy():
    ds = small_dataset(num_domains=2, dim=8, n=100, fraction=0.3, class_separation=10, noise_std=0.1)
    rep = train_mdcl(small_model(ds), ds, quick(max_epochs=50, iters_per_epoch=3, early_stop_patience=10))
    assert rep.test_mean >= 0.95


def test_early_stop_within_patience(tiny):
    ds, model = tiny
    rep = train_mdcl(model, ds, quick(max_epochs=40, early_stop_patience=3, learning_rate=1e-6))
    assert rep.stop_reason == "early_stop"
    assert len(rep.epochs) <= rep.best_epoch + 3
    assert rep.best_epoch <= len(rep.epochs)


def test_lr_decays_on_plateau(tiny):
    ds, model = tiny
    rep = train_mdcl(model, ds, quick(max_epochs=12, early_stop_patience=4, learning_rate=1e-6,
                                      lr_decay_factor=0.5))
    lrs = [r.lr for r in rep.epochs]
    assert min(lrs) < 1e-6
    assert all(b in (a, a * 0.5) for a, b in zip(lrs, lrs[1:]))


def test_best_state_restored(tiny):
    ds, model = tiny
    rep = train_mdcl(model, ds, quick(max_epochs=6, early_stop_patience=6))
    _, val_mean = evaluate(model, ds, "val")
    assert val_mean == rep.best_val


def test_nonfinite_loss_named(tiny):
    ds, model = tiny
    model.registry["Fs"][0].values[0, 0] = np.nan
    with pytest.raises(TrainingError, match="L_inter"):
        train_mdcl(model, ds, quick())


def test_empty_labeled_domain(tiny):
    ds, model = tiny
    p = ds.pools[1]
    pools = list(ds.pools)
    pools[1] = replace(p, labeled=p.labeled[:0], unlabeled=np.sort(np.concatenate([p.labeled, p.unlabeled])))
    with pytest.raises(StateError):
        train_mdcl(model, replace(ds, pools=tuple(pools)), quick())


def test_log_columns(tiny):
    ds, model = tiny
    rows = train_mdcl(model, ds, quick(max_epochs=2)).log_rows()
    assert rows[0] == ["epoch", "L_C", "L_inter", "L_intra", "L_D",
                       "val_acc_d0", "val_acc_d1", "val_acc_d2", "val_mean", "lr"]
    assert len(rows) == 3


# --- evaluation -------------------------------------------------------------------------

def _const_model(ds, cls):
    m = small_model(ds)
    head = m.registry["C"]
    head[0].values[...] = 0.0
    head[1].values[...] = 0.0
    head[1].values[0, cls] = 1.0
    return m


def _balanced_test(ds):
    pools = []
    for p in ds.pools:
        y = p.y[p.test]
        k = min(np.sum(y == 0), np.sum(y == 1))
        keep = np.sort(np.concatenate([p.test[y == 0][:k], p.test[y == 1][:k]]))
        drop = np.setdiff1d(p.test, keep)
        pools.append(replace(p, test=keep, unlabeled=np.sort(np.concatenate([p.unlabeled, drop]))))
    return replace(ds, pools=tuple(pools))


@pytest.mark.parametrize("cls", [0, 1])
def test_constant_predictor_balanced(cls):
    ds = _balanced_test(small_dataset(n=100))
    ds.check()
    accs, mean = evaluate(_const_model(ds, cls), ds, "test")
    assert all(a == 0.5 for a in accs) and mean == 0.5


def test_accuracy_invariant_to_logit_scaling(tiny):
    ds, model = tiny
    before = evaluate(model, ds, "test")
    for t in model.registry["C"]:
        t.values = t.values * 3.7
    assert evaluate(model, ds, "test") == before


def test_hand_count_fixture():
    ds = small_dataset(num_domains=2, n=50)
    model = _const_model(ds, 0)
    accs, _ = evaluate(model, ds, "val")
    for p, a in zip(ds.pools, accs):
        _, y = p.split_xy("val")
        assert len(y) == 5
        assert a == np.sum(y == 0) / 5


def test_empty_split(tiny):
    ds, model = tiny
    pools = list(ds.pools)
    pools[0] = replace(pools[0], test=pools[0].test[:0], unlabeled=np.sort(np.concatenate([pools[0].unlabeled, pools[0].test])))
    with pytest.raises(StateError):
        evaluate(model, replace(ds, pools=tuple(pools)), "test")
