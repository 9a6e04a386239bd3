"""Data generation, MLP training, metrics, and the experiment pipeline."""

import json

import numpy as np
import pytest

from negmerge.errors import ExperimentStageError, TrainingDiverged
from negmerge.harness import (
    EvalReport,
    ExperimentConfig,
    FinetuneGrid,
    MlpConfig,
    TrainHyper,
    evaluate,
    finetune_pool,
    gen_dataset,
    mia_efficacy,
    run_single_seed,
    split_forget,
    train,
)
from negmerge.harness.mlp import init_params, loss_and_grads, params_to_map
from negmerge.task_vector import diff


# ---------------------------------------------------------------- data


def test_dataset_deterministic():
    a = gen_dataset(4, 8, 50, 3.0, seed=11)
    b = gen_dataset(4, 8, 50, 3.0, seed=11)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.train_idx, b.train_idx)
    assert np.array_equal(a.test_idx, b.test_idx)


def test_dataset_split_sizes():
    ds = gen_dataset(5, 4, 100, 2.0, seed=0)
    assert ds.train_idx.size == 400
    assert ds.val_idx.size == 50
    assert ds.test_idx.size == 50
    assert np.array_equal(np.sort(np.concatenate([ds.train_idx, ds.val_idx, ds.test_idx])),
                          np.arange(500))
    assert ds.forget_idx.size == 0
    assert np.array_equal(ds.retain_idx, ds.train_idx)


def test_dataset_zero_separation_valid():
    ds = gen_dataset(3, 2, 20, 0.0, seed=1)
    assert ds.features.shape == (60, 2)


def test_dataset_infeasible_separation():
    with pytest.raises(ValueError):
        gen_dataset(50, 1, 5, 1e9, seed=0)


def test_separated_data_is_learnable():
    ds = gen_dataset(2, 2, 100, 6.0, seed=3)
    cfg = MlpConfig(input_dim=2, hidden=(16,), n_classes=2)
    model = train(cfg, ds.subset(ds.train_idx), TrainHyper(lr=0.2, epochs=40, seed=0))
    report = evaluate(model, split_forget(ds, "random_fraction", seed=0, fraction=0.1), cfg)
    assert report.acc_Dtest >= 0.99


def test_split_forget_random_fraction():
    ds = gen_dataset(5, 4, 250, 2.0, seed=0)  # 1000 train samples
    out = split_forget(ds, "random_fraction", seed=5, fraction=0.1)
    assert out.forget_idx.size == 100
    assert out.retain_idx.size == 900
    assert np.intersect1d(out.forget_idx, out.retain_idx).size == 0
    assert np.array_equal(np.sort(np.concatenate([out.forget_idx, out.retain_idx])),
                          np.sort(ds.train_idx))

    halves = split_forget(ds, "random_fraction", seed=5, fraction=0.5)
    assert halves.forget_idx.size == 500


def test_split_forget_class_wise():
    ds = gen_dataset(3, 4, 50, 2.0, seed=0)
    out = split_forget(ds, "class_wise", seed=0, class_id=0)
    assert np.all(ds.labels[out.forget_idx] == 0)
    assert not np.any(ds.labels[out.retain_idx] == 0)


def test_split_forget_validation():
    ds = gen_dataset(3, 4, 50, 2.0, seed=0)
    with pytest.raises(ValueError):
        split_forget(ds, "random_fraction", seed=0, fraction=0.0)
    with pytest.raises(ValueError):
        split_forget(ds, "class_wise", seed=0, class_id=7)
    with pytest.raises(ValueError):
        split_forget(ds, "bogus", seed=0)


# ---------------------------------------------------------------- mlp


def test_gradients_match_finite_differences(rng):
    # central differences, step 1e-4, relative error <= 1e-5
    step = 1e-4
    for trial in range(10):
        cfg = MlpConfig(input_dim=int(rng.integers(2, 5)), hidden=(int(rng.integers(2, 6)),),
                        n_classes=int(rng.integers(2, 5)))
        params = init_params(cfg, seed=trial)
        x = rng.normal(size=(6, cfg.input_dim))
        y = rng.integers(0, cfg.n_classes, size=6)
        wd, ls = float(rng.uniform(0, 0.1)), float(rng.uniform(0, 0.2))
        _, grads = loss_and_grads(params, x, y, wd, ls)
        for layer, (gw, gb) in enumerate(grads):
            for arr, grad in ((params[layer][0], gw), (params[layer][1], gb)):
                flat = arr.ravel()
                gflat = grad.ravel()
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    up, _ = loss_and_grads(params, x, y, wd, ls)
                    flat[i] = orig - step
                    down, _ = loss_and_grads(params, x, y, wd, ls)
                    flat[i] = orig
                    fd = (up - down) / (2 * step)
                    denom = max(abs(fd), abs(gflat[i]), 1e-8)
                    assert abs(fd - gflat[i]) / denom <= 1e-5


def test_train_zero_epochs_returns_init():
    cfg = MlpConfig(input_dim=3, hidden=(4,), n_classes=2)
    x = np.zeros((5, 3))
    y = np.zeros(5, dtype=int)
    model = train(cfg, (x, y), TrainHyper(epochs=0, seed=9))
    assert model == params_to_map(init_params(cfg, seed=9))


def test_train_deterministic():
    ds = gen_dataset(3, 4, 40, 3.0, seed=2)
    cfg = MlpConfig(input_dim=4, hidden=(8,), n_classes=3)
    h = TrainHyper(lr=0.1, epochs=10, seed=4, jitter=0.1, label_smoothing=0.05)
    a = train(cfg, ds.subset(ds.train_idx), h)
    b = train(cfg, ds.subset(ds.train_idx), h)
    assert a == b


def test_train_divergence_detected():
    x = np.full((8, 2), 1e3)
    y = np.array([0, 1] * 4)
    cfg = MlpConfig(input_dim=2, hidden=(4,), n_classes=2)
    with pytest.raises(TrainingDiverged):
        # the first step blows the weights past 1e150; the next penalty overflows
        train(cfg, (x, y), TrainHyper(lr=1e170, epochs=3, weight_decay=1.0, seed=0))


def test_mlp_config_validation():
    with pytest.raises(ValueError):
        MlpConfig(input_dim=2, hidden=(), n_classes=2)
    with pytest.raises(ValueError):
        MlpConfig(input_dim=2, hidden=(4,), n_classes=1)
    with pytest.raises(ValueError):
        MlpConfig(input_dim=2, hidden=(4,), n_classes=2, activation="tanh")


def test_tensor_names_follow_layer_scheme():
    cfg = MlpConfig(input_dim=3, hidden=(4, 5), n_classes=2)
    model = params_to_map(init_params(cfg, seed=0))
    assert model.names() == [
        "layers.0.bias", "layers.0.weight",
        "layers.1.bias", "layers.1.weight",
        "layers.2.bias", "layers.2.weight",
    ]


# ---------------------------------------------------------------- metrics


def toy_setup(seed=0):
    ds = gen_dataset(4, 8, 60, 3.0, seed=seed)
    ds = split_forget(ds, "random_fraction", seed=seed, fraction=0.1)
    cfg = MlpConfig(input_dim=8, hidden=(16,), n_classes=4)
    model = train(cfg, ds.subset(ds.train_idx), TrainHyper(lr=0.15, epochs=40, seed=seed))
    return ds, cfg, model


def test_evaluate_reports_three_accuracies():
    ds, cfg, model = toy_setup()
    report = evaluate(model, ds, cfg)
    for v in (report.acc_Df, report.acc_Dr, report.acc_Dtest):
        assert 0.0 <= v <= 1.0
    assert report.acc_Dr >= 0.9  # separable data, trained model


def test_evaluate_untrained_is_chance_level():
    accs = []
    for seed in range(8):
        ds = gen_dataset(10, 8, 40, 3.0, seed=seed)
        ds = split_forget(ds, "random_fraction", seed=seed, fraction=0.1)
        cfg = MlpConfig(input_dim=8, hidden=(16,), n_classes=10)
        model = params_to_map(init_params(cfg, seed=seed))
        accs.append(evaluate(model, ds, cfg).acc_Dtest)
    assert abs(float(np.mean(accs)) - 0.1) <= 0.05


def test_evaluate_empty_test_errors():
    ds, cfg, model = toy_setup()
    from dataclasses import replace
    broken = replace(ds, test_idx=np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        evaluate(model, broken, cfg)


def test_mia_extreme_thresholds():
    ds, cfg, model = toy_setup()
    eff = mia_efficacy(model, ds, cfg)
    assert 0.0 <= eff <= 1.0


def test_mia_degenerate_losses_warn():
    ds, cfg, _ = toy_setup()
    cfg2 = MlpConfig(input_dim=8, hidden=(4,), n_classes=4)
    zero = params_to_map([(np.zeros((8, 4)), np.zeros(4)), (np.zeros((4, 4)), np.zeros(4))])
    with pytest.warns(UserWarning):
        assert mia_efficacy(zero, ds, cfg2) == 0.0


def test_mia_separates_members_from_nonmembers():
    # model overfit on train: forget samples (members) must look like members
    ds, cfg, model = toy_setup()
    eff_original = mia_efficacy(model, ds, cfg)
    retrain = train(cfg, ds.subset(ds.retain_idx), TrainHyper(lr=0.15, epochs=40, seed=0))
    eff_retrain = mia_efficacy(retrain, ds, cfg)
    assert eff_retrain >= eff_original


# ---------------------------------------------------------------- pipeline


def test_finetune_grid_enumeration():
    grid = FinetuneGrid(learning_rates=(0.1, 0.2), epoch_counts=(5,), weight_decays=(0.0,),
                        label_smoothings=(0.0, 0.1), jitters=(0.0,), seeds=(0,),
                        pool_size=3, allow_any_pool_size=True)
    configs = grid.configs()
    assert len(configs) == 3
    assert [(c.lr, c.label_smoothing) for c in configs] == [(0.1, 0.0), (0.1, 0.1), (0.2, 0.0)]


def test_finetune_grid_size_range():
    with pytest.raises(ValueError):
        FinetuneGrid(pool_size=3)
    with pytest.raises(ValueError):
        FinetuneGrid(pool_size=31)
    FinetuneGrid(pool_size=3, allow_any_pool_size=True)


def test_finetune_pool_members_start_from_base():
    ds = gen_dataset(3, 4, 50, 3.0, seed=1)
    ds = split_forget(ds, "random_fraction", seed=1, fraction=0.2)
    cfg = MlpConfig(input_dim=4, hidden=(8,), n_classes=3)
    base = train(cfg, ds.subset(ds.train_idx), TrainHyper(lr=0.1, epochs=10, seed=1))
    grid = FinetuneGrid(learning_rates=(0.05,), epoch_counts=(0, 3), weight_decays=(0.0,),
                        label_smoothings=(0.0,), jitters=(0.0,), seeds=(0,),
                        pool_size=2, allow_any_pool_size=True)
    pool = finetune_pool(base, ds.subset(ds.forget_idx), grid, cfg)
    assert len(pool) == 2
    # zero-epoch member: task vector is exactly zero
    assert np.all(diff(pool[0], base).delta["layers.0.weight"] == 0.0)
    assert not np.all(diff(pool[1], base).delta["layers.0.weight"] == 0.0)


def test_experiment_config_json_roundtrip():
    config = ExperimentConfig(seeds=(0, 1), methods=("uniform", "negmerge_avg"))
    back = ExperimentConfig.from_json(config.to_json())
    assert back == config


def test_experiment_config_rejects_unknown_fields():
    with pytest.raises(ValueError):
        ExperimentConfig.from_json(json.dumps({"bogus_field": 1}))
    with pytest.raises(ValueError):
        ExperimentConfig(methods=("frobnicate",))


def small_config(**overrides):
    defaults = dict(
        n_classes=3, dim=6, samples_per_class=40, separation=3.0,
        base_hyper=TrainHyper(lr=0.15, epochs=25, batch_size=32),
        grid=FinetuneGrid(learning_rates=(0.2,), epoch_counts=(25,), weight_decays=(0.0,),
                          label_smoothings=(0.0, 0.1), jitters=(0.0, 0.1), seeds=(0,),
                          pool_size=4, allow_any_pool_size=True),
        methods=("negmerge_avg", "uniform"),
        seeds=(0,),
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


def test_run_single_seed_structure():
    result = run_single_seed(small_config(), seed=0)
    assert set(result.methods) == {"negmerge_avg", "uniform"}
    assert result.retrain.avg_gap == 0.0
    for mr in result.methods.values():
        assert mr.report.avg_gap is not None
        assert 0.0 <= mr.zero_fraction <= 1.0
        assert mr.selected_lambda in mr.sweep["grid"]
    # negation can only reduce forget accuracy relative to base
    assert result.methods["uniform"].report.acc_Df <= result.base.acc_Df + 1e-9


def test_run_single_seed_deterministic():
    a = run_single_seed(small_config(), seed=3)
    b = run_single_seed(small_config(), seed=3)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_stage_attribution():
    bad = small_config(n_classes=3, forget_mode="class_wise", forget_class=99)
    with pytest.raises(ExperimentStageError) as e:
        run_single_seed(bad, seed=0)
    assert e.value.stage == "split_forget"


def test_eval_report_gap():
    ref = EvalReport(acc_Df=0.9, acc_Dr=1.0, acc_Dtest=0.9, mia_efficacy=0.1)
    got = EvalReport(acc_Df=0.8, acc_Dr=0.9, acc_Dtest=1.0, mia_efficacy=0.3).with_gap(ref)
    assert got.avg_gap == pytest.approx(100 * (0.1 + 0.1 + 0.1 + 0.2) / 4)
