"""End-to-end desk-scale unlearning experiments.

Pipeline per experiment seed: generate Gaussian-cluster data, train a base
model on the full train split, train a from-scratch reference on the retain
split only, fine-tune a hyperparameter-varied pool on the forget split,
merge the resulting task vectors under each requested strategy, pick the
scaling coefficient under the retain floor, and score everything against the
reference.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..analysis import DEFAULT_GRID, DEFAULT_RETAIN_FLOOR, sparsity_report, sweep_lambda
from ..errors import ExperimentStageError, NoFeasibleLambda
from ..merging import MergeSpec, greedy_soup, merge
from ..task_vector import NegationConfig, TaskVector, apply, diff
from ..tensor_store import TensorMap
from .data import Dataset, gen_dataset, split_forget
from .mlp import MlpConfig, TrainHyper, accuracy, sample_losses, train

KNOWN_METHODS = (
    "negmerge_avg", "negmerge_min", "negmerge_max",
    "conflict", "uniform", "ties", "magmax",
    "single_best", "greedy",
)


def derive_seed(*parts) -> int:
    """Stable sub-seed from arbitrary labels (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class FinetuneGrid:
    """Axes of the fine-tuning pool; the cross product, enumerated in field
    order, is truncated to ``pool_size`` members."""

    learning_rates: tuple[float, ...] = (0.3, 0.15)
    epoch_counts: tuple[int, ...] = (60,)
    weight_decays: tuple[float, ...] = (0.0, 1e-3)
    label_smoothings: tuple[float, ...] = (0.0, 0.1)
    jitters: tuple[float, ...] = (0.0, 0.2)
    seeds: tuple[int, ...] = (0,)
    pool_size: int = 10
    batch_size: int = 32
    allow_any_pool_size: bool = False

    def __post_init__(self):
        for name in ("learning_rates", "epoch_counts", "weight_decays",
                     "label_smoothings", "jitters", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"FinetuneGrid.{name} must be non-empty")
        if not self.allow_any_pool_size and not (5 <= self.pool_size <= 30):
            raise ValueError(f"pool_size {self.pool_size} outside the 5..30 validation range")
        if self.pool_size < 1:
            raise ValueError("pool_size must be positive")

    def configs(self) -> list[TrainHyper]:
        combos = itertools.product(self.learning_rates, self.epoch_counts, self.weight_decays,
                                   self.label_smoothings, self.jitters, self.seeds)
        out = []
        for lr, epochs, wd, ls, jitter, seed in itertools.islice(combos, self.pool_size):
            out.append(TrainHyper(lr=lr, epochs=epochs, weight_decay=wd, label_smoothing=ls,
                                  batch_size=self.batch_size, seed=seed, jitter=jitter))
        return out


def finetune_pool(base: TensorMap, forget_data: tuple[np.ndarray, np.ndarray],
                  grid: FinetuneGrid, cfg: MlpConfig, seed_tag=()) -> list[TensorMap]:
    """Fine-tune one model per grid configuration, all starting from ``base``."""
    members = []
    for i, hyper in enumerate(grid.configs()):
        member_hyper = replace(hyper, seed=derive_seed(*seed_tag, "finetune", i, hyper.seed))
        try:
            members.append(train(cfg, forget_data, member_hyper, start=base))
        except Exception as e:
            raise ExperimentStageError(f"finetune_pool[member {i}, {hyper}]", e) from e
    return members


@dataclass
class EvalReport:
    acc_Df: float
    acc_Dr: float
    acc_Dtest: float
    mia_efficacy: float | None = None
    avg_gap: float | None = None

    def with_gap(self, reference: "EvalReport") -> "EvalReport":
        deltas = [
            abs(self.acc_Dr - reference.acc_Dr),
            abs(self.acc_Df - reference.acc_Df),
            abs(self.acc_Dtest - reference.acc_Dtest),
            abs((self.mia_efficacy or 0.0) - (reference.mia_efficacy or 0.0)),
        ]
        return replace(self, avg_gap=100.0 * float(np.mean(deltas)))

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: TensorMap, ds: Dataset, cfg: MlpConfig) -> EvalReport:
    """Top-1 accuracy on the forget/retain/test partitions (no MIA)."""
    if ds.test_idx.size == 0:
        raise ValueError("empty test split")
    return EvalReport(
        acc_Df=accuracy(model, *ds.subset(ds.forget_idx), cfg),
        acc_Dr=accuracy(model, *ds.subset(ds.retain_idx), cfg),
        acc_Dtest=accuracy(model, *ds.subset(ds.test_idx), cfg),
    )


def mia_efficacy(model: TensorMap, ds: Dataset, cfg: MlpConfig) -> float:
    """Fraction of forget samples a loss-threshold attack calls non-members.

    The threshold maximizes balanced member/non-member accuracy between the
    retain split (members) and the test split (non-members); ties pick the
    smallest threshold.
    """
    if ds.retain_idx.size == 0 or ds.test_idx.size == 0:
        raise ValueError("MIA needs non-empty retain and test splits")
    member = sample_losses(model, *ds.subset(ds.retain_idx), cfg)
    non = sample_losses(model, *ds.subset(ds.test_idx), cfg)
    combined = np.concatenate([member, non])
    if np.all(combined == combined[0]):
        warnings.warn("all losses identical; loss-threshold attack is degenerate")
        return 0.0
    cands = np.unique(combined)
    tpr = np.searchsorted(np.sort(member), cands, side="right") / member.size
    tnr = 1.0 - np.searchsorted(np.sort(non), cands, side="right") / non.size
    threshold = cands[np.argmax(0.5 * (tpr + tnr))]
    forget_losses = sample_losses(model, *ds.subset(ds.forget_idx), cfg)
    return float(np.mean(forget_losses > threshold))


@dataclass(frozen=True)
class ExperimentConfig:
    n_classes: int = 10
    dim: int = 16
    samples_per_class: int = 200
    separation: float = 3.0
    forget_mode: str = "random_fraction"
    forget_fraction: float = 0.10
    forget_class: int | None = None
    hidden: tuple[int, ...] = (32,)
    base_hyper: TrainHyper = TrainHyper(lr=0.15, epochs=60, batch_size=64)
    grid: FinetuneGrid = FinetuneGrid()
    methods: tuple[str, ...] = ("negmerge_avg", "uniform", "conflict", "ties", "magmax", "single_best")
    lambda_grid: tuple[float, ...] = tuple(DEFAULT_GRID)
    retain_floor: float = DEFAULT_RETAIN_FLOOR
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9)

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in KNOWN_METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; known: {KNOWN_METHODS}")
        if not self.seeds:
            raise ValueError("at least one experiment seed is required")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        if "base_hyper" in raw:
            raw["base_hyper"] = TrainHyper(**raw["base_hyper"])
        if "grid" in raw:
            raw["grid"] = FinetuneGrid(**{k: tuple(v) if isinstance(v, list) else v
                                          for k, v in raw["grid"].items()})
        for key in ("hidden", "methods", "lambda_grid", "seeds"):
            if key in raw and isinstance(raw[key], list):
                raw[key] = tuple(raw[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown ExperimentConfig fields: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class MethodResult:
    method: str
    selected_lambda: float
    report: EvalReport
    zero_fraction: float
    sweep: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "selected_lambda": self.selected_lambda,
            "report": self.report.to_dict(),
            "zero_fraction": self.zero_fraction,
            "sweep": self.sweep,
        }


@dataclass
class SeedResult:
    seed: int
    base: EvalReport
    retrain: EvalReport
    methods: dict[str, MethodResult]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "base": self.base.to_dict(),
            "retrain": self.retrain.to_dict(),
            "methods": {k: v.to_dict() for k, v in self.methods.items()},
        }


@dataclass
class ExperimentReport:
    config: dict
    per_seed: list[SeedResult]

    def to_json(self) -> str:
        return json.dumps({"config": self.config,
                           "per_seed": [s.to_dict() for s in self.per_seed]})

    def aggregate_rows(self) -> list[dict]:
        """Mean-over-seeds table in the comparison layout, reference row first."""
        rows = []

        def mean_row(label, reports):
            return {
                "method": label,
                "acc_Dr": float(np.mean([r.acc_Dr for r in reports])),
                "acc_Df": float(np.mean([r.acc_Df for r in reports])),
                "acc_Dtest": float(np.mean([r.acc_Dtest for r in reports])),
                "mia_efficacy": float(np.mean([r.mia_efficacy for r in reports])),
                "avg_gap": float(np.mean([r.avg_gap for r in reports])),
            }

        rows.append(mean_row("retrain", [s.retrain for s in self.per_seed]))
        rows.append(mean_row("base", [s.base for s in self.per_seed]))
        for method in self.per_seed[0].methods:
            rows.append(mean_row(method, [s.methods[method].report for s in self.per_seed]))
        return rows

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "acc_Dr", "acc_Df", "acc_Dtest", "mia_efficacy", "avg_gap"])
        for row in self.aggregate_rows():
            w.writerow([row["method"]] + [repr(row[k]) for k in
                                          ("acc_Dr", "acc_Df", "acc_Dtest", "mia_efficacy", "avg_gap")])
        return buf.getvalue()


def _merged_vector(method: str, taus: list[TaskVector], models: list[TensorMap],
                   base: TensorMap, retain_loss) -> TaskVector:
    if method == "negmerge_avg":
        return merge(taus, MergeSpec(method="negmerge", reduce="avg"))
    if method == "negmerge_min":
        return merge(taus, MergeSpec(method="negmerge", reduce="min_mag"))
    if method == "negmerge_max":
        return merge(taus, MergeSpec(method="negmerge", reduce="max_mag"))
    if method in ("conflict", "uniform", "ties", "magmax"):
        return merge(taus, MergeSpec(method=method))
    if method == "greedy":
        return greedy_soup(models, base, retain_loss)
    raise ValueError(f"no merge rule for method {method!r}")


def run_single_seed(config: ExperimentConfig, seed: int) -> SeedResult:
    cfg = MlpConfig(input_dim=config.dim, hidden=config.hidden, n_classes=config.n_classes)

    def stage(name, fn):
        try:
            return fn()
        except ExperimentStageError:
            raise
        except Exception as e:
            raise ExperimentStageError(name, e) from e

    ds = stage("gen_dataset", lambda: gen_dataset(
        config.n_classes, config.dim, config.samples_per_class, config.separation,
        seed=derive_seed(seed, "data")))
    ds = stage("split_forget", lambda: split_forget(
        ds, config.forget_mode, seed=derive_seed(seed, "forget"),
        fraction=config.forget_fraction, class_id=config.forget_class))

    base_hyper = replace(config.base_hyper, seed=derive_seed(seed, "base"))
    base = stage("train_base", lambda: train(cfg, ds.subset(ds.train_idx), base_hyper))
    retrain_hyper = replace(config.base_hyper, seed=derive_seed(seed, "retrain"))
    retrain = stage("train_retrain", lambda: train(cfg, ds.subset(ds.retain_idx), retrain_hyper))

    models = stage("finetune_pool", lambda: finetune_pool(
        base, ds.subset(ds.forget_idx), config.grid, cfg, seed_tag=(seed,)))
    taus = [diff(m, base, origin=f"member_{i}") for i, m in enumerate(models)]

    x_val, y_val = ds.subset(ds.val_idx)
    x_forget, y_forget = ds.subset(ds.forget_idx)
    x_retain, y_retain = ds.subset(ds.retain_idx)

    def eval_model(m: TensorMap) -> tuple[float, float]:
        return accuracy(m, x_val, y_val, cfg), accuracy(m, x_forget, y_forget, cfg)

    def retain_loss(m: TensorMap) -> float:
        return float(sample_losses(m, x_retain, y_retain, cfg).mean())

    def score(model: TensorMap) -> EvalReport:
        rep = evaluate(model, ds, cfg)
        return replace(rep, mia_efficacy=mia_efficacy(model, ds, cfg))

    retrain_report = stage("evaluate_retrain", lambda: score(retrain))
    retrain_report = retrain_report.with_gap(retrain_report)
    base_report = stage("evaluate_base", lambda: score(base).with_gap(retrain_report))

    lam_grid = list(config.lambda_grid)
    results: dict[str, MethodResult] = {}
    for method in config.methods:
        if method == "single_best":
            def pick_best():
                best = None
                for i, tau in enumerate(taus):
                    try:
                        sweep = sweep_lambda(base, tau, lam_grid, eval_model, config.retain_floor)
                    except NoFeasibleLambda:
                        continue
                    forget_at = sweep.forget[sweep.grid.index(sweep.selected_lambda)]
                    if best is None or forget_at < best[0]:
                        best = (forget_at, i, tau, sweep)
                if best is None:
                    raise NoFeasibleLambda("no pool member admits a feasible coefficient")
                return best[2], best[3]
            tau, sweep = stage("single_best", pick_best)
        else:
            tau = stage(f"merge[{method}]", lambda m=method: _merged_vector(m, taus, models, base, retain_loss))
            sweep = stage(f"sweep[{method}]", lambda t=tau: sweep_lambda(
                base, t, lam_grid, eval_model, config.retain_floor))
        model = apply(base, tau, NegationConfig(lam=sweep.selected_lambda, direction="negate"))
        report = stage(f"evaluate[{method}]", lambda m=model: score(m).with_gap(retrain_report))
        results[method] = MethodResult(
            method=method,
            selected_lambda=sweep.selected_lambda,
            report=report,
            zero_fraction=sparsity_report(tau).zero_fraction,
            sweep=json.loads(sweep.to_json()),
        )

    return SeedResult(seed=seed, base=base_report, retrain=retrain_report, methods=results)


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    per_seed = [run_single_seed(config, s) for s in config.seeds]
    return ExperimentReport(config=json.loads(config.to_json()), per_seed=per_seed)
