"""Training orchestration: joint training under either constraint mode, the
separately-trained regression baseline, evaluation runs, weight tuning on a
validation split, and experiment sweeps.

The whole train-and-evaluate pipeline is a deterministic function of
(dataset, config, seed): batches are drawn from a seeded shuffle, both heads
are updated from every batch, and the learning rate follows a two-phase
schedule with Adam moments carried across the phase boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import split_dataset
from .features import (
    ABLATIONS,
    CategoryStats,
    FeatureStandardizer,
    compute_statistical_features,
)
from .metrics import SplitReport, split_report
from .models import (
    HeadConfig,
    HeadParams,
    PredictionOutcome,
    TrainedModel,
    backward_batch,
    init_head,
    run_head_batch,
)
from .numeric import AdamState, adam_step
from .objectives import (
    ConstraintConfig,
    RangeLossParams,
    percentile_objective,
    range_loss_batch,
    threshold_objective,
)

TRAINER_KINDS = ("joint", "baseline")

TUNING_GRID = (0.1, 0.5, 1.0, 2.0, 5.0)


class TrainingDiverged(RuntimeError):
    """The objective became non-finite during training."""


@dataclass
class TrainingConfig:
    """All hyperparameters of one training run.

    Desk-scale defaults: 90 epochs over two fixed-learning-rate phases with a
    2:1 epoch split and 5:2 rate ratio, batch size 256.
    """

    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)
    range_params: RangeLossParams = field(default_factory=RangeLossParams)
    lr_phase1: float = 5e-4
    lr_phase2: float = 2e-4
    epochs_phase1: int = 60
    epochs_phase2: int = 30
    batch_size: int = 256
    seed: int = 0
    ablation: str = "none"
    hidden_sizes: tuple[int, ...] = (128, 64)
    embed_dim: int = 8
    visual_dim: int = 64
    vocab_size: int = 1000
    trainer: str = "joint"
    split_fractions: tuple[float, float, float] = (0.78, 0.04, 0.18)

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.constraint.mode == "threshold" and self.batch_size < 2:
            raise ValueError("threshold mode needs batch_size >= 2")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.trainer not in TRAINER_KINDS:
            raise ValueError(f"trainer must be one of {TRAINER_KINDS}")

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            visual_dim=self.visual_dim,
            embed_dim=self.embed_dim,
            vocab_size=self.vocab_size,
            hidden_sizes=self.hidden_sizes,
        )

    def to_dict(self) -> dict:
        return {
            "constraint": self.constraint.to_dict(),
            "range": self.range_params.to_dict(),
            "lr_phase1": self.lr_phase1,
            "lr_phase2": self.lr_phase2,
            "epochs_phase1": self.epochs_phase1,
            "epochs_phase2": self.epochs_phase2,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "ablation": self.ablation,
            "hidden_sizes": list(self.hidden_sizes),
            "embed_dim": self.embed_dim,
            "visual_dim": self.visual_dim,
            "vocab_size": self.vocab_size,
            "trainer": self.trainer,
            "split_fractions": list(self.split_fractions),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        known = set(cls().to_dict())
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config field '{sorted(unknown)[0]}'")
        kwargs = dict(data)
        if "constraint" in kwargs:
            kwargs["constraint"] = ConstraintConfig.from_dict(kwargs["constraint"])
        if "range" in kwargs:
            kwargs["range_params"] = RangeLossParams.from_dict(kwargs.pop("range"))
        return cls(**kwargs)


@dataclass
class EpochStats:
    """One training epoch's summary line.

    ``positive_fraction`` is None for baseline runs, which have no
    classifier; ``positive_regression_loss`` then averages over all items.
    """

    epoch: int
    learning_rate: float
    objective: float
    positive_fraction: float | None
    positive_regression_loss: float
    constraint_term: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "learning_rate": self.learning_rate,
            "objective": self.objective,
            "positive_fraction": self.positive_fraction,
            "positive_regression_loss": self.positive_regression_loss,
            "constraint_term": self.constraint_term,
        }


@dataclass
class TrainingHistory:
    epochs: list[EpochStats]

    def __len__(self) -> int:
        return len(self.epochs)

    def to_records(self) -> list[dict]:
        return [e.to_dict() for e in self.epochs]


@dataclass
class FeatureContext:
    """Feature-pipeline state fit on the training split."""

    stats: CategoryStats
    standardizer: FeatureStandardizer


def prepare_feature_context(items) -> FeatureContext:
    stats = compute_statistical_features(items)
    vectors = np.stack([stats.vector_for(it.category) for it in items])
    return FeatureContext(stats, FeatureStandardizer.fit(vectors))


@dataclass
class ItemArrays:
    """Dataset columns ready for batched head passes."""

    visuals: np.ndarray
    tokens: np.ndarray
    stats: np.ndarray
    sold_mask: np.ndarray
    log_prices: np.ndarray


def prepare_item_arrays(items, ctx: FeatureContext) -> ItemArrays:
    if not items:
        raise ValueError("no items to prepare")
    visuals = np.stack([it.visual for it in items])
    tokens = np.stack([it.tokens for it in items])
    raw = np.stack([ctx.stats.vector_for(it.category) for it in items])
    return ItemArrays(
        visuals=visuals,
        tokens=tokens,
        stats=ctx.standardizer.transform(raw),
        sold_mask=np.array([it.status == "sold" for it in items]),
        log_prices=np.array([it.log_price for it in items]),
    )


@dataclass
class TrainJointResult:
    classifier: HeadParams
    regressor: HeadParams
    history: TrainingHistory
    features: FeatureContext


@dataclass
class TrainBaselineResult:
    regressor: HeadParams
    history: TrainingHistory
    features: FeatureContext


def _phases(cfg: TrainingConfig):
    return ((cfg.lr_phase1, cfg.epochs_phase1), (cfg.lr_phase2, cfg.epochs_phase2))


def _check_dataset_fits(arrays: ItemArrays, cfg: TrainingConfig):
    if arrays.visuals.shape[1] != cfg.visual_dim:
        raise ValueError(
            f"dataset visual dimension {arrays.visuals.shape[1]} does not match "
            f"configured visual_dim {cfg.visual_dim}"
        )
    if int(arrays.tokens.max()) >= cfg.vocab_size:
        raise ValueError(
            f"dataset token id {int(arrays.tokens.max())} exceeds configured "
            f"vocab_size {cfg.vocab_size}"
        )


def train_joint(items, cfg: TrainingConfig) -> TrainJointResult:
    """Jointly train the classifier and regressor on seeded mini-batches.

    Every batch runs both heads forward, evaluates the configured joint
    objective, and applies one Adam step per head.
    """
    if not items:
        raise ValueError("training split is empty")
    ctx = prepare_feature_context(items)
    arrays = prepare_item_arrays(items, ctx)
    _check_dataset_fits(arrays, cfg)
    rng = np.random.default_rng(cfg.seed)
    classifier = init_head(cfg.head_config(), rng)
    regressor = init_head(cfg.head_config(), rng)
    cls_params = classifier.param_dict()
    reg_params = regressor.param_dict()
    cls_adam = AdamState.for_params(cls_params)
    reg_adam = AdamState.for_params(reg_params)
    n = len(items)
    epochs: list[EpochStats] = []
    epoch_index = 0
    for lr, n_epochs in _phases(cfg):
        for _ in range(n_epochs):
            perm = rng.permutation(n)
            objective_sum = 0.0
            constraint_sum = 0.0
            fraction_sum = 0.0
            n_batches = 0
            positive_loss_sum = 0.0
            positive_count = 0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                try:
                    predicted, reg_cache = run_head_batch(
                        arrays.visuals[idx], arrays.tokens[idx], arrays.stats[idx],
                        regressor, "regression", cfg.ablation,
                    )
                    confidence, cls_cache = run_head_batch(
                        arrays.visuals[idx], arrays.tokens[idx], arrays.stats[idx],
                        classifier, "classification", cfg.ablation,
                    )
                except FloatingPointError as exc:
                    raise TrainingDiverged(
                        f"training diverged at epoch {epoch_index}, "
                        f"batch {start // cfg.batch_size}: {exc}"
                    ) from exc
                losses, subgrads = range_loss_batch(
                    arrays.sold_mask[idx], predicted, arrays.log_prices[idx],
                    cfg.range_params,
                )
                if cfg.constraint.mode == "percentile":
                    objective = percentile_objective(confidence, losses, cfg.constraint)
                else:
                    objective = threshold_objective(confidence, losses, cfg.constraint)
                if not math.isfinite(objective.value):
                    raise TrainingDiverged(
                        f"objective became non-finite at epoch {epoch_index}, "
                        f"batch {start // cfg.batch_size}"
                    )
                reg_grads = backward_batch(
                    regressor, reg_cache, objective.grad_regression_loss * subgrads
                )
                cls_grads = backward_batch(classifier, cls_cache, objective.grad_confidence)
                adam_step(reg_params, reg_grads, reg_adam, lr)
                adam_step(cls_params, cls_grads, cls_adam, lr)
                hard = confidence >= 0.5
                positive_loss_sum += float(losses[hard].sum())
                positive_count += int(hard.sum())
                objective_sum += objective.value
                constraint_sum += objective.constraint_term
                fraction_sum += float(hard.mean())
                n_batches += 1
            epochs.append(
                EpochStats(
                    epoch=epoch_index,
                    learning_rate=lr,
                    objective=objective_sum / n_batches,
                    positive_fraction=fraction_sum / n_batches,
                    positive_regression_loss=(
                        positive_loss_sum / positive_count if positive_count else 0.0
                    ),
                    constraint_term=constraint_sum / n_batches,
                )
            )
            epoch_index += 1
    return TrainJointResult(classifier, regressor, TrainingHistory(epochs), ctx)


def train_baseline_regression(items, cfg: TrainingConfig) -> TrainBaselineResult:
    """Train the regression head alone on every item, without confidence
    weighting; architecture and schedule match the joint runs."""
    if not items:
        raise ValueError("training split is empty")
    ctx = prepare_feature_context(items)
    arrays = prepare_item_arrays(items, ctx)
    _check_dataset_fits(arrays, cfg)
    rng = np.random.default_rng(cfg.seed)
    regressor = init_head(cfg.head_config(), rng)
    reg_params = regressor.param_dict()
    reg_adam = AdamState.for_params(reg_params)
    n = len(items)
    epochs: list[EpochStats] = []
    epoch_index = 0
    for lr, n_epochs in _phases(cfg):
        for _ in range(n_epochs):
            perm = rng.permutation(n)
            objective_sum = 0.0
            loss_sum = 0.0
            loss_count = 0
            n_batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                try:
                    predicted, reg_cache = run_head_batch(
                        arrays.visuals[idx], arrays.tokens[idx], arrays.stats[idx],
                        regressor, "regression", cfg.ablation,
                    )
                except FloatingPointError as exc:
                    raise TrainingDiverged(
                        f"training diverged at epoch {epoch_index}, "
                        f"batch {start // cfg.batch_size}: {exc}"
                    ) from exc
                losses, subgrads = range_loss_batch(
                    arrays.sold_mask[idx], predicted, arrays.log_prices[idx],
                    cfg.range_params,
                )
                value = float(np.mean(losses))
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"objective became non-finite at epoch {epoch_index}, "
                        f"batch {start // cfg.batch_size}"
                    )
                reg_grads = backward_batch(regressor, reg_cache, subgrads / idx.size)
                adam_step(reg_params, reg_grads, reg_adam, lr)
                objective_sum += value
                loss_sum += float(losses.sum())
                loss_count += idx.size
                n_batches += 1
            epochs.append(
                EpochStats(
                    epoch=epoch_index,
                    learning_rate=lr,
                    objective=objective_sum / n_batches,
                    positive_fraction=None,
                    positive_regression_loss=loss_sum / loss_count,
                    constraint_term=0.0,
                )
            )
            epoch_index += 1
    return TrainBaselineResult(regressor, TrainingHistory(epochs), ctx)


def predict_items(
    classifier: HeadParams,
    regressor: HeadParams,
    items,
    ctx: FeatureContext,
    ablation: str = "none",
) -> list[PredictionOutcome]:
    """Suggested log price, confidence, and hard label for every item."""
    arrays = prepare_item_arrays(items, ctx)
    prices, _ = run_head_batch(
        arrays.visuals, arrays.tokens, arrays.stats, regressor, "regression", ablation
    )
    confidences, _ = run_head_batch(
        arrays.visuals, arrays.tokens, arrays.stats, classifier, "classification", ablation
    )
    return [
        PredictionOutcome.from_outputs(price, conf)
        for price, conf in zip(prices, confidences)
    ]


def evaluate_split(
    classifier: HeadParams,
    regressor: HeadParams,
    items,
    rp: RangeLossParams,
    ctx: FeatureContext,
    ablation: str = "none",
) -> SplitReport:
    """Classify every item, predict prices for all, and report per side."""
    if not items:
        raise ValueError("cannot evaluate an empty dataset")
    predictions = predict_items(classifier, regressor, items, ctx, ablation)
    return split_report(predictions, items, rp)


def as_trained_model(result, cfg: TrainingConfig) -> TrainedModel:
    """Bundle a training result with its feature context for persistence."""
    return TrainedModel(
        regressor=result.regressor,
        classifier=getattr(result, "classifier", None),
        head_config=cfg.head_config(),
        stats=result.features.stats,
        standardizer=result.features.standardizer,
        constraint=cfg.constraint,
        range_params=cfg.range_params,
        ablation=cfg.ablation,
        trainer_kind=cfg.trainer,
        seed=cfg.seed,
    )


def model_predict(model: TrainedModel, items) -> list[PredictionOutcome]:
    if model.classifier is None:
        raise ValueError(
            "model has no classifier (baseline regressor); "
            "evaluate it against a jointly trained classifier"
        )
    ctx = FeatureContext(model.stats, model.standardizer)
    return predict_items(model.classifier, model.regressor, items, ctx, model.ablation)


@dataclass
class SweepSpec:
    """What run_experiment_suite should vary.

    ``kind`` is "percentile" (values are delta targets), "threshold" (values
    are epsilon thresholds), or "ablation" (values ignored; rows cover the
    baseline, the full joint model, and the three feature ablations).
    """

    kind: str
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("percentile", "threshold", "ablation"):
            raise ValueError("sweep kind must be percentile, threshold, or ablation")
        self.values = tuple(self.values)
        if self.kind != "ablation" and not self.values:
            raise ValueError(f"a {self.kind} sweep needs at least one value")


def _report_row(label: str, cfg: TrainingConfig, value, report: SplitReport, n_items: int) -> dict:
    return {
        "row": label,
        "constraint_mode": cfg.constraint.mode,
        "constraint_value": value,
        "ablation": cfg.ablation,
        "n_items": n_items,
        "positive_count": report.positive_count,
        "positive_fraction": report.positive_fraction,
        "positive": report.positive.to_dict(),
        "negative": report.negative.to_dict(),
    }


def run_experiment_suite(items, base_cfg: TrainingConfig, sweep: SweepSpec) -> list[dict]:
    """Train and evaluate one configuration per sweep point, sharing the seed.

    The dataset is split internally with the configured fractions and seed;
    training uses the train split and reports come from the test split.
    """
    train_items, _, test_items = split_dataset(
        items, base_cfg.split_fractions, base_cfg.seed
    )

    def run_joint(label: str, cfg: TrainingConfig):
        try:
            result = train_joint(train_items, cfg)
            report = evaluate_split(
                result.classifier, result.regressor, test_items,
                cfg.range_params, result.features, cfg.ablation,
            )
            return result, report
        except Exception as exc:
            raise RuntimeError(f"sweep configuration '{label}' failed: {exc}") from exc

    rows = []
    if sweep.kind == "percentile":
        for value in sweep.values:
            cfg = replace(
                base_cfg,
                constraint=replace(base_cfg.constraint, mode="percentile", delta=value),
            )
            label = f"percentile-{value:g}"
            _, report = run_joint(label, cfg)
            rows.append(_report_row(label, cfg, value, report, len(test_items)))
    elif sweep.kind == "threshold":
        for value in sweep.values:
            cfg = replace(
                base_cfg,
                constraint=replace(base_cfg.constraint, mode="threshold", epsilon=value),
            )
            label = f"threshold-{value:g}"
            _, report = run_joint(label, cfg)
            rows.append(_report_row(label, cfg, value, report, len(test_items)))
    else:
        constraint_value = (
            base_cfg.constraint.delta
            if base_cfg.constraint.mode == "percentile"
            else base_cfg.constraint.epsilon
        )
        full_cfg = replace(base_cfg, ablation="none")
        full_result, full_report = run_joint("joint-full", full_cfg)
        try:
            baseline_cfg = replace(full_cfg, trainer="baseline")
            baseline = train_baseline_regression(train_items, baseline_cfg)
            baseline_report = evaluate_split(
                full_result.classifier, baseline.regressor, test_items,
                base_cfg.range_params, full_result.features, "none",
            )
        except Exception as exc:
            raise RuntimeError(f"sweep configuration 'baseline' failed: {exc}") from exc
        rows.append(
            _report_row("baseline", baseline_cfg, constraint_value, baseline_report,
                        len(test_items))
        )
        rows.append(
            _report_row("joint-full", full_cfg, constraint_value, full_report,
                        len(test_items))
        )
        for ablation in ("no_attention", "no_image", "no_text"):
            cfg = replace(base_cfg, ablation=ablation)
            label = f"joint-{ablation.replace('_', '-')}"
            _, report = run_joint(label, cfg)
            rows.append(_report_row(label, cfg, constraint_value, report, len(test_items)))
    return rows


def select_constraint_weight(
    train_items,
    val_items,
    cfg: TrainingConfig,
    grid=TUNING_GRID,
    epochs_scale: float = 0.25,
) -> tuple[float, list[dict]]:
    """Pick beta (percentile) or gamma (threshold) on the validation split.

    Each grid value gets a shortened training run; percentile mode picks the
    value whose positive fraction lands closest to delta, threshold mode the
    value with the lowest positive-side SMLE among candidates that keep at
    least half of the largest observed positive count.
    """
    if not val_items:
        raise ValueError("weight selection needs a non-empty validation split")
    candidates = []
    for value in grid:
        if cfg.constraint.mode == "percentile":
            constraint = replace(cfg.constraint, beta=value)
        else:
            constraint = replace(cfg.constraint, gamma=value)
        tune_cfg = replace(
            cfg,
            constraint=constraint,
            epochs_phase1=max(1, round(cfg.epochs_phase1 * epochs_scale)),
            epochs_phase2=max(0, round(cfg.epochs_phase2 * epochs_scale)),
        )
        result = train_joint(train_items, tune_cfg)
        report = evaluate_split(
            result.classifier, result.regressor, val_items,
            cfg.range_params, result.features, cfg.ablation,
        )
        candidates.append(
            {
                "value": value,
                "positive_fraction": report.positive_fraction,
                "positive_count": report.positive_count,
                "positive_smle": report.positive.smle,
            }
        )
    if cfg.constraint.mode == "percentile":
        best = min(
            candidates,
            key=lambda c: (abs(c["positive_fraction"] - cfg.constraint.delta), c["value"]),
        )
    else:
        largest = max(c["positive_count"] for c in candidates)
        eligible = [c for c in candidates if c["positive_count"] >= 0.5 * largest]
        best = min(eligible, key=lambda c: (c["positive_smle"], c["value"]))
    return best["value"], candidates
