"""Loss mathematics for price suggestion.

The regression loss is a hinge distance to a target price range: for an item
that sold, suggestions should land between the sold price and a marked-up
sold price; for an item that did not sell, between a discounted listing price
and the listing price itself. On top of that loss sit the two joint training
objectives for the classifier/regressor pair: a percentile objective that
penalizes classifying fewer than a quota of items as positive, and a
threshold objective that labels items by regression loss and adds an
imbalance-weighted cross entropy.

All prices are natural-log prices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

RANGE_MODES = ("multiplicative-log", "additive-log")
CONSTRAINT_MODES = ("percentile", "threshold")

# Confidence clamp applied inside logarithms so a saturated sigmoid cannot
# produce an infinite cross-entropy term.
CONFIDENCE_FLOOR = 1e-7


@dataclass
class RangeLossParams:
    """Target price range shape.

    ``mu`` (> 1) is the make-up rate setting the upper bound for sold items;
    ``nu`` (in (0,1)) is the discount rate setting the lower bound for unsold
    items. ``multiplicative-log`` applies the rates directly to log prices;
    ``additive-log`` shifts by ln(rate) instead, i.e. applies the rate to the
    original-currency price.
    """

    mu: float = 1.2
    nu: float = 1.0 / 1.2
    range_mode: str = "multiplicative-log"

    def __post_init__(self):
        if not self.mu > 1.0:
            raise ValueError("mu (make-up rate) must be > 1")
        if not 0.0 < self.nu < 1.0:
            raise ValueError("nu (discount rate) must be in (0, 1)")
        if self.range_mode not in RANGE_MODES:
            raise ValueError(f"range_mode must be one of {RANGE_MODES}")

    def to_dict(self) -> dict:
        return {"mu": self.mu, "nu": self.nu, "range_mode": self.range_mode}

    @classmethod
    def from_dict(cls, data: dict) -> "RangeLossParams":
        unknown = set(data) - {"mu", "nu", "range_mode"}
        if unknown:
            raise ValueError(f"unknown range field '{sorted(unknown)[0]}'")
        return cls(**data)


def target_range(sold, anchor_price, rp: RangeLossParams):
    """(lower, upper) bounds of the target range; vectorizes over inputs.

    ``anchor_price`` is the sold price for sold items and the listing price
    for unsold items, in log space.
    """
    sold = np.asarray(sold, dtype=bool)
    price = np.asarray(anchor_price, dtype=np.float64)
    if rp.range_mode == "multiplicative-log":
        lower = np.where(sold, price, rp.nu * price)
        upper = np.where(sold, rp.mu * price, price)
    else:
        lower = np.where(sold, price, price + math.log(rp.nu))
        upper = np.where(sold, price + math.log(rp.mu), price)
    if price.ndim == 0:
        return float(lower), float(upper)
    return lower, upper


def range_loss_sold(p_sug: float, p_sold: float, rp: RangeLossParams) -> float:
    """Hinge distance of a suggestion to the sold-item target range."""
    lower, upper = target_range(True, p_sold, rp)
    return max(lower - p_sug, 0.0) + max(p_sug - upper, 0.0)


def range_loss_unsold(p_sug: float, p_list: float, rp: RangeLossParams) -> float:
    """Hinge distance of a suggestion to the unsold-item target range."""
    lower, upper = target_range(False, p_list, rp)
    return max(lower - p_sug, 0.0) + max(p_sug - upper, 0.0)


def range_loss(
    sold: bool, p_sug: float, anchor_price: float, rp: RangeLossParams
) -> tuple[float, float]:
    """(loss, subgradient w.r.t. the suggested price).

    The subgradient is -1 below the range, +1 above it, and 0 inside,
    including exactly on the boundaries.
    """
    lower, upper = target_range(sold, anchor_price, rp)
    loss = max(lower - p_sug, 0.0) + max(p_sug - upper, 0.0)
    if p_sug < lower:
        grad = -1.0
    elif p_sug > upper:
        grad = 1.0
    else:
        grad = 0.0
    return loss, grad


def range_loss_batch(sold_mask, p_sug, anchor_prices, rp: RangeLossParams):
    """Vectorized (losses, subgradients) over aligned arrays."""
    suggested = np.asarray(p_sug, dtype=np.float64)
    lower, upper = target_range(sold_mask, anchor_prices, rp)
    losses = np.maximum(lower - suggested, 0.0) + np.maximum(suggested - upper, 0.0)
    grads = np.where(suggested < lower, -1.0, np.where(suggested > upper, 1.0, 0.0))
    return losses, grads


def kink_distance(sold: bool, p_sug: float, anchor_price: float, rp: RangeLossParams) -> float:
    """Distance of a suggestion to the nearest range-loss kink."""
    lower, upper = target_range(sold, anchor_price, rp)
    return min(abs(p_sug - lower), abs(p_sug - upper))


def hard_indicator(confidence: float) -> int:
    """Binarize a classifier confidence: 0 below 0.5, 1 otherwise."""
    return 0 if confidence < 0.5 else 1


def hard_labels(confidences) -> np.ndarray:
    """Vectorized hard indicator; True marks positive items."""
    return np.asarray(confidences, dtype=np.float64) >= 0.5


@dataclass
class ConstraintConfig:
    """Which joint objective to use and its knobs.

    Percentile mode uses ``delta`` (the minimum fraction of items to classify
    positive) and ``beta`` (the weight of the quota penalty). Threshold mode
    uses ``epsilon`` (an item is labeled positive iff its regression loss is
    at most epsilon) and ``gamma`` (the weight of the cross-entropy term).
    """

    mode: str = "percentile"
    delta: float = 0.5
    beta: float = 2.0
    epsilon: float = 0.15
    gamma: float = 1.0

    def __post_init__(self):
        if self.mode not in CONSTRAINT_MODES:
            raise ValueError(f"constraint mode must be one of {CONSTRAINT_MODES}")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must be in (0, 1]")
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be > 0")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "delta": self.delta,
            "beta": self.beta,
            "epsilon": self.epsilon,
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConstraintConfig":
        unknown = set(data) - {"mode", "delta", "beta", "epsilon", "gamma"}
        if unknown:
            raise ValueError(f"unknown constraint field '{sorted(unknown)[0]}'")
        return cls(**data)


@dataclass
class PercentileObjective:
    """Value and per-item gradient coefficients of the percentile objective."""

    value: float
    grad_confidence: np.ndarray
    grad_regression_loss: np.ndarray
    positive_fraction: float
    constraint_term: float


def percentile_objective(
    confidences, regression_losses, cfg: ConstraintConfig
) -> PercentileObjective:
    """mean(conf * loss) plus a hinge penalty on the positive-item shortfall.

    The penalty max(0, delta - positive_fraction) is non-differentiable; when
    it is active, the gradient routed to each confidence uses a
    straight-through estimator (the hard indicator is treated as the identity
    for gradient purposes, contributing -beta/n per item).
    """
    conf = np.asarray(confidences, dtype=np.float64)
    losses = np.asarray(regression_losses, dtype=np.float64)
    if conf.ndim != 1 or conf.shape != losses.shape:
        raise ValueError("confidences and losses must be aligned 1-d arrays")
    n = conf.shape[0]
    if n == 0:
        raise ValueError("objective evaluated on an empty batch")
    positive_fraction = float(np.mean(hard_labels(conf)))
    shortfall = cfg.delta - positive_fraction
    penalty = cfg.beta * max(0.0, shortfall)
    value = float(np.mean(conf * losses)) + penalty
    grad_loss = conf / n
    grad_conf = losses / n
    if shortfall > 0.0:
        grad_conf = grad_conf - cfg.beta / n
    return PercentileObjective(
        value=value,
        grad_confidence=grad_conf,
        grad_regression_loss=grad_loss,
        positive_fraction=positive_fraction,
        constraint_term=penalty,
    )


@dataclass
class ThresholdObjective:
    """Value and gradient coefficients of the threshold objective."""

    value: float
    grad_confidence: np.ndarray
    grad_regression_loss: np.ndarray
    labels: np.ndarray
    weight_positive: float
    weight_negative: float
    constraint_term: float
    dropped_side: str | None


def class_balance_weights(n_positive: int, n_negative: int) -> tuple[float, float]:
    """sqrt((P+N)/2P) and sqrt((P+N)/2N); a zero-count side gets weight 0."""
    total = n_positive + n_negative
    w_pos = math.sqrt(total / (2.0 * n_positive)) if n_positive > 0 else 0.0
    w_neg = math.sqrt(total / (2.0 * n_negative)) if n_negative > 0 else 0.0
    return w_pos, w_neg


def weighted_cross_entropy(confidences, labels, w_pos: float, w_neg: float):
    """Per-item weighted cross entropy and its gradient w.r.t. confidence.

    Confidences are clamped away from 0 and 1 inside the logarithms; where the
    clamp is active the gradient is 0 (the clamp is flat there).
    """
    conf = np.asarray(confidences, dtype=np.float64)
    lab = np.asarray(labels, dtype=bool)
    clamped = np.clip(conf, CONFIDENCE_FLOOR, 1.0 - CONFIDENCE_FLOOR)
    ce = -(
        w_pos * lab * np.log(clamped)
        + w_neg * (~lab) * np.log1p(-clamped)
    )
    inside = (conf >= CONFIDENCE_FLOOR) & (conf <= 1.0 - CONFIDENCE_FLOOR)
    grad = -(w_pos * lab / clamped - w_neg * (~lab) / (1.0 - clamped))
    grad = np.where(inside, grad, 0.0)
    return ce, grad


def threshold_objective(
    confidences, regression_losses, cfg: ConstraintConfig
) -> ThresholdObjective:
    """mean(conf * loss) plus gamma times an imbalance-weighted cross entropy.

    Items are labeled positive iff their regression loss is at most epsilon;
    the labels and the balance weights are constants for gradient purposes, so
    no gradient flows from the labeling back into the regressor. If a batch
    has no positive (or no negative) labels, that side's cross-entropy term is
    dropped and reported via ``dropped_side``.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    losses = np.asarray(regression_losses, dtype=np.float64)
    if conf.ndim != 1 or conf.shape != losses.shape:
        raise ValueError("confidences and losses must be aligned 1-d arrays")
    n = conf.shape[0]
    if n == 0:
        raise ValueError("objective evaluated on an empty batch")
    labels = losses <= cfg.epsilon
    n_pos = int(labels.sum())
    n_neg = n - n_pos
    w_pos, w_neg = class_balance_weights(n_pos, n_neg)
    dropped = None
    if n_pos == 0:
        dropped = "positive"
    elif n_neg == 0:
        dropped = "negative"
    ce, ce_grad = weighted_cross_entropy(conf, labels, w_pos, w_neg)
    constraint_term = cfg.gamma * float(np.mean(ce))
    value = float(np.mean(conf * losses)) + constraint_term
    grad_conf = losses / n + cfg.gamma * ce_grad / n
    grad_loss = conf / n
    return ThresholdObjective(
        value=value,
        grad_confidence=grad_conf,
        grad_regression_loss=grad_loss,
        labels=labels,
        weight_positive=w_pos,
        weight_negative=w_neg,
        constraint_term=constraint_term,
        dropped_side=dropped,
    )
