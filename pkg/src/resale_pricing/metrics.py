"""Range-based evaluation metrics.

Six metrics describe how suggested prices relate to the target price ranges:
for sold items, the mean hinge distance to the range over all sold items
(SMLE) decomposes into the mean undershoot below the range over undershooting
items (SPDMLE) and the mean overshoot above it over overshooting items
(SPIMLE); UMLE/UPDMLE/UPIMLE mirror this for unsold items. Reports track the
population counts I1..I6 behind each mean and are computed separately for
classifier-positive and classifier-negative item sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .objectives import RangeLossParams, target_range

_DECOMPOSITION_TOL = 1e-12

METRIC_FIELDS = ("smle", "spdmle", "spimle", "umle", "updmle", "upimle")
COUNT_FIELDS = ("i1", "i2", "i3", "i4", "i5", "i6")


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= _DECOMPOSITION_TOL * max(1.0, abs(a), abs(b))


@dataclass
class MetricReport:
    """The six range metrics plus the population counts behind them.

    i1/i4 count sold/unsold items; i2/i5 count those below their range and
    i3/i6 those above it. Each mean is 0 when its count is 0.
    """

    smle: float
    spdmle: float
    spimle: float
    umle: float
    updmle: float
    upimle: float
    i1: int
    i2: int
    i3: int
    i4: int
    i5: int
    i6: int
    n_items: int

    def __post_init__(self):
        if min(self.i1, self.i2, self.i3, self.i4, self.i5, self.i6) < 0:
            raise ValueError("population counts must be nonnegative")
        if self.i2 + self.i3 > self.i1 or self.i5 + self.i6 > self.i4:
            raise ValueError("violator counts exceed their population")
        if self.i1 + self.i4 != self.n_items:
            raise ValueError("sold + unsold counts must equal n_items")
        for name in METRIC_FIELDS:
            value = getattr(self, name)
            if value < 0 or not math.isfinite(value):
                raise ValueError(f"{name} must be finite and nonnegative")
        for mean, count in (
            (self.smle, self.i1), (self.spdmle, self.i2), (self.spimle, self.i3),
            (self.umle, self.i4), (self.updmle, self.i5), (self.upimle, self.i6),
        ):
            if count == 0 and mean != 0.0:
                raise ValueError("a mean over an empty population must be 0")
        if not _close(self.i1 * self.smle, self.i2 * self.spdmle + self.i3 * self.spimle):
            raise ValueError("sold metric decomposition does not hold")
        if not _close(self.i4 * self.umle, self.i5 * self.updmle + self.i6 * self.upimle):
            raise ValueError("unsold metric decomposition does not hold")

    def to_dict(self) -> dict:
        record = {name: getattr(self, name) for name in METRIC_FIELDS}
        record.update({name: getattr(self, name) for name in COUNT_FIELDS})
        record["n_items"] = self.n_items
        return record

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(
            **{name: float(data[name]) for name in METRIC_FIELDS},
            **{name: int(data[name]) for name in COUNT_FIELDS},
            n_items=int(data["n_items"]),
        )


def _mean(total: float, count: int) -> float:
    return total / count if count else 0.0


def compute_metrics(predictions, items, rp: RangeLossParams) -> MetricReport:
    """Aggregate the six metrics over aligned predictions and item outcomes.

    Items exactly on a range boundary count as in-range: they contribute 0 to
    SMLE/UMLE and are excluded from the violator counts.
    """
    if len(predictions) != len(items):
        raise ValueError(
            f"{len(predictions)} predictions for {len(items)} items"
        )
    sold_below = sold_above = unsold_below = unsold_above = 0.0
    i1 = i2 = i3 = i4 = i5 = i6 = 0
    for pred, item in zip(predictions, items):
        sold = item.status == "sold"
        lower, upper = target_range(sold, item.log_price, rp)
        suggested = pred.suggested_log_price
        below = lower - suggested
        above = suggested - upper
        if sold:
            i1 += 1
            if below > 0:
                i2 += 1
                sold_below += below
            elif above > 0:
                i3 += 1
                sold_above += above
        else:
            i4 += 1
            if below > 0:
                i5 += 1
                unsold_below += below
            elif above > 0:
                i6 += 1
                unsold_above += above
    return MetricReport(
        smle=_mean(sold_below + sold_above, i1),
        spdmle=_mean(sold_below, i2),
        spimle=_mean(sold_above, i3),
        umle=_mean(unsold_below + unsold_above, i4),
        updmle=_mean(unsold_below, i5),
        upimle=_mean(unsold_above, i6),
        i1=i1, i2=i2, i3=i3, i4=i4, i5=i5, i6=i6,
        n_items=len(items),
    )


@dataclass
class SplitReport:
    """Metric reports partitioned by the classifier's hard label."""

    positive: MetricReport
    negative: MetricReport
    positive_count: int
    positive_fraction: float

    def to_dict(self) -> dict:
        return {
            "positive": self.positive.to_dict(),
            "negative": self.negative.to_dict(),
            "positive_count": self.positive_count,
            "positive_fraction": self.positive_fraction,
        }


def split_report(predictions, items, rp: RangeLossParams) -> SplitReport:
    """Compute one report per hard-label side of the prediction set."""
    if len(predictions) != len(items):
        raise ValueError(
            f"{len(predictions)} predictions for {len(items)} items"
        )
    pos_pairs = [(p, it) for p, it in zip(predictions, items) if p.hard_label]
    neg_pairs = [(p, it) for p, it in zip(predictions, items) if not p.hard_label]
    positive = compute_metrics([p for p, _ in pos_pairs], [it for _, it in pos_pairs], rp)
    negative = compute_metrics([p for p, _ in neg_pairs], [it for _, it in neg_pairs], rp)
    n = len(items)
    return SplitReport(
        positive=positive,
        negative=negative,
        positive_count=len(pos_pairs),
        positive_fraction=len(pos_pairs) / n if n else 0.0,
    )


def log_error_to_ratio(e: float) -> float:
    """The multiplicative original-currency price ratio a log error represents."""
    if not math.isfinite(e):
        raise ValueError("log error must be finite")
    return math.exp(e)
