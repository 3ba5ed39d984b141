"""Dataset schema, log-price transform, splitting, and a synthetic
marketplace generator.

The generator plants a known structure so experiments have ground truth: each
item has a latent log value driven by a category offset plus six latent
attributes. "Qualified" items expose those attributes through their visual
vector and token choices (with a per-item quality level); "unqualified" items
carry uninformative noise instead. Most of the value signal rides on tokens,
a smaller share on the visual vector, and different item styles make one or
the other modality useless so attention over modalities has something to do.
Sold items are priced near their value; unsold listings sit about 20% above
it in original currency.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .features import TOKEN_COUNT

DATASET_SCHEMA_VERSION = 1

STATUSES = ("sold", "unsold")
QUALITY_HINTS = ("qualified", "unqualified")

# Token id layout used by the generator. Id 0 is padding everywhere.
VALUE_TOKEN_BASE = 1        # components 0..3, 16 bins each -> ids 1..64
EXTENDED_TOKEN_BASE = 65    # components 4..5, 16 bins each -> ids 65..96
CATEGORY_TOKEN_BASE = 97    # one id per category
FILLER_TOKEN_BASE = 200     # uninformative "words"
FILLER_TOKEN_COUNT = 100    # small filler vocabulary: each word is common
TOKEN_BINS = 16

_LATENT_DIM = 6
_VALUE_WEIGHTS = np.array([0.55, 0.45, 0.35, 0.30, 0.18, 0.12])
_OFFSET_RANGE = (2.2, 4.6)
_SOLD_PRICE_NOISE = 0.3
_LISTING_MARKUP_LOG = math.log(1.2)
_LISTING_NOISE = 0.2
# Qualified item styles: both modalities informative / text only / image only.
_STYLE_FRACTIONS = (0.5, 0.25, 0.25)
# Junk visuals live on a low-dimensional random manifold so they cannot act
# as per-item identity codes for the network to memorize noise against.
_JUNK_VISUAL_RANK = 3
_MIN_LOG_PRICE = 0.05


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""


@dataclass
class ItemRecord:
    """One listing: feature blocks, outcome status, and its log price.

    ``log_price`` is the sold price for sold items and the listing price for
    unsold items, in natural-log space. ``quality_hint`` is generator-only
    ground truth and is stripped from files consumed by training.
    """

    item_id: str
    category: str
    visual: np.ndarray
    tokens: np.ndarray
    status: str
    log_price: float
    quality_hint: str | None = None

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=np.float64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.visual.ndim != 1 or not np.all(np.isfinite(self.visual)):
            raise ValueError("visual feature must be a finite 1-d vector")
        if self.tokens.shape != (TOKEN_COUNT,):
            raise ValueError(f"tokens must hold exactly {TOKEN_COUNT} ids")
        if self.tokens.min() < 0:
            raise ValueError("token ids must be nonnegative")
        if self.status not in STATUSES:
            raise ValueError(f"status must be one of {STATUSES}")
        self.log_price = float(self.log_price)
        if not math.isfinite(self.log_price):
            raise ValueError("log_price must be finite")
        if self.quality_hint is not None and self.quality_hint not in QUALITY_HINTS:
            raise ValueError(f"quality_hint must be one of {QUALITY_HINTS} or None")


def log_transform(price: float) -> float:
    """Natural log of an original-currency price."""
    if not price > 0:
        raise ValueError("price must be positive")
    return math.log(price)


def inverse_log_transform(log_price: float) -> float:
    return math.exp(log_price)


@dataclass
class SyntheticConfig:
    """Knobs of the synthetic marketplace generator."""

    n_items: int = 20000
    vocab_size: int = 1000
    visual_dim: int = 64
    n_categories: int = 8
    sold_fraction: float = 0.68
    unqualified_fraction: float = 0.4
    noise_scale_qualified: float = 0.1
    noise_scale_unqualified: float = 3.0
    seed: int = 7

    def __post_init__(self):
        for name in ("n_items", "vocab_size", "visual_dim", "n_categories"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("sold_fraction", "unqualified_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in (0, 1)")
        if not self.noise_scale_unqualified > self.noise_scale_qualified:
            raise ValueError(
                "noise_scale_unqualified must exceed noise_scale_qualified"
            )
        if self.vocab_size <= FILLER_TOKEN_BASE:
            raise ValueError(f"vocab_size must exceed {FILLER_TOKEN_BASE}")
        if CATEGORY_TOKEN_BASE + self.n_categories > FILLER_TOKEN_BASE:
            raise ValueError("too many categories for the token id layout")

    @property
    def filler_token_end(self) -> int:
        return min(self.vocab_size, FILLER_TOKEN_BASE + FILLER_TOKEN_COUNT)

    def to_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "vocab_size": self.vocab_size,
            "visual_dim": self.visual_dim,
            "n_categories": self.n_categories,
            "sold_fraction": self.sold_fraction,
            "unqualified_fraction": self.unqualified_fraction,
            "noise_scale_qualified": self.noise_scale_qualified,
            "noise_scale_unqualified": self.noise_scale_unqualified,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        known = set(cls().to_dict())
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown generator field '{sorted(unknown)[0]}'")
        return cls(**data)


@dataclass
class GeneratorTruth:
    """Latent parameters behind a generated dataset."""

    category_offsets: np.ndarray
    value_weights: np.ndarray
    visual_map_pair: np.ndarray
    visual_map_full: np.ndarray
    junk_visual_map: np.ndarray
    sold_price_noise: float
    listing_markup_log: float
    style_fractions: tuple[float, float, float]


def _bin_token(value: float) -> int:
    return int(np.clip((value + 2.0) / 0.25, 0, TOKEN_BINS - 1))


def generate_synthetic(cfg: SyntheticConfig) -> tuple[list[ItemRecord], GeneratorTruth]:
    """Deterministic synthetic marketplace; same seed, same dataset."""
    rng = np.random.default_rng(cfg.seed)
    offsets = rng.uniform(*_OFFSET_RANGE, cfg.n_categories)
    visual_map_pair = rng.normal(0.0, 0.35, (cfg.visual_dim, 2))
    visual_map_full = rng.normal(0.0, 0.35, (cfg.visual_dim, _LATENT_DIM))
    junk_visual_map = rng.normal(
        0.0, 1.0 / math.sqrt(_JUNK_VISUAL_RANK), (cfg.visual_dim, _JUNK_VISUAL_RANK)
    )

    def junk_visual():
        factors = rng.standard_normal(_JUNK_VISUAL_RANK)
        wiggle = 0.05 * rng.standard_normal(cfg.visual_dim)
        return cfg.noise_scale_unqualified * (junk_visual_map @ factors) + wiggle

    items = []
    for i in range(cfg.n_items):
        cat = int(rng.integers(cfg.n_categories))
        latent = rng.standard_normal(_LATENT_DIM)
        value = float(offsets[cat] + _VALUE_WEIGHTS @ latent)
        qualified = rng.random() >= cfg.unqualified_fraction
        tokens = np.zeros(TOKEN_COUNT, dtype=np.int64)
        tokens[0] = CATEGORY_TOKEN_BASE + cat
        if qualified:
            quality = rng.uniform(0.5, 2.5)
            style_draw = rng.random()
            if style_draw < _STYLE_FRACTIONS[0]:
                style = "balanced"
            elif style_draw < _STYLE_FRACTIONS[0] + _STYLE_FRACTIONS[1]:
                style = "text"
            else:
                style = "image"
            observed = latent + cfg.noise_scale_qualified * quality * rng.standard_normal(_LATENT_DIM)
            slot = 1
            if style in ("balanced", "text"):
                for comp in range(4):
                    tokens[slot] = VALUE_TOKEN_BASE + comp * TOKEN_BINS + _bin_token(observed[comp])
                    slot += 1
            if style == "text":
                for comp in range(4, _LATENT_DIM):
                    tokens[slot] = (
                        EXTENDED_TOKEN_BASE + (comp - 4) * TOKEN_BINS + _bin_token(observed[comp])
                    )
                    slot += 1
            n_filler = int(rng.integers(2, 7))
            filler = rng.integers(FILLER_TOKEN_BASE, cfg.filler_token_end, n_filler)
            tokens[slot:slot + n_filler] = filler
            pixel_noise = cfg.noise_scale_qualified * quality * 0.5
            if style == "balanced":
                visual = visual_map_pair @ observed[4:] + pixel_noise * rng.standard_normal(cfg.visual_dim)
            elif style == "image":
                visual = visual_map_full @ observed + pixel_noise * rng.standard_normal(cfg.visual_dim)
            else:
                visual = junk_visual()
        else:
            n_filler = int(rng.integers(4, 11))
            filler = rng.integers(FILLER_TOKEN_BASE, cfg.filler_token_end, n_filler)
            tokens[1:1 + n_filler] = filler
            visual = junk_visual()
        sold = rng.random() < cfg.sold_fraction
        if sold:
            log_price = value + rng.normal(0.0, _SOLD_PRICE_NOISE)
        else:
            log_price = value + _LISTING_MARKUP_LOG + rng.normal(0.0, _LISTING_NOISE)
        # Keep log prices positive so multiplicative target ranges stay ordered.
        log_price = max(log_price, _MIN_LOG_PRICE)
        items.append(
            ItemRecord(
                item_id=f"item{i:06d}",
                category=f"cat{cat:02d}",
                visual=visual,
                tokens=tokens,
                status="sold" if sold else "unsold",
                log_price=log_price,
                quality_hint="qualified" if qualified else "unqualified",
            )
        )
    truth = GeneratorTruth(
        category_offsets=offsets,
        value_weights=_VALUE_WEIGHTS.copy(),
        visual_map_pair=visual_map_pair,
        visual_map_full=visual_map_full,
        junk_visual_map=junk_visual_map,
        sold_price_noise=_SOLD_PRICE_NOISE,
        listing_markup_log=_LISTING_MARKUP_LOG,
        style_fractions=_STYLE_FRACTIONS,
    )
    return items, truth


def _record_to_dict(item: ItemRecord, include_quality_hint: bool) -> dict:
    record = {
        "id": item.item_id,
        "category": item.category,
        "visual": item.visual.tolist(),
        "tokens": item.tokens.tolist(),
        "status": item.status,
        "log_price": item.log_price,
    }
    if include_quality_hint and item.quality_hint is not None:
        record["quality_hint"] = item.quality_hint
    return record


def save_dataset(items, path, include_quality_hints: bool = False) -> None:
    """Write line-delimited JSON records under a schema-version header.

    ``quality_hint`` is stripped unless explicitly kept for debugging.
    """
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps({"schema_version": DATASET_SCHEMA_VERSION}, sort_keys=True))
        fh.write("\n")
        for item in items:
            fh.write(json.dumps(_record_to_dict(item, include_quality_hints), sort_keys=True))
            fh.write("\n")


def load_dataset(path) -> list[ItemRecord]:
    """Read a dataset file; a zero-length file is an empty dataset."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return []
    try:
        header = json.loads(lines[0])
        version = header["schema_version"]
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise DatasetFormatError(f"{path}: line 1: bad schema header: {exc}") from exc
    if version != DATASET_SCHEMA_VERSION:
        raise DatasetFormatError(
            f"{path}: unknown schema version {version} "
            f"(expected {DATASET_SCHEMA_VERSION})"
        )
    items = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            items.append(
                ItemRecord(
                    item_id=record["id"],
                    category=record["category"],
                    visual=record["visual"],
                    tokens=record["tokens"],
                    status=record["status"],
                    log_price=record["log_price"],
                    quality_hint=record.get("quality_hint"),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
    return items


def split_dataset(items, fractions=(0.78, 0.04, 0.18), seed: int = 0):
    """Seeded shuffle into disjoint, exhaustive (train, val, test) lists."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("expected exactly three split fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions sum to {sum(fractions)}, not 1")
    n = len(items)
    perm = np.random.default_rng(seed).permutation(n)
    end_train = round(n * fractions[0])
    end_val = round(n * (fractions[0] + fractions[1]))
    train = [items[i] for i in perm[:end_train]]
    val = [items[i] for i in perm[end_train:end_val]]
    test = [items[i] for i in perm[end_val:]]
    return train, val, test


def skewness(values) -> float:
    """Population skewness; 0 for (numerically) constant input."""
    arr = np.asarray(values, dtype=np.float64)
    mean = arr.mean()
    centered = arr - mean
    m2 = float(np.mean(centered**2))
    floor = (1e-12 * max(1.0, abs(mean))) ** 2
    if m2 <= floor:
        return 0.0
    return float(np.mean(centered**3) / m2**1.5)
