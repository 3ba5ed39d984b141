"""Feature pipeline: token vectors, the learned text embedding, attention
fusion of the visual and textual blocks, and marketplace price statistics.

An item's model input is the concatenation of an attention-weighted visual
feature, an attention-weighted textual feature (32 token embeddings joined in
order), and 16 standardized price statistics. Ablation flags can zero out the
visual or textual block or skip the attention weighting entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import DenseLayer, dense_forward, init_dense, softmax

TOKEN_COUNT = 32
STAT_FEATURE_COUNT = 16

ABLATIONS = ("none", "no_image", "no_text", "no_attention")

# Statistical-feature block layout (normative for dataset/model files):
# indices 0-7 hold the global block, 8-15 the per-category block; within each
# block: sold Q1, Q2, Q3, mean, then unsold (listing price) Q1, Q2, Q3, mean.
STAT_LAYOUT = (
    "global_sold_q1", "global_sold_q2", "global_sold_q3", "global_sold_mean",
    "global_unsold_q1", "global_unsold_q2", "global_unsold_q3", "global_unsold_mean",
    "category_sold_q1", "category_sold_q2", "category_sold_q3", "category_sold_mean",
    "category_unsold_q1", "category_unsold_q2", "category_unsold_q3", "category_unsold_mean",
)


def pad_or_truncate(tokens, vocab_size: int) -> np.ndarray:
    """Fix a token id list to exactly 32 entries.

    Shorter inputs are right-padded with the padding id 0; longer inputs keep
    their first 32 ids. Ids must lie in [0, vocab_size).
    """
    ids = np.asarray(list(tokens), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    out = np.zeros(TOKEN_COUNT, dtype=np.int64)
    keep = min(ids.size, TOKEN_COUNT)
    out[:keep] = ids[:keep]
    return out


@dataclass
class EmbeddingTable:
    """Learned token embedding; row 0 is the padding row and stays all-zero."""

    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2:
            raise ValueError("embedding table must be 2-d")
        if not np.all(np.isfinite(self.table)):
            raise ValueError("embedding table must be finite")
        if np.any(self.table[0] != 0.0):
            raise ValueError("embedding padding row (id 0) must be all-zero")

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @classmethod
    def init(cls, vocab_size: int, dim: int, rng: np.random.Generator, scale: float = 0.05):
        table = rng.uniform(-scale, scale, size=(vocab_size, dim))
        table[0] = 0.0
        return cls(table)

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.table.copy())


def embed_tokens(token_ids: np.ndarray, table: EmbeddingTable) -> np.ndarray:
    """Concatenate the 32 embedding rows in token order (length 32 * dim)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.shape != (TOKEN_COUNT,):
        raise ValueError(f"token vector must have exactly {TOKEN_COUNT} entries")
    if ids.min() < 0 or ids.max() >= table.vocab_size:
        raise ValueError("token id out of embedding range")
    return table.table[ids].reshape(-1)


def embed_tokens_batch(token_ids: np.ndarray, table: EmbeddingTable) -> np.ndarray:
    """[n, 32] token ids -> [n, 32 * dim] concatenated embeddings."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] != TOKEN_COUNT:
        raise ValueError(f"token batch must be [n, {TOKEN_COUNT}]")
    return table.table[ids].reshape(ids.shape[0], TOKEN_COUNT * table.dim)


def embedding_gradient_batch(
    token_ids: np.ndarray, upstream: np.ndarray, table: EmbeddingTable
) -> np.ndarray:
    """Scatter-add gradients back into a table-shaped array.

    The padding row (id 0) never receives gradient.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    n = ids.shape[0]
    grad_rows = np.asarray(upstream, dtype=np.float64).reshape(n * TOKEN_COUNT, table.dim)
    grad = np.zeros_like(table.table)
    np.add.at(grad, ids.reshape(-1), grad_rows)
    grad[0] = 0.0
    return grad


@dataclass
class FusionLayer:
    """Projects concat(visual, textual) to two logits: visual and text weights."""

    projection: DenseLayer

    def __post_init__(self):
        if self.projection.out_size != 2:
            raise ValueError("fusion projection must produce exactly 2 logits")

    @property
    def in_size(self) -> int:
        return self.projection.in_size

    @classmethod
    def init(cls, visual_dim: int, textual_dim: int, rng: np.random.Generator):
        return cls(init_dense(visual_dim + textual_dim, 2, rng))

    def copy(self) -> "FusionLayer":
        return FusionLayer(self.projection.copy())


def attention_fuse(visual: np.ndarray, textual: np.ndarray, fusion: FusionLayer):
    """Softmax-weighted modality scaling.

    Returns (weighted_visual, weighted_textual, weights) where weights is the
    softmax of the fusion projection over concat(visual, textual).
    """
    visual = np.asarray(visual, dtype=np.float64)
    textual = np.asarray(textual, dtype=np.float64)
    logits = dense_forward(np.concatenate([visual, textual]), fusion.projection)
    weights = softmax(logits)
    return weights[0] * visual, weights[1] * textual, weights


def _quartiles_and_mean(values: np.ndarray) -> np.ndarray:
    """[Q1, Q2, Q3, mean] with linearly interpolated quantiles.

    Values are sorted first so the result is bit-for-bit independent of the
    corpus order.
    """
    ordered = np.sort(values)
    q = np.quantile(ordered, [0.25, 0.5, 0.75])
    return np.array([q[0], q[1], q[2], float(np.mean(ordered))])


@dataclass
class StatisticalFeatures:
    """Global and per-category price statistics for one item's category.

    Each block holds 8 reals (see STAT_LAYOUT): sold-price Q1, Q2, Q3, mean,
    then unsold listing-price Q1, Q2, Q3, mean, all in log-price space. The
    fallback flags mark a category half that had no items and was filled from
    the global block.
    """

    global_block: np.ndarray
    category_block: np.ndarray
    sold_fallback: bool = False
    unsold_fallback: bool = False

    def vector(self) -> np.ndarray:
        return np.concatenate([self.global_block, self.category_block])


@dataclass
class CategoryStats:
    """Statistics table produced by compute_statistical_features."""

    global_block: np.ndarray
    by_category: dict[str, StatisticalFeatures]

    def features_for(self, category: str) -> StatisticalFeatures:
        found = self.by_category.get(category)
        if found is not None:
            return found
        return StatisticalFeatures(
            self.global_block, self.global_block.copy(), True, True
        )

    def vector_for(self, category: str) -> np.ndarray:
        return self.features_for(category).vector()

    def to_dict(self) -> dict:
        return {
            "global": self.global_block.tolist(),
            "categories": {
                name: {
                    "block": feats.category_block.tolist(),
                    "sold_fallback": feats.sold_fallback,
                    "unsold_fallback": feats.unsold_fallback,
                }
                for name, feats in sorted(self.by_category.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CategoryStats":
        global_block = np.asarray(data["global"], dtype=np.float64)
        by_category = {
            name: StatisticalFeatures(
                global_block,
                np.asarray(entry["block"], dtype=np.float64),
                bool(entry["sold_fallback"]),
                bool(entry["unsold_fallback"]),
            )
            for name, entry in data["categories"].items()
        }
        return cls(global_block, by_category)


def compute_statistical_features(items) -> CategoryStats:
    """Quartiles and means of sold and unsold log prices, global and per category.

    A category with no sold (or no unsold) items falls back to the global
    block for that half, flagged on the result. The corpus itself must
    contain at least one item of each status.
    """
    if not items:
        raise ValueError("cannot compute statistics on an empty corpus")
    sold_all = np.array([it.log_price for it in items if it.status == "sold"])
    unsold_all = np.array([it.log_price for it in items if it.status == "unsold"])
    if sold_all.size == 0 or unsold_all.size == 0:
        raise ValueError("corpus must contain both sold and unsold items")
    global_block = np.concatenate(
        [_quartiles_and_mean(sold_all), _quartiles_and_mean(unsold_all)]
    )
    categories: dict[str, StatisticalFeatures] = {}
    for category in sorted({it.category for it in items}):
        sold = np.array(
            [it.log_price for it in items if it.category == category and it.status == "sold"]
        )
        unsold = np.array(
            [it.log_price for it in items if it.category == category and it.status == "unsold"]
        )
        sold_fallback = sold.size == 0
        unsold_fallback = unsold.size == 0
        sold_half = global_block[:4] if sold_fallback else _quartiles_and_mean(sold)
        unsold_half = global_block[4:] if unsold_fallback else _quartiles_and_mean(unsold)
        categories[category] = StatisticalFeatures(
            global_block,
            np.concatenate([sold_half, unsold_half]),
            sold_fallback,
            unsold_fallback,
        )
    return CategoryStats(global_block, categories)


@dataclass
class FeatureStandardizer:
    """Zero-mean/unit-variance scaling fit on training-split stat vectors."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, vectors: np.ndarray) -> "FeatureStandardizer":
        matrix = np.asarray(vectors, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] == 0:
            raise ValueError("standardizer needs a non-empty [n, d] matrix")
        return cls(matrix.mean(axis=0), matrix.std(axis=0))

    def transform(self, vectors: np.ndarray) -> np.ndarray:
        safe = np.where(self.std > 1e-12, self.std, 1.0)
        return (np.asarray(vectors, dtype=np.float64) - self.mean) / safe

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureStandardizer":
        return cls(
            np.asarray(data["mean"], dtype=np.float64),
            np.asarray(data["std"], dtype=np.float64),
        )


@dataclass
class AssemblyCache:
    """Intermediates of input assembly, kept for the backward pass.

    Arrays are batch-shaped ([n, ...]); ``weights`` and ``fusion_input`` are
    None when attention is ablated.
    """

    visual: np.ndarray
    textual: np.ndarray
    fusion_input: np.ndarray | None
    weights: np.ndarray | None
    tokens: np.ndarray
    ablation: str


def assemble_batch(
    visuals: np.ndarray,
    token_ids: np.ndarray,
    stat_vectors: np.ndarray,
    embedding: EmbeddingTable,
    fusion: FusionLayer,
    ablation: str = "none",
) -> tuple[np.ndarray, AssemblyCache]:
    """Build the model input matrix [n, visual + 32*embed + 16].

    Ablations: ``no_image`` zeroes the visual block before fusion, ``no_text``
    zeroes the textual block and bypasses the embedding lookup, and
    ``no_attention`` concatenates the raw blocks without weighting.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"ablation must be one of {ABLATIONS}")
    visuals = np.asarray(visuals, dtype=np.float64)
    stats = np.asarray(stat_vectors, dtype=np.float64)
    if visuals.ndim != 2 or stats.ndim != 2:
        raise ValueError("assemble_batch expects batch matrices")
    if stats.shape[1] != STAT_FEATURE_COUNT:
        raise ValueError(f"statistical block must have {STAT_FEATURE_COUNT} entries")
    n = visuals.shape[0]
    visual_in = np.zeros_like(visuals) if ablation == "no_image" else visuals
    if ablation == "no_text":
        textual = np.zeros((n, TOKEN_COUNT * embedding.dim))
    else:
        textual = embed_tokens_batch(token_ids, embedding)
    if ablation == "no_attention":
        fused = np.concatenate([visual_in, textual, stats], axis=1)
        cache = AssemblyCache(visual_in, textual, None, None, np.asarray(token_ids), ablation)
        return fused, cache
    fusion_input = np.concatenate([visual_in, textual], axis=1)
    logits = dense_forward(fusion_input, fusion.projection)
    weights = softmax(logits)
    fused = np.concatenate(
        [weights[:, 0:1] * visual_in, weights[:, 1:2] * textual, stats], axis=1
    )
    cache = AssemblyCache(visual_in, textual, fusion_input, weights, np.asarray(token_ids), ablation)
    return fused, cache


def assembly_backward(
    cache: AssemblyCache,
    d_input: np.ndarray,
    embedding: EmbeddingTable,
    fusion: FusionLayer,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the assembled input w.r.t. embedding table and fusion layer.

    ``d_input`` is the gradient flowing into the assembled matrix; returns
    (d_embedding_table, d_fusion_weights, d_fusion_bias). The statistical
    block is input data and receives no parameter gradient; the embedding
    padding row stays at zero gradient.
    """
    visual_dim = cache.visual.shape[1]
    textual_dim = cache.textual.shape[1]
    d_input = np.asarray(d_input, dtype=np.float64)
    d_weighted_visual = d_input[:, :visual_dim]
    d_weighted_textual = d_input[:, visual_dim:visual_dim + textual_dim]
    d_fusion_w = np.zeros_like(fusion.projection.weights)
    d_fusion_b = np.zeros_like(fusion.projection.bias)
    if cache.ablation == "no_attention":
        d_textual = d_weighted_textual
    else:
        weights = cache.weights
        # Product rule: d/dweights of (w_v * visual, w_t * textual).
        d_w = np.stack(
            [
                np.sum(d_weighted_visual * cache.visual, axis=1),
                np.sum(d_weighted_textual * cache.textual, axis=1),
            ],
            axis=1,
        )
        d_textual = weights[:, 1:2] * d_weighted_textual
        # Softmax Jacobian, row-wise: w * (g - <g, w>).
        inner = np.sum(d_w * weights, axis=1, keepdims=True)
        d_logits = weights * (d_w - inner)
        d_fusion_w = d_logits.T @ cache.fusion_input
        d_fusion_b = d_logits.sum(axis=0)
        d_fusion_input = d_logits @ fusion.projection.weights
        d_textual = d_textual + d_fusion_input[:, visual_dim:]
    if cache.ablation == "no_text":
        d_embedding = np.zeros_like(embedding.table)
    else:
        d_embedding = embedding_gradient_batch(cache.tokens, d_textual, embedding)
    return d_embedding, d_fusion_w, d_fusion_b


def assemble_input(
    visual: np.ndarray,
    token_ids: np.ndarray,
    stat_vector: np.ndarray,
    embedding: EmbeddingTable,
    fusion: FusionLayer,
    ablation: str = "none",
) -> tuple[np.ndarray, AssemblyCache]:
    """Single-item assembly; the cache stays batch-shaped with n = 1."""
    fused, cache = assemble_batch(
        np.asarray(visual, dtype=np.float64)[None, :],
        np.asarray(token_ids, dtype=np.int64)[None, :],
        np.asarray(stat_vector, dtype=np.float64)[None, :],
        embedding,
        fusion,
        ablation,
    )
    return fused[0], cache
