"""The two prediction heads: a qualification classifier and a price regressor.

Both heads share one architecture (embedding + attention fusion + relu MLP +
single output unit) but never share parameter values. The classifier ends in
a sigmoid and emits a confidence in (0, 1); the regressor output is a raw log
price. Backward passes are exact chain-rule gradients through the MLP, the
softmax attention weighting, and the embedding lookups.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from .features import (
    ABLATIONS,
    STAT_FEATURE_COUNT,
    TOKEN_COUNT,
    AssemblyCache,
    CategoryStats,
    EmbeddingTable,
    FeatureStandardizer,
    FusionLayer,
    assemble_batch,
    assembly_backward,
)
from .numeric import DenseLayer, init_dense, relu, sigmoid
from .objectives import ConstraintConfig, RangeLossParams

MODEL_FORMAT_VERSION = 1

# Keep classifier confidences strictly inside (0, 1) even when the sigmoid
# saturates in float64.
_CONFIDENCE_EPS = 1e-15

HEAD_KINDS = ("regression", "classification")


class ModelFormatError(ValueError):
    """A model file could not be read or does not match expectations."""


@dataclass
class HeadConfig:
    """Shared architecture of both heads."""

    visual_dim: int = 64
    embed_dim: int = 8
    vocab_size: int = 1000
    hidden_sizes: tuple[int, ...] = (128, 64)

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        for name in ("visual_dim", "embed_dim", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(h <= 0 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")

    @property
    def textual_dim(self) -> int:
        return TOKEN_COUNT * self.embed_dim

    @property
    def input_dim(self) -> int:
        return self.visual_dim + self.textual_dim + STAT_FEATURE_COUNT

    def to_dict(self) -> dict:
        return {
            "visual_dim": self.visual_dim,
            "embed_dim": self.embed_dim,
            "vocab_size": self.vocab_size,
            "hidden_sizes": list(self.hidden_sizes),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HeadConfig":
        return cls(
            visual_dim=int(data["visual_dim"]),
            embed_dim=int(data["embed_dim"]),
            vocab_size=int(data["vocab_size"]),
            hidden_sizes=tuple(data["hidden_sizes"]),
        )


@dataclass
class HeadParams:
    """All learnable parameters of one head."""

    embedding: EmbeddingTable
    fusion: FusionLayer
    hidden: list[DenseLayer]
    output: DenseLayer

    def __post_init__(self):
        if self.output.out_size != 1:
            raise ValueError("head output layer must have exactly 1 unit")

    def param_dict(self) -> dict[str, np.ndarray]:
        """Live views of every parameter block, keyed by name."""
        params = {
            "embedding": self.embedding.table,
            "fusion.weights": self.fusion.projection.weights,
            "fusion.bias": self.fusion.projection.bias,
        }
        for i, layer in enumerate(self.hidden):
            params[f"hidden{i}.weights"] = layer.weights
            params[f"hidden{i}.bias"] = layer.bias
        params["output.weights"] = self.output.weights
        params["output.bias"] = self.output.bias
        return params

    def copy(self) -> "HeadParams":
        return HeadParams(
            embedding=self.embedding.copy(),
            fusion=self.fusion.copy(),
            hidden=[layer.copy() for layer in self.hidden],
            output=self.output.copy(),
        )


def init_head(config: HeadConfig, rng: np.random.Generator) -> HeadParams:
    """Seeded initialization: Glorot-uniform layers, +-0.05 embeddings.

    The fusion gate starts at zero so every item begins with neutral (0.5,
    0.5) attention weights; a randomly initialized gate scales features by
    arbitrary per-item factors before the MLP has learned anything, which
    measurably slows joint training at desk scale.
    """
    embedding = EmbeddingTable.init(config.vocab_size, config.embed_dim, rng)
    fusion = FusionLayer(
        DenseLayer(
            np.zeros((2, config.visual_dim + config.textual_dim)), np.zeros(2)
        )
    )
    hidden = []
    size_in = config.input_dim
    for size_out in config.hidden_sizes:
        hidden.append(init_dense(size_in, size_out, rng))
        size_in = size_out
    output = init_dense(size_in, 1, rng)
    return HeadParams(embedding, fusion, hidden, output)


def _mlp_forward(x: np.ndarray, head: HeadParams):
    """Hidden relu stack plus linear output on batch input [n, d].

    Returns (pre_output [n], layer_inputs, pre_activations) for backward use.
    """
    layer_inputs = [x]
    pre_activations = []
    h = x
    for layer in head.hidden:
        z = h @ layer.weights.T + layer.bias
        pre_activations.append(z)
        h = relu(z)
        layer_inputs.append(h)
    pre_output = h @ head.output.weights.T + head.output.bias
    return pre_output[:, 0], layer_inputs, pre_activations


def forward_regression(x: np.ndarray, head: HeadParams) -> float:
    """Predicted log price for one assembled input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward_regression expects a single input vector")
    value, _, _ = _mlp_forward(x[None, :], head)
    out = float(value[0])
    if not np.isfinite(out):
        raise FloatingPointError("regression output is not finite (divergence)")
    return out


def forward_classification(x: np.ndarray, head: HeadParams) -> float:
    """Qualification confidence in (0, 1) for one assembled input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward_classification expects a single input vector")
    value, _, _ = _mlp_forward(x[None, :], head)
    raw = float(value[0])
    if not np.isfinite(raw):
        raise FloatingPointError("classification output is not finite (divergence)")
    return float(np.clip(sigmoid(raw), _CONFIDENCE_EPS, 1.0 - _CONFIDENCE_EPS))


@dataclass
class HeadCache:
    """Activations of one batched head pass, consumed by backward_batch."""

    kind: str
    assembly: AssemblyCache
    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    sigmoid_value: np.ndarray | None


def run_head_batch(
    visuals: np.ndarray,
    token_ids: np.ndarray,
    stat_vectors: np.ndarray,
    head: HeadParams,
    kind: str,
    ablation: str = "none",
) -> tuple[np.ndarray, HeadCache]:
    """Full batched pass: feature assembly plus the MLP.

    Returns (outputs [n], cache); outputs are log prices for ``regression``
    and clamped confidences for ``classification``.
    """
    if kind not in HEAD_KINDS:
        raise ValueError(f"head kind must be one of {HEAD_KINDS}")
    fused, assembly = assemble_batch(
        visuals, token_ids, stat_vectors, head.embedding, head.fusion, ablation
    )
    pre_output, layer_inputs, pre_activations = _mlp_forward(fused, head)
    if not np.all(np.isfinite(pre_output)):
        raise FloatingPointError(f"{kind} output is not finite (divergence)")
    if kind == "classification":
        sig = sigmoid(pre_output)
        outputs = np.clip(sig, _CONFIDENCE_EPS, 1.0 - _CONFIDENCE_EPS)
        cache = HeadCache(kind, assembly, layer_inputs, pre_activations, sig)
    else:
        outputs = pre_output
        cache = HeadCache(kind, assembly, layer_inputs, pre_activations, None)
    return outputs, cache


def backward_batch(
    head: HeadParams, cache: HeadCache, upstream: np.ndarray
) -> dict[str, np.ndarray]:
    """Chain-rule gradients for a batched pass, summed over the batch.

    ``upstream`` holds d(objective)/d(head output) per item. The returned
    dict mirrors ``head.param_dict()``.
    """
    if cache is None or not cache.layer_inputs:
        raise ValueError("backward requires the cache of a prior forward pass")
    upstream = np.asarray(upstream, dtype=np.float64)
    n = cache.layer_inputs[0].shape[0]
    if upstream.shape != (n,):
        raise ValueError("upstream gradient must have one entry per batch item")
    if cache.kind == "classification":
        sig = cache.sigmoid_value
        d_pre = upstream * sig * (1.0 - sig)
    else:
        d_pre = upstream
    grads: dict[str, np.ndarray] = {}
    d_pre_col = d_pre[:, None]
    last_hidden = cache.layer_inputs[-1]
    grads["output.weights"] = d_pre_col.T @ last_hidden
    grads["output.bias"] = np.array([d_pre.sum()])
    d_h = d_pre_col @ head.output.weights
    for i in range(len(head.hidden) - 1, -1, -1):
        d_z = d_h * (cache.pre_activations[i] > 0)
        grads[f"hidden{i}.weights"] = d_z.T @ cache.layer_inputs[i]
        grads[f"hidden{i}.bias"] = d_z.sum(axis=0)
        d_h = d_z @ head.hidden[i].weights
    d_embedding, d_fusion_w, d_fusion_b = assembly_backward(
        cache.assembly, d_h, head.embedding, head.fusion
    )
    grads["embedding"] = d_embedding
    grads["fusion.weights"] = d_fusion_w
    grads["fusion.bias"] = d_fusion_b
    return grads


def run_head(
    visual: np.ndarray,
    token_ids: np.ndarray,
    stat_vector: np.ndarray,
    head: HeadParams,
    kind: str,
    ablation: str = "none",
) -> tuple[float, HeadCache]:
    """Single-item pass; the cache stays batch-shaped with n = 1."""
    outputs, cache = run_head_batch(
        np.asarray(visual, dtype=np.float64)[None, :],
        np.asarray(token_ids, dtype=np.int64)[None, :],
        np.asarray(stat_vector, dtype=np.float64)[None, :],
        head,
        kind,
        ablation,
    )
    return float(outputs[0]), cache


def backward(head: HeadParams, cache: HeadCache, upstream_scalar: float) -> dict[str, np.ndarray]:
    """Single-item backward over a run_head cache."""
    return backward_batch(head, cache, np.array([float(upstream_scalar)]))


@dataclass
class PredictionOutcome:
    """Joint output for one item."""

    suggested_log_price: float
    confidence: float
    hard_label: bool

    @classmethod
    def from_outputs(cls, suggested_log_price: float, confidence: float):
        return cls(
            suggested_log_price=float(suggested_log_price),
            confidence=float(confidence),
            hard_label=confidence >= 0.5,
        )


@dataclass
class TrainedModel:
    """Everything needed to score new items: heads plus feature context.

    ``classifier`` is None for a separately trained regression-only model.
    """

    regressor: HeadParams
    classifier: HeadParams | None
    head_config: HeadConfig
    stats: CategoryStats
    standardizer: FeatureStandardizer
    constraint: ConstraintConfig
    range_params: RangeLossParams
    ablation: str = "none"
    trainer_kind: str = "joint"
    seed: int = 0


def _encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(data.shape),
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(entry: dict) -> np.ndarray:
    shape = tuple(int(s) for s in entry["shape"])
    raw = base64.b64decode(entry["data"].encode("ascii"))
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise ModelFormatError(
            f"array payload has {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def _encode_head(head: HeadParams) -> dict:
    return {
        "embedding": _encode_array(head.embedding.table),
        "fusion": {
            "weights": _encode_array(head.fusion.projection.weights),
            "bias": _encode_array(head.fusion.projection.bias),
        },
        "hidden": [
            {"weights": _encode_array(l.weights), "bias": _encode_array(l.bias)}
            for l in head.hidden
        ],
        "output": {
            "weights": _encode_array(head.output.weights),
            "bias": _encode_array(head.output.bias),
        },
    }


def _decode_head(data: dict, config: HeadConfig) -> HeadParams:
    embedding_table = _decode_array(data["embedding"])
    if embedding_table.shape != (config.vocab_size, config.embed_dim):
        raise ModelFormatError(
            f"embedding shape {embedding_table.shape} does not match config "
            f"({config.vocab_size}, {config.embed_dim})"
        )
    fusion_weights = _decode_array(data["fusion"]["weights"])
    expected_fusion_in = config.visual_dim + config.textual_dim
    if fusion_weights.shape != (2, expected_fusion_in):
        raise ModelFormatError(
            f"fusion shape {fusion_weights.shape} does not match config "
            f"(2, {expected_fusion_in})"
        )
    hidden = []
    size_in = config.input_dim
    if len(data["hidden"]) != len(config.hidden_sizes):
        raise ModelFormatError(
            f"model file has {len(data['hidden'])} hidden layers, config says "
            f"{len(config.hidden_sizes)}"
        )
    for entry, size_out in zip(data["hidden"], config.hidden_sizes):
        weights = _decode_array(entry["weights"])
        if weights.shape != (size_out, size_in):
            raise ModelFormatError(
                f"hidden layer shape {weights.shape} does not match config "
                f"({size_out}, {size_in})"
            )
        hidden.append(DenseLayer(weights, _decode_array(entry["bias"])))
        size_in = size_out
    output_weights = _decode_array(data["output"]["weights"])
    if output_weights.shape != (1, size_in):
        raise ModelFormatError(
            f"output layer shape {output_weights.shape} does not match config (1, {size_in})"
        )
    return HeadParams(
        embedding=EmbeddingTable(embedding_table),
        fusion=FusionLayer(DenseLayer(fusion_weights, _decode_array(data["fusion"]["bias"]))),
        hidden=hidden,
        output=DenseLayer(output_weights, _decode_array(data["output"]["bias"])),
    )


def save_model(model: TrainedModel, path) -> None:
    """Write a self-describing JSON container; identical parameters always
    produce identical bytes."""
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "architecture": model.head_config.to_dict(),
        "constraint": model.constraint.to_dict(),
        "range": model.range_params.to_dict(),
        "ablation": model.ablation,
        "trainer_kind": model.trainer_kind,
        "seed": model.seed,
        "stats": model.stats.to_dict(),
        "standardizer": model.standardizer.to_dict(),
        "regressor": _encode_head(model.regressor),
        "classifier": None if model.classifier is None else _encode_head(model.classifier),
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)
        fh.write("\n")


def load_model(path) -> TrainedModel:
    """Read a model file back; any structural problem raises ModelFormatError."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from exc
    try:
        version = payload["format_version"]
        if version != MODEL_FORMAT_VERSION:
            raise ModelFormatError(
                f"unsupported model format version {version} "
                f"(expected {MODEL_FORMAT_VERSION})"
            )
        config = HeadConfig.from_dict(payload["architecture"])
        regressor = _decode_head(payload["regressor"], config)
        classifier = (
            None
            if payload["classifier"] is None
            else _decode_head(payload["classifier"], config)
        )
        return TrainedModel(
            regressor=regressor,
            classifier=classifier,
            head_config=config,
            stats=CategoryStats.from_dict(payload["stats"]),
            standardizer=FeatureStandardizer.from_dict(payload["standardizer"]),
            constraint=ConstraintConfig.from_dict(payload["constraint"]),
            range_params=RangeLossParams.from_dict(payload["range"]),
            ablation=payload["ablation"],
            trainer_kind=payload["trainer_kind"],
            seed=int(payload["seed"]),
        )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"model file is malformed: {exc}") from exc
