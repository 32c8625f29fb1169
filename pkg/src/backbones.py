"""
Per-domain CTR models.

A backbone is embedding tables plus a dense trunk and a two-logit head. It
exposes the last hidden activation (the representation ``e``), the logits
``Z`` and the click probability ``y_hat = softmax(Z)[1]``. Three trunk
variants are supported:

- ``dnn``: embeddings -> MLP trunk -> head
- ``dcn``: embeddings -> one explicit feature-cross stage -> MLP trunk -> head
- ``wd``:  the dnn path plus a wide linear path over the raw one-hot
  (and dense) features added into the logits
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.config import FeatureSchema
from src.errors import ConfigError, DataError, DimensionError
from src.nn import (
    DenseCache,
    DenseLayer,
    Params,
    check_finite,
    dense_backward,
    dense_forward_cached,
    new_dense,
    softmax,
)


BACKBONE_KINDS = ("dnn", "dcn", "wd")
NUM_CLASSES = 2


class Backbone:
    def __init__(self, kind: str, schema: FeatureSchema, widths: List[int],
                 embeddings: List[np.ndarray], trunk: List[DenseLayer], head: DenseLayer,
                 cross_weight: Optional[np.ndarray] = None, cross_bias: Optional[np.ndarray] = None,
                 wide_tables: Optional[List[np.ndarray]] = None, wide_dense: Optional[np.ndarray] = None):
        self.kind = kind
        self.schema = schema
        self.widths = list(widths)
        self.embeddings = embeddings
        self.trunk = trunk
        self.head = head
        self.cross_weight = cross_weight
        self.cross_bias = cross_bias
        self.wide_tables = wide_tables
        self.wide_dense = wide_dense
        # Instrumentation: parameter arrays read and FLOPs spent by forwards.
        self.reads = 0
        self.flops = 0

    @property
    def representation_width(self) -> int:
        return self.trunk[-1].out_width

    def parameters(self) -> Params:
        params: Params = {}
        for name, table in zip(self.schema.categorical_names, self.embeddings):
            params[f"emb.{name}"] = table
        if self.kind == "dcn":
            params["cross.weight"] = self.cross_weight
            params["cross.bias"] = self.cross_bias
        for i, layer in enumerate(self.trunk):
            params.update(layer.parameters(f"trunk.{i}"))
        params.update(self.head.parameters("head"))
        if self.kind == "wd":
            for name, table in zip(self.schema.categorical_names, self.wide_tables):
                params[f"wide.{name}"] = table
            params["wide.dense"] = self.wide_dense
        return params

    def clone(self) -> "Backbone":
        """Deep copy with fresh instrumentation counters."""
        return Backbone(
            self.kind, self.schema, self.widths,
            [t.copy() for t in self.embeddings],
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.trunk],
            DenseLayer(self.head.weight.copy(), self.head.bias.copy(), self.head.activation),
            None if self.cross_weight is None else self.cross_weight.copy(),
            None if self.cross_bias is None else self.cross_bias.copy(),
            None if self.wide_tables is None else [t.copy() for t in self.wide_tables],
            None if self.wide_dense is None else self.wide_dense.copy(),
        )

    def reset_counters(self) -> None:
        self.reads = 0
        self.flops = 0


@dataclass
class ForwardOutput:
    representation: np.ndarray  # e, batch x width
    logits: np.ndarray  # Z, batch x 2
    prediction: np.ndarray  # y_hat, batch
    hidden: List[np.ndarray] = field(default_factory=list)  # every trunk activation, hidden[-1] is e


@dataclass
class BackboneCache:
    cat: np.ndarray
    dense: np.ndarray
    x0: np.ndarray
    cross_scalar: Optional[np.ndarray]
    trunk_caches: List[DenseCache]
    head_cache: DenseCache


def build_backbone(kind: str, schema: FeatureSchema, widths: List[int], seed: int) -> Backbone:
    """
    Seeded construction: every array is drawn from uniform(-s, s) with
    s = sqrt(6 / (fan_in + fan_out)), biases start at zero. Identical
    arguments give bit-identical models.
    """
    if kind not in BACKBONE_KINDS:
        raise ConfigError(f"unknown backbone kind '{kind}', expected one of {BACKBONE_KINDS}")
    if not widths:
        raise ConfigError("trunk widths must be non-empty")

    rng = np.random.default_rng(seed)
    k = schema.embedding_dim
    embeddings = [
        rng.uniform(-np.sqrt(6.0 / (card + k)), np.sqrt(6.0 / (card + k)), size=(card, k))
        for card in schema.cardinalities
    ]

    in_width = schema.input_width
    cross_weight = cross_bias = None
    if kind == "dcn":
        limit = np.sqrt(6.0 / (in_width + 1))
        cross_weight = rng.uniform(-limit, limit, size=in_width)
        cross_bias = np.zeros(in_width)

    trunk = []
    prev = in_width
    for width in widths:
        trunk.append(new_dense(rng, prev, width, "relu"))
        prev = width
    head = new_dense(rng, prev, NUM_CLASSES, "identity")

    wide_tables = wide_dense = None
    if kind == "wd":
        wide_tables = [
            rng.uniform(-np.sqrt(6.0 / (card + NUM_CLASSES)), np.sqrt(6.0 / (card + NUM_CLASSES)),
                        size=(card, NUM_CLASSES))
            for card in schema.cardinalities
        ]
        limit = np.sqrt(6.0 / (len(schema.dense) + NUM_CLASSES))
        wide_dense = rng.uniform(-limit, limit, size=(NUM_CLASSES, len(schema.dense)))

    return Backbone(kind, schema, widths, embeddings, trunk, head,
                    cross_weight, cross_bias, wide_tables, wide_dense)


def count_forward_flops(model: Backbone, batch_size: int) -> int:
    """Multiply-add count of one inference forward; embedding gathers are free."""
    per_sample = 0
    in_width = model.schema.input_width
    if model.kind == "dcn":
        per_sample += 5 * in_width
    for layer in model.trunk + [model.head]:
        per_sample += 2 * layer.in_width * layer.out_width + 2 * layer.out_width
    if model.kind == "wd":
        per_sample += NUM_CLASSES * len(model.schema.categorical)
        per_sample += 2 * NUM_CLASSES * len(model.schema.dense) + NUM_CLASSES
    per_sample += 3 * NUM_CLASSES  # softmax
    return per_sample * batch_size


def _validate_features(model: Backbone, cat: np.ndarray, dense: np.ndarray) -> None:
    schema = model.schema
    if cat.ndim != 2 or cat.shape[1] != len(schema.categorical):
        raise DimensionError(f"categorical block shape {cat.shape} does not match {len(schema.categorical)} fields")
    if dense.ndim != 2 or dense.shape != (cat.shape[0], len(schema.dense)):
        raise DimensionError(f"dense block shape {dense.shape} does not match ({cat.shape[0]}, {len(schema.dense)})")
    for j, (name, card) in enumerate(zip(schema.categorical_names, schema.cardinalities)):
        column = cat[:, j]
        bad = (column < 0) | (column >= card)
        if np.any(bad):
            raise DataError(f"field '{name}': index {int(column[np.argmax(bad)])} outside [0, {card})")


def forward_features(model: Backbone, cat: np.ndarray, dense: np.ndarray) -> Tuple[ForwardOutput, BackboneCache]:
    _validate_features(model, cat, dense)
    n = cat.shape[0]
    parts = [table[cat[:, j]] for j, table in enumerate(model.embeddings)]
    parts.append(np.asarray(dense, dtype=np.float64))
    x0 = np.concatenate(parts, axis=1)

    cross_scalar = None
    x = x0
    if model.kind == "dcn":
        cross_scalar = x0 @ model.cross_weight
        x = x0 * cross_scalar[:, None] + model.cross_bias + x0

    trunk_caches = []
    hidden = []
    for layer in model.trunk:
        x, c = dense_forward_cached(x, layer)
        trunk_caches.append(c)
        hidden.append(x)
    logits, head_cache = dense_forward_cached(x, model.head)

    if model.kind == "wd":
        wide = sum(table[cat[:, j]] for j, table in enumerate(model.wide_tables))
        logits = logits + wide + dense @ model.wide_dense.T
    check_finite(logits, "backbone logits")

    prediction = softmax(logits)[:, 1]
    model.reads += len(model.parameters())
    model.flops += count_forward_flops(model, n)

    out = ForwardOutput(hidden[-1], logits, prediction, hidden)
    return out, BackboneCache(cat, dense, x0, cross_scalar, trunk_caches, head_cache)


def forward(model: Backbone, batch) -> ForwardOutput:
    """Forward a batch (anything with ``cat`` and ``dense`` arrays)."""
    out, _ = forward_features(model, batch.cat, batch.dense)
    return out


def predict(model: Backbone, batch) -> np.ndarray:
    """
    Inference path: a function of this backbone's parameters only. No source
    model or transfer module is involved.
    """
    return forward(model, batch).prediction


def backward(model: Backbone, cache: BackboneCache, grad_logits: Optional[np.ndarray],
             grad_hidden: Optional[Dict[int, np.ndarray]] = None) -> Params:
    """
    Gradients of every parameter given upstream gradients on the logits and,
    optionally, on trunk activations (keyed by trunk layer index; the last
    index is the representation).
    """
    grad_hidden = grad_hidden or {}
    n = cache.cat.shape[0]
    last = len(model.trunk) - 1
    if grad_logits is None:
        grad_logits = np.zeros((n, NUM_CLASSES))
    grads: Params = {}

    g, grads["head.weight"], grads["head.bias"] = dense_backward(model.head, cache.head_cache, grad_logits)
    trunk_grads = {}
    for i in range(last, -1, -1):
        if i in grad_hidden:
            g = g + grad_hidden[i]
        g, gw, gb = dense_backward(model.trunk[i], cache.trunk_caches[i], g)
        trunk_grads[i] = (gw, gb)

    if model.kind == "dcn":
        # x1 = x0 * s + b + x0 with s = x0 . w
        s = cache.cross_scalar
        inner = np.sum(g * cache.x0, axis=1)
        grads["cross.weight"] = inner @ cache.x0
        grads["cross.bias"] = np.sum(g, axis=0)
        g = g * (s[:, None] + 1.0) + inner[:, None] * model.cross_weight[None, :]

    k = model.schema.embedding_dim
    emb_grads = {}
    for j, (name, table) in enumerate(zip(model.schema.categorical_names, model.embeddings)):
        grad_table = np.zeros_like(table)
        np.add.at(grad_table, cache.cat[:, j], g[:, j * k:(j + 1) * k])
        emb_grads[f"emb.{name}"] = grad_table

    wide_grads = {}
    if model.kind == "wd":
        for j, (name, table) in enumerate(zip(model.schema.categorical_names, model.wide_tables)):
            grad_table = np.zeros_like(table)
            np.add.at(grad_table, cache.cat[:, j], grad_logits)
            wide_grads[f"wide.{name}"] = grad_table
        wide_grads["wide.dense"] = grad_logits.T @ cache.dense

    # Assemble in parameters() order.
    ordered: Params = {}
    for name in model.parameters():
        if name in emb_grads:
            ordered[name] = emb_grads[name]
        elif name in wide_grads:
            ordered[name] = wide_grads[name]
        elif name.startswith("trunk."):
            _, idx, part = name.split(".")
            ordered[name] = trunk_grads[int(idx)][0 if part == "weight" else 1]
        else:
            ordered[name] = grads[name]
    return ordered
