"""GraphMAE: masked feature reconstruction with a re-masked GCN decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoders import ClassifierHead, Encoder, Linear, Module, _gcn_operator, classify_logits
from .graphdata import Batch
from .numcore import ContractError, DegenerateInputError, DimensionError, Tensor


@dataclass
class MaskSpec:
    mask_rate: float = 0.5
    replace_rate: float = 0.15

    def __post_init__(self):
        if not 0.0 <= self.mask_rate <= 1.0 or not 0.0 <= self.replace_rate <= 1.0:
            raise ValueError("mask_rate and replace_rate must lie in [0, 1]")


class MaskTokens(Module):
    """Learnable [MASK] feature row and [DMASK] embedding row.

    Tokens start small and random: an all-zero [DMASK] would decode a fully
    masked neighbourhood to a zero row, whose cosine error is undefined.
    """

    def __init__(self, d_x: int, d_h: int, rng: np.random.Generator):
        self.x_mask = nc.parameter(rng.normal(0.0, 0.1, d_x))
        self.h_mask = nc.parameter(rng.normal(0.0, 0.1, d_h))


class GCNDecoder(Linear):
    """Single GCN layer from embedding width back to feature width, no activation."""

    def __call__(self, batch: Batch, h: Tensor) -> Tensor:
        if h.shape[1] != self.weight.shape[0]:
            raise DimensionError(f"decoder expects width {self.weight.shape[0]}, got {h.shape}")
        return nc.spmm(_gcn_operator(batch), h @ self.weight) + self.bias


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-12))


def sample_mask(n_nodes: int, mask_rate: float, seed) -> np.ndarray:
    """round(mask_rate * n_nodes) distinct node indices, uniformly without replacement, sorted."""
    if n_nodes < 1:
        raise ContractError("need at least one node")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = _round_half_up(mask_rate * n_nodes)
    return np.sort(rng.choice(n_nodes, size=k, replace=False))


def sample_batch_mask(batch: Batch, mask_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Per-graph masks, returned as batch node indices."""
    parts = [off + sample_mask(int(n), mask_rate, rng) for off, n in zip(batch.offsets, batch.counts)]
    return np.concatenate(parts).astype(np.int64)


def apply_feature_mask(
    x: np.ndarray,
    masked: np.ndarray,
    tokens: MaskTokens,
    replace_rate: float,
    seed,
) -> Tensor:
    """Masked rows take the [MASK] token, except a ``replace_rate`` share that copy
    another node's features.  Unmasked rows are untouched."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    masked = np.asarray(masked, dtype=np.int64)
    n = x.shape[0]
    base = x.copy()
    token_rows = np.zeros(n, dtype=bool)
    token_rows[masked] = True
    n_replace = _round_half_up(replace_rate * len(masked)) if len(masked) else 0
    if n_replace and n > 1:
        replaced = rng.choice(masked, size=n_replace, replace=False)
        donors = rng.integers(0, n - 1, size=n_replace)
        donors = donors + (donors >= replaced)  # skip self
        base[replaced] = x[donors]
        token_rows[replaced] = False
    return nc.where_rows(token_rows, nc.tensor(base), tokens.x_mask)


def remask_and_decode(
    encoder: Encoder,
    decoder: GCNDecoder,
    x_masked: Tensor,
    batch: Batch,
    masked: np.ndarray,
    tokens: MaskTokens,
) -> Tensor:
    layers = encoder.forward(batch, x_masked)
    h = encoder.node_embeddings(layers)
    remask = np.zeros(batch.n_nodes, dtype=bool)
    remask[np.asarray(masked, dtype=np.int64)] = True
    return decoder(batch, nc.where_rows(remask, h, tokens.h_mask))


def sce_loss(
    x: np.ndarray,
    z: Tensor,
    masked: np.ndarray,
    gamma: float = 2.0,
    graph_id: np.ndarray | None = None,
) -> Tensor:
    """Scaled cosine error (1 - cos(x_v, z_v))^gamma over masked nodes.

    Without ``graph_id`` the terms are averaged; with it, each graph's masked
    nodes are averaged first and the graph means are averaged.  Masked nodes
    whose original features are all zero are skipped.
    """
    if gamma < 1:
        raise ContractError("gamma must be at least 1")
    masked = np.asarray(masked, dtype=np.int64)
    usable = masked[np.linalg.norm(x[masked], axis=1) > 0] if len(masked) else masked
    if len(usable) == 0:
        raise DegenerateInputError(f"no usable masked nodes ({len(masked)} masked, all zero-feature)")
    target = x[usable] / np.linalg.norm(x[usable], axis=1, keepdims=True)
    cos = nc.tsum(nc.normalize_rows(nc.take_rows(z, usable)) * target, axis=1)
    err = nc.power(nc.clip(1.0 - cos, 0.0, 2.0), gamma)
    if graph_id is None:
        return nc.mean(err)
    owner = np.asarray(graph_id)[usable]
    graphs, inverse, counts = np.unique(owner, return_inverse=True, return_counts=True)
    weights = 1.0 / (counts[inverse] * len(graphs))
    return nc.tsum(err * weights)


def graphmae_unsup_loss(
    encoder: Encoder,
    decoder: GCNDecoder,
    tokens: MaskTokens,
    batch: Batch,
    spec: MaskSpec,
    gamma: float,
    seed,
) -> Tensor:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    masked = sample_batch_mask(batch, spec.mask_rate, rng)
    x_masked = apply_feature_mask(batch.x, masked, tokens, spec.replace_rate, rng)
    z = remask_and_decode(encoder, decoder, x_masked, batch, masked, tokens)
    return sce_loss(batch.x, z, masked, gamma, batch.graph_id)


def graphmae_semi_loss(
    encoder: Encoder,
    decoder: GCNDecoder,
    tokens: MaskTokens,
    head: ClassifierHead,
    labeled: Batch,
    combined: Batch,
    spec: MaskSpec,
    alpha: float,
    gamma: float,
    seed,
) -> tuple[Tensor, dict]:
    """Cross-entropy on unmasked labeled graphs plus alpha times the reconstruction loss."""
    if labeled.n_graphs == 0 or labeled.labels is None:
        raise ContractError("semi-supervised loss needs a labeled batch")
    _, g = encoder.embed(labeled)
    l_sup = nc.softmax_cross_entropy(classify_logits(g, head), labeled.labels)
    parts = {"l_sup": l_sup.item(), "l_unsup": None}
    if alpha <= 0:
        return l_sup, parts
    l_unsup = graphmae_unsup_loss(encoder, decoder, tokens, combined, spec, gamma, seed)
    parts["l_unsup"] = l_unsup.item()
    return l_sup + alpha * l_unsup, parts
