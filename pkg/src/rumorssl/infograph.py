"""InfoGraph: Jensen-Shannon mutual information between node and graph embeddings."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .encoders import ClassifierHead, Encoder, EncoderConfig, Module, MLP, build_encoder, classify_logits
from .graphdata import Batch
from .numcore import ContractError, Tensor


def jsd_mi(pos_scores: Tensor, neg_scores: Tensor) -> Tensor:
    """Jensen-Shannon MI estimate: E_pos[-sp(-T)] - E_neg[sp(T)].  Always <= 0."""
    if pos_scores.size == 0:
        raise ContractError("jsd_mi needs at least one positive score")
    if neg_scores.size == 0:
        raise ContractError("jsd_mi needs negative pairs; use batches of at least two graphs")
    return nc.mean(-nc.softplus(-pos_scores)) - nc.mean(nc.softplus(neg_scores))


class Discriminator(Module):
    """T(a, b) = <f(a), g(b)> with one-hidden-layer projections f and g."""

    def __init__(self, d_a: int, d_b: int, rng: np.random.Generator, d_proj: int = 64):
        self.left = MLP(d_a, d_proj, d_proj, rng)
        self.right = MLP(d_b, d_proj, d_proj, rng)

    def score_matrix(self, a: Tensor, b: Tensor) -> Tensor:
        return self.left(a) @ self.right(b).T


def _pair_indices(owner: np.ndarray, n_graphs: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of positive (row owned by column) and negative cells in an n x G score matrix."""
    n = len(owner)
    pos = np.arange(n) * n_graphs + owner
    mask = np.ones((n, n_graphs), dtype=bool)
    mask[np.arange(n), owner] = False
    return pos, np.flatnonzero(mask)


def local_global_loss(node_emb: Tensor, graph_emb: Tensor, batch: Batch, disc: Discriminator) -> Tensor:
    if batch.n_graphs < 2:
        raise ContractError("InfoGraph needs at least two graphs per batch for negatives")
    scores = disc.score_matrix(node_emb, graph_emb)
    pos, neg = _pair_indices(batch.graph_id, batch.n_graphs)
    return -jsd_mi(nc.take(scores, pos), nc.take(scores, neg))


def infograph_unsup_loss(encoder: Encoder, disc: Discriminator, batch: Batch) -> Tensor:
    """Negated JSD estimate over (node, own graph) positives and all cross-graph negatives."""
    node_emb, graph_emb = encoder.embed(batch)
    return local_global_loss(node_emb, graph_emb, batch, disc)


def consistency_from_embeddings(sup_graph: Tensor, unsup_graph: Tensor, disc: Discriminator) -> Tensor:
    g = sup_graph.shape[0]
    if g < 2:
        raise ContractError("consistency loss needs at least two graphs per batch")
    scores = disc.score_matrix(sup_graph, unsup_graph)
    pos, neg = _pair_indices(np.arange(g), g)
    return -jsd_mi(nc.take(scores, pos), nc.take(scores, neg))


class TwinEncoders(Module):
    """``sup`` feeds the classifier; ``unsup`` carries the local-global objective."""

    def __init__(self, config: EncoderConfig, in_dim: int, rng: np.random.Generator):
        self.sup = build_encoder(config, in_dim, rng)
        self.unsup = build_encoder(config, in_dim, rng)

    @classmethod
    def from_encoders(cls, sup: Encoder, unsup: Encoder) -> "TwinEncoders":
        twin = cls.__new__(cls)
        twin.sup, twin.unsup = sup, unsup
        return twin


def consistency_loss(twin: TwinEncoders, disc2: Discriminator, batch: Batch) -> Tensor:
    """Negated JSD estimate between the two encoders' graph embeddings of the same claim."""
    _, g_sup = twin.sup.embed(batch)
    _, g_unsup = twin.unsup.embed(batch)
    return consistency_from_embeddings(g_sup, g_unsup, disc2)


def infograph_semi_loss(
    twin: TwinEncoders,
    disc: Discriminator,
    disc2: Discriminator,
    head: ClassifierHead,
    labeled: Batch,
    combined: Batch,
    alpha: float,
    beta: float,
) -> tuple[Tensor, dict[str, float]]:
    """Supervised cross-entropy through ``twin.sup`` plus weighted local-global and
    consistency terms over ``combined`` (labeled and unlabeled graphs together).

    Returns the total and a dict of the separate component values.
    """
    if labeled.n_graphs == 0 or labeled.labels is None:
        raise ContractError("semi-supervised loss needs a labeled batch")
    _, g_lab = twin.sup.embed(labeled)
    l_sup = nc.softmax_cross_entropy(classify_logits(g_lab, head), labeled.labels)
    total = l_sup
    parts = {"l_sup": l_sup.item(), "l_unsup": None, "l_consistency": None}
    if alpha > 0 or beta > 0:
        if combined.n_graphs < 2:
            raise ContractError("combined batch needs at least two graphs")
        node_u, g_u = twin.unsup.embed(combined)
        if alpha > 0:
            l_unsup = local_global_loss(node_u, g_u, combined, disc)
            total = total + alpha * l_unsup
            parts["l_unsup"] = l_unsup.item()
        if beta > 0:
            _, g_s = twin.sup.embed(combined)
            l_cons = consistency_from_embeddings(g_s, g_u, disc2)
            total = total + beta * l_cons
            parts["l_consistency"] = l_cons.item()
    return total, parts
