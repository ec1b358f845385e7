"""JOAO: augmentation-pair contrastive learning with an adversarially learned pair distribution."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .encoders import ClassifierHead, Encoder, classify_logits
from .graphdata import Batch, PropagationGraph, make_batch
from .numcore import ContractError, Tensor
from .optim import Adam

AUG_KINDS = ("nodedrop", "subgraph", "edgepert", "attrmask", "identical")
N_AUG = len(AUG_KINDS)
_TOL = 1e-9


@dataclass
class AugmentationPolicy:
    """Probability table over (first view, second view) augmentation pairs."""

    p: np.ndarray = field(default_factory=lambda: np.full((N_AUG, N_AUG), 1.0 / N_AUG**2))

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(N_AUG, N_AUG)
        if np.any(self.p < 0) or abs(self.p.sum() - 1.0) > 1e-9:
            raise ValueError("policy must be a probability table")

    def to_csv(self) -> str:
        lines = ["," + ",".join(AUG_KINDS)]
        for name, row in zip(AUG_KINDS, self.p):
            lines.append(name + "," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "AugmentationPolicy":
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        return cls(np.array([[float(v) for v in r[1:]] for r in rows]))


@dataclass
class JoaoHyper:
    lam: float = 1.0
    aug_ratio: float = 0.2
    lower_lr: float = 0.01

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not 0.0 < self.aug_ratio < 1.0:
            raise ValueError("aug_ratio must lie in (0, 1)")


# -------------------------------------------------------------- augmentations


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _subtree(parents: np.ndarray, v: int) -> set[int]:
    children: dict[int, list[int]] = {}
    for c, p in enumerate(parents):
        if p >= 0:
            children.setdefault(int(p), []).append(c)
    out, stack = {v}, [v]
    while stack:
        for c in children.get(stack.pop(), ()):
            out.add(c)
            stack.append(c)
    return out


def _induced(graph: PropagationGraph, keep: np.ndarray, parents: np.ndarray) -> PropagationGraph:
    """Reindex ``keep`` (sorted original ids) with already-remapped-to-kept ``parents``."""
    new_id = -np.ones(graph.n_nodes, dtype=np.int64)
    new_id[keep] = np.arange(len(keep))
    sub_parents = np.where(parents[keep] >= 0, new_id[np.maximum(parents[keep], 0)], -1)
    return PropagationGraph(graph.node_features[keep], sub_parents, int(new_id[graph.root]), graph.claim_id)


def node_drop(graph: PropagationGraph, ratio: float, rng: np.random.Generator) -> PropagationGraph:
    n = graph.n_nodes
    k = min(int(math.floor(ratio * n + _TOL)), n - 1)
    if k <= 0:
        return graph
    candidates = np.flatnonzero(np.arange(n) != graph.root)
    dropped = rng.choice(candidates, size=k, replace=False)
    alive = np.ones(n, dtype=bool)
    alive[dropped] = False
    parents = graph.parents.copy()
    for v in np.flatnonzero(alive):
        p = parents[v]
        while p >= 0 and not alive[p]:
            p = graph.parents[p]
        parents[v] = p
    return _induced(graph, np.flatnonzero(alive), parents)


def subgraph(graph: PropagationGraph, ratio: float, rng: np.random.Generator) -> PropagationGraph:
    n = graph.n_nodes
    target = int(math.ceil((1.0 - ratio) * n - _TOL))
    if target >= n or n < 2:
        return graph
    target = max(target, 1)
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for c, p in enumerate(graph.parents):
        if p >= 0:
            nbrs[c].append(int(p))
            nbrs[int(p)].append(c)
    v = graph.root
    visited = {v}
    while len(visited) < target:
        v = nbrs[v][int(rng.integers(len(nbrs[v])))]
        visited.add(v)
    keep = np.array(sorted(visited), dtype=np.int64)
    return _induced(graph, keep, graph.parents)


def edge_pert(graph: PropagationGraph, ratio: float, rng: np.random.Generator) -> PropagationGraph:
    """Reattach a fraction of non-root nodes to a random node outside their own subtree."""
    n = graph.n_nodes
    k = int(math.floor(ratio * (n - 1) + _TOL))
    if k <= 0 or n < 3:
        return graph
    parents = graph.parents.copy()
    children = rng.choice(np.flatnonzero(parents >= 0), size=k, replace=False)
    for c in children:
        banned = _subtree(parents, int(c))
        options = [u for u in range(n) if u not in banned and u != parents[c]]
        if options:
            parents[c] = options[int(rng.integers(len(options)))]
    return PropagationGraph(graph.node_features, parents, graph.root, graph.claim_id)


def attr_mask(graph: PropagationGraph, ratio: float, rng: np.random.Generator) -> PropagationGraph:
    n = graph.n_nodes
    k = min(int(math.floor(ratio * n + _TOL)), n - 1)
    if k <= 0:
        return graph
    rows = rng.choice(np.flatnonzero(np.arange(n) != graph.root), size=k, replace=False)
    x = graph.node_features.copy()
    x[rows] = 0.0
    return PropagationGraph(x, graph.parents, graph.root, graph.claim_id)


_OPS = {"nodedrop": node_drop, "subgraph": subgraph, "edgepert": edge_pert, "attrmask": attr_mask}


def augment(graph: PropagationGraph, kind: str, aug_ratio: float, seed) -> PropagationGraph:
    """Apply one augmentation; the root is never dropped or masked."""
    if graph.n_nodes == 0:
        raise ContractError("cannot augment an empty graph")
    kind = kind.lower()
    if kind == "identical":
        return graph
    if kind not in _OPS:
        raise ValueError(f"unknown augmentation {kind!r}")
    return _OPS[kind](graph, aug_ratio, _rng(seed))


def _view_seed(seed: int, side: int, kind: int, claim_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, side, kind, zlib.crc32(claim_id.encode("utf-8"))])


def augmented_views(graphs: Sequence[PropagationGraph], aug_ratio: float, seed: int) -> list[list[Batch]]:
    """``views[side][kind]`` is the batch of every graph under that augmentation.

    Each (graph, side, kind) draws from its own stream keyed by claim id, so a
    view does not depend on the graph's position in the batch.
    """
    return [
        [make_batch([augment(g, kind, aug_ratio, _view_seed(seed, side, k, g.claim_id)) for g in graphs])
         for k, kind in enumerate(AUG_KINDS)]
        for side in (0, 1)
    ]


# ----------------------------------------------------------------- the loss


def pair_loss_table(first: Tensor, second: Tensor, n_graphs: int) -> Tensor:
    """Per-pair contrastive terms from stacked graph embeddings.

    ``first`` and ``second`` hold the 5 augmented views of ``n_graphs`` graphs
    stacked kind-major (row ``k * n_graphs + g``).  Cell (i, j) is
    mean_g[-sim(v_i(g), w_j(g)) + log mean_{g' != g} exp sim(v_i(g), w_j(g'))].
    """
    b = n_graphs
    if b < 2:
        raise ContractError("contrastive loss needs at least two graphs per batch")
    sims = nc.normalize_rows(first) @ nc.normalize_rows(second).T
    ii, jj, gg = np.meshgrid(np.arange(N_AUG), np.arange(N_AUG), np.arange(b), indexing="ij")
    diag = nc.take(sims, ((ii * b + gg) * (N_AUG * b) + jj * b + gg).reshape(-1))
    pos = nc.mean(nc.reshape(diag, (N_AUG, N_AUG, b)), axis=2)
    off_diag = ~np.eye(b, dtype=bool)[None, :, None, :]
    lse = nc.logsumexp(nc.reshape(sims, (N_AUG, b, N_AUG, b)), axis=3, where=off_diag)
    neg = nc.mean(lse, axis=1) - math.log(b - 1)
    return neg - pos


def joao_contrastive_loss(
    encoder: Encoder,
    graphs: Sequence[PropagationGraph],
    policy: AugmentationPolicy,
    aug_ratio: float,
    seed: int,
) -> tuple[Tensor, np.ndarray]:
    """Policy-weighted contrastive loss and the 5x5 table of per-pair losses."""
    if len(graphs) < 2:
        raise ContractError("contrastive loss needs at least two graphs per batch")
    views = augmented_views(graphs, aug_ratio, seed)
    side_emb = []
    for side in views:
        side_emb.append(nc.concat([encoder.embed(v)[1] for v in side], axis=0))
    table = pair_loss_table(side_emb[0], side_emb[1], len(graphs))
    total = nc.tsum(table * policy.p)
    return total, table.data.copy()


def distribution_penalty(policy: AugmentationPolicy) -> float:
    """-1/2 times the squared distance to the uniform table."""
    return -0.5 * float(((policy.p - 1.0 / N_AUG**2) ** 2).sum())


def simplex_project(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(-1)
    u = np.sort(flat)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, len(u) + 1)
    rho = np.flatnonzero(u - css / ks > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(flat - theta, 0.0).reshape(v.shape)


def lower_level_update(policy: AugmentationPolicy, table: np.ndarray, hyper: JoaoHyper) -> AugmentationPolicy:
    """One projected ascent step on sum(p * table) + lam * penalty(p).

    The penalty's quadratic part is taken implicitly (proximal step), which
    keeps the update stable for any lam * lower_lr.
    """
    u = 1.0 / N_AUG**2
    step = hyper.lower_lr
    target = (policy.p + step * np.asarray(table) + step * hyper.lam * u) / (1.0 + step * hyper.lam)
    p = simplex_project(target)
    return AugmentationPolicy(p / p.sum())


# --------------------------------------------------------------- AGD steps


def agd_pretrain_step(
    encoder: Encoder,
    optimizer: Adam,
    policy: AugmentationPolicy,
    graphs: Sequence[PropagationGraph],
    hyper: JoaoHyper,
    seed: int,
) -> tuple[AugmentationPolicy, dict]:
    """Upper level: one optimizer step on the weighted loss with the policy fixed.
    Lower level: with the updated encoder fixed, one policy ascent step."""
    optimizer.zero_grad()
    total, _ = joao_contrastive_loss(encoder, graphs, policy, hyper.aug_ratio, seed)
    nc.backward(total)
    optimizer.step()
    with nc.no_grad():
        _, table = joao_contrastive_loss(encoder, graphs, policy, hyper.aug_ratio, seed)
    new_policy = lower_level_update(policy, table, hyper)
    return new_policy, {"l_unsup": total.item(), "l_dist": distribution_penalty(new_policy)}


def joao_semi_upper_loss(
    encoder: Encoder,
    head: ClassifierHead,
    policy: AugmentationPolicy,
    labeled: Batch,
    combined: Sequence[PropagationGraph],
    alpha: float,
    aug_ratio: float,
    seed: int,
) -> tuple[Tensor, dict]:
    if labeled.n_graphs == 0 or labeled.labels is None:
        raise ContractError("semi-supervised loss needs a labeled batch")
    _, g = encoder.embed(labeled)
    l_sup = nc.softmax_cross_entropy(classify_logits(g, head), labeled.labels)
    parts = {"l_sup": l_sup.item(), "l_unsup": None}
    if alpha <= 0:
        return l_sup, parts
    l_unsup, _ = joao_contrastive_loss(encoder, combined, policy, aug_ratio, seed)
    parts["l_unsup"] = l_unsup.item()
    return l_sup + alpha * l_unsup, parts


def agd_semi_step(
    encoder: Encoder,
    head: ClassifierHead,
    optimizer: Adam,
    policy: AugmentationPolicy,
    labeled: Batch,
    combined: Sequence[PropagationGraph],
    alpha: float,
    hyper: JoaoHyper,
    seed: int,
) -> tuple[AugmentationPolicy, dict]:
    optimizer.zero_grad()
    loss, parts = joao_semi_upper_loss(encoder, head, policy, labeled, combined, alpha, hyper.aug_ratio, seed)
    nc.backward(loss)
    optimizer.step()
    with nc.no_grad():
        _, table = joao_contrastive_loss(encoder, combined, policy, hyper.aug_ratio, seed)
    new_policy = lower_level_update(policy, table, hyper)
    parts["l_dist"] = distribution_penalty(new_policy)
    return new_policy, parts
