"""Finite-difference checks of every training loss on small random batches."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import numcore as nc
from .encoders import ClassifierHead, EncoderConfig, build_encoder, classify_logits
from .graphdata import PropagationGraph, make_batch
from .graphmae import GCNDecoder, MaskSpec, MaskTokens, graphmae_semi_loss, sce_loss
from .infograph import Discriminator, TwinEncoders, consistency_loss, infograph_semi_loss, infograph_unsup_loss
from .joao import AugmentationPolicy, N_AUG, joao_contrastive_loss, simplex_project

D_X, HIDDEN, N_CLASSES = 6, 4, 2
TOLERANCE = 1e-4


def random_graph(rng: np.random.Generator, idx: int, max_nodes: int = 6) -> PropagationGraph:
    n = int(rng.integers(2, max_nodes + 1))
    parents = np.array([-1] + [int(rng.integers(0, i)) for i in range(1, n)], dtype=np.int64)
    x = np.abs(rng.normal(size=(n, D_X))) + 0.05
    return PropagationGraph(x, parents, 0, f"g{idx}")


def random_graphs(rng: np.random.Generator, n: int) -> list[PropagationGraph]:
    return [random_graph(rng, i) for i in range(n)]


def _labels(rng, n):
    return rng.integers(0, N_CLASSES, size=n)


def _check(loss_fn, modules, rng, max_coords: int) -> float:
    params = [p for m in modules for p in m.parameters()]
    # Zero-initialized biases put ReLU inputs exactly on the kink for nodes with
    # dead inputs; checking at a jittered point avoids that measure-zero set.
    for p in params:
        p.data = p.data + rng.normal(0.0, 0.1, p.shape)
    return nc.grad_check_params(loss_fn, params, max_coords=max_coords, rng=rng)


def case_infograph_unsup(rng, max_coords):
    cfg = EncoderConfig("gin", 2, HIDDEN, "sum", True)
    enc = build_encoder(cfg, D_X, rng)
    disc = Discriminator(cfg.embedding_dim, cfg.embedding_dim, rng, d_proj=3)
    batch = make_batch(random_graphs(rng, 3))
    return _check(lambda: infograph_unsup_loss(enc, disc, batch), [enc, disc], rng, max_coords)


def case_consistency(rng, max_coords):
    cfg = EncoderConfig("gin", 2, HIDDEN, "sum", True)
    twin = TwinEncoders(cfg, D_X, rng)
    disc2 = Discriminator(cfg.embedding_dim, cfg.embedding_dim, rng, d_proj=3)
    batch = make_batch(random_graphs(rng, 3))
    return _check(lambda: consistency_loss(twin, disc2, batch), [twin.sup, twin.unsup, disc2], rng, max_coords)


def case_infograph_semi(rng, max_coords):
    cfg = EncoderConfig("gin", 2, HIDDEN, "sum", True)
    twin = TwinEncoders(cfg, D_X, rng)
    disc = Discriminator(cfg.embedding_dim, cfg.embedding_dim, rng, d_proj=3)
    disc2 = Discriminator(cfg.embedding_dim, cfg.embedding_dim, rng, d_proj=3)
    head = ClassifierHead(cfg.embedding_dim, N_CLASSES, rng)
    lab_graphs = random_graphs(rng, 2)
    lab = make_batch(lab_graphs, _labels(rng, 2))
    combined = make_batch(lab_graphs + random_graphs(rng, 2))
    return _check(lambda: infograph_semi_loss(twin, disc, disc2, head, lab, combined, 0.3, 0.3)[0],
                  [twin.sup, twin.unsup, disc, disc2, head], rng, max_coords)


def _random_policy(rng) -> AugmentationPolicy:
    return AugmentationPolicy(simplex_project(rng.dirichlet(np.ones(N_AUG * N_AUG)).reshape(N_AUG, N_AUG)))


def case_joao_upper(rng, max_coords):
    enc = build_encoder(EncoderConfig("resgcn", 2, HIDDEN, "mean", False), D_X, rng)
    graphs = random_graphs(rng, 3)
    policy = _random_policy(rng)
    seed = int(rng.integers(2**31))
    return _check(lambda: joao_contrastive_loss(enc, graphs, policy, 0.2, seed)[0], [enc], rng, max_coords)


def case_joao_lower(rng, max_coords):
    """Lower-level objective sum(p * table) + lam * L_dist as a function of p."""
    enc = build_encoder(EncoderConfig("resgcn", 2, HIDDEN, "mean", False), D_X, rng)
    graphs = random_graphs(rng, 3)
    with nc.no_grad():
        _, table = joao_contrastive_loss(enc, graphs, _random_policy(rng), 0.2, int(rng.integers(2**31)))
    lam = float(rng.uniform(0.1, 2.0))
    uniform = 1.0 / N_AUG**2

    def objective(p):
        diff = p - uniform
        return nc.tsum(p * table) + lam * (-0.5) * nc.tsum(diff * diff)

    return nc.grad_check(objective, nc.tensor(_random_policy(rng).p))


def case_sce(rng, max_coords):
    n = int(rng.integers(3, 9))
    x = np.abs(rng.normal(size=(n, D_X))) + 0.05
    masked = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
    gamma = float(rng.choice([1.0, 2.0, 3.0]))
    graph_id = np.sort(rng.integers(0, 2, size=n))
    return nc.grad_check(lambda z: sce_loss(x, z, masked, gamma, graph_id), nc.tensor(rng.normal(size=(n, D_X))))


def case_graphmae_semi(rng, max_coords):
    enc = build_encoder(EncoderConfig("gcn", 2, HIDDEN, "mean", False), D_X, rng)
    decoder = GCNDecoder(HIDDEN, D_X, rng)
    tokens = MaskTokens(D_X, HIDDEN, rng)
    head = ClassifierHead(HIDDEN, N_CLASSES, rng)
    lab_graphs = random_graphs(rng, 2)
    lab = make_batch(lab_graphs, _labels(rng, 2))
    combined = make_batch(lab_graphs + random_graphs(rng, 2))
    seed = int(rng.integers(2**31))
    spec = MaskSpec(0.5, 0.15)
    return _check(lambda: graphmae_semi_loss(enc, decoder, tokens, head, lab, combined, spec, 0.3, 2.0, seed)[0],
                  [enc, decoder, tokens, head], rng, max_coords)


def case_supervised(rng, max_coords):
    kind = str(rng.choice(["gcn", "gin", "resgcn"]))
    cfg = EncoderConfig(kind, 2, HIDDEN, "mean", False)
    enc = build_encoder(cfg, D_X, rng)
    head = ClassifierHead(cfg.embedding_dim, N_CLASSES, rng)
    batch = make_batch(random_graphs(rng, 3), _labels(rng, 3))

    def loss():
        _, g = enc.embed(batch)
        return nc.softmax_cross_entropy(classify_logits(g, head), batch.labels)

    return _check(loss, [enc, head], rng, max_coords)


CASES: dict[str, Callable] = {
    "infograph_local_global": case_infograph_unsup,
    "infograph_consistency": case_consistency,
    "infograph_semi": case_infograph_semi,
    "joao_upper": case_joao_upper,
    "joao_lower": case_joao_lower,
    "graphmae_sce": case_sce,
    "graphmae_semi": case_graphmae_semi,
    "supervised_ce": case_supervised,
}


def _one(case, rng, max_coords, attempts: int = 20) -> float:
    # Tiny random encoders occasionally emit an all-zero embedding, where cosine
    # terms are undefined; such draws are replaced rather than scored.
    for _ in range(attempts):
        try:
            return case(rng, max_coords)
        except nc.DegenerateInputError:
            continue
    raise nc.DegenerateInputError(f"{attempts} consecutive degenerate draws")


def run_gradient_suite(n_batches: int = 20, seed: int = 0, max_coords: int = 4) -> dict[str, dict]:
    """Worst relative error per loss over ``n_batches`` random batches, plus timing."""
    out = {}
    for offset, (name, case) in enumerate(CASES.items()):
        rng = np.random.default_rng([seed, offset])
        start = time.perf_counter()
        worst = max(_one(case, rng, max_coords) for _ in range(n_batches))
        out[name] = {"worst_rel_err": worst, "seconds": time.perf_counter() - start, "ok": worst < TOLERANCE}
    return out
