import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rumorssl import numcore as nc
from rumorssl.encoders import (
    ClassifierHead,
    EncoderConfig,
    GINEncoder,
    build_encoder,
    classify_logits,
    load_checkpoint,
    normalize_adjacency,
    readout,
    save_checkpoint,
)
from rumorssl.graphdata import PropagationGraph, make_batch
from rumorssl.numcore import DimensionError


def graph(parents, x, cid="g"):
    return PropagationGraph(np.asarray(x, float), np.asarray(parents, np.int64), 0, cid)


def random_tree(rng, n, d=5, cid="g"):
    parents = [-1] + [int(rng.integers(0, i)) for i in range(1, n)]
    return graph(parents, rng.normal(size=(n, d)), cid)


def dense_normalized(g):
    n = g.n_nodes
    a = np.eye(n)
    for u, v in g.edges.T:
        a[u, v] = 1.0
    d = a.sum(axis=1) ** -0.5
    return d[:, None] * a * d[None, :]


def zero_params(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


# ---------------------------------------------------------------- adjacency


def test_isolated_node_adjacency_is_one():
    adj = normalize_adjacency(make_batch([graph([-1], [[1.0, 2.0]])]))
    assert adj.matrix.toarray().tolist() == [[1.0]]


def test_single_edge_gives_halves():
    adj = normalize_adjacency(make_batch([graph([-1, 0], np.ones((2, 3)))]))
    np.testing.assert_allclose(adj.matrix.toarray(), np.full((2, 2), 0.5), atol=1e-15, rtol=0)


def test_normalized_adjacency_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = random_tree(rng, 6)
        got = normalize_adjacency(make_batch([g])).matrix.toarray()
        np.testing.assert_allclose(got, dense_normalized(g), atol=1e-12, rtol=0)


# ----------------------------------------------------------------- encoders


def test_gcn_zero_weights_give_zero_embeddings():
    rng = np.random.default_rng(1)
    enc = build_encoder(EncoderConfig("gcn", 2, 4), 5, rng)
    zero_params(enc)
    nodes, graphs = enc.embed(make_batch([random_tree(rng, 4)]))
    assert not nodes.data.any() and not graphs.data.any()


def test_gcn_single_layer_is_propagated_projection():
    rng = np.random.default_rng(2)
    g = random_tree(rng, 5)
    enc = build_encoder(EncoderConfig("gcn", 1, 4), 5, rng)
    enc.convs[0].bias.data = rng.normal(size=4)
    h = enc.forward(make_batch([g]))[-1].data
    want = dense_normalized(g) @ (g.node_features @ enc.convs[0].weight.data) + enc.convs[0].bias.data
    np.testing.assert_allclose(h, want, atol=1e-12)


@pytest.mark.parametrize("kind", ["gcn", "gin", "resgcn"])
def test_permutation_equivariance(kind):
    rng = np.random.default_rng(3)
    g = random_tree(rng, 7)
    enc = build_encoder(EncoderConfig(kind, 3, 5, layer_concat=True), 5, rng)
    perm = rng.permutation(7)
    inv = np.argsort(perm)
    # relabel nodes: new node i is old node perm[i]
    parents = np.array([-1 if g.parents[p] < 0 else inv[g.parents[p]] for p in perm])
    g2 = PropagationGraph(g.node_features[perm], parents, int(inv[0]), "p")
    n1, e1 = enc.embed(make_batch([g]))
    n2, e2 = enc.embed(make_batch([g2]))
    np.testing.assert_allclose(n2.data, n1.data[perm], atol=1e-10)
    np.testing.assert_allclose(e2.data, e1.data, atol=1e-10)


def test_gin_isolated_node_is_mlp_of_input():
    rng = np.random.default_rng(4)
    enc = GINEncoder(EncoderConfig("gin", 1, 4), 3, rng)
    x = rng.normal(size=(1, 3))
    got = enc.forward(make_batch([graph([-1], x)]))[-1].data
    mlp = enc.mlps[0]
    want = np.maximum(x @ mlp.lin1.weight.data + mlp.lin1.bias.data, 0) @ mlp.lin2.weight.data + mlp.lin2.bias.data
    np.testing.assert_allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("k", [1, 3, 6])
def test_gin_star_center_sums_leaves(k):
    rng = np.random.default_rng(5)
    enc = GINEncoder(EncoderConfig("gin", 1, 4), 3, rng)
    xc, xl = rng.normal(size=3), rng.normal(size=3)
    star = graph([-1] + [0] * k, np.vstack([xc] + [xl] * k))
    got = enc.forward(make_batch([star]))[-1].data[0]
    mlp = enc.mlps[0]
    agg = xc + k * xl
    want = np.maximum(agg @ mlp.lin1.weight.data + mlp.lin1.bias.data, 0) @ mlp.lin2.weight.data + mlp.lin2.bias.data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_resgcn_one_layer_equals_gcn():
    g = random_tree(np.random.default_rng(6), 5)
    gcn = build_encoder(EncoderConfig("gcn", 1, 4), 5, np.random.default_rng(7))
    res = build_encoder(EncoderConfig("resgcn", 1, 4), 5, np.random.default_rng(7))
    b = make_batch([g])
    assert np.array_equal(gcn.forward(b)[-1].data, res.forward(b)[-1].data)


def test_resgcn_zero_weights_keep_first_layer_through_skips():
    rng = np.random.default_rng(8)
    enc = build_encoder(EncoderConfig("resgcn", 3, 4), 5, rng)
    for conv in enc.convs[1:]:
        zero_params(conv)
    layers = enc.forward(make_batch([random_tree(rng, 5)]))
    assert layers[0].data.any()
    np.testing.assert_array_equal(layers[1].data, layers[0].data)
    np.testing.assert_array_equal(layers[2].data, layers[0].data)


def test_resgcn_three_layer_gradients():
    rng = np.random.default_rng(9)
    enc = build_encoder(EncoderConfig("resgcn", 3, 4), 5, rng)
    for p in enc.parameters():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    batch = make_batch([random_tree(rng, 6), random_tree(rng, 4)])
    err = nc.grad_check_params(lambda: nc.tsum(enc.embed(batch)[1] * 1.7), enc.parameters(), max_coords=6, rng=rng)
    assert err < 1e-4


def test_width_mismatch_raises():
    enc = build_encoder(EncoderConfig("gcn", 2, 4), 7, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        enc.embed(make_batch([graph([-1, 0], np.ones((2, 5)))]))


# ------------------------------------------------------------------ readout


def test_readout_single_node_and_duplicated_sum():
    h = nc.tensor([[1.0, -2.0]])
    b1 = make_batch([graph([-1], [[0.0]])])
    for mode in ("sum", "mean"):
        assert readout(h, b1, EncoderConfig(readout=mode)).data.tolist() == [[1.0, -2.0]]
    rng = np.random.default_rng(10)
    g = random_tree(rng, 4)
    h1 = nc.tensor(rng.normal(size=(4, 3)))
    doubled = graph([-1, 0, 1, 2, 0, 4, 5, 6], np.zeros((8, 1)))
    h2 = nc.concat([h1, h1], axis=0)
    cfg = EncoderConfig(readout="sum")
    np.testing.assert_allclose(readout(h2, make_batch([doubled]), cfg).data, 2 * readout(h1, make_batch([g]), cfg).data)


def test_mean_readout_is_order_invariant():
    rng = np.random.default_rng(11)
    h = rng.normal(size=(5, 3))
    b = make_batch([graph([-1, 0, 0, 1, 1], np.zeros((5, 1)))])
    cfg = EncoderConfig(readout="mean")
    perm = rng.permutation(5)
    a = readout(nc.tensor(h), b, cfg).data
    c = readout(nc.tensor(h[perm]), b, cfg).data
    np.testing.assert_allclose(a, c, atol=1e-14)
    np.testing.assert_allclose(a[0], h.mean(axis=0), atol=1e-14)


def test_layer_concat_width():
    cfg = EncoderConfig("gin", 3, 4, "sum", True)
    enc = build_encoder(cfg, 5, np.random.default_rng(0))
    _, e = enc.embed(make_batch([random_tree(np.random.default_rng(1), 3)]))
    assert e.shape == (1, 12) == (1, cfg.embedding_dim)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 7), min_size=1, max_size=5), st.sampled_from(["gcn", "gin", "resgcn"]))
def test_batch_consistency(sizes, kind):
    rng = np.random.default_rng(sum(sizes))
    graphs = [random_tree(rng, n, cid=f"g{i}") for i, n in enumerate(sizes)]
    enc = build_encoder(EncoderConfig(kind, 2, 4), 5, np.random.default_rng(0))
    together = enc.embed(make_batch(graphs))[1].data
    alone = np.vstack([enc.embed(make_batch([g]))[1].data for g in graphs])
    np.testing.assert_allclose(together, alone, atol=1e-12)


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_locality_of_receptive_field(layers):
    rng = np.random.default_rng(12)
    n = 8
    chain = graph(list(range(-1, n - 1)), rng.normal(size=(n, 5)))
    enc = build_encoder(EncoderConfig("gcn", layers, 4), 5, rng)
    before = enc.forward(make_batch([chain]))[-1].data
    x = chain.node_features.copy()
    x[-1] += 5.0  # perturb the tail node
    after = enc.forward(make_batch([graph(chain.parents, x)]))[-1].data
    far = np.arange(n) < n - 1 - layers
    assert np.array_equal(before[far], after[far])
    assert not np.allclose(before[n - 1 - layers], after[n - 1 - layers])


# --------------------------------------------------------------------- head


def test_zero_head_gives_uniform_softmax():
    rng = np.random.default_rng(13)
    head = ClassifierHead(4, 3, rng)
    zero_params(head)
    logits = classify_logits(nc.tensor(rng.normal(size=(2, 4))), head)
    assert not logits.data.any()
    assert nc.softmax_cross_entropy(logits, [0, 2]).item() == pytest.approx(np.log(3))


def test_opposite_rows_give_margin_twice_projection():
    rng = np.random.default_rng(14)
    head = ClassifierHead(4, 2, rng)
    w = rng.normal(size=4)
    head.weight.data = np.stack([w, -w], axis=1)
    head.bias.data = np.zeros(2)
    h = rng.normal(size=4)
    z = classify_logits(nc.tensor(h[None]), head).data[0]
    assert z[0] - z[1] == pytest.approx(2 * w @ h, abs=1e-12)


def test_head_rejects_single_class():
    with pytest.raises(ValueError):
        ClassifierHead(4, 1, np.random.default_rng(0))


@pytest.mark.parametrize("kind", ["gcn", "gin", "resgcn"])
def test_end_to_end_classification_gradients(kind):
    rng = np.random.default_rng(15)
    enc = build_encoder(EncoderConfig(kind, 2, 4), 5, rng)
    head = ClassifierHead(4, 2, rng)
    params = enc.parameters() + head.parameters()
    for p in params:
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    batch = make_batch([random_tree(rng, 5), random_tree(rng, 3)], np.array([0, 1]))

    def loss():
        return nc.softmax_cross_entropy(classify_logits(enc.embed(batch)[1], head), batch.labels)

    assert nc.grad_check_params(loss, params, max_coords=8, rng=rng) < 1e-4


# --------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(16)
    enc = build_encoder(EncoderConfig("gin", 3, 6), 5, rng)
    path = tmp_path / "enc.ckpt"
    save_checkpoint(path, enc.state_dict())
    other = build_encoder(EncoderConfig("gin", 3, 6), 5, np.random.default_rng(99))
    other.load_state_dict(load_checkpoint(path))
    for (k, a), (k2, b) in zip(enc.named_parameters(), other.named_parameters()):
        assert k == k2 and a.data.tobytes() == b.data.tobytes()


def test_load_state_rejects_mismatch():
    enc = build_encoder(EncoderConfig("gcn", 2, 4), 5, np.random.default_rng(0))
    small = build_encoder(EncoderConfig("gcn", 2, 3), 5, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        enc.load_state_dict(small.state_dict())
    with pytest.raises(KeyError):
        enc.load_state_dict({})
