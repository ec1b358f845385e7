import math

import numpy as np
import pytest

from rumorssl import numcore as nc
from rumorssl import training
from rumorssl.encoders import load_checkpoint, save_checkpoint
from rumorssl.graphdata import Corpus, StratificationError, generate_synthetic_corpus, make_batch
from rumorssl.numcore import ContractError
from rumorssl.training import (
    TrainConfig,
    build_bundle,
    finetune,
    evaluate,
    pretrain,
    run_fewshot,
    run_pretrain_finetune,
    run_semi_supervised,
    sub_seed,
    supervised_loss,
)

SMALL = dict(hidden_dim=8, disc_dim=8, batch_size=16, labeled_per_batch=8, unlabeled_per_batch=8,
             pretrain_epochs=2, finetune_epochs=4, split_ratios=(0.6, 0.2, 0.2))


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(40, 40, avg_posts=6, class_separation=0.6, seed=3, d_x=32)


def cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


def strip(metrics):
    return {k: v for k, v in metrics.items() if k != "pretrained_encoder"}


def test_sub_seeds_are_stable_and_distinct():
    assert sub_seed(5, "split") == sub_seed(5, "split")
    assert len({sub_seed(5, n) for n in ("split", "mask", "augment", "init")}) == 4
    assert sub_seed(5, "split") != sub_seed(6, "split")


def test_config_validation():
    for bad in (dict(alpha=-1), dict(method="simclr"), dict(gamma=0.5), dict(finetune_epochs=0), dict(patience=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_encoder_per_method():
    assert cfg(method="infograph").encoder_config().kind == "gin"
    assert cfg(method="joao").encoder_config().kind == "resgcn"
    assert cfg(method="graphmae").encoder_config().kind == "gcn"


# ------------------------------------------------------------ supervised


def test_uniform_logits_give_ln2(corpus):
    bundle = build_bundle(cfg(), corpus.d_x, 2)
    bundle.head.weight.data[:] = 0.0
    bundle.head.bias.data[:] = 0.0
    batch = make_batch([g for _, g in corpus.labeled[:6]], corpus.labels(corpus.labeled[:6]))
    assert supervised_loss(bundle, batch).item() == pytest.approx(math.log(2), abs=1e-15)


def test_supervised_loss_matches_cross_entropy_oracle(corpus):
    bundle = build_bundle(cfg(method="graphmae"), corpus.d_x, 2)
    items = corpus.labeled[:5]
    batch = make_batch([g for _, g in items], corpus.labels(items))
    _, emb = bundle.encoder.embed(batch)
    logits = emb.data @ bundle.head.weight.data + bundle.head.bias.data
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    want = np.mean(lse - logits[np.arange(5), batch.labels])
    assert supervised_loss(bundle, batch).item() == pytest.approx(want, abs=1e-12)


def test_supervised_loss_vanishes_with_margin(corpus):
    bundle = build_bundle(cfg(method="graphmae"), corpus.d_x, 2)
    items = [it for it in corpus.labeled if corpus.label_index(it[0]) == 0][:4]
    batch = make_batch([g for _, g in items], corpus.labels(items))
    bundle.head.weight.data[:] = 0.0
    losses = []
    for t in (1.0, 5.0, 20.0):
        bundle.head.bias.data = np.array([t, 0.0])
        losses.append(supervised_loss(bundle, batch).item())
        assert losses[-1] == pytest.approx(math.log1p(math.exp(-t)), rel=1e-6, abs=1e-15)
    assert losses[0] > losses[1] > losses[2] > 0
    with pytest.raises(ContractError):
        supervised_loss(bundle, make_batch([g for _, g in items]))


# --------------------------------------------------------- pretraining


@pytest.mark.parametrize("method", ["infograph", "joao", "graphmae"])
def test_pretraining_never_touches_the_head(corpus, method):
    bundle = build_bundle(cfg(method=method), corpus.d_x, 2)
    head_before = bundle.head.state_dict()
    pretrain(bundle, [g for _, g in corpus.unlabeled[:20]], epochs=1)
    for k, v in bundle.head.state_dict().items():
        assert np.array_equal(v, head_before[k])
    assert all(p.grad is None or not p.grad.any() for p in bundle.head.parameters())


@pytest.mark.parametrize("method", ["infograph", "joao", "graphmae"])
def test_pretrain_loss_falls_by_epoch_twenty(method):
    pool = generate_synthetic_corpus(0, 48, avg_posts=6, seed=1, d_x=32)
    bundle = build_bundle(cfg(method=method, hidden_dim=16, disc_dim=16), pool.d_x, 2)
    history = pretrain(bundle, [g for _, g in pool.unlabeled], epochs=20)
    assert history[19]["l_unsup"] < history[0]["l_unsup"]


def test_empty_unlabeled_pool_is_rejected(corpus):
    bare = Corpus(corpus.labeled, [], corpus.label_set, corpus.d_x)
    with pytest.raises(ContractError):
        run_pretrain_finetune(bare, cfg())
    with pytest.raises(ContractError):
        run_semi_supervised(bare, cfg())


def test_zero_pretrain_epochs_is_plain_supervised(corpus):
    c = cfg(method="graphmae", pretrain_epochs=0)
    _, metrics = run_pretrain_finetune(corpus, c)
    bundle = build_bundle(c, corpus.d_x, 2)
    train, val, test = training.split_corpus(corpus, c.split_ratios, sub_seed(c.seed, "split"))
    finetune(bundle, corpus, train, val)
    assert evaluate(bundle, corpus, test) == metrics["test"]


# ------------------------------------------------------------ invariants


@pytest.mark.parametrize("method", ["infograph", "joao", "graphmae"])
def test_runs_are_deterministic(corpus, method):
    a_bundle, a = run_semi_supervised(corpus, cfg(method=method, finetune_epochs=2))
    b_bundle, b = run_semi_supervised(corpus, cfg(method=method, finetune_epochs=2))
    assert a == b and a_bundle.log == b_bundle.log


def test_checkpoint_transfer_is_bit_exact(corpus, tmp_path):
    c = cfg(method="infograph")
    _, direct = run_pretrain_finetune(corpus, c)
    path = tmp_path / "enc.ckpt"
    save_checkpoint(path, direct["pretrained_encoder"])
    _, reloaded = run_pretrain_finetune(corpus, c, encoder_state=load_checkpoint(path))
    assert strip(direct) == strip(reloaded)


@pytest.mark.parametrize("method", ["infograph", "joao", "graphmae"])
def test_no_test_claim_enters_training(corpus, method, monkeypatch):
    seen: set[str] = set()
    evaluating = [False]
    real_batch, real_predict = training.make_batch, training.predict

    def recording_batch(graphs, labels=None):
        if not evaluating[0]:
            seen.update(g.claim_id for g in graphs)
        return real_batch(graphs, labels)

    def flagged_predict(*args, **kwargs):
        evaluating[0] = True
        try:
            return real_predict(*args, **kwargs)
        finally:
            evaluating[0] = False

    monkeypatch.setattr(training, "make_batch", recording_batch)
    monkeypatch.setattr(training, "predict", flagged_predict)
    _, metrics = run_semi_supervised(corpus, cfg(method=method, finetune_epochs=2))
    ids = metrics["split_ids"]
    assert seen and not seen & set(ids["test"]) and not seen & set(ids["val"])
    assert not set(ids["train"]) & set(ids["test"])


# ----------------------------------------------------------------- logs


def test_log_records_every_component(corpus):
    bundle, _ = run_semi_supervised(corpus, cfg(method="infograph", finetune_epochs=2))
    for rec in bundle.log:
        assert {"epoch", "l_sup", "l_unsup", "l_consistency", "val_acc"} <= set(rec)
        assert rec["l_sup"] is not None and rec["l_unsup"] is not None and rec["l_consistency"] is not None
    bundle, _ = run_semi_supervised(corpus, cfg(method="joao", finetune_epochs=2))
    assert all(rec["l_dist"] is not None and rec["l_dist"] <= 0 for rec in bundle.log)
    assert len(bundle.policy_history) == len(bundle.log)
    bundle, _ = run_semi_supervised(corpus, cfg(method="graphmae", alpha=0.0, finetune_epochs=2))
    assert all(rec["l_unsup"] is None for rec in bundle.log)


def test_zero_weights_match_supervised_baseline(corpus):
    _, a = run_semi_supervised(corpus, cfg(method="infograph", alpha=0.0, beta=0.0))
    _, b = run_semi_supervised(corpus, cfg(method="infograph", alpha=0.0, beta=0.0, use_unlabeled=False))
    assert a["test"] == b["test"]


# ------------------------------------------------------------- few-shot


def test_fewshot_rejects_k_below_class_count(corpus):
    with pytest.raises(StratificationError):
        run_fewshot(corpus, cfg(), k_values=[1], pretrained=False)


def test_fewshot_with_full_training_set_matches_pretrain_finetune(corpus):
    c = cfg(method="graphmae")
    _, direct = run_pretrain_finetune(corpus, c)
    out = run_fewshot(corpus, c, k_values=[10_000])
    assert out[10_000]["runs"] == [direct["test"]["accuracy"]]
