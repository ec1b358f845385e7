"""Training strategies: pretrain then finetune, joint semi-supervised, few-shot."""

from __future__ import annotations

import dataclasses
import logging
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .encoders import ClassifierHead, Encoder, EncoderConfig, Module, build_encoder, classify_logits
from .graphdata import (
    Corpus,
    PropagationGraph,
    StratificationError,
    make_batch,
    split_corpus,
    stratified_sample,
)
from .graphmae import GCNDecoder, MaskSpec, MaskTokens, graphmae_semi_loss, graphmae_unsup_loss
from .infograph import Discriminator, TwinEncoders, infograph_semi_loss, infograph_unsup_loss
from .joao import AugmentationPolicy, JoaoHyper, agd_pretrain_step, agd_semi_step
from .metrics import aggregate_runs, confusion_metrics
from .numcore import ContractError, Tensor
from .optim import Adam

log = logging.getLogger(__name__)

METHODS = ("infograph", "joao", "graphmae")
STRATEGIES = ("pretrain_finetune", "semi_supervised")


@dataclass
class TrainConfig:
    method: str = "infograph"
    strategy: str = "semi_supervised"
    alpha: float = 0.3
    beta: float = 0.3
    lam: float = 1.0
    gamma: float = 2.0
    mask_rate: float = 0.5
    replace_rate: float = 0.15
    aug_ratio: float = 0.2
    lower_lr: float = 0.01
    lr: float = 1e-3
    pretrain_epochs: int = 50
    finetune_epochs: int = 100
    batch_size: int = 32
    labeled_per_batch: int = 16
    unlabeled_per_batch: int = 16
    patience: int = 10
    seed: int = 0
    use_unlabeled: bool = True
    layers: int = 2
    hidden_dim: int = 64
    disc_dim: int = 64
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("alpha", "beta", "lam", "lr", "aug_ratio", "lower_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.gamma < 1:
            raise ValueError("gamma must be at least 1")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 1:
            raise ValueError("need pretrain_epochs >= 0 and finetune_epochs >= 1")
        if self.batch_size < 2 or self.labeled_per_batch < 1 or self.unlabeled_per_batch < 0:
            raise ValueError("batch sizes out of range")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        self.split_ratios = tuple(float(r) for r in self.split_ratios)

    def encoder_config(self) -> EncoderConfig:
        if self.method == "infograph":
            return EncoderConfig("gin", self.layers, self.hidden_dim, "sum", True)
        kind = "resgcn" if self.method == "joao" else "gcn"
        return EncoderConfig(kind, self.layers, self.hidden_dim, "mean", False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


def sub_seed(seed: int, name: str) -> int:
    """Independent, replayable integer seed for the named randomness stream."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class ModelBundle:
    config: TrainConfig
    encoder: Encoder
    head: ClassifierHead
    aux: dict[str, Module] = field(default_factory=dict)
    policy: AugmentationPolicy | None = None
    log: list[dict] = field(default_factory=list)
    d_x: int = 0
    policy_history: list[np.ndarray] = field(default_factory=list)  # JOAO table after each epoch

    def classifier_state(self) -> dict[str, np.ndarray]:
        state = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        state.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        return state

    def load_classifier_state(self, state: dict[str, np.ndarray]) -> None:
        self.encoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("encoder.")})
        self.head.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("head.")})


def build_bundle(config: TrainConfig, d_x: int, n_classes: int, seed: int | None = None) -> ModelBundle:
    rng = np.random.default_rng(sub_seed(config.seed if seed is None else seed, "init"))
    enc_cfg = config.encoder_config()
    encoder = build_encoder(enc_cfg, d_x, rng)
    head = ClassifierHead(enc_cfg.embedding_dim, n_classes, rng)
    return ModelBundle(config, encoder, head, d_x=d_x)


def supervised_loss(bundle: ModelBundle, batch) -> Tensor:
    if batch.labels is None:
        raise ContractError("supervised loss needs labels")
    _, g = bundle.encoder.embed(batch)
    return nc.softmax_cross_entropy(classify_logits(g, bundle.head), batch.labels)


def predict(bundle: ModelBundle, graphs: Sequence[PropagationGraph], chunk: int = 256) -> np.ndarray:
    out = []
    with nc.no_grad():
        for start in range(0, len(graphs), chunk):
            batch = make_batch(graphs[start:start + chunk])
            _, g = bundle.encoder.embed(batch)
            out.append(classify_logits(g, bundle.head).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(bundle: ModelBundle, items, corpus: Corpus) -> float:
    if not items:
        return float("nan")
    pred = predict(bundle, [g for _, g in items])
    return float(np.mean(pred == corpus.labels(items)))


def _chunks(order: np.ndarray, size: int, min_size: int = 1):
    for start in range(0, len(order), size):
        part = order[start:start + size]
        if len(part) >= min_size:
            yield part


# ------------------------------------------------------------------ pretrain


def pretrain(bundle: ModelBundle, graphs: Sequence[PropagationGraph], epochs: int | None = None) -> list[dict]:
    """Minimize the method's unsupervised loss on ``graphs``; touches the encoder and
    method-specific modules only, never the classifier head."""
    cfg = bundle.config
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    if epochs == 0:
        return []
    if len(graphs) < 2:
        raise ContractError("pretraining needs an unlabeled pool of at least two graphs")
    init = np.random.default_rng(sub_seed(cfg.seed, "init-aux"))
    enc = bundle.encoder
    emb_dim = enc.config.embedding_dim
    params = enc.parameters()
    if cfg.method == "infograph":
        disc = Discriminator(emb_dim, emb_dim, init, cfg.disc_dim)
        bundle.aux = {"disc": disc}
        params += disc.parameters()
    elif cfg.method == "graphmae":
        decoder = GCNDecoder(cfg.hidden_dim, bundle.d_x, init)
        tokens = MaskTokens(bundle.d_x, cfg.hidden_dim, init)
        bundle.aux = {"decoder": decoder, "tokens": tokens}
        params += decoder.parameters() + tokens.parameters()
    else:
        bundle.policy = AugmentationPolicy()
    opt = Adam(params, lr=cfg.lr)
    order_rng = np.random.default_rng(sub_seed(cfg.seed, "pretrain-order"))
    noise_rng = np.random.default_rng(sub_seed(cfg.seed, "mask" if cfg.method == "graphmae" else "augment"))
    hyper = JoaoHyper(cfg.lam, cfg.aug_ratio, cfg.lower_lr)
    spec = MaskSpec(cfg.mask_rate, cfg.replace_rate)
    history = []
    for epoch in range(1, epochs + 1):
        losses, dists = [], []
        for idx in _chunks(order_rng.permutation(len(graphs)), cfg.batch_size, min_size=2):
            chunk = [graphs[i] for i in idx]
            if cfg.method == "joao":
                bundle.policy, parts = agd_pretrain_step(
                    enc, opt, bundle.policy, chunk, hyper, int(noise_rng.integers(2**31)))
                losses.append(parts["l_unsup"])
                dists.append(parts["l_dist"])
                continue
            batch = make_batch(chunk)
            opt.zero_grad()
            if cfg.method == "infograph":
                loss = infograph_unsup_loss(enc, bundle.aux["disc"], batch)
            else:
                loss = graphmae_unsup_loss(enc, bundle.aux["decoder"], bundle.aux["tokens"], batch, spec,
                                           cfg.gamma, noise_rng)
            nc.backward(loss)
            opt.step()
            losses.append(loss.item())
        rec = {"phase": "pretrain", "epoch": epoch, "l_sup": None, "l_unsup": float(np.mean(losses)),
               "l_consistency": None, "l_dist": float(np.mean(dists)) if dists else None, "val_acc": None}
        history.append(rec)
        if bundle.policy is not None:
            bundle.policy_history.append(bundle.policy.p.copy())
        log.debug("pretrain %s", rec)
    bundle.log.extend(history)
    return history


# ------------------------------------------------------------------ finetune


def finetune(bundle: ModelBundle, corpus: Corpus, train, val, seed: int | None = None) -> dict:
    """End-to-end supervised training of encoder and head with early stopping on
    validation accuracy.  The best-validation state is restored."""
    cfg = bundle.config
    if not train:
        raise ContractError("finetuning needs labeled training claims")
    seed = cfg.seed if seed is None else seed
    opt = Adam(bundle.encoder.parameters() + bundle.head.parameters(), lr=cfg.lr)
    order_rng = np.random.default_rng(sub_seed(seed, "finetune-order"))
    graphs = [g for _, g in train]
    labels = corpus.labels(train)
    best_acc, best_state, best_epoch, stale = -1.0, bundle.classifier_state(), 0, 0
    epoch = 0
    for epoch in range(1, cfg.finetune_epochs + 1):
        losses = []
        for idx in _chunks(order_rng.permutation(len(graphs)), cfg.batch_size):
            batch = make_batch([graphs[i] for i in idx], labels[idx])
            opt.zero_grad()
            loss = supervised_loss(bundle, batch)
            nc.backward(loss)
            opt.step()
            losses.append(loss.item())
        val_acc = accuracy(bundle, val, corpus) if val else float(-epoch)
        bundle.log.append({"phase": "finetune", "epoch": epoch, "l_sup": float(np.mean(losses)),
                           "l_unsup": None, "l_consistency": None, "l_dist": None,
                           "val_acc": val_acc if val else None})
        if val_acc > best_acc:
            best_acc, best_state, best_epoch, stale = val_acc, bundle.classifier_state(), epoch, 0
        else:
            stale += 1
            if val and stale >= cfg.patience:
                break
    if val:
        bundle.load_classifier_state(best_state)
    return {"best_val_acc": best_acc if val else None, "best_epoch": best_epoch if val else epoch,
            "epochs_run": epoch}


# ------------------------------------------------------------- strategies


def evaluate(bundle: ModelBundle, corpus: Corpus, test) -> dict:
    pred = predict(bundle, [g for _, g in test])
    rep = confusion_metrics(pred, corpus.labels(test), len(corpus.label_set))
    return rep.to_dict(corpus.label_set)


def _split(corpus: Corpus, config: TrainConfig, split):
    if split is not None:
        return split
    return split_corpus(corpus, config.split_ratios, sub_seed(config.seed, "split"))


def run_pretrain_finetune(corpus: Corpus, config: TrainConfig, split=None, encoder_state=None):
    """Pretrain on the unlabeled pool, then finetune encoder and head on the training split.

    Only the encoder carries over; discriminator, decoder and policy are dropped.
    ``encoder_state`` skips pretraining and starts finetuning from the given weights.
    """
    if config.pretrain_epochs > 0 and encoder_state is None and not corpus.unlabeled:
        raise ContractError("pretraining needs a non-empty unlabeled pool")
    train, val, test = _split(corpus, config, split)
    bundle = build_bundle(config, corpus.d_x, len(corpus.label_set))
    if encoder_state is not None:
        bundle.encoder.load_state_dict(encoder_state)
    else:
        pretrain(bundle, [g for _, g in corpus.unlabeled])
    pretrained = bundle.encoder.state_dict()
    bundle.aux, bundle.policy = {}, None
    fit = finetune(bundle, corpus, train, val)
    metrics = {"test": evaluate(bundle, corpus, test), **fit, "pretrained_encoder": pretrained,
               "split_ids": _split_ids(train, val, test)}
    return bundle, metrics


def _split_ids(train, val, test) -> dict:
    return {name: [c.claim_id for c, _ in part] for name, part in (("train", train), ("val", val), ("test", test))}


def run_semi_supervised(corpus: Corpus, config: TrainConfig, split=None):
    """Joint supervised + self-supervised training on mixed labeled/unlabeled batches.

    With ``use_unlabeled`` off, the self-supervised half of each batch is drawn
    from the labeled training graphs instead of the unlabeled pool.
    """
    cfg = config
    train, val, test = _split(corpus, cfg, split)
    if not train:
        raise ContractError("semi-supervised training needs labeled claims")
    ssl_on = cfg.alpha > 0 or (cfg.method == "infograph" and cfg.beta > 0)
    pool = [g for _, g in corpus.unlabeled] if cfg.use_unlabeled else [g for _, g in train]
    if ssl_on and cfg.use_unlabeled and not pool:
        raise ContractError("semi-supervised training needs an unlabeled pool")

    bundle = build_bundle(cfg, corpus.d_x, len(corpus.label_set))
    init = np.random.default_rng(sub_seed(cfg.seed, "init-aux"))
    enc = bundle.encoder
    params = enc.parameters() + bundle.head.parameters()
    emb = enc.config.embedding_dim
    if cfg.method == "infograph":
        unsup = build_encoder(enc.config, corpus.d_x, init)
        disc = Discriminator(emb, emb, init, cfg.disc_dim)
        disc2 = Discriminator(emb, emb, init, cfg.disc_dim)
        bundle.aux = {"unsup_encoder": unsup, "disc": disc, "disc2": disc2}
        twin = TwinEncoders.from_encoders(enc, unsup)
        params += unsup.parameters() + disc.parameters() + disc2.parameters()
    elif cfg.method == "graphmae":
        decoder = GCNDecoder(cfg.hidden_dim, corpus.d_x, init)
        tokens = MaskTokens(corpus.d_x, cfg.hidden_dim, init)
        bundle.aux = {"decoder": decoder, "tokens": tokens}
        params += decoder.parameters() + tokens.parameters()
    else:
        bundle.policy = AugmentationPolicy()
    opt = Adam(params, lr=cfg.lr)
    order_rng = np.random.default_rng(sub_seed(cfg.seed, "semi-order"))
    pool_rng = np.random.default_rng(sub_seed(cfg.seed, "semi-pool"))
    noise_rng = np.random.default_rng(sub_seed(cfg.seed, "mask" if cfg.method == "graphmae" else "augment"))
    hyper = JoaoHyper(cfg.lam, cfg.aug_ratio, cfg.lower_lr)
    spec = MaskSpec(cfg.mask_rate, cfg.replace_rate)

    graphs = [g for _, g in train]
    labels = corpus.labels(train)
    pool_order: list[int] = []

    def draw_pool(n: int) -> list[PropagationGraph]:
        out = []
        while len(out) < n and pool:
            if not pool_order:
                pool_order.extend(pool_rng.permutation(len(pool)).tolist())
            out.append(pool[pool_order.pop()])
        return out

    best_acc, best_state, best_epoch, stale, epoch = -1.0, bundle.classifier_state(), 0, 0, 0
    for epoch in range(1, cfg.finetune_epochs + 1):
        comp: dict[str, list[float]] = {"l_sup": [], "l_unsup": [], "l_consistency": [], "l_dist": []}
        for idx in _chunks(order_rng.permutation(len(graphs)), cfg.labeled_per_batch):
            lab_graphs = [graphs[i] for i in idx]
            lab = make_batch(lab_graphs, labels[idx])
            extra = draw_pool(cfg.unlabeled_per_batch) if ssl_on else []
            mixed = lab_graphs + extra
            step_seed = int(noise_rng.integers(2**31))
            if cfg.method == "joao":
                if ssl_on and len(mixed) >= 2:
                    bundle.policy, parts = agd_semi_step(enc, bundle.head, opt, bundle.policy, lab, mixed,
                                                         cfg.alpha, hyper, step_seed)
                else:
                    parts = _plain_step(bundle, opt, lab)
            else:
                opt.zero_grad()
                if not ssl_on or len(mixed) < 2:
                    loss = supervised_loss(bundle, lab)
                    parts = {"l_sup": loss.item()}
                elif cfg.method == "infograph":
                    loss, parts = infograph_semi_loss(twin, disc, disc2, bundle.head, lab, make_batch(mixed),
                                                      cfg.alpha, cfg.beta)
                else:
                    loss, parts = graphmae_semi_loss(enc, decoder, tokens, bundle.head, lab, make_batch(mixed),
                                                     spec, cfg.alpha, cfg.gamma, step_seed)
                nc.backward(loss)
                opt.step()
            for k, v in parts.items():
                if v is not None and k in comp:
                    comp[k].append(v)
        val_acc = accuracy(bundle, val, corpus) if val else float(-epoch)
        rec = {"phase": "semi", "epoch": epoch, "val_acc": val_acc if val else None}
        rec.update({k: (float(np.mean(v)) if v else None) for k, v in comp.items()})
        bundle.log.append(rec)
        if bundle.policy is not None:
            bundle.policy_history.append(bundle.policy.p.copy())
        if val_acc > best_acc:
            best_acc, best_state, best_epoch, stale = val_acc, bundle.classifier_state(), epoch, 0
        else:
            stale += 1
            if val and stale >= cfg.patience:
                break
    if val:
        bundle.load_classifier_state(best_state)
    metrics = {"test": evaluate(bundle, corpus, test), "best_val_acc": best_acc if val else None,
               "best_epoch": best_epoch, "epochs_run": epoch, "split_ids": _split_ids(train, val, test)}
    return bundle, metrics


def _plain_step(bundle: ModelBundle, opt: Adam, lab) -> dict:
    opt.zero_grad()
    loss = supervised_loss(bundle, lab)
    nc.backward(loss)
    opt.step()
    return {"l_sup": loss.item()}


def train_accuracy(bundle: ModelBundle, corpus: Corpus, items) -> float:
    return accuracy(bundle, items, corpus)


# ------------------------------------------------------------------ few-shot


DEFAULT_K_VALUES = (10, 20, 50, 100, 200, 500)


def run_fewshot(
    corpus: Corpus,
    config: TrainConfig,
    k_values: Sequence[int] = DEFAULT_K_VALUES,
    seeds: Sequence[int] | None = None,
    pretrained: bool = True,
) -> dict:
    """Accuracy per k: pretrain once per seed, then finetune on a stratified k-sample
    of the training split and score the held-out test split.

    ``pretrained=False`` gives the from-scratch baseline (no pretraining).
    """
    seeds = [config.seed] if seeds is None else list(seeds)
    n_classes = len(corpus.label_set)
    per_k: dict[int, list[float]] = {int(k): [] for k in k_values}
    for s in seeds:
        cfg = dataclasses.replace(config, seed=int(s), strategy="pretrain_finetune")
        train, val, test = split_corpus(corpus, cfg.split_ratios, sub_seed(cfg.seed, "split"))
        for k in k_values:
            if k < n_classes:
                raise StratificationError(f"k={k} is smaller than the class count {n_classes}")
        state = None
        if pretrained and cfg.pretrain_epochs > 0:
            base = build_bundle(cfg, corpus.d_x, n_classes)
            pretrain(base, [g for _, g in corpus.unlabeled])
            state = base.encoder.state_dict()
        train_labels = corpus.labels(train)
        for k in k_values:
            sample = train if k >= len(train) else stratified_sample(
                train, train_labels, int(k), n_classes, sub_seed(cfg.seed, f"fewshot-{k}"))
            bundle = build_bundle(cfg, corpus.d_x, n_classes)
            if state is not None:
                bundle.encoder.load_state_dict(state)
            finetune(bundle, corpus, sample, val)
            per_k[int(k)].append(float(evaluate(bundle, corpus, test)["accuracy"]))
    summary = {}
    for k, accs in per_k.items():
        m, sd, cell = aggregate_runs(accs)
        summary[k] = {"mean": m, "std": sd, "cell": cell, "runs": accs}
    return summary


# ------------------------------------------------------------------ ablation


ABLATION_ROWS = (
    ("supervised", False, False),
    ("ssl_loss", True, False),
    ("ssl_loss_unlabeled", True, True),
)


def ablation_config(config: TrainConfig, ssl_loss: bool, unlabeled: bool) -> TrainConfig:
    if ssl_loss:
        return dataclasses.replace(config, strategy="semi_supervised", use_unlabeled=unlabeled)
    return dataclasses.replace(config, strategy="semi_supervised", alpha=0.0, beta=0.0, use_unlabeled=False)


def run_ablation(corpus: Corpus, config: TrainConfig, seeds: Sequence[int]) -> dict:
    """Semi-supervised ablation: no SSL, SSL on labeled graphs only, SSL with the unlabeled pool."""
    out = {}
    for name, ssl_loss, unlabeled in ABLATION_ROWS:
        accs = []
        for s in seeds:
            cfg = dataclasses.replace(ablation_config(config, ssl_loss, unlabeled), seed=int(s))
            _, metrics = run_semi_supervised(corpus, cfg)
            accs.append(metrics["test"]["accuracy"])
        m, sd, cell = aggregate_runs(accs)
        out[name] = {"mean": m, "std": sd, "cell": cell, "runs": accs}
    return out
