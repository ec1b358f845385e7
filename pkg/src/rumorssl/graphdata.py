"""Propagation-tree corpora: parsing, featurization, batching, splits, synthesis."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .numcore import ContractError, DimensionError

BINARY_LABELS = ("non-rumor", "rumor")
FOUR_CLASS_LABELS = ("non-rumor", "false", "true", "unverified")
DEFAULT_DX = 128

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class CorpusError(ValueError):
    """A corpus record is structurally invalid."""

    def __init__(self, message: str, claim_id: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if claim_id is not None:
            where.append(f"claim {claim_id!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.reason = message
        self.claim_id = claim_id
        self.line = line


class StratificationError(ValueError):
    pass


@dataclass(frozen=True)
class Post:
    id: str
    parent: str | None
    text: str


@dataclass(frozen=True)
class Claim:
    claim_id: str
    label: str | None
    posts: tuple[Post, ...]


@dataclass
class PropagationGraph:
    """One claim's reply tree.

    ``parents[i]`` is the index of node ``i``'s parent, ``-1`` for the root.
    The undirected edge list is derived from it.
    """

    node_features: np.ndarray
    parents: np.ndarray
    root: int
    claim_id: str

    @property
    def n_nodes(self) -> int:
        return len(self.parents)

    @property
    def tree_edges(self) -> np.ndarray:
        child = np.flatnonzero(self.parents >= 0)
        return np.stack([self.parents[child], child]).astype(np.int64)

    @property
    def edges(self) -> np.ndarray:
        """Symmetrized edge index of shape (2, 2*(|V|-1))."""
        t = self.tree_edges
        return np.concatenate([t, t[::-1]], axis=1)

    def validate(self) -> None:
        n = self.n_nodes
        if self.node_features.shape[0] != n:
            raise CorpusError("feature rows do not match node count", self.claim_id)
        roots = np.flatnonzero(self.parents < 0)
        if len(roots) != 1 or roots[0] != self.root:
            raise CorpusError("tree must have exactly one root", self.claim_id)
        depth_known = np.zeros(n, dtype=bool)
        depth_known[self.root] = True
        for start in range(n):
            path: list[int] = []
            on_path: set[int] = set()
            v = start
            while not depth_known[v]:
                path.append(v)
                on_path.add(v)
                v = int(self.parents[v])
                if v < 0 or v >= n or v in on_path:
                    raise CorpusError("reply edges do not form a tree", self.claim_id)
            depth_known[path] = True


@dataclass
class Corpus:
    labeled: list[tuple[Claim, PropagationGraph]]
    unlabeled: list[tuple[Claim, PropagationGraph]]
    label_set: tuple[str, ...]
    d_x: int

    def label_index(self, claim: Claim) -> int:
        return self.label_set.index(claim.label)

    def labels(self, items: Sequence[tuple[Claim, PropagationGraph]] | None = None) -> np.ndarray:
        items = self.labeled if items is None else items
        return np.array([self.label_index(c) for c, _ in items], dtype=np.int64)


@dataclass
class Batch:
    """Several graphs stacked block-diagonally.

    Node ``i`` belongs to graph ``graph_id[i]``; edges carry node offsets.
    """

    x: np.ndarray
    edges: np.ndarray
    graph_id: np.ndarray
    roots: np.ndarray
    n_graphs: int
    labels: np.ndarray | None = None
    claim_ids: tuple[str, ...] = ()
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Binary symmetric adjacency without self-loops."""
        n = self.n_nodes
        data = np.ones(self.edges.shape[1])
        return sp.csr_matrix((data, (self.edges[0], self.edges[1])), shape=(n, n))

    @cached_property
    def counts(self) -> np.ndarray:
        return np.bincount(self.graph_id, minlength=self.n_graphs)

    @cached_property
    def sum_pool(self) -> sp.csr_matrix:
        n = self.n_nodes
        return sp.csr_matrix((np.ones(n), (self.graph_id, np.arange(n))), shape=(self.n_graphs, n))

    @cached_property
    def mean_pool(self) -> sp.csr_matrix:
        n = self.n_nodes
        w = 1.0 / self.counts[self.graph_id]
        return sp.csr_matrix((w, (self.graph_id, np.arange(n))), shape=(self.n_graphs, n))


# ----------------------------------------------------------------- featurizer


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def featurize_text(text: str, d_x: int = DEFAULT_DX) -> np.ndarray:
    """Hashed bag-of-words: FNV-1a buckets of lowercased whitespace tokens, L2-normalized."""
    if d_x < 2:
        raise ContractError("d_x must be at least 2")
    vec = np.zeros(d_x)
    for tok in text.lower().split():
        vec[fnv1a_64(tok.encode("utf-8")) % d_x] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


# -------------------------------------------------------------------- parsing


def claim_to_graph(claim: Claim, d_x: int = DEFAULT_DX) -> PropagationGraph:
    index: dict[str, int] = {}
    for i, post in enumerate(claim.posts):
        if post.id in index:
            raise CorpusError(f"duplicate post id {post.id!r}", claim.claim_id)
        index[post.id] = i
    if not claim.posts:
        raise CorpusError("claim has no posts", claim.claim_id)
    parents = np.empty(len(claim.posts), dtype=np.int64)
    for i, post in enumerate(claim.posts):
        if post.parent is None:
            parents[i] = -1
        elif post.parent not in index:
            raise CorpusError(f"dangling parent {post.parent!r} of post {post.id!r}", claim.claim_id)
        else:
            parents[i] = index[post.parent]
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1:
        raise CorpusError(f"expected exactly one root post, found {len(roots)}", claim.claim_id)
    x = np.stack([featurize_text(p.text, d_x) for p in claim.posts])
    g = PropagationGraph(x, parents, int(roots[0]), claim.claim_id)
    g.validate()
    return g


def _claim_from_record(rec: dict, line: int) -> Claim:
    try:
        cid = rec["claim_id"]
        posts = tuple(Post(str(p["id"]), None if p["parent"] is None else str(p["parent"]), str(p["text"]))
                      for p in rec["posts"])
        label = rec.get("label")
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"malformed record ({exc})", line=line) from exc
    return Claim(str(cid), label, posts)


def parse_corpus(path: str | Path, label_set: Sequence[str] = BINARY_LABELS, d_x: int = DEFAULT_DX) -> Corpus:
    """Read a JSON Lines corpus; claims with ``"label": null`` go to the unlabeled pool."""
    label_set = tuple(label_set)
    labeled, unlabeled = [], []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed JSON ({exc.msg})", line=lineno) from exc
            if not isinstance(rec, dict):
                raise CorpusError("record is not an object", line=lineno)
            claim = _claim_from_record(rec, lineno)
            if claim.claim_id in seen:
                raise CorpusError("duplicate claim id", claim.claim_id, lineno)
            seen.add(claim.claim_id)
            if claim.label is not None and claim.label not in label_set:
                raise CorpusError(f"unknown label {claim.label!r}", claim.claim_id, lineno)
            try:
                graph = claim_to_graph(claim, d_x)
            except CorpusError as exc:
                raise CorpusError(exc.reason, claim.claim_id, lineno) from exc
            (unlabeled if claim.label is None else labeled).append((claim, graph))
    return Corpus(labeled, unlabeled, label_set, d_x)


def claim_record(claim: Claim) -> dict:
    return {
        "claim_id": claim.claim_id,
        "label": claim.label,
        "posts": [{"id": p.id, "parent": p.parent, "text": p.text} for p in claim.posts],
    }


def serialize_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the canonical JSON Lines form: labeled claims first, then unlabeled."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for claim, _ in [*corpus.labeled, *corpus.unlabeled]:
            fh.write(json.dumps(claim_record(claim), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def content_hash(path: str | Path) -> str:
    """Git blob hash (sha1 over ``blob <len>\\0`` + bytes)."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def summarize_corpus(corpus: Corpus) -> dict:
    """Counts in the layout of a dataset statistics table; posts include the source post."""
    per_class = {lab: 0 for lab in corpus.label_set}
    for claim, _ in corpus.labeled:
        per_class[claim.label] += 1
    sizes = [g.n_nodes for _, g in corpus.labeled] + [g.n_nodes for _, g in corpus.unlabeled]
    return {
        "claims": len(corpus.labeled),
        "per_class": per_class,
        "unlabeled": len(corpus.unlabeled),
        "avg_posts": float(np.mean(sizes)) if sizes else 0.0,
        "avg_posts_labeled": float(np.mean(sizes[: len(corpus.labeled)])) if corpus.labeled else 0.0,
        "avg_posts_unlabeled": float(np.mean(sizes[len(corpus.labeled):])) if corpus.unlabeled else 0.0,
    }


# ------------------------------------------------------------------- batching


def make_batch(
    graphs: Sequence[PropagationGraph],
    labels: Sequence[int] | np.ndarray | None = None,
) -> Batch:
    if not graphs:
        raise ContractError("cannot batch zero graphs")
    d = graphs[0].node_features.shape[1]
    for g in graphs:
        if g.node_features.shape[1] != d:
            raise DimensionError(f"mixed feature widths {d} and {g.node_features.shape[1]}")
    sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    x = np.concatenate([g.node_features for g in graphs], axis=0)
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets)], axis=1)
    graph_id = np.repeat(np.arange(len(graphs)), sizes)
    roots = np.array([g.root for g in graphs], dtype=np.int64) + offsets
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    if lab is not None and lab.shape != (len(graphs),):
        raise DimensionError(f"{len(lab)} labels for {len(graphs)} graphs")
    return Batch(x, edges.astype(np.int64), graph_id, roots, len(graphs), lab,
                 tuple(g.claim_id for g in graphs), offsets)


def batch_items(items: Sequence[tuple[Claim, PropagationGraph]], corpus: Corpus | None = None) -> Batch:
    labels = None
    if corpus is not None and items and items[0][0].label is not None:
        labels = corpus.labels(items)
    return make_batch([g for _, g in items], labels)


# --------------------------------------------------------------------- splits


def split_corpus(
    corpus: Corpus,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list, list, list]:
    """Stratified train/val/test split of the labeled pool."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ContractError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    labels = corpus.labels()
    parts: list[list[int]] = [[], [], []]
    for c in range(len(corpus.label_set)):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            continue
        members = rng.permutation(members)
        n_val = int(np.floor(len(members) * ratios[1] + 0.5))
        n_test = int(np.floor(len(members) * ratios[2] + 0.5))
        n_train = len(members) - n_val - n_test
        for n, r in zip((n_train, n_val, n_test), ratios):
            if r > 0 and n < 1:
                raise StratificationError(
                    f"class {corpus.label_set[c]!r} has {len(members)} claims, too few to stratify {ratios}")
        parts[0].extend(members[:n_train])
        parts[1].extend(members[n_train:n_train + n_val])
        parts[2].extend(members[n_train + n_val:])
    return tuple([corpus.labeled[i] for i in sorted(p)] for p in parts)  # type: ignore[return-value]


def stratified_sample(
    items: Sequence[tuple[Claim, PropagationGraph]],
    labels: np.ndarray,
    k: int,
    n_classes: int,
    seed: int,
) -> list:
    """Draw ``k`` items with class counts as even as the pool allows."""
    if k < n_classes:
        raise StratificationError(f"k={k} is smaller than the class count {n_classes}")
    if k > len(items):
        raise StratificationError(f"k={k} exceeds the pool of {len(items)}")
    rng = np.random.default_rng(seed)
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(n_classes)]
    if any(not p for p in pools):
        raise StratificationError("a class is absent from the pool")
    quota = [k // n_classes + (1 if c < k % n_classes else 0) for c in range(n_classes)]
    # shift quota away from classes that cannot fill it
    for c in range(n_classes):
        extra = quota[c] - len(pools[c])
        if extra > 0:
            quota[c] = len(pools[c])
            for d in range(n_classes):
                room = len(pools[d]) - quota[d]
                take_n = min(room, extra)
                quota[d] += take_n
                extra -= take_n
    chosen = [i for c in range(n_classes) for i in pools[c][: quota[c]]]
    return [items[i] for i in sorted(chosen)]


# ------------------------------------------------------------------ synthesis


def _tree_parents(n: int, kind: str, bias: float, rng: np.random.Generator) -> list[int]:
    parents = [-1]
    for i in range(1, n):
        if rng.random() < bias:
            parents.append(i - 1 if kind == "rumor" else 0)
        else:
            parents.append(int(rng.integers(0, i)))
    return parents


def generate_synthetic_corpus(
    n_labeled: int,
    n_unlabeled: int,
    vocab_size: int = 2000,
    avg_posts: float = 12.0,
    class_separation: float = 0.6,
    seed: int = 0,
    d_x: int = DEFAULT_DX,
    words_per_post: float = 6.0,
    n_topics: int = 20,
    topic_weight: float = 0.25,
) -> Corpus:
    """Desk-scale two-class corpus.

    Rumor claims grow chain-biased trees and draw words from a multinomial
    shifted toward a claim-coherent "rumor" word set; non-rumor claims grow
    star-biased trees over the baseline multinomial.  Every claim also
    carries a random event topic, shared by its posts and unrelated to the
    label; ``topic_weight`` is the word mass it takes.  ``class_separation`` scales both the vocabulary shift and the
    shape bias; at 0 the two recipes coincide.  Unlabeled claims mix both
    recipes 50/50.
    """
    if avg_posts < 2:
        raise ContractError("avg_posts must be at least 2")
    if not 0.0 <= class_separation <= 1.0:
        raise ContractError("class_separation must lie in [0, 1]")
    if not 0.0 <= topic_weight <= 1.0:
        raise ContractError("topic_weight must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    words = np.array([f"w{k}" for k in range(vocab_size)])
    base = 1.0 / (np.arange(vocab_size) + 20.0)
    base /= base.sum()
    perm = rng.permutation(vocab_size)
    span = max(vocab_size // 40, 2)
    rumor_words = perm[:span]
    topic_words = [perm[span * (t + 1): span * (t + 2)] for t in range(n_topics)]
    shift = 0.35 * class_separation
    shape_bias = 0.6 * class_separation

    def word_dist(kind: str, topic: int) -> np.ndarray:
        p = (1.0 - topic_weight) * base
        tw = topic_words[topic] if len(topic_words[topic]) else perm[:1]
        p[tw] += topic_weight / len(tw)
        if kind == "rumor" and shift > 0:
            p = (1.0 - shift) * p
            p[rumor_words] += shift / len(rumor_words)
        return p / p.sum()

    def make_claim(cid: str, kind: str, label: str | None) -> Claim:
        n = 1 + int(rng.poisson(avg_posts - 1.0))
        parents = _tree_parents(n, kind, shape_bias, rng)
        dist = word_dist(kind, int(rng.integers(n_topics)))
        posts = []
        for i in range(n):
            m = 1 + int(rng.poisson(words_per_post - 1.0))
            text = " ".join(words[rng.choice(vocab_size, size=m, p=dist)])
            posts.append(Post(f"{cid}-{i}", None if parents[i] < 0 else f"{cid}-{parents[i]}", text))
        return Claim(cid, label, tuple(posts))

    kinds = np.array(["rumor"] * (n_labeled // 2) + ["non-rumor"] * (n_labeled - n_labeled // 2))
    kinds = rng.permutation(kinds)
    labeled = []
    for i, kind in enumerate(kinds):
        c = make_claim(f"L{i:06d}", str(kind), str(kind))
        labeled.append((c, claim_to_graph(c, d_x)))
    unlabeled = []
    for i in range(n_unlabeled):
        kind = "rumor" if rng.random() < 0.5 else "non-rumor"
        c = make_claim(f"U{i:06d}", kind, None)
        unlabeled.append((c, claim_to_graph(c, d_x)))
    return Corpus(labeled, unlabeled, BINARY_LABELS, d_x)


def mean_feature_probe(corpus: Corpus, seed: int = 0, train_frac: float = 0.7, ridge: float = 1.0) -> float:
    """Held-out accuracy of a ridge-regression linear probe on mean node features."""
    x = np.stack([g.node_features.mean(axis=0) for _, g in corpus.labeled])
    y = corpus.labels()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_tr = int(train_frac * len(y))
    tr, te = order[:n_tr], order[n_tr:]
    xa = np.hstack([x, np.ones((len(y), 1))])
    t = np.where(y == 1, 1.0, -1.0)
    a = xa[tr].T @ xa[tr] + ridge * np.eye(xa.shape[1])
    w = np.linalg.solve(a, xa[tr].T @ t[tr])
    pred = (xa[te] @ w > 0).astype(np.int64)
    return float(np.mean(pred == y[te]))


def iter_minibatches(n: int, size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]
