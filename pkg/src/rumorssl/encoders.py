"""GNN encoders (GCN, GIN, ResGCN), graph readout and the linear classifier head."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import scipy.sparse as sp

from . import numcore as nc
from .graphdata import Batch
from .numcore import DimensionError, Tensor

ENCODER_KINDS = ("gcn", "gin", "resgcn")
READOUTS = ("sum", "mean")


@dataclass
class EncoderConfig:
    kind: str = "gcn"
    layers: int = 2
    hidden_dim: int = 64
    readout: str = "mean"
    layer_concat: bool = False

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.readout not in READOUTS:
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.layers < 1 or self.hidden_dim < 2:
            raise ValueError("need layers >= 1 and hidden_dim >= 2")

    @property
    def embedding_dim(self) -> int:
        """Width of the graph embedding produced by :func:`readout`."""
        return self.hidden_dim * (self.layers if self.layer_concat else 1)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Module:
    """Minimal parameter container; subclasses register tensors and submodules as attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = set(own) - set(state), set(state) - set(own)
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise DimensionError(f"{k}: expected {p.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=np.float64, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = nc.parameter(glorot(rng, d_in, d_out))
        self.bias = nc.parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Linear, ReLU, Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.lin1 = Linear(d_in, d_hidden, rng)
        self.lin2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(nc.relu(self.lin1(x)))


# -------------------------------------------------------------- adjacency


@dataclass
class NormalizedAdjacency:
    """D^-1/2 (A + I) D^-1/2 as coordinate triples."""

    rows: np.ndarray
    cols: np.ndarray
    coef: np.ndarray
    n: int

    @property
    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.coef, (self.rows, self.cols)), shape=(self.n, self.n))


def normalize_adjacency(batch: Batch) -> NormalizedAdjacency:
    n = batch.n_nodes
    loops = np.arange(n)
    rows = np.concatenate([batch.edges[0], loops])
    cols = np.concatenate([batch.edges[1], loops])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return NormalizedAdjacency(rows, cols, inv_sqrt[rows] * inv_sqrt[cols], n)


def _gcn_operator(batch: Batch) -> sp.csr_matrix:
    if "gcn" not in batch.cache:
        batch.cache["gcn"] = normalize_adjacency(batch).matrix
    return batch.cache["gcn"]


def _gin_operator(batch: Batch, eps: float) -> sp.csr_matrix:
    key = ("gin", eps)
    if key not in batch.cache:
        batch.cache[key] = (batch.adjacency + (1.0 + eps) * sp.identity(batch.n_nodes, format="csr")).tocsr()
    return batch.cache[key]


# ---------------------------------------------------------------- encoders


class Encoder(Module):
    """Shared interface: ``forward`` returns the per-layer node embeddings."""

    config: EncoderConfig

    def forward(self, batch: Batch, x: Tensor | None = None) -> list[Tensor]:
        raise NotImplementedError

    def node_embeddings(self, layers: list[Tensor]) -> Tensor:
        return nc.concat(layers, axis=1) if self.config.layer_concat else layers[-1]

    def embed(self, batch: Batch, x: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Node embeddings and graph embeddings for ``batch``."""
        layers = self.forward(batch, x)
        return self.node_embeddings(layers), readout(layers, batch, self.config)


class GCNEncoder(Encoder):
    def __init__(self, config: EncoderConfig, in_dim: int, rng: np.random.Generator):
        self.config = config
        dims = [in_dim] + [config.hidden_dim] * config.layers
        self.convs = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, batch, x=None):
        h = nc.tensor(batch.x) if x is None else x
        _check_width(h, self.convs[0])
        adj = _gcn_operator(batch)
        out = []
        for i, conv in enumerate(self.convs):
            h = nc.spmm(adj, h @ conv.weight) + conv.bias
            if i < len(self.convs) - 1:
                h = nc.relu(h)
            out.append(h)
        return out


class GINEncoder(Encoder):
    """Sum aggregation with a two-layer MLP per layer; epsilon is fixed, not learned."""

    def __init__(self, config: EncoderConfig, in_dim: int, rng: np.random.Generator, eps: float = 0.0):
        self.config = config
        self.eps = eps
        dims = [in_dim] + [config.hidden_dim] * config.layers
        self.mlps = [MLP(a, b, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, batch, x=None):
        h = nc.tensor(batch.x) if x is None else x
        _check_width(h, self.mlps[0].lin1)
        agg = _gin_operator(batch, self.eps)
        out = []
        for i, mlp in enumerate(self.mlps):
            h = mlp(nc.spmm(agg, h))
            if i < len(self.mlps) - 1:
                h = nc.relu(h)
            out.append(h)
        return out


class ResGCNEncoder(Encoder):
    """GCN layers with an identity skip wherever input and output widths agree."""

    def __init__(self, config: EncoderConfig, in_dim: int, rng: np.random.Generator):
        self.config = config
        dims = [in_dim] + [config.hidden_dim] * config.layers
        self.convs = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, batch, x=None):
        h = nc.tensor(batch.x) if x is None else x
        _check_width(h, self.convs[0])
        adj = _gcn_operator(batch)
        out = []
        for i, conv in enumerate(self.convs):
            z = nc.spmm(adj, h @ conv.weight) + conv.bias
            if i < len(self.convs) - 1:
                z = nc.relu(z)
            h = z + h if h.shape == z.shape else z
            out.append(h)
        return out


def _check_width(h: Tensor, first: Linear) -> None:
    if h.ndim != 2 or h.shape[1] != first.weight.shape[0]:
        raise DimensionError(f"node features {h.shape} do not fit first layer {first.weight.shape}")


def build_encoder(config: EncoderConfig, in_dim: int, rng: np.random.Generator) -> Encoder:
    cls = {"gcn": GCNEncoder, "gin": GINEncoder, "resgcn": ResGCNEncoder}[config.kind]
    return cls(config, in_dim, rng)


def readout(layers: list[Tensor] | Tensor, batch: Batch, config: EncoderConfig) -> Tensor:
    """Per-graph sum or mean pooling; per-layer pools are concatenated when ``layer_concat``."""
    if isinstance(layers, Tensor):
        layers = [layers]
    pool = batch.sum_pool if config.readout == "sum" else batch.mean_pool
    if config.layer_concat:
        return nc.concat([nc.spmm(pool, h) for h in layers], axis=1)
    return nc.spmm(pool, layers[-1])


class ClassifierHead(Linear):
    def __init__(self, d_in: int, n_classes: int, rng: np.random.Generator):
        if n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        super().__init__(d_in, n_classes, rng)


def classify_logits(graph_embeddings: Tensor, head: ClassifierHead) -> Tensor:
    return head(graph_embeddings)


# ------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"RSSLCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    """Header, shape table, then little-endian float64 payloads in table order."""
    names = list(state)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            raw = name.encode("utf-8")
            shape = np.shape(state[name])
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack(f"<B{len(shape)}Q", len(shape), *shape))
        for name in names:
            fh.write(np.ascontiguousarray(state[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    table = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        table.append((name, shape))
    state = {}
    for name, shape in table:
        n = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return state
