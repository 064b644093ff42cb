"""Per-modality graph encoder.

Layers operate on a :class:`NodeState` that may hold one graph or the
disjoint union of a batch of graphs (``graph_ids`` marks which rows belong to
which graph); pooled readouts then come back as one row per graph. The
encoder pipeline is conv -> self-attention pooling -> conv with a readout
after each conv layer, concatenated jumping-knowledge style.

Edges are directed (src, dst) pairs and messages flow src -> dst, so a node
aggregates over its in-neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import ModalGraph
from .errors import ContractError
from .tensor import Tensor


@dataclass
class ConvParams:
    """Neighborhood-sum graph convolution: W_self . h + W_neigh . sum_N(h) + b."""

    w_self: Tensor  # (d_in, d_out)
    w_neigh: Tensor  # (d_in, d_out)
    bias: Tensor  # (1, d_out)


@dataclass
class LinearParams:
    w: Tensor  # (d_in, d_out)
    b: Tensor  # (1, d_out)


@dataclass
class EncoderParams:
    """Everything one modality encoder owns, including its input normalizer."""

    d_in: int
    d_h: int
    conv1: ConvParams
    conv2: ConvParams | None
    score_conv: ConvParams  # 1-output conv used for self-attention pooling
    norm_min: np.ndarray | None = None  # fitted per-feature minima
    norm_max: np.ndarray | None = None
    attn_gate: LinearParams | None = None  # optional gated-attention readout
    attn_proj: LinearParams | None = None

    @property
    def n_layers(self) -> int:
        return 1 if self.conv2 is None else 2

    @property
    def jk_dim(self) -> int:
        return self.n_layers * self.d_h


@dataclass
class NodeState:
    """Current node embeddings over (a batch of) graphs."""

    h: Tensor  # (N_total, d)
    edges: np.ndarray  # (E, 2) rows of (src, dst) into h
    graph_ids: np.ndarray  # (N_total,) which graph each row belongs to
    n_graphs: int
    active_index: np.ndarray  # (N_total,) original node index within each graph

    def node_counts(self) -> np.ndarray:
        return np.bincount(self.graph_ids, minlength=self.n_graphs)


def state_from_graph(features: np.ndarray, g: ModalGraph) -> NodeState:
    """Wrap one graph's (already normalized) features as a NodeState."""
    n = features.shape[0]
    return NodeState(
        h=Tensor(features),
        edges=np.asarray(g.edges, dtype=np.int64).reshape(-1, 2),
        graph_ids=np.zeros(n, dtype=np.int64),
        n_graphs=1,
        active_index=np.arange(n, dtype=np.int64),
    )


def batch_states(features: list[np.ndarray], graphs: list[ModalGraph]) -> NodeState:
    """Disjoint union of several graphs, node indices offset per graph."""
    if not graphs:
        raise ContractError("cannot batch zero graphs")
    offsets = np.cumsum([0] + [f.shape[0] for f in features])
    edges = []
    gids = []
    active = []
    for i, (f, g) in enumerate(zip(features, graphs)):
        e = np.asarray(g.edges, dtype=np.int64).reshape(-1, 2)
        edges.append(e + offsets[i])
        gids.append(np.full(f.shape[0], i, dtype=np.int64))
        active.append(np.arange(f.shape[0], dtype=np.int64))
    return NodeState(
        h=Tensor(np.concatenate(features, axis=0)),
        edges=np.concatenate(edges, axis=0) if edges else np.zeros((0, 2), np.int64),
        graph_ids=np.concatenate(gids),
        n_graphs=len(graphs),
        active_index=np.concatenate(active),
    )


# ---------------------------------------------------------------------------
# Input normalization
# ---------------------------------------------------------------------------

def fit_normalizer(train_graphs: list[ModalGraph]) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature min/max over the training graphs only."""
    if not train_graphs:
        raise ContractError("fit_normalizer needs at least one graph")
    stacked = np.concatenate([g.node_features for g in train_graphs], axis=0)
    return stacked.min(axis=0), stacked.max(axis=0)


def apply_normalizer(
    features: np.ndarray,
    norm_min: np.ndarray | None,
    norm_max: np.ndarray | None,
    clamp: bool = False,
) -> np.ndarray:
    """Min-max scale features; constant features map to zero.

    Values outside the fitted range are passed through unclamped unless
    ``clamp`` is set.
    """
    if norm_min is None or norm_max is None:
        raise ContractError("normalizer applied before fitting")
    span = norm_max - norm_min
    safe = np.where(span == 0.0, 1.0, span)
    out = (features - norm_min) / safe
    out = np.where(span == 0.0, 0.0, out)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def graph_conv(state: NodeState, params: ConvParams, activation: bool = True) -> NodeState:
    """Neighborhood-sum convolution over the directed edge list."""
    n = state.h.shape[0]
    if state.edges.size:
        src = state.edges[:, 0]
        dst = state.edges[:, 1]
        if src.max() >= n or dst.max() >= n:
            raise ContractError("edge index out of range for current state")
        messages = T.take_rows(state.h, src)
        agg = T.scatter_add_rows(messages, dst, n)
        out = T.matmul(state.h, params.w_self) + T.matmul(agg, params.w_neigh) + params.bias
    else:
        out = T.matmul(state.h, params.w_self) + params.bias
    if activation:
        out = T.relu(out)
    return NodeState(out, state.edges, state.graph_ids, state.n_graphs, state.active_index)


def sagpool_scores(state: NodeState, params: ConvParams) -> Tensor:
    """Raw attention scores: a 1-output graph convolution without activation."""
    return graph_conv(state, params, activation=False).h


def sagpool(state: NodeState, params: ConvParams, ratio: float) -> NodeState:
    """Keep the top ceil(ratio * N) nodes per graph by attention score.

    Ties resolve toward the lower node index. Survivor features are scaled by
    tanh(score); edges are restricted to the induced subgraph. Gradients flow
    only through surviving nodes.
    """
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"pool ratio must be in (0, 1], got {ratio}")
    scores = sagpool_scores(state, params)
    raw = scores.data[:, 0]
    keep_rows: list[np.ndarray] = []
    for gid in range(state.n_graphs):
        rows = np.nonzero(state.graph_ids == gid)[0]
        k = int(np.ceil(ratio * len(rows)))
        order = np.lexsort((state.active_index[rows], -raw[rows]))
        kept = rows[order[:k]]
        kept.sort()
        keep_rows.append(kept)
    kept_all = np.concatenate(keep_rows) if keep_rows else np.zeros(0, np.int64)
    gate = T.tanh(T.take_rows(scores, kept_all))
    new_h = T.take_rows(state.h, kept_all) * gate
    remap = np.full(state.h.shape[0], -1, dtype=np.int64)
    remap[kept_all] = np.arange(len(kept_all))
    if state.edges.size:
        src, dst = state.edges[:, 0], state.edges[:, 1]
        ok = (remap[src] >= 0) & (remap[dst] >= 0)
        new_edges = np.stack([remap[src[ok]], remap[dst[ok]]], axis=1)
    else:
        new_edges = state.edges
    return NodeState(
        new_h,
        new_edges,
        state.graph_ids[kept_all],
        state.n_graphs,
        state.active_index[kept_all],
    )


def mean_pool(state: NodeState) -> Tensor:
    """Arithmetic mean of node embeddings, one row per graph."""
    counts = state.node_counts()
    if (counts == 0).any():
        raise ContractError("mean_pool over a graph with no active nodes")
    sums = T.scatter_add_rows(state.h, state.graph_ids, state.n_graphs)
    return sums * Tensor(1.0 / counts[:, None])


def gated_attention_pool(
    state: NodeState,
    gate: LinearParams,
    proj: LinearParams,
    proj_dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """tanh of the gate-weighted sum of projected node embeddings per graph.

    The gate is sigmoid(linear(h)) with scalar output; the projection is
    relu(linear(h)) with optional dropout.
    """
    if (state.node_counts() == 0).any():
        raise ContractError("attention pool over a graph with no active nodes")
    g = T.sigmoid(T.matmul(state.h, gate.w) + gate.b)
    p = T.relu(T.matmul(state.h, proj.w) + proj.b)
    if proj_dropout > 0.0:
        p = T.dropout(p, proj_dropout, rng, training)
    summed = T.scatter_add_rows(g * p, state.graph_ids, state.n_graphs)
    return T.tanh(summed)


def encode(
    state: NodeState,
    params: EncoderParams,
    readout: str = "mean",
    ratio: float = 0.5,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[Tensor, list[NodeState]]:
    """Run the conv/pool/conv pipeline and return the jumping-knowledge embedding.

    The embedding concatenates the per-layer readouts, one row per graph
    (n_layers * d_h columns). Intermediate states are returned for fusion
    hooks. Features must already be normalized.
    """
    def read(s: NodeState) -> Tensor:
        if readout == "mean":
            return mean_pool(s)
        if readout == "attention":
            if params.attn_gate is None or params.attn_proj is None:
                raise ContractError("attention readout requested but not parameterized")
            return gated_attention_pool(
                s, params.attn_gate, params.attn_proj, rng=rng, training=training
            )
        raise ContractError(f"unknown readout '{readout}'")

    s1 = graph_conv(state, params.conv1)
    readouts = [read(s1)]
    states = [s1]
    if params.conv2 is not None:
        pooled = sagpool(s1, params.score_conv, ratio)
        s2 = graph_conv(pooled, params.conv2)
        readouts.append(read(s2))
        states.extend([pooled, s2])
    emb = readouts[0] if len(readouts) == 1 else T.concat(readouts, axis=1)
    return emb, states


def init_encoder(
    d_in: int, d_h: int, rng: np.random.Generator, n_layers: int = 2, attention_readout: bool = False
) -> EncoderParams:
    """Glorot-uniform initialized encoder parameters."""
    def glorot(n_in, n_out):
        limit = np.sqrt(6.0 / (n_in + n_out))
        return Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)), requires_grad=True)

    def conv(n_in, n_out):
        return ConvParams(
            w_self=glorot(n_in, n_out),
            w_neigh=glorot(n_in, n_out),
            bias=Tensor(np.zeros((1, n_out)), requires_grad=True),
        )

    if n_layers not in (1, 2):
        raise ContractError(f"encoder supports 1 or 2 conv layers, got {n_layers}")
    params = EncoderParams(
        d_in=d_in,
        d_h=d_h,
        conv1=conv(d_in, d_h),
        conv2=conv(d_h, d_h) if n_layers == 2 else None,
        score_conv=conv(d_h, 1),
    )
    if attention_readout:
        params.attn_gate = LinearParams(glorot(d_h, 1), Tensor(np.zeros((1, 1)), requires_grad=True))
        params.attn_proj = LinearParams(glorot(d_h, d_h), Tensor(np.zeros((1, d_h)), requires_grad=True))
    return params
