"""Strategies for combining the two modality encoders.

Late strategies combine pooled graph embeddings: concatenation, projected
addition, projected Hadamard product, and a gated Kronecker product that
keeps unimodal features via appended ones. Mid strategies exchange a global
summary between the two graphs at every message-passing iteration, either the
plain node mean (GIMP) or a gated-attention summary (GAIMP), injected into
every node of the opposite graph through a ReLU projection.

All functions operate on batches: embedding tensors carry one row per sample
and node states may be disjoint unions. Nothing assumes any correspondence
between the node sets of the two graphs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .encoder import LinearParams, NodeState
from .errors import ContractError
from .tensor import Tensor


class FusionStrategy(Enum):
    LATE_CONCAT = "late_concat"
    LATE_ADD = "late_add"
    LATE_HADAMARD = "late_hadamard"
    KRONECKER_GATED = "kronecker_gated"
    GIMP = "gimp"
    GAIMP = "gaimp"


MID_STRATEGIES = (FusionStrategy.GIMP, FusionStrategy.GAIMP)


@dataclass
class FusionParams:
    """Parameter blocks; only the ones a strategy uses are populated."""

    strategy: FusionStrategy
    w_a: Tensor | None = None  # (d_a, d) projection for add/hadamard/kronecker
    w_b: Tensor | None = None  # (d_b, d)
    gate_a: Tensor | None = None  # (d_a + d_b, d) kronecker gating on [h, t]
    gate_b: Tensor | None = None
    bilinear_a: tuple[Tensor, Tensor] | None = None  # rank-1 bilinear gate factors
    bilinear_b: tuple[Tensor, Tensor] | None = None
    cross_ba: Tensor | None = None  # (d_b, d_a) summary-of-B -> nodes-of-A
    cross_ab: Tensor | None = None  # (d_a, d_b)
    attn_gate_a: LinearParams | None = None  # GAIMP attention/projection nets
    attn_proj_a: LinearParams | None = None
    attn_gate_b: LinearParams | None = None
    attn_proj_b: LinearParams | None = None
    inject_dropout: float = 0.0  # dropout on the cross-injection projection
    proj_dropout: float = 0.0  # dropout inside the GAIMP projection nets


# ---------------------------------------------------------------------------
# Late fusion combiners
# ---------------------------------------------------------------------------

def fuse_concat(h: Tensor, t: Tensor) -> Tensor:
    """[h || t] per row."""
    return T.concat([h, t], axis=1)


def fuse_add(h: Tensor, t: Tensor, w_a: Tensor, w_b: Tensor) -> Tensor:
    """Project both embeddings into a shared space and add."""
    return T.matmul(h, w_a) + T.matmul(t, w_b)


def fuse_hadamard(h: Tensor, t: Tensor, w_a: Tensor, w_b: Tensor) -> Tensor:
    """Elementwise product of the projected embeddings."""
    return T.matmul(h, w_a) * T.matmul(t, w_b)


def _append_ones(x: Tensor) -> Tensor:
    ones = Tensor(np.ones((x.shape[0], 1)))
    return T.concat([x, ones], axis=1)


def _face_split(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise Kronecker product: out[i] = a[i] (x) b[i], flattened."""
    da, db = a.shape[1], b.shape[1]
    rep = np.repeat(np.arange(da), db)
    tile = np.tile(np.arange(db), da)
    a_exp = T.transpose(T.take_rows(T.transpose(a), rep))
    b_exp = T.transpose(T.take_rows(T.transpose(b), tile))
    return a_exp * b_exp


def fuse_kronecker_gated(h: Tensor, t: Tensor, params: FusionParams) -> Tensor:
    """Gated ReLU projections fused by a Kronecker product with appended ones.

    Gates are sigmoids of a linear map on [h, t], or of a rank-1 bilinear
    score of (h, t) when bilinear factors are configured. Output rows have
    (d_a + 1) * (d_b + 1) entries; the slices against the appended ones equal
    the gated unimodal vectors themselves.
    """
    if params.bilinear_a is not None:
        ua, va = params.bilinear_a
        ub, vb = params.bilinear_b
        alpha_a = T.sigmoid(T.matmul(h, ua) * T.matmul(t, va))
        alpha_b = T.sigmoid(T.matmul(h, ub) * T.matmul(t, vb))
    else:
        joint = T.concat([h, t], axis=1)
        alpha_a = T.sigmoid(T.matmul(joint, params.gate_a))
        alpha_b = T.sigmoid(T.matmul(joint, params.gate_b))
    h_gated = alpha_a * T.relu(T.matmul(h, params.w_a))
    t_gated = alpha_b * T.relu(T.matmul(t, params.w_b))
    return _face_split(_append_ones(h_gated), _append_ones(t_gated))


# ---------------------------------------------------------------------------
# Mid fusion inter-message steps
# ---------------------------------------------------------------------------

def _inject(state: NodeState, summary: Tensor, cross: Tensor,
            dropout: float, rng, training: bool) -> NodeState:
    """Add the ReLU-projected opposite-graph summary to every node."""
    proj = T.relu(T.matmul(summary, cross))
    if dropout > 0.0:
        proj = T.dropout(proj, dropout, rng, training)
    per_node = T.take_rows(proj, state.graph_ids)
    return NodeState(
        state.h + per_node, state.edges, state.graph_ids, state.n_graphs, state.active_index
    )


def gimp_step(
    state_a: NodeState,
    state_b: NodeState,
    cross_ba: Tensor,
    cross_ab: Tensor,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[NodeState, NodeState]:
    """Exchange mean-node summaries between the two graphs.

    Both summaries are taken from the pre-update states, so the exchange is
    simultaneous and symmetric in the modalities.
    """
    from .encoder import mean_pool

    if (state_a.node_counts() == 0).any() or (state_b.node_counts() == 0).any():
        raise ContractError("inter-message step on an empty graph")
    summary_a = mean_pool(state_a)
    summary_b = mean_pool(state_b)
    new_a = _inject(state_a, summary_b, cross_ba, dropout, rng, training)
    new_b = _inject(state_b, summary_a, cross_ab, dropout, rng, training)
    return new_a, new_b


def gaimp_step(
    state_a: NodeState,
    state_b: NodeState,
    params: FusionParams,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[NodeState, NodeState]:
    """Exchange gated-attention summaries between the two graphs."""
    from .encoder import gated_attention_pool

    if (state_a.node_counts() == 0).any() or (state_b.node_counts() == 0).any():
        raise ContractError("inter-message step on an empty graph")
    summary_a = gated_attention_pool(
        state_a, params.attn_gate_a, params.attn_proj_a,
        proj_dropout=params.proj_dropout, rng=rng, training=training,
    )
    summary_b = gated_attention_pool(
        state_b, params.attn_gate_b, params.attn_proj_b,
        proj_dropout=params.proj_dropout, rng=rng, training=training,
    )
    new_a = _inject(state_a, summary_b, params.cross_ba, 0.0, rng, training)
    new_b = _inject(state_b, summary_a, params.cross_ab, 0.0, rng, training)
    return new_a, new_b


def inter_step(
    state_a: NodeState,
    state_b: NodeState,
    params: FusionParams,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[NodeState, NodeState]:
    if params.strategy is FusionStrategy.GIMP:
        return gimp_step(
            state_a, state_b, params.cross_ba, params.cross_ab,
            dropout=params.inject_dropout, rng=rng, training=training,
        )
    if params.strategy is FusionStrategy.GAIMP:
        return gaimp_step(state_a, state_b, params, rng=rng, training=training)
    raise ContractError(f"{params.strategy} is not a mid-fusion strategy")


def init_fusion(
    strategy: FusionStrategy,
    d_a: int,
    d_b: int,
    d_out: int,
    rng: np.random.Generator,
    bilinear_gate: bool = False,
    inject_dropout: float = 0.0,
    proj_dropout: float = 0.0,
) -> FusionParams:
    """Initialize the parameter blocks a strategy needs.

    For late strategies d_a/d_b are embedding dims and d_out the fused dim;
    for mid strategies d_a/d_b are the per-node hidden dims.
    """
    def glorot(n_in, n_out):
        limit = np.sqrt(6.0 / (n_in + n_out))
        return Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)), requires_grad=True)

    p = FusionParams(strategy=strategy, inject_dropout=inject_dropout, proj_dropout=proj_dropout)
    if strategy in (FusionStrategy.LATE_ADD, FusionStrategy.LATE_HADAMARD):
        p.w_a = glorot(d_a, d_out)
        p.w_b = glorot(d_b, d_out)
    elif strategy is FusionStrategy.KRONECKER_GATED:
        p.w_a = glorot(d_a, d_a)
        p.w_b = glorot(d_b, d_b)
        if bilinear_gate:
            p.bilinear_a = (glorot(d_a, d_a), glorot(d_b, d_a))
            p.bilinear_b = (glorot(d_a, d_b), glorot(d_b, d_b))
        else:
            p.gate_a = glorot(d_a + d_b, d_a)
            p.gate_b = glorot(d_a + d_b, d_b)
    elif strategy in MID_STRATEGIES:
        p.cross_ba = glorot(d_b, d_a)
        p.cross_ab = glorot(d_a, d_b)
        if strategy is FusionStrategy.GAIMP:
            zeros = lambda n: Tensor(np.zeros((1, n)), requires_grad=True)
            p.attn_gate_a = LinearParams(glorot(d_a, 1), zeros(1))
            p.attn_proj_a = LinearParams(glorot(d_a, d_a), zeros(d_a))
            p.attn_gate_b = LinearParams(glorot(d_b, 1), zeros(1))
            p.attn_proj_b = LinearParams(glorot(d_b, d_b), zeros(d_b))
    return p


def fused_dim(strategy: FusionStrategy, d_a: int, d_b: int, d_out: int) -> int:
    """Width of the fused vector entering the feed-forward head."""
    if strategy is FusionStrategy.LATE_CONCAT or strategy in MID_STRATEGIES:
        return d_a + d_b
    if strategy in (FusionStrategy.LATE_ADD, FusionStrategy.LATE_HADAMARD):
        return d_out
    if strategy is FusionStrategy.KRONECKER_GATED:
        return (d_a + 1) * (d_b + 1)
    raise ContractError(f"unknown strategy {strategy}")
