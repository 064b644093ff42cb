"""Shared test utilities: finite-difference oracles and fixture builders."""

from __future__ import annotations

import numpy as np

from graphfusion import tensor as T
from graphfusion.data import Endpoint, ModalGraph, Modality, PairedSample, RaterLabel
from graphfusion.tensor import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, n_coords: int | None = None, rng=None):
    """Central finite differences of scalar f at x.

    Returns (coords, grads): either every coordinate or a random subset.
    """
    flat = x.reshape(-1)
    if n_coords is None or n_coords >= flat.size:
        coords = np.arange(flat.size)
    else:
        coords = rng.choice(flat.size, size=n_coords, replace=False)
    grads = np.empty(len(coords))
    for j, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        up = f()
        flat[c] = orig - h
        down = f()
        flat[c] = orig
        grads[j] = (up - down) / (2 * h)
    return coords, grads


def check_grad(build_loss, params: list[Tensor], rtol: float = 1e-4,
               h: float = 1e-5, n_coords: int = 6, rng=None) -> float:
    """Compare tape gradients of build_loss() against central differences.

    ``build_loss`` runs a fresh forward pass and returns the scalar loss
    tensor. Returns the worst relative error seen.
    """
    rng = rng or np.random.default_rng(0)
    with T.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = {
        id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for p in params
    }
    worst = 0.0
    for p in params:
        coords, numeric = numeric_grad(
            lambda: build_loss().item(), p.data, h=h, n_coords=n_coords, rng=rng
        )
        got = analytic[id(p)].reshape(-1)[coords]
        scale = np.maximum(np.abs(numeric), np.maximum(np.abs(got), 1e-6))
        rel = np.abs(got - numeric) / scale
        worst = max(worst, float(rel.max()))
        assert rel.max() < rtol, (
            f"gradient mismatch: analytic {got}, numeric {numeric}, rel {rel.max():.2e}"
        )
    return worst


def random_graph(rng, n_nodes: int, d: int, k: int = 2, modality=Modality.A) -> ModalGraph:
    """Small valid ModalGraph with uniform out-degree k."""
    feats = rng.normal(size=(n_nodes, d))
    cents = rng.uniform(0, 100, size=(n_nodes, 2))
    edges = []
    for v in range(n_nodes):
        others = [u for u in range(n_nodes) if u != v]
        picks = rng.choice(len(others), size=k, replace=False)
        edges.extend((v, others[p]) for p in picks)
    return ModalGraph(modality, feats, np.array(edges, dtype=np.int64).reshape(-1, 2), cents, k=k)


def permute_graph(g: ModalGraph, perm: np.ndarray) -> ModalGraph:
    """Relabel nodes: new index perm[v] holds old node v."""
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    new_feats = g.node_features[inv]
    new_cents = g.node_centroids[inv]
    new_edges = perm[np.asarray(g.edges).reshape(-1, 2)]
    order = np.lexsort((new_edges[:, 1], new_edges[:, 0]))
    return ModalGraph(g.modality, new_feats, new_edges[order], new_cents, k=g.k)


def make_toy_samples(
    rng,
    n_patients: int,
    endpoint: Endpoint = Endpoint.FIBROSIS,
    n_classes: int = 5,
    nodes_a: int = 10,
    nodes_b: int = 8,
    d_a: int = 6,
    d_b: int = 5,
    raters: tuple[tuple[str, float], ...] = (("r1", 0.0),),
    noise: float = 0.0,
    separable: bool = True,
) -> list[PairedSample]:
    """Graph pairs whose mean node features encode a planted ordinal signal.

    Column 0 of modality A carries u_a and column 0 of modality B carries
    u_b; the label discretizes (u_a + u_b) / 2 into equal bins. With
    ``separable`` the signal is noise-free in the features.
    """
    samples = []
    for i in range(n_patients):
        u_a = rng.random()
        u_b = rng.random()
        u = (u_a + u_b) / 2
        g_a = random_graph(rng, nodes_a, d_a, k=2, modality=Modality.A)
        g_b = random_graph(rng, nodes_b, d_b, k=2, modality=Modality.B)
        jitter = 0.0 if separable else 0.1
        g_a.node_features[:, 0] = 3.0 * u_a + jitter * rng.normal(size=nodes_a)
        g_b.node_features[:, 0] = 3.0 * u_b + jitter * rng.normal(size=nodes_b)
        true = min(int(u * n_classes), n_classes - 1)
        labels = []
        for rid, bias in raters:
            shifted = u + bias / n_classes + (rng.normal(0, noise / n_classes) if noise else 0.0)
            score = min(max(int(shifted * n_classes), 0), n_classes - 1)
            labels.append(RaterLabel(rid, endpoint, score))
        if not labels:
            labels = [RaterLabel("r1", endpoint, true)]
        samples.append(PairedSample(f"p{i:03d}", 0, g_a, g_b, labels))
    return samples
