"""Heatmap-to-graph pipeline: sampling, BIRCH, features, kNN edges."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphfusion.birch import birch_cluster
from graphfusion.data import Modality
from graphfusion.errors import ContractError, EmptyTissueError, ParseError
from graphfusion.graph_build import (
    GraphBuildConfig,
    Heatmap,
    build_graph,
    clustering_features,
    extract_node_features,
    knn_edges,
    read_heatmap,
    sample_pixels,
    write_heatmap,
)


def make_heatmap(rng, h=24, w=24, c=5, mask=None):
    logits = rng.normal(size=(h, w, c))
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    return Heatmap(Modality.B, logits, mask)


# ---------------------------------------------------------------------------
# Pixel sampling
# ---------------------------------------------------------------------------

def test_sample_pixels_all_masked_raises():
    rng = np.random.default_rng(0)
    hm = make_heatmap(rng, mask=np.zeros((24, 24), dtype=bool))
    with pytest.raises(EmptyTissueError):
        sample_pixels(hm, 10, seed=0)


def test_sample_pixels_exactly_all_usable():
    rng = np.random.default_rng(1)
    mask = np.zeros((6, 6), dtype=bool)
    mask[1:4, 2:5] = True
    hm = make_heatmap(rng, 6, 6, mask=mask)
    coords, logits = sample_pixels(hm, 9, seed=3)
    assert len(coords) == 9
    got = {tuple(c) for c in coords}
    want = {(x, y) for y in range(1, 4) for x in range(2, 5)}
    assert got == want
    assert logits.shape == (9, 5)


def test_sample_pixels_determinism_and_size():
    rng = np.random.default_rng(2)
    hm = make_heatmap(rng, 100, 100)
    c1, _ = sample_pixels(hm, 1000, seed=11)
    c2, _ = sample_pixels(hm, 1000, seed=11)
    c3, _ = sample_pixels(hm, 1000, seed=12)
    assert np.array_equal(c1, c2)
    assert len(c1) == 1000 and len(c3) == 1000
    assert {tuple(x) for x in c1} != {tuple(x) for x in c3}
    assert len({tuple(x) for x in c1}) == 1000  # without replacement


def test_sample_pixels_logits_match_positions():
    rng = np.random.default_rng(3)
    hm = make_heatmap(rng, 10, 10)
    coords, logits = sample_pixels(hm, 20, seed=0)
    for (x, y), vec in zip(coords, logits):
        assert np.array_equal(vec, hm.logits[y, x, :])


# ---------------------------------------------------------------------------
# BIRCH
# ---------------------------------------------------------------------------

def test_birch_identical_points_single_cluster():
    cs = birch_cluster(np.ones((40, 3)), target_k=5, threshold=0.1, branching=8)
    assert cs.count == 1
    assert np.all(cs.assignments == 0)


def _lloyd_two_means(points, iters=50):
    # oracle: Lloyd's algorithm seeded by the two farthest points
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    i, j = np.unravel_index(np.argmax(d2), d2.shape)
    centers = points[[i, j]].astype(float)
    for _ in range(iters):
        lab = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2).argmin(axis=1)
        for c in range(2):
            if (lab == c).any():
                centers[c] = points[lab == c].mean(axis=0)
    return lab


def test_birch_two_blobs_matches_two_means_oracle():
    rng = np.random.default_rng(4)
    a = rng.normal(0.0, 0.2, size=(150, 2))
    b = rng.normal(8.0, 0.2, size=(150, 2))
    pts = np.vstack([a, b])
    cs = birch_cluster(pts, target_k=2, threshold=0.5, branching=16)
    assert cs.count == 2
    oracle = _lloyd_two_means(pts)
    agree = (cs.assignments == oracle).mean()
    assert max(agree, 1 - agree) == 1.0  # identical up to label swap


def test_birch_partition_totality_and_radius_bound():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 10, size=(10_000, 3))
    cs = birch_cluster(pts, target_k=50, threshold=0.8, branching=25)
    threshold = cs.effective_threshold
    assert threshold >= 0.8
    assert cs.count <= 50
    # total, exclusive assignment
    assert cs.assignments.shape == (10_000,)
    assert cs.assignments.min() >= 0 and cs.assignments.max() < cs.count
    # merge-phase bound: rms radius of each cluster is within
    # sqrt(threshold^2 + max entry-centroid offset^2)
    for cid in range(cs.count):
        member = cs.assignments == cid
        centroid = cs.centroids[cid]
        rms = np.sqrt(((pts[member] - centroid) ** 2).sum(axis=1).mean())
        entry_sel = cs.entry_cluster == cid
        offsets = np.sqrt(((cs.entry_centroids[entry_sel] - centroid) ** 2).sum(axis=1))
        bound = np.sqrt(threshold**2 + float(offsets.max()) ** 2)
        assert rms <= bound + 1e-9


def test_birch_entry_rms_never_exceeds_threshold():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(2000, 4))
    cs = birch_cluster(pts, target_k=100, threshold=0.5, branching=20)
    assert np.all(cs.entry_rms <= cs.effective_threshold + 1e-9)


def test_birch_contract_errors():
    pts = np.ones((5, 2))
    with pytest.raises(ContractError):
        birch_cluster(pts, 2, threshold=0.0, branching=10)
    with pytest.raises(ContractError):
        birch_cluster(pts, 2, threshold=0.5, branching=1)
    with pytest.raises(ContractError):
        birch_cluster(np.zeros((0, 2)), 2, threshold=0.5, branching=10)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 120), k=st.integers(1, 10))
def test_birch_partition_property(seed, n, k):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 2))
    cs = birch_cluster(pts, target_k=k, threshold=0.4, branching=6)
    assert cs.count <= max(k, 1)
    assert len(cs.assignments) == n
    counts = np.bincount(cs.assignments, minlength=cs.count)
    assert counts.sum() == n and (counts > 0).all()


# ---------------------------------------------------------------------------
# Node features
# ---------------------------------------------------------------------------

def _jarvis_hull(points):
    """Gift-wrapping hull, independent of the library's monotone chain."""
    pts = np.unique(points.astype(float), axis=0)
    if len(pts) <= 2:
        return pts
    start = min(range(len(pts)), key=lambda i: (pts[i][0], pts[i][1]))
    hull = [start]
    while True:
        p = hull[-1]
        candidate = (p + 1) % len(pts)
        for q in range(len(pts)):
            if q == p:
                continue
            v1 = pts[candidate] - pts[p]
            v2 = pts[q] - pts[p]
            cross = v1[0] * v2[1] - v1[1] * v2[0]
            if cross < 0 or (
                cross == 0
                and np.linalg.norm(pts[q] - pts[p]) > np.linalg.norm(pts[candidate] - pts[p])
            ):
                candidate = q
        if candidate == start:
            break
        hull.append(candidate)
    return pts[hull]


def _features_oracle(coords, logits):
    """Brute-force single-cluster feature vector (matches documented layout)."""
    xs, ys = coords[:, 0].astype(float), coords[:, 1].astype(float)
    area = float(len(coords))
    hull = _jarvis_hull(coords)
    if len(hull) == 1:
        perimeter, hull_area = 0.0, 0.0
    elif len(hull) == 2:
        perimeter, hull_area = 2.0 * float(np.linalg.norm(hull[1] - hull[0])), 0.0
    else:
        closed = np.vstack([hull, hull[0]])
        perimeter = float(np.sqrt((np.diff(closed, axis=0) ** 2).sum(axis=1)).sum())
        x, y = hull[:, 0], hull[:, 1]
        hull_area = 0.5 * abs(float(x @ np.roll(y, -1) - y @ np.roll(x, -1)))
    convexity = 1.0 if hull_area < 1.0 else min(area / hull_area, 1.0)
    row = [xs.mean(), ys.mean(), xs.std(), ys.std(), area, perimeter, convexity]
    row += list(logits.mean(axis=0)) + list(logits.std(axis=0))
    return np.array(row)


class _OneCluster:
    def __init__(self, n):
        self.assignments = np.zeros(n, dtype=np.int64)
        self.count = 1


def test_single_pixel_cluster_features():
    coords = np.array([[4, 7]])
    logits = np.array([[0.5, -1.0]])
    feats, cents = extract_node_features(_OneCluster(1), coords, logits)
    mean_x, mean_y, std_x, std_y, area, perimeter, convexity = feats[0, :7]
    assert (mean_x, mean_y) == (4.0, 7.0)
    assert std_x == 0.0 and std_y == 0.0
    assert area == 1.0 and perimeter == 0.0 and convexity == 1.0
    assert feats[0, 7:9].tolist() == [0.5, -1.0]
    assert feats[0, 9:11].tolist() == [0.0, 0.0]
    assert cents[0].tolist() == [4.0, 7.0]


def test_square_block_uniform_logits():
    coords = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
    logits = np.full((4, 3), 2.5)
    feats, _ = extract_node_features(_OneCluster(4), coords, logits)
    assert feats[0, 4] == 4.0  # area
    assert np.allclose(feats[0, 7:10], 2.5)  # per-class means
    assert np.allclose(feats[0, 10:13], 0.0)  # per-class stds
    assert feats[0, 5] == pytest.approx(4.0)  # unit-square hull perimeter
    assert feats[0, 6] == 1.0  # convexity clamped


def test_random_cluster_matches_bruteforce_oracle():
    rng = np.random.default_rng(7)
    coords = rng.integers(0, 30, size=(50, 2))
    logits = rng.normal(size=(50, 4))
    feats, _ = extract_node_features(_OneCluster(50), coords, logits)
    oracle = _features_oracle(coords, logits)
    assert np.allclose(feats[0], oracle, atol=1e-10)


def test_features_permutation_invariant_and_bounded():
    rng = np.random.default_rng(8)
    coords = rng.integers(0, 40, size=(30, 2))
    logits = rng.normal(size=(30, 3))
    feats1, _ = extract_node_features(_OneCluster(30), coords, logits)
    perm = rng.permutation(30)
    feats2, _ = extract_node_features(_OneCluster(30), coords[perm], logits[perm])
    assert np.allclose(feats1, feats2, atol=1e-10)
    assert np.all(feats1[0, 2:4] >= 0)  # stds
    assert 0 < feats1[0, 6] <= 1  # convexity


def test_extra_feature_blocks_extend_dimension():
    rng = np.random.default_rng(9)
    coords = rng.integers(0, 20, size=(10, 2))
    logits = rng.normal(size=(10, 5))
    base, _ = extract_node_features(_OneCluster(10), coords, logits)
    ext, _ = extract_node_features(
        _OneCluster(10), coords, logits, extra_blocks=("minmax", "class_fraction")
    )
    assert base.shape[1] == 7 + 2 * 5
    assert ext.shape[1] == 7 + 2 * 5 + 2 * 5 + 5
    assert np.allclose(ext[0, : base.shape[1]], base[0])


# ---------------------------------------------------------------------------
# kNN edges
# ---------------------------------------------------------------------------

def test_knn_collinear_middle_point():
    cents = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    edges = knn_edges(cents, 1)
    by_src = {int(s): int(d) for s, d in edges}
    assert by_src[1] == 0  # nearer endpoint
    assert by_src[0] == 1 and by_src[2] == 1


def test_knn_complete_graph_when_k_is_n_minus_1():
    rng = np.random.default_rng(10)
    cents = rng.uniform(size=(6, 2))
    edges = knn_edges(cents, 5)
    assert len(edges) == 30
    assert len({(int(s), int(d)) for s, d in edges}) == 30
    assert all(s != d for s, d in edges)


def test_knn_matches_bruteforce_oracle_exactly():
    rng = np.random.default_rng(11)
    cents = rng.uniform(0, 100, size=(200, 2))
    edges = knn_edges(cents, 5)
    got = {i: [] for i in range(200)}
    for s, d in edges:
        got[int(s)].append(int(d))
    for i in range(200):
        d2 = ((cents - cents[i]) ** 2).sum(axis=1)
        order = sorted((float(d2[j]), j) for j in range(200) if j != i)
        assert got[i] == [j for _, j in order[:5]]


def test_knn_tie_break_lower_index():
    cents = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    edges = knn_edges(cents, 1)
    by_src = {int(s): int(d) for s, d in edges}
    assert by_src[0] == 1  # 1, 2, 3 all at distance 1; lowest index wins


def test_knn_translation_invariance():
    rng = np.random.default_rng(12)
    cents = rng.uniform(size=(40, 2))
    e1 = knn_edges(cents, 3)
    e2 = knn_edges(cents + 123.456, 3)
    assert np.array_equal(e1, e2)


def test_knn_requires_more_nodes_than_k():
    with pytest.raises(ContractError):
        knn_edges(np.zeros((3, 2)), 3)


# ---------------------------------------------------------------------------
# Heatmap io and the full pipeline
# ---------------------------------------------------------------------------

def test_heatmap_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    hm = make_heatmap(rng, 16, 12, 5)
    hm.logits = hm.logits.astype(np.float32).astype(np.float64)
    hm.usable_mask[0, :] = False
    path = tmp_path / "x.hmp"
    write_heatmap(hm, path)
    back = read_heatmap(path)
    assert back.modality is Modality.B
    assert np.array_equal(back.logits, hm.logits)
    assert np.array_equal(back.usable_mask, hm.usable_mask)


def test_heatmap_truncated_raises(tmp_path):
    rng = np.random.default_rng(14)
    hm = make_heatmap(rng, 8, 8, 5)
    path = tmp_path / "x.hmp"
    write_heatmap(hm, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ParseError):
        read_heatmap(path)


def test_build_graph_two_blob_fixture():
    rng = np.random.default_rng(15)
    h = w = 30
    logits = rng.normal(0, 0.05, size=(h, w, 5))
    logits[4:10, 4:10, 2] += 5.0
    logits[20:26, 20:26, 3] += 5.0
    mask = np.zeros((h, w), dtype=bool)
    mask[4:10, 4:10] = True
    mask[20:26, 20:26] = True
    hm = Heatmap(Modality.B, logits, mask)
    cfg = GraphBuildConfig(n_pixels=72, target_k=2, knn_k=1, birch_threshold=0.5)
    g = build_graph(hm, cfg, seed=1)
    assert g.n_nodes == 2
    assert len(g.edges) == 2
    g.validate()


def test_build_graph_all_artifact_mask():
    rng = np.random.default_rng(16)
    hm = make_heatmap(rng, mask=np.zeros((24, 24), dtype=bool))
    cfg = GraphBuildConfig(n_pixels=50, target_k=4, knn_k=1)
    with pytest.raises(EmptyTissueError):
        build_graph(hm, cfg, seed=0)


def test_build_graph_node_budget_and_out_degree():
    rng = np.random.default_rng(17)
    hm = make_heatmap(rng, 40, 40, 5)
    cfg = GraphBuildConfig(n_pixels=900, target_k=64, knn_k=5, birch_threshold=0.4)
    g = build_graph(hm, cfg, seed=2)
    assert g.n_nodes <= 64
    out_deg = np.bincount(np.asarray(g.edges)[:, 0], minlength=g.n_nodes)
    assert np.all(out_deg == 5)
    g.validate()


def test_clustering_features_scale_coordinates():
    rng = np.random.default_rng(18)
    hm = make_heatmap(rng, 11, 21, 5)
    coords = np.array([[0, 0], [20, 10]])
    logits = rng.normal(size=(2, 5))
    pts = clustering_features(hm, coords, logits, logit_weight=2.0)
    assert np.allclose(pts[0, :2], [0.0, 0.0])
    assert np.allclose(pts[1, :2], [1.0, 1.0])
    assert np.allclose(pts[:, 2:], 2.0 * logits)
