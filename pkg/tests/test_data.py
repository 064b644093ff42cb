"""Graph/label serialization and patient-based splits."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphfusion.data import (
    DatasetSplit,
    Endpoint,
    LabelRecord,
    ModalGraph,
    Modality,
    PairedSample,
    RaterLabel,
    assert_split_disjoint,
    read_graph,
    read_graph_text,
    read_labels,
    split_by_patient,
    write_graph,
    write_graph_text,
    write_labels,
)
from graphfusion.errors import ContractError, ParseError, ValidationError

from helpers import random_graph


def graphs_equal(a: ModalGraph, b: ModalGraph) -> bool:
    return (
        a.modality == b.modality
        and a.k == b.k
        and np.array_equal(a.node_features, b.node_features)
        and np.array_equal(a.node_centroids, b.node_centroids)
        and np.array_equal(np.asarray(a.edges).reshape(-1, 2), np.asarray(b.edges).reshape(-1, 2))
    )


def test_single_node_graph_round_trips(tmp_path):
    g = ModalGraph(
        Modality.A,
        np.array([[1.5, -2.25]]),
        np.zeros((0, 2), dtype=np.int64),
        np.array([[3.0, 4.0]]),
        k=0,
    )
    path = tmp_path / "one.mgf"
    write_graph(g, path)
    assert graphs_equal(read_graph(path), g)


def test_large_graph_round_trips_bit_exactly(tmp_path):
    rng = np.random.default_rng(0)
    n, d, k = 5000, 7, 5
    feats = rng.normal(size=(n, d))
    cents = rng.uniform(0, 1e4, size=(n, 2))
    dst = np.array([[(v + j + 1) % n for j in range(k)] for v in range(n)])
    edges = np.stack([np.repeat(np.arange(n), k), dst.reshape(-1)], axis=1)
    g = ModalGraph(Modality.B, feats, edges, cents, k=k)
    path = tmp_path / "big.mgf"
    write_graph(g, path)
    back = read_graph(path)
    assert graphs_equal(back, g)
    assert back.node_features.tobytes() == feats.tobytes()


def test_out_of_range_edge_is_validation_error(tmp_path):
    g = random_graph(np.random.default_rng(1), 4, 3, k=1)
    path = tmp_path / "bad.mgf"
    write_graph(g, path)
    raw = bytearray(path.read_bytes())
    # last edge dst u32 sits at the tail; point it at index N
    raw[-4:] = struct.pack("<I", 4)
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError) as err:
        read_graph(path)
    assert err.value.invariant == "edge-index-range"


def test_self_loop_and_degree_invariants():
    feats = np.zeros((2, 1))
    cents = np.zeros((2, 2))
    with pytest.raises(ValidationError) as err:
        ModalGraph(Modality.A, feats, np.array([[0, 0], [1, 0]]), cents, k=1).validate()
    assert err.value.invariant == "no-self-loops"
    with pytest.raises(ValidationError) as err:
        ModalGraph(Modality.A, feats, np.array([[0, 1]]), cents, k=1).validate()
    assert err.value.invariant == "uniform-out-degree"


def test_nan_features_rejected():
    g = random_graph(np.random.default_rng(2), 3, 2, k=1)
    g.node_features[1, 1] = np.nan
    with pytest.raises(ValidationError) as err:
        g.validate()
    assert err.value.invariant == "features-finite"


def test_truncated_file_parse_error_reports_offset(tmp_path):
    g = random_graph(np.random.default_rng(3), 5, 3, k=2)
    path = tmp_path / "trunc.mgf"
    write_graph(g, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ParseError) as err:
        read_graph(path)
    assert err.value.offset <= len(blob) // 2


def test_bad_magic_parse_error(tmp_path):
    path = tmp_path / "junk.mgf"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ParseError) as err:
        read_graph(path)
    assert err.value.offset == 0


@settings(max_examples=100, deadline=None)
@given(
    n=st.integers(1, 12),
    d=st.integers(1, 6),
    seed=st.integers(0, 10_000),
    modality=st.sampled_from([Modality.A, Modality.B]),
)
def test_round_trip_identity_property(tmp_path_factory, n, d, seed, modality):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(0, n)) if n > 1 else 0
    g = random_graph(rng, n, d, k=k, modality=modality) if k else ModalGraph(
        modality, rng.normal(size=(n, d)), np.zeros((0, 2), np.int64),
        rng.uniform(size=(n, 2)), k=0,
    )
    path = tmp_path_factory.mktemp("rt") / "g.mgf"
    write_graph(g, path)
    assert graphs_equal(read_graph(path), g)


def test_text_form_round_trips(tmp_path):
    g = random_graph(np.random.default_rng(5), 4, 3, k=2)
    path = tmp_path / "g.mgt"
    write_graph_text(g, path)
    assert graphs_equal(read_graph_text(path), g)


def test_labels_round_trip(tmp_path):
    records = [
        LabelRecord("p1", 0, "r1", Endpoint.FIBROSIS, 4),
        LabelRecord("p1", 0, "r2", Endpoint.BALLOONING, 2),
        LabelRecord("p2", 1, "r1", Endpoint.STEATOSIS, 0),
    ]
    path = tmp_path / "labels.csv"
    write_labels(records, path)
    assert read_labels(path) == records


def test_labels_score_out_of_range_rejected(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("p1,0,r1,ballooning,3\n")
    with pytest.raises(ValidationError):
        read_labels(path)


def test_label_bad_line_is_parse_error(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("p1,0,r1,fibrosis\n")
    with pytest.raises(ParseError):
        read_labels(path)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def _one_sample_per_patient(n):
    rng = np.random.default_rng(11)
    out = []
    for i in range(n):
        g_a = random_graph(rng, 3, 2, k=1, modality=Modality.A)
        g_b = random_graph(rng, 3, 2, k=1, modality=Modality.B)
        out.append(PairedSample(f"p{i:03d}", 0, g_a, g_b, []))
    return out


def test_split_ten_patients_fractions():
    samples = _one_sample_per_patient(10)
    split = split_by_patient(samples, (0.6, 0.2, 0.2), seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (6, 2, 2)
    assert_split_disjoint(split)


def test_split_keeps_multi_sample_patients_together():
    rng = np.random.default_rng(12)
    samples = _one_sample_per_patient(6)
    extra = []
    for tp in range(1, 5):
        g_a = random_graph(rng, 3, 2, k=1, modality=Modality.A)
        g_b = random_graph(rng, 3, 2, k=1, modality=Modality.B)
        extra.append(PairedSample("p000", tp, g_a, g_b, []))
    split = split_by_patient(samples + extra, (0.34, 0.33, 0.33), seed=4)
    ids = [f"p000/{tp}" for tp in range(5)]
    homes = [
        name
        for name, bucket in [("train", split.train), ("val", split.val), ("test", split.test)]
        if any(i in bucket for i in ids)
    ]
    assert len(homes) == 1
    assert all(any(i in bucket for bucket in [split.train, split.val, split.test]) for i in ids)


def test_split_determinism_and_seed_sensitivity():
    samples = _one_sample_per_patient(100)
    s1 = split_by_patient(samples, (0.6, 0.2, 0.2), seed=7)
    s2 = split_by_patient(samples, (0.6, 0.2, 0.2), seed=7)
    s3 = split_by_patient(samples, (0.6, 0.2, 0.2), seed=8)
    assert s1 == s2
    assert s1 != s3


def test_split_rejects_too_few_patients_and_bad_fractions():
    samples = _one_sample_per_patient(2)
    with pytest.raises(ContractError):
        split_by_patient(samples, (0.6, 0.2, 0.2), seed=0)
    samples = _one_sample_per_patient(5)
    with pytest.raises(ContractError):
        split_by_patient(samples, (0.6, 0.2, 0.1), seed=0)
    with pytest.raises(ContractError):
        split_by_patient(samples, (0.9, 0.2, -0.1), seed=0)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(3, 40), seed=st.integers(0, 1000))
def test_split_patients_never_shared_property(n, seed):
    samples = _one_sample_per_patient(n)
    split = split_by_patient(samples, (0.5, 0.25, 0.25), seed=seed)
    assert_split_disjoint(split)
    assert len(split.train) + len(split.val) + len(split.test) == n
    assert min(len(split.train), len(split.val), len(split.test)) >= 1


def test_assert_split_disjoint_catches_shared_patient():
    split = DatasetSplit(train=["p1/0"], val=["p1/1"], test=["p2/0"])
    with pytest.raises(ContractError):
        assert_split_disjoint(split)
