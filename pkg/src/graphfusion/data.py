"""Data model and on-disk interchange formats for modality graphs and labels.

Graph container (``.mgf``): magic ``MGF1``, version u16, modality u8, N u32,
d u32, k u32, N*d f64 features, N*2 f64 centroids, E u32, E pairs of
(u32 src, u32 dst). All integers little-endian; floats IEEE 754 binary64, so
a write/read round trip is bit-exact.

Label file: delimited text with one ``patient_id,timepoint,rater_id,endpoint,
score`` record per line (an optional header line is tolerated).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError, ValidationError

MGF_MAGIC = b"MGF1"
MGF_VERSION = 1
LABEL_HEADER = "patient_id,timepoint,rater_id,endpoint,score"


class Modality(Enum):
    A = 0
    B = 1


class Endpoint(Enum):
    FIBROSIS = "fibrosis"
    BALLOONING = "ballooning"
    LOBULAR_INFLAMMATION = "lobular_inflammation"
    STEATOSIS = "steatosis"


#: Number of ordinal classes per endpoint.
ENDPOINT_CLASSES = {
    Endpoint.FIBROSIS: 5,
    Endpoint.BALLOONING: 3,
    Endpoint.LOBULAR_INFLAMMATION: 4,
    Endpoint.STEATOSIS: 4,
}


@dataclass
class ModalGraph:
    """Node-attributed directed graph for one stain modality."""

    modality: Modality
    node_features: np.ndarray  # (N, d) float64
    edges: np.ndarray  # (E, 2) int64 rows of (src, dst)
    node_centroids: np.ndarray  # (N, 2) float64, pixel units
    k: int  # out-degree used at construction time (0 for edgeless fixtures)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    def validate(self) -> None:
        n = self.n_nodes
        feats = self.node_features
        if feats.ndim != 2:
            raise ValidationError("node_features must be 2-d", invariant="feature-matrix-shape")
        if self.node_centroids.shape != (n, 2):
            raise ValidationError(
                f"centroids shape {self.node_centroids.shape} != ({n}, 2)",
                invariant="centroid-shape",
            )
        if np.isnan(feats).any():
            raise ValidationError("node_features contain NaN", invariant="features-finite")
        edges = np.asarray(self.edges)
        if edges.size == 0:
            edges = edges.reshape(0, 2)
        if edges.ndim != 2 or edges.shape[1] != 2:
            raise ValidationError("edges must be (E, 2)", invariant="edge-shape")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ValidationError(
                    f"edge index outside [0, {n})", invariant="edge-index-range"
                )
            if (edges[:, 0] == edges[:, 1]).any():
                raise ValidationError("self-loop edge present", invariant="no-self-loops")
        out_deg = np.bincount(edges[:, 0], minlength=n) if edges.size else np.zeros(n, int)
        if n and not (out_deg == self.k).all():
            raise ValidationError(
                f"out-degree must equal k={self.k} for every node", invariant="uniform-out-degree"
            )


@dataclass
class RaterLabel:
    rater_id: str
    endpoint: Endpoint
    score: int

    def validate(self) -> None:
        k = ENDPOINT_CLASSES[self.endpoint]
        if not 0 <= self.score < k:
            raise ValidationError(
                f"score {self.score} outside [0, {k - 1}] for {self.endpoint.value}",
                invariant="score-range",
            )


@dataclass
class PairedSample:
    """One patient/timepoint pair of modality graphs with rater labels."""

    patient_id: str
    timepoint: int
    graph_a: ModalGraph
    graph_b: ModalGraph
    labels: list[RaterLabel] = field(default_factory=list)

    @property
    def sample_id(self) -> str:
        return f"{self.patient_id}/{self.timepoint}"

    def validate(self) -> None:
        if self.graph_a.modality == self.graph_b.modality:
            raise ValidationError(
                "paired graphs must have distinct modalities", invariant="distinct-modalities"
            )
        for lbl in self.labels:
            lbl.validate()

    def labels_for(self, endpoint: Endpoint) -> list[RaterLabel]:
        return [l for l in self.labels if l.endpoint == endpoint]


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]


# ---------------------------------------------------------------------------
# Graph serialization
# ---------------------------------------------------------------------------

def write_graph(g: ModalGraph, path) -> None:
    g.validate()
    n, d = g.node_features.shape
    edges = np.asarray(g.edges, dtype=np.int64).reshape(-1, 2)
    parts = [
        MGF_MAGIC,
        struct.pack("<HBIII", MGF_VERSION, g.modality.value, n, d, g.k),
        np.ascontiguousarray(g.node_features, dtype="<f8").tobytes(),
        np.ascontiguousarray(g.node_centroids, dtype="<f8").tobytes(),
        struct.pack("<I", edges.shape[0]),
        np.ascontiguousarray(edges, dtype="<u4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    """Cursor over raw bytes that reports the failing offset on truncation."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"unexpected end of file, wanted {n} bytes", offset=self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_graph(path) -> ModalGraph:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MGF_MAGIC:
        raise ParseError("bad magic, not an MGF graph file", offset=0)
    version, modality, n, d, k = r.unpack("<HBIII")
    if version != MGF_VERSION:
        raise ParseError(f"unsupported MGF version {version}", offset=4)
    if modality not in (0, 1):
        raise ParseError(f"unknown modality code {modality}", offset=6)
    feats = np.frombuffer(r.take(8 * n * d), dtype="<f8").reshape(n, d).copy()
    cents = np.frombuffer(r.take(8 * n * 2), dtype="<f8").reshape(n, 2).copy()
    (n_edges,) = r.unpack("<I")
    edges = (
        np.frombuffer(r.take(8 * n_edges), dtype="<u4")
        .reshape(n_edges, 2)
        .astype(np.int64)
    )
    if r.pos != len(r.buf):
        raise ParseError("trailing bytes after edge list", offset=r.pos)
    g = ModalGraph(Modality(modality), feats, edges, cents, k=k)
    g.validate()
    return g


def write_graph_text(g: ModalGraph, path) -> None:
    """Human-readable twin of the binary format, for small fixtures."""
    g.validate()
    n, d = g.node_features.shape
    lines = [f"mgf-text 1 {g.modality.name} n={n} d={d} k={g.k}"]
    for i in range(n):
        feats = " ".join(repr(float(v)) for v in g.node_features[i])
        cx, cy = (repr(float(v)) for v in g.node_centroids[i])
        lines.append(f"node {feats} @ {cx} {cy}")
    for src, dst in np.asarray(g.edges).reshape(-1, 2):
        lines.append(f"edge {int(src)} {int(dst)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph_text(path) -> ModalGraph:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("mgf-text 1 "):
        raise ParseError("bad text-graph header", offset=0)
    head = lines[0].split()
    modality = Modality[head[2]]
    n = int(head[3].split("=")[1])
    d = int(head[4].split("=")[1])
    k = int(head[5].split("=")[1])
    feats, cents, edges = [], [], []
    for line in lines[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "node":
            at = tok.index("@")
            feats.append([float(v) for v in tok[1:at]])
            cents.append([float(tok[at + 1]), float(tok[at + 2])])
        elif tok[0] == "edge":
            edges.append((int(tok[1]), int(tok[2])))
    g = ModalGraph(
        modality,
        np.asarray(feats, dtype=np.float64).reshape(n, d),
        np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        np.asarray(cents, dtype=np.float64).reshape(n, 2),
        k=k,
    )
    g.validate()
    return g


# ---------------------------------------------------------------------------
# Label files
# ---------------------------------------------------------------------------

@dataclass
class LabelRecord:
    patient_id: str
    timepoint: int
    rater_id: str
    endpoint: Endpoint
    score: int


def write_labels(records: list[LabelRecord], path) -> None:
    lines = [LABEL_HEADER]
    for rec in records:
        lines.append(
            f"{rec.patient_id},{rec.timepoint},{rec.rater_id},{rec.endpoint.value},{rec.score}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path) -> list[LabelRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line == LABEL_HEADER:
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ParseError(f"label line {lineno} has {len(parts)} fields, wanted 5", offset=0)
        patient, tp, rater, endpoint, score = parts
        try:
            rec = LabelRecord(patient, int(tp), rater, Endpoint(endpoint), int(score))
        except (ValueError, KeyError) as exc:
            raise ParseError(f"label line {lineno}: {exc}", offset=0) from exc
        RaterLabel(rec.rater_id, rec.endpoint, rec.score).validate()
        records.append(rec)
    return records


def load_dataset(graph_dir, labels_path) -> list[PairedSample]:
    """Pair ``{patient}__{timepoint}__{a|b}.mgf`` graphs and attach labels."""
    graph_dir = Path(graph_dir)
    halves: dict[tuple[str, int], dict[str, ModalGraph]] = {}
    for path in sorted(graph_dir.glob("*.mgf")):
        stem = path.stem
        parts = stem.rsplit("__", 2)
        if len(parts) != 3 or parts[2] not in ("a", "b"):
            raise ValidationError(
                f"graph filename '{path.name}' is not patient__timepoint__modality",
                invariant="graph-filename",
            )
        key = (parts[0], int(parts[1]))
        halves.setdefault(key, {})[parts[2]] = read_graph(path)
    by_key: dict[tuple[str, int], list[RaterLabel]] = {}
    for rec in read_labels(labels_path):
        by_key.setdefault((rec.patient_id, rec.timepoint), []).append(
            RaterLabel(rec.rater_id, rec.endpoint, rec.score)
        )
    samples = []
    for (patient, tp), pair in sorted(halves.items()):
        if "a" not in pair or "b" not in pair:
            raise ValidationError(
                f"sample {patient}/{tp} is missing one modality graph",
                invariant="paired-modalities",
            )
        s = PairedSample(patient, tp, pair["a"], pair["b"], by_key.get((patient, tp), []))
        s.validate()
        samples.append(s)
    return samples


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def split_by_patient(
    samples: list[PairedSample],
    fractions: tuple[float, float, float],
    seed: int,
) -> DatasetSplit:
    """Partition patients (never samples) into train/val/test.

    Achieved patient counts are within one of the fractional targets; every
    split receives at least one patient. Deterministic for a fixed seed.
    """
    f_train, f_val, f_test = fractions
    if min(f_train, f_val, f_test) <= 0.0:
        raise ContractError("split fractions must all be positive")
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ContractError("split fractions must sum to 1")
    patients = sorted({s.patient_id for s in samples})
    if len(patients) < 3:
        raise ContractError(f"need at least 3 distinct patients, got {len(patients)}")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    p = len(patients)
    b1 = int(round(p * f_train))
    b2 = int(round(p * (f_train + f_val)))
    b1 = min(max(b1, 1), p - 2)
    b2 = min(max(b2, b1 + 1), p - 1)
    groups = [set(order[:b1]), set(order[b1:b2]), set(order[b2:])]
    buckets: tuple[list[str], list[str], list[str]] = ([], [], [])
    for s in samples:
        for i, grp in enumerate(groups):
            if s.patient_id in grp:
                buckets[i].append(s.sample_id)
                break
    return DatasetSplit(train=buckets[0], val=buckets[1], test=buckets[2])


def assert_split_disjoint(split: DatasetSplit) -> None:
    """Raise unless sample ids and the patient ids behind them are disjoint."""
    sets = [set(split.train), set(split.val), set(split.test)]
    names = ["train", "val", "test"]
    for i in range(3):
        for j in range(i + 1, 3):
            inter = sets[i] & sets[j]
            if inter:
                raise ContractError(f"splits {names[i]} and {names[j]} share samples: {inter}")
            pat_i = {s.split("/")[0] for s in sets[i]}
            pat_j = {s.split("/")[0] for s in sets[j]}
            pinter = pat_i & pat_j
            if pinter:
                raise ContractError(
                    f"splits {names[i]} and {names[j]} share patients: {pinter}"
                )
