"""Synthetic paired-heatmap generator with a planted ordinal signal.

Each sample draws per-modality latent components u_a, u_b ~ U(0,1) and a
combined latent u = w_a*u_a + w_b*u_b + w_ab*u_a*u_b. Modality A renders
blob textures whose count scales with u_a on a designated signal channel;
modality B renders ribbon textures scaling with u_b. The true label
discretizes u through fixed quantile thresholds matching the configured
class profile, and rater labels discretize u shifted by each rater's planted
bias plus Gaussian noise (both expressed in threshold-gap units).

With w_ab > 0 no function of a single component reaches Bayes accuracy, so
fusion-versus-unimodal comparisons have a planted ground truth.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    Endpoint,
    ENDPOINT_CLASSES,
    LabelRecord,
    Modality,
    RaterLabel,
    write_graph,
    write_labels,
)
from .errors import ContractError
from .graph_build import (
    GraphBuildConfig,
    Heatmap,
    build_graph,
    heatmap_build_seed,
    read_heatmap,
    write_heatmap,
)

SIGNAL_CLASS_A = 7
SIGNAL_CLASS_B = 2
_THRESHOLD_MC_SEED = 202406  # fixed so thresholds depend on config only
_THRESHOLD_MC_DRAWS = 200_000


@dataclass(frozen=True)
class RaterSpec:
    rater_id: str
    bias: float  # planted shift in threshold-gap units


@dataclass
class GeneratorConfig:
    n_patients: int = 20
    samples_per_patient: int = 1
    height: int = 48
    width: int = 48
    classes_a: int = 13
    classes_b: int = 5
    endpoint: Endpoint = Endpoint.FIBROSIS
    w_a: float = 0.3
    w_b: float = 0.3
    w_ab: float = 0.4
    raters: tuple[RaterSpec, ...] = (RaterSpec("rater1", 0.0),)
    rater_noise: float = 0.1  # latent sigma in threshold-gap units
    class_profile: tuple[float, ...] | None = None  # None -> uniform bins

    def __post_init__(self):
        if isinstance(self.endpoint, str):
            self.endpoint = Endpoint(self.endpoint)
        if min(self.w_a, self.w_b, self.w_ab) < 0:
            raise ContractError("signal weights must be nonnegative")
        if self.w_a + self.w_b + self.w_ab > 1.0 + 1e-9:
            raise ContractError("signal weights must sum to at most 1")
        if self.rater_noise < 0:
            raise ContractError("rater noise must be nonnegative")
        self.raters = tuple(
            r if isinstance(r, RaterSpec) else RaterSpec(*r) for r in self.raters
        )
        if self.class_profile is not None:
            prof = tuple(float(p) for p in self.class_profile)
            if len(prof) != self.n_classes or min(prof) <= 0:
                raise ContractError(
                    f"class profile needs {self.n_classes} positive weights"
                )
            self.class_profile = prof

    @property
    def n_classes(self) -> int:
        return ENDPOINT_CLASSES[self.endpoint]


def combine_latent(cfg: GeneratorConfig, u_a, u_b):
    return cfg.w_a * u_a + cfg.w_b * u_b + cfg.w_ab * u_a * u_b


def latent_thresholds(cfg: GeneratorConfig) -> np.ndarray:
    """Quantile thresholds of the combined latent matching the class profile.

    Estimated once by Monte Carlo with a fixed internal seed, so thresholds
    are a pure function of the configuration.
    """
    k = cfg.n_classes
    profile = np.asarray(cfg.class_profile or [1.0] * k, dtype=np.float64)
    cum = np.cumsum(profile / profile.sum())[:-1]
    rng = np.random.default_rng(_THRESHOLD_MC_SEED)
    u = combine_latent(cfg, rng.random(_THRESHOLD_MC_DRAWS), rng.random(_THRESHOLD_MC_DRAWS))
    return np.quantile(u, cum)


def threshold_gap_unit(cfg: GeneratorConfig, thresholds: np.ndarray) -> float:
    """Latent distance corresponding to one planted-bias unit."""
    if len(thresholds) >= 2:
        return float(np.mean(np.diff(thresholds)))
    rng = np.random.default_rng(_THRESHOLD_MC_SEED)
    u = combine_latent(cfg, rng.random(10_000), rng.random(10_000))
    return float(u.std())


def discretize(u, thresholds: np.ndarray):
    return np.searchsorted(thresholds, u, side="right")


# ---------------------------------------------------------------------------
# Texture rendering
# ---------------------------------------------------------------------------

def _add_blobs(logits, channel, count, rng, amp=3.0, r_lo=2.0, r_hi=4.5):
    h, w = logits.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(count):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        r = rng.uniform(r_lo, r_hi)
        logits[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r, channel] += amp


def _add_ribbons(logits, channel, count, rng, amp=3.0, half_width=1.6):
    h, w = logits.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(count):
        x0 = rng.uniform(0, w)
        y0 = rng.uniform(0, h)
        theta = rng.uniform(0, np.pi)
        dist = np.abs(np.cos(theta) * (yy - y0) - np.sin(theta) * (xx - x0))
        logits[dist <= half_width, channel] += amp


def _make_mask(h, w, rng) -> np.ndarray:
    mask = np.ones((h, w), dtype=bool)
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    for _ in range(2):  # artifact patches
        ah = rng.integers(2, max(h // 8, 3))
        aw = rng.integers(2, max(w // 8, 3))
        ay = rng.integers(0, h - ah)
        ax = rng.integers(0, w - aw)
        mask[ay : ay + ah, ax : ax + aw] = False
    return mask


def render_heatmap(cfg: GeneratorConfig, modality: Modality, u_m: float, rng) -> Heatmap:
    h, w = cfg.height, cfg.width
    c = cfg.classes_a if modality is Modality.A else cfg.classes_b
    logits = rng.normal(0.0, 0.25, size=(h, w, c))
    logits[:, :, c - 1] += 1.2  # baseline "normal tissue" channel
    # the component drives both texture density and signal-channel intensity
    amp = 1.5 + 2.5 * u_m
    if modality is Modality.A:
        signal = min(SIGNAL_CLASS_A, c - 2)
        _add_blobs(logits, signal, 3 + int(round(u_m * 14)), rng, amp=amp)
        _add_blobs(logits, min(3, c - 2), int(rng.integers(2, 6)), rng, amp=1.5)
    else:
        signal = min(SIGNAL_CLASS_B, c - 2)
        _add_ribbons(logits, signal, 2 + int(round(u_m * 7)), rng, amp=amp)
        _add_blobs(logits, 0, int(rng.integers(2, 6)), rng, amp=1.5)
    return Heatmap(modality, logits, _make_mask(h, w, rng))


# ---------------------------------------------------------------------------
# Samples and datasets
# ---------------------------------------------------------------------------

@dataclass
class SynthSample:
    patient_id: str
    timepoint: int
    heatmap_a: Heatmap
    heatmap_b: Heatmap
    u_a: float
    u_b: float
    latent: float
    true_label: int
    labels: list[RaterLabel]


def generate_sample(
    cfg: GeneratorConfig, patient_id: str, timepoint: int, seed
) -> SynthSample:
    """One paired sample; deterministic in (config, seed)."""
    rng = np.random.default_rng(seed)
    u_a = float(rng.random())
    u_b = float(rng.random())
    u = float(combine_latent(cfg, u_a, u_b))
    thresholds = latent_thresholds(cfg)
    unit = threshold_gap_unit(cfg, thresholds)
    true_label = int(discretize(u, thresholds))
    labels = []
    for spec in cfg.raters:
        noisy = u + spec.bias * unit + rng.normal(0.0, cfg.rater_noise * unit)
        score = int(np.clip(discretize(noisy, thresholds), 0, cfg.n_classes - 1))
        labels.append(RaterLabel(spec.rater_id, cfg.endpoint, score))
    hm_a = render_heatmap(cfg, Modality.A, u_a, rng)
    hm_b = render_heatmap(cfg, Modality.B, u_b, rng)
    return SynthSample(patient_id, timepoint, hm_a, hm_b, u_a, u_b, u, true_label, labels)


def sample_seed(master_seed: int, patient_index: int, sample_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((master_seed, patient_index, sample_index))


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _emit_one(args) -> tuple[list[str], list[tuple]]:
    """Worker: generate one sample, write heatmaps and graphs, return labels."""
    cfg, build_cfg, out_dir, patient_id, p_idx, t_idx, master_seed = args
    out_dir = Path(out_dir)
    sample = generate_sample(cfg, patient_id, t_idx, sample_seed(master_seed, p_idx, t_idx))
    written = []
    for suffix, hm in (("a", sample.heatmap_a), ("b", sample.heatmap_b)):
        hmp_path = out_dir / "heatmaps" / f"{patient_id}__{t_idx}__{suffix}.hmp"
        write_heatmap(hm, hmp_path)
        written.append(str(hmp_path))
        # Rebuild from the file so graphs match a later build-graphs run exactly.
        hm_disk = read_heatmap(hmp_path)
        seed = heatmap_build_seed(hmp_path.read_bytes(), build_cfg.seed)
        g = build_graph(hm_disk, build_cfg, seed=seed)
        mgf_path = out_dir / "graphs" / f"{patient_id}__{t_idx}__{suffix}.mgf"
        write_graph(g, mgf_path)
        written.append(str(mgf_path))
    label_rows = [
        (patient_id, t_idx, l.rater_id, l.endpoint.value, l.score) for l in sample.labels
    ]
    return written, label_rows


def generate_dataset(
    cfg: GeneratorConfig,
    seed: int,
    out_dir,
    build_cfg: GraphBuildConfig | None = None,
    jobs: int = 1,
) -> dict:
    """Emit heatmaps, built graphs, labels, roster, and a hashed manifest."""
    out_dir = Path(out_dir)
    (out_dir / "heatmaps").mkdir(parents=True, exist_ok=True)
    (out_dir / "graphs").mkdir(parents=True, exist_ok=True)
    if build_cfg is None:
        build_cfg = GraphBuildConfig()
    patients = [f"p{idx:04d}" for idx in range(cfg.n_patients)]
    tasks = [
        (cfg, build_cfg, str(out_dir), pid, p_idx, t_idx, seed)
        for p_idx, pid in enumerate(patients)
        for t_idx in range(cfg.samples_per_patient)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_emit_one, tasks))
    else:
        results = [_emit_one(t) for t in tasks]

    all_files: list[str] = []
    label_records: list[LabelRecord] = []
    for written, label_rows in results:
        all_files.extend(written)
        for pid, tp, rater, endpoint, score in label_rows:
            label_records.append(LabelRecord(pid, tp, rater, Endpoint(endpoint), score))
    labels_path = out_dir / "labels.csv"
    write_labels(label_records, labels_path)
    roster_path = out_dir / "roster.csv"
    roster_path.write_text("\n".join(patients) + "\n")
    all_files += [str(labels_path), str(roster_path)]

    manifest = {
        "seed": seed,
        "n_patients": cfg.n_patients,
        "samples_per_patient": cfg.samples_per_patient,
        "endpoint": cfg.endpoint.value,
        "files": {
            str(Path(f).relative_to(out_dir)): _file_sha256(Path(f))
            for f in sorted(all_files)
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
