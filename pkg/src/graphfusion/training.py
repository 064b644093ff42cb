"""Training loop: Adam on the cumulative-link likelihood with per-rater
biases, label-stratified minibatches, validation-loss early stopping, and
exhaustive grid search.

Each (sample, rater-label) pair contributes one loss term; the sample's
forward pass is shared across its raters. Rater biases are re-centered to
mean zero after every optimizer step. The returned model carries the
parameters of the best validation checkpoint.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DatasetSplit, Endpoint, PairedSample, assert_split_disjoint
from .encoder import fit_normalizer
from .errors import ContractError, NonFiniteError
from .model import (
    Model,
    ModelConfig,
    UNIMODAL_A,
    UNIMODAL_B,
    forward_latent,
    init_model,
    named_parameters,
    prepare_features,
    restore,
    snapshot,
)
from .ordinal import init_thresholds, ordinal_nll
from .tensor import AdamState, Tensor, adam_step
from .evaluation import consensus


@dataclass
class TrainConfig:
    endpoint: Endpoint
    strategy: str = "late_concat"
    max_iterations: int = 7000
    lr: float = 1e-4
    batch_size: int = 16
    val_every: int = 100
    patience: int = 10
    seed: int = 0
    d_h: int = 128
    n_conv_layers: int = 2
    sagpool_ratio: float = 0.5
    fusion_dim: int = 128
    readout: str = "mean"
    head_hidden: tuple[int, ...] | None = None
    head_dropout: float | None = None
    symmetric_edges: bool = False
    clamp_normalizer: bool = False
    kron_bilinear_gate: bool = False
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.endpoint, str):
            self.endpoint = Endpoint(self.endpoint)
        if self.max_iterations <= 0:
            raise ContractError("max_iterations must be positive")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")

    def model_config(self, d_in_a: int, d_in_b: int) -> ModelConfig:
        return ModelConfig(
            strategy=self.strategy,
            endpoint=self.endpoint,
            d_in_a=d_in_a,
            d_in_b=d_in_b,
            d_h=self.d_h,
            n_conv_layers=self.n_conv_layers,
            sagpool_ratio=self.sagpool_ratio,
            readout=self.readout,
            fusion_dim=self.fusion_dim,
            head_hidden=self.head_hidden,
            head_dropout=self.head_dropout,
            symmetric_edges=self.symmetric_edges,
            clamp_normalizer=self.clamp_normalizer,
            kron_bilinear_gate=self.kron_bilinear_gate,
        )


@dataclass
class TraceRow:
    iteration: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: Model
    trace: list[TraceRow]
    best_val_loss: float
    iterations_run: int
    aborted: bool = False


def _label_pairs(samples: list[PairedSample], endpoint: Endpoint, rater_index: dict[str, int]):
    """(sample position, rater index, 1-based class) triples."""
    rows, raters, classes = [], [], []
    for pos, s in enumerate(samples):
        for lbl in s.labels_for(endpoint):
            if lbl.rater_id not in rater_index:
                raise ContractError(f"unknown rater '{lbl.rater_id}' at training time")
            rows.append(pos)
            raters.append(rater_index[lbl.rater_id])
            classes.append(lbl.score + 1)
    return np.array(rows), np.array(raters), np.array(classes, dtype=np.int64)


def _batch_loss(model: Model, samples, feats, rows, raters, classes, training, rng) -> Tensor:
    latent = forward_latent(model, samples, features=feats, training=training, rng=rng)
    s_pairs = T.take_rows(latent, rows) + T.take_rows(model.biases.values, raters)
    alpha = model.ordinal.thresholds()
    return ordinal_nll(s_pairs, alpha, classes)


def _dataset_loss(model: Model, samples, feats, endpoint, rater_index, chunk: int = 64) -> float:
    """Mean pair loss over a whole split, eval mode, in manageable chunks."""
    total, count = 0.0, 0
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        rows, raters, classes = _label_pairs(part, endpoint, rater_index)
        if rows.size == 0:
            continue
        loss = _batch_loss(
            model, part, feats[start : start + chunk], rows, raters, classes, False, None
        )
        total += loss.item() * rows.size
        count += rows.size
    if count == 0:
        raise ContractError("no labels available for loss evaluation")
    return total / count


def train(config: TrainConfig, split: DatasetSplit, samples: list[PairedSample]) -> TrainResult:
    """Fit a model on the train split, early-stopping on validation loss."""
    assert_split_disjoint(split)
    by_id = {s.sample_id: s for s in samples}
    test_ids = set(split.test)
    train_samples = [by_id[i] for i in split.train]
    val_samples = [by_id[i] for i in split.val]
    assert not ({s.sample_id for s in train_samples} | {s.sample_id for s in val_samples}) & test_ids

    endpoint = config.endpoint
    train_samples = [s for s in train_samples if s.labels_for(endpoint)]
    val_samples = [s for s in val_samples if s.labels_for(endpoint)]
    if not train_samples or not val_samples:
        raise ContractError(f"train/val splits lack labels for endpoint {endpoint.value}")

    rater_ids = sorted(
        {l.rater_id for s in train_samples + val_samples for l in s.labels_for(endpoint)}
    )
    rater_index = {r: i for i, r in enumerate(rater_ids)}

    rng = np.random.default_rng(config.seed)
    d_in_a = train_samples[0].graph_a.node_features.shape[1]
    d_in_b = train_samples[0].graph_b.node_features.shape[1]
    model = init_model(config.model_config(d_in_a, d_in_b), rater_ids, rng)
    model.split = {"train": list(split.train), "val": list(split.val), "test": list(split.test)}

    # Normalizers see the training split only.
    if model.encoder_a is not None:
        model.encoder_a.norm_min, model.encoder_a.norm_max = fit_normalizer(
            [s.graph_a for s in train_samples]
        )
    if model.encoder_b is not None:
        model.encoder_b.norm_min, model.encoder_b.norm_max = fit_normalizer(
            [s.graph_b for s in train_samples]
        )

    all_train_scores = np.array(
        [l.score for s in train_samples for l in s.labels_for(endpoint)], dtype=np.int64
    )
    model.ordinal.raw_thresholds.data = init_thresholds(all_train_scores, model.config.n_classes)

    train_feats = prepare_features(model, train_samples)
    val_feats = prepare_features(model, val_samples)

    # Stratify batches by the consensus label bin.
    bins: dict[int, list[int]] = {}
    for i, s in enumerate(train_samples):
        c = consensus([l.score for l in s.labels_for(endpoint)])
        bins.setdefault(c, []).append(i)
    bin_keys = sorted(bins)

    params = named_parameters(model)
    param_list = list(params.values())
    adam = AdamState.for_params(param_list)

    best_snap = snapshot(model)
    best_val = float("inf")
    evals_since_best = 0
    trace: list[TraceRow] = []
    running_loss: list[float] = []
    aborted = False
    iterations = 0

    for it in range(1, config.max_iterations + 1):
        idx = [
            bins[bin_keys[(it + j) % len(bin_keys)]][
                rng.integers(len(bins[bin_keys[(it + j) % len(bin_keys)]]))
            ]
            for j in range(min(config.batch_size, len(train_samples)))
        ]
        batch = [train_samples[i] for i in idx]
        feats = [train_feats[i] for i in idx]
        rows, raters, classes = _label_pairs(batch, endpoint, rater_index)
        try:
            with T.Tape() as tape:
                loss = _batch_loss(model, batch, feats, rows, raters, classes, True, rng)
            tape.backward(loss)
        except NonFiniteError:
            aborted = True
            break
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in param_list
        ]
        adam_step(param_list, grads, adam, config.lr)
        model.biases.center()
        running_loss.append(loss.item())
        iterations = it

        if it % config.val_every == 0 or it == config.max_iterations:
            try:
                val_loss = _dataset_loss(model, val_samples, val_feats, endpoint, rater_index)
            except NonFiniteError:
                aborted = True
                break
            trace.append(TraceRow(it, float(np.mean(running_loss)), val_loss))
            running_loss = []
            if val_loss < best_val:
                best_val = val_loss
                best_snap = snapshot(model)
                evals_since_best = 0
            else:
                evals_since_best += 1
                if evals_since_best >= config.patience:
                    break

    restore(model, best_snap)
    if best_val == float("inf"):
        best_val = float(np.mean(running_loss)) if running_loss else float("nan")
    return TrainResult(model, trace, best_val, iterations, aborted)


def write_trace(trace: list[TraceRow], path) -> None:
    lines = ["iteration,train_loss,val_loss"]
    lines += [f"{r.iteration},{r.train_loss:.10g},{r.val_loss:.10g}" for r in trace]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

@dataclass
class GridTrial:
    index: int
    overrides: dict
    val_loss: float


def grid_search(
    config: TrainConfig,
    split: DatasetSplit,
    samples: list[PairedSample],
    out_path=None,
) -> tuple[TrainConfig, list[GridTrial]]:
    """Exhaustively train every grid point; ties keep the earliest trial.

    Axes are TrainConfig field names mapped to value lists, taken from
    ``config.grid``. The leaderboard preserves grid order.
    """
    if not config.grid:
        raise ContractError("grid_search needs a non-empty grid")
    axes = sorted(config.grid)
    for axis in axes:
        if not hasattr(config, axis):
            raise ContractError(f"unknown grid axis '{axis}'")
    leaderboard: list[GridTrial] = []
    best: tuple[float, int] | None = None
    best_config = config
    for index, combo in enumerate(itertools.product(*(config.grid[a] for a in axes))):
        overrides = dict(zip(axes, combo))
        trial_cfg = dataclasses.replace(config, grid={}, **overrides)
        result = train(trial_cfg, split, samples)
        leaderboard.append(GridTrial(index, overrides, result.best_val_loss))
        key = (result.best_val_loss, index)
        if best is None or key < best:
            best = key
            best_config = trial_cfg
    if out_path is not None:
        lines = ["index\tval_loss\toverrides"]
        lines += [
            f"{t.index}\t{t.val_loss:.10g}\t{json.dumps(t.overrides, sort_keys=True)}"
            for t in leaderboard
        ]
        Path(out_path).write_text("\n".join(lines) + "\n")
    return best_config, leaderboard
