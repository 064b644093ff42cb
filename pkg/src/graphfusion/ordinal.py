"""Gaussian cumulative-link ordinal model with per-rater bias terms.

A scalar latent score is mapped through ordered thresholds and the standard
normal CDF to class-interval probabilities. Thresholds are kept monotone by
construction: the first raw parameter is used as-is and each later threshold
adds a softplus increment. Rater biases shift the latent score during
training only; inference never touches them.

Classes are 1-based here (y in 1..K); dataset scores (0-based) convert at the
training boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

#: Probabilities below this are clamped before the log; each clamp increments
#: the module underflow counter.
PROB_FLOOR = 1e-300

_underflow_events = 0


def underflow_count() -> int:
    return _underflow_events


def reset_underflow_count() -> None:
    global _underflow_events
    _underflow_events = 0


def _note_underflow(n: int) -> None:
    global _underflow_events
    _underflow_events += n


@dataclass
class OrdinalParams:
    """Thresholds (reparameterized) plus the linear map onto the latent score."""

    n_classes: int
    raw_thresholds: Tensor  # (K-1,) unconstrained
    latent_weight: Tensor  # (d_head, 1)

    def thresholds(self) -> Tensor:
        """Effective non-decreasing thresholds."""
        return effective_thresholds(self.raw_thresholds)


@dataclass
class RaterBiases:
    """Per-rater additive latent offsets, centered to mean zero."""

    rater_ids: list[str]
    values: Tensor  # (R, 1)

    def index_of(self, rater_id: str) -> int:
        try:
            return self.rater_ids.index(rater_id)
        except ValueError:
            raise ContractError(f"unknown rater '{rater_id}'") from None

    def center(self) -> None:
        self.values.data -= self.values.data.mean()

    def as_dict(self) -> dict[str, float]:
        return {r: float(v) for r, v in zip(self.rater_ids, self.values.data[:, 0])}


def effective_thresholds(raw: Tensor) -> Tensor:
    """Map unconstrained parameters to non-decreasing thresholds.

    alpha_1 = raw_1 and alpha_i = alpha_{i-1} + softplus(raw_i), so the
    ordering constraint holds for any parameter values.
    """
    if raw.data.ndim != 1 or raw.data.size < 1:
        raise ContractError(f"raw thresholds must be a non-empty vector, got {raw.shape}")
    k1 = raw.data.size
    first = T.take_rows(raw, np.array([0]))
    if k1 == 1:
        return first
    rest = T.softplus(T.take_rows(raw, np.arange(1, k1)))
    return T.cumsum(T.concat([first, rest], axis=0))


def _check_monotone(alpha: np.ndarray) -> None:
    if np.any(np.diff(alpha) < 0):
        raise ContractError(f"thresholds must be non-decreasing, got {alpha}")


def cl_probs(s: float, alpha: np.ndarray) -> np.ndarray:
    """Class probabilities for latent score ``s`` under thresholds ``alpha``.

    p_1 = Phi(a_1 - s), p_y = Phi(a_y - s) - Phi(a_{y-1} - s) for interior
    classes, and p_K takes the remaining mass.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    _check_monotone(alpha)
    cdf = 0.5 * special.erfc(-(alpha - s) / np.sqrt(2.0))
    return np.diff(np.concatenate([[0.0], cdf, [1.0]]))


def predict(s: float, alpha: np.ndarray) -> int:
    """Most probable class in 1..K; ties resolve to the lower class."""
    return int(np.argmax(cl_probs(s, alpha))) + 1


def predict_batch(scores: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Vectorized ``predict`` over a score vector."""
    alpha = np.asarray(alpha, dtype=np.float64)
    _check_monotone(alpha)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1, 1)
    cdf = 0.5 * special.erfc(-(alpha[None, :] - scores) / np.sqrt(2.0))
    full = np.concatenate(
        [np.zeros((len(scores), 1)), cdf, np.ones((len(scores), 1))], axis=1
    )
    return np.argmax(np.diff(full, axis=1), axis=1) + 1


def apply_rater_bias(s: Tensor, rater_id: str, biases: RaterBiases) -> Tensor:
    """Shift a latent score by one rater's bias (training path only)."""
    idx = biases.index_of(rater_id)
    return s + T.take_rows(biases.values, np.array([idx]))


def cl_loss(s: Tensor, alpha: Tensor, y: int) -> Tensor:
    """Negative log-likelihood of observing class ``y`` (scalar tensor)."""
    k = alpha.data.size + 1
    if not 1 <= y <= k:
        raise ContractError(f"class {y} outside 1..{k}")
    return ordinal_nll(
        T.reshape(s, (1, 1)), alpha, np.array([y], dtype=np.int64)
    )


def ordinal_nll(scores: Tensor, alpha: Tensor, y: np.ndarray) -> Tensor:
    """Mean cumulative-link NLL over rows of ``scores``.

    ``scores`` is (n, 1), ``y`` holds 1-based classes. Rows are grouped by
    class category (first, interior, last) so the whole batch costs a handful
    of tensor ops. Probabilities are clamped at PROB_FLOOR before the log.
    """
    _check_monotone(alpha.data)
    y = np.asarray(y, dtype=np.int64)
    n = scores.shape[0]
    if y.shape != (n,):
        raise ContractError(f"labels shape {y.shape} != scores rows {n}")
    k = alpha.data.size + 1
    if y.min() < 1 or y.max() > k:
        raise ContractError(f"classes must lie in 1..{k}")
    pieces = []
    low = np.nonzero(y == 1)[0]
    mid = np.nonzero((y > 1) & (y < k))[0]
    high = np.nonzero(y == k)[0]
    if low.size:
        s_low = T.take_rows(scores, low)
        a1 = T.reshape(T.take_rows(alpha, np.array([0])), (1, 1))
        pieces.append(T.gauss_cdf(a1 - s_low))
    if mid.size:
        s_mid = T.take_rows(scores, mid)
        upper = T.reshape(T.take_rows(alpha, y[mid] - 1), (mid.size, 1))
        lower = T.reshape(T.take_rows(alpha, y[mid] - 2), (mid.size, 1))
        p = T.gauss_cdf(upper - s_mid) - T.gauss_cdf(lower - s_mid)
        pieces.append(p)
    if high.size:
        s_high = T.take_rows(scores, high)
        atop = T.reshape(T.take_rows(alpha, np.array([k - 2])), (1, 1))
        p = 1.0 - T.gauss_cdf(atop - s_high)
        pieces.append(p)
    probs = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)
    n_clamped = int((probs.data <= PROB_FLOOR).sum())
    if n_clamped:
        _note_underflow(n_clamped)
    probs = T.clamp_min(probs, PROB_FLOOR)
    return T.sum_all(T.neg(T.log(probs))) * Tensor(1.0 / n)


def init_thresholds(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Raw threshold init from the label marginal.

    Effective thresholds start at the Gaussian quantiles of the cumulative
    label frequencies, so an all-zero latent score reproduces the marginal.
    Returns the raw (pre-softplus) parameter vector.
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    counts = np.maximum(counts, 0.5)  # keep empty bins from degenerate quantiles
    cum = np.cumsum(counts)[:-1] / counts.sum()
    alpha = special.ndtri(np.clip(cum, 1e-6, 1.0 - 1e-6))
    gaps = np.maximum(np.diff(alpha), 1e-3)
    # invert softplus for the increments
    raw_rest = np.log(np.expm1(gaps))
    return np.concatenate([[alpha[0]], raw_rest])
