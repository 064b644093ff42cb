"""Agreement metrics and reports.

Model and rater performance is summarized as linearly weighted Cohen's kappa
against consensus (median) scores, with bootstrap confidence intervals from
resampling samples with replacement. Reports render as delimited text, a
fixed-width table of ``mean [lo,hi]`` cells, and an optional SVG bar chart
with CI whiskers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Endpoint, ENDPOINT_CLASSES, PairedSample
from .errors import ContractError


def consensus(scores: list[int]) -> int:
    """Median rater score; even counts take the lower median to stay integer."""
    if not scores:
        raise ContractError("consensus of zero scores")
    ordered = sorted(scores)
    return ordered[(len(ordered) - 1) // 2]


def _linear_weights(k: int) -> np.ndarray:
    idx = np.arange(k)
    if k == 1:
        return np.ones((1, 1))
    return 1.0 - np.abs(idx[:, None] - idx[None, :]) / (k - 1)


def weighted_kappa(a, b, n_classes: int) -> tuple[float, bool]:
    """Linearly weighted Cohen's kappa between two rating vectors.

    Weights are w_ij = 1 - |i-j|/(K-1); observed agreement is the mean pair
    weight and expected agreement comes from the marginals. Returns
    (kappa, degenerate): when both marginals are concentrated so expected
    agreement is 1, kappa is defined as 1.0 for identical ratings and 0.0
    otherwise, and the degenerate flag is set.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ContractError(f"rating vectors must be equal-length 1-d, got {a.shape}, {b.shape}")
    if a.size and (min(a.min(), b.min()) < 0 or max(a.max(), b.max()) >= n_classes):
        raise ContractError(f"ratings must lie in [0, {n_classes - 1}]")
    w = _linear_weights(n_classes)
    n = a.size
    p_obs = float(w[a, b].mean())
    marg_a = np.bincount(a, minlength=n_classes) / n
    marg_b = np.bincount(b, minlength=n_classes) / n
    p_exp = float(marg_a @ w @ marg_b)
    if abs(1.0 - p_exp) < 1e-15:
        return (1.0 if np.array_equal(a, b) else 0.0), True
    return (p_obs - p_exp) / (1.0 - p_exp), False


@dataclass
class KappaEstimate:
    label: str
    endpoint: Endpoint
    kappa: float
    boot_mean: float
    ci_low: float
    ci_high: float
    n_resamples: int
    n_samples: int
    degenerate_resamples: int = 0


@dataclass
class EvalReport:
    entries: list[KappaEstimate] = field(default_factory=list)


def bootstrap_kappa(
    a,
    b,
    n_classes: int,
    label: str,
    endpoint: Endpoint,
    n_resamples: int = 400,
    seed: int = 0,
) -> KappaEstimate:
    """Bootstrap the weighted kappa by resampling rating pairs with replacement."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.size < 2:
        raise ContractError("bootstrap needs at least 2 rated samples")
    point, _ = weighted_kappa(a, b, n_classes)
    rng = np.random.default_rng(seed)
    stats = np.empty(n_resamples)
    degenerate = 0
    for i in range(n_resamples):
        idx = rng.integers(0, a.size, size=a.size)
        stats[i], flag = weighted_kappa(a[idx], b[idx], n_classes)
        degenerate += int(flag)
    return KappaEstimate(
        label=label,
        endpoint=endpoint,
        kappa=point,
        boot_mean=float(stats.mean()),
        ci_low=float(np.percentile(stats, 2.5)),
        ci_high=float(np.percentile(stats, 97.5)),
        n_resamples=n_resamples,
        n_samples=int(a.size),
        degenerate_resamples=degenerate,
    )


def consensus_scores(
    samples: list[PairedSample], endpoint: Endpoint, exclude_rater: str | None = None
) -> tuple[list[int], np.ndarray]:
    """Per-sample consensus; optionally leave one rater out.

    Returns (positions, consensus) over samples that still have labels.
    """
    positions, values = [], []
    for i, s in enumerate(samples):
        scores = [
            l.score for l in s.labels_for(endpoint) if l.rater_id != exclude_rater
        ]
        if scores:
            positions.append(i)
            values.append(consensus(scores))
    return positions, np.asarray(values, dtype=np.int64)


def evaluate_predictions(
    preds: np.ndarray,
    samples: list[PairedSample],
    endpoint: Endpoint,
    label: str,
    n_resamples: int = 400,
    seed: int = 0,
) -> KappaEstimate:
    """Kappa of model predictions against the all-rater consensus."""
    positions, cons = consensus_scores(samples, endpoint)
    if len(positions) != len(samples):
        preds = preds[positions]
    return bootstrap_kappa(
        preds, cons, ENDPOINT_CLASSES[endpoint], label, endpoint, n_resamples, seed
    )


def pathologist_baseline(
    samples: list[PairedSample],
    endpoint: Endpoint,
    n_resamples: int = 400,
    seed: int = 0,
    leave_one_out: bool = True,
) -> KappaEstimate | None:
    """Pooled rater-vs-consensus kappa, the human reference row.

    Each rater's scores are compared to the consensus of the remaining raters
    (or of all raters when ``leave_one_out`` is off); pairs pool across
    raters. Bootstrap resamples samples, keeping all of a sample's raters
    together. Returns None when no sample has two raters.
    """
    raters = sorted({l.rater_id for s in samples for l in s.labels_for(endpoint)})
    per_sample_pairs: list[list[tuple[int, int]]] = []
    for s in samples:
        pairs = []
        for rater in raters:
            mine = [l.score for l in s.labels_for(endpoint) if l.rater_id == rater]
            if not mine:
                continue
            others = [
                l.score
                for l in s.labels_for(endpoint)
                if not (leave_one_out and l.rater_id == rater)
            ]
            if not others:
                continue
            pairs.append((mine[0], consensus(others)))
        if pairs:
            per_sample_pairs.append(pairs)
    if not per_sample_pairs or sum(len(p) for p in per_sample_pairs) < 2:
        return None
    k = ENDPOINT_CLASSES[endpoint]
    flat = np.array([p for pairs in per_sample_pairs for p in pairs], dtype=np.int64)
    point, _ = weighted_kappa(flat[:, 0], flat[:, 1], k)
    rng = np.random.default_rng(seed)
    n = len(per_sample_pairs)
    stats = np.empty(n_resamples)
    degenerate = 0
    for i in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        sel = np.array(
            [p for j in idx for p in per_sample_pairs[j]], dtype=np.int64
        )
        stats[i], flag = weighted_kappa(sel[:, 0], sel[:, 1], k)
        degenerate += int(flag)
    return KappaEstimate(
        label="pathologist",
        endpoint=endpoint,
        kappa=point,
        boot_mean=float(stats.mean()),
        ci_low=float(np.percentile(stats, 2.5)),
        ci_high=float(np.percentile(stats, 97.5)),
        n_resamples=n_resamples,
        n_samples=n,
        degenerate_resamples=degenerate,
    )


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

REPORT_HEADER = (
    "label,endpoint,kappa,boot_mean,ci_low,ci_high,n_resamples,n_samples,degenerate_resamples"
)


def write_report(report: EvalReport, path) -> None:
    lines = [REPORT_HEADER]
    for e in report.entries:
        lines.append(
            f"{e.label},{e.endpoint.value},{e.kappa:.10g},{e.boot_mean:.10g},"
            f"{e.ci_low:.10g},{e.ci_high:.10g},{e.n_resamples},{e.n_samples},"
            f"{e.degenerate_resamples}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> EvalReport:
    report = EvalReport()
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line == REPORT_HEADER:
            continue
        f = line.split(",")
        report.entries.append(
            KappaEstimate(
                label=f[0],
                endpoint=Endpoint(f[1]),
                kappa=float(f[2]),
                boot_mean=float(f[3]),
                ci_low=float(f[4]),
                ci_high=float(f[5]),
                n_resamples=int(f[6]),
                n_samples=int(f[7]),
                degenerate_resamples=int(f[8]),
            )
        )
    return report


def format_cell(e: KappaEstimate) -> str:
    return f"{e.boot_mean:.2f} [{e.ci_low:.2f},{e.ci_high:.2f}]"


def render_table(entries: list[KappaEstimate]) -> str:
    """Rows are model labels, columns are endpoints, cells are mean [lo,hi]."""
    labels = list(dict.fromkeys(e.label for e in entries))
    endpoints = list(dict.fromkeys(e.endpoint for e in entries))
    by_key = {(e.label, e.endpoint): e for e in entries}
    widths = [max(len(l) for l in labels + ["model"])]
    header = ["model"] + [ep.value for ep in endpoints]
    rows = []
    for label in labels:
        row = [label]
        for ep in endpoints:
            e = by_key.get((label, ep))
            row.append(format_cell(e) if e else "-")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for row in rows:
        out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(out) + "\n"


def render_svg(entries: list[KappaEstimate], title: str = "weighted kappa") -> str:
    """Bar chart with CI whiskers, one group of bars per endpoint."""
    if not entries:
        return '<svg xmlns="http://www.w3.org/2000/svg" width="10" height="10"/>'
    bar_w, gap, left, top, plot_h = 34, 14, 60, 30, 220
    n = len(entries)
    width = left + n * (bar_w + gap) + 30
    height = top + plot_h + 90
    lo = min(0.0, min(e.ci_low for e in entries))
    hi = max(1.0, max(e.ci_high for e in entries))

    def y_of(v: float) -> float:
        return top + plot_h * (hi - v) / (hi - lo)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{left}" y="16" font-size="13" font-family="monospace">{title}</text>',
        f'<line x1="{left - 8}" y1="{y_of(0):.1f}" x2="{width - 10}" y2="{y_of(0):.1f}" stroke="#888"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(
            f'<text x="4" y="{y_of(tick) + 4:.1f}" font-size="10" font-family="monospace">{tick:.2f}</text>'
        )
    for i, e in enumerate(entries):
        x = left + i * (bar_w + gap)
        y1 = y_of(max(e.boot_mean, 0.0))
        y0 = y_of(0.0)
        h = abs(y0 - y1)
        ytop = min(y0, y1)
        parts.append(
            f'<rect x="{x}" y="{ytop:.1f}" width="{bar_w}" height="{h:.1f}" fill="#4477aa"/>'
        )
        cx = x + bar_w / 2
        parts.append(
            f'<line x1="{cx}" y1="{y_of(e.ci_low):.1f}" x2="{cx}" y2="{y_of(e.ci_high):.1f}" stroke="#222" stroke-width="2"/>'
        )
        for v in (e.ci_low, e.ci_high):
            parts.append(
                f'<line x1="{cx - 6}" y1="{y_of(v):.1f}" x2="{cx + 6}" y2="{y_of(v):.1f}" stroke="#222" stroke-width="2"/>'
            )
        parts.append(
            f'<text x="{cx:.1f}" y="{top + plot_h + 14}" font-size="9" font-family="monospace" '
            f'transform="rotate(45 {cx:.1f} {top + plot_h + 14})">{e.label}:{e.endpoint.value}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
