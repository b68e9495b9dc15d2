"""Correlation of metric scores with human ratings."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import betainc, erfc


class UndefinedCorrelationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PairedSeries:
    ids: tuple[str, ...]
    metric: np.ndarray
    human: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.metric, dtype=np.float64)
        h = np.asarray(self.human, dtype=np.float64)
        if m.shape != h.shape or m.ndim != 1 or len(self.ids) != m.size:
            raise ValueError("ids, metric and human values must have equal lengths")
        if m.size < 3:
            raise ValueError("need at least 3 paired values")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(h))):
            raise ValueError("non-finite value in paired series")
        object.__setattr__(self, "metric", m)
        object.__setattr__(self, "human", h)

    @classmethod
    def from_arrays(cls, x: Sequence[float], y: Sequence[float]) -> "PairedSeries":
        return cls(tuple(str(i) for i in range(len(x))), np.asarray(x), np.asarray(y))


def _xy(s):
    if isinstance(s, PairedSeries):
        return s.metric, s.human
    x, y = s
    ps = PairedSeries.from_arrays(x, y)
    return ps.metric, ps.human


def t_test_p(r: float, n: int) -> float:
    """Two-sided p of a correlation coefficient under the Student-t approximation."""
    df = n - 2
    if abs(r) >= 1.0:
        return 0.0
    t2 = r * r * df / (1.0 - r * r)
    return float(min(1.0, betainc(df / 2.0, 0.5, df / (df + t2))))


def _pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    xm = x - x.mean()
    ym = y - y.mean()
    sxx, syy = float(np.dot(xm, xm)), float(np.dot(ym, ym))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant series")
    return max(-1.0, min(1.0, float(np.dot(xm, ym)) / math.sqrt(sxx * syy)))


def pearson(s: PairedSeries | tuple) -> tuple[float, float]:
    x, y = _xy(s)
    r = _pearson_r(x, y)
    return r, t_test_p(r, x.size)


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(s: PairedSeries | tuple) -> tuple[float, float]:
    x, y = _xy(s)
    rho = _pearson_r(average_ranks(x), average_ranks(y))
    return rho, t_test_p(rho, x.size)


def spearman_permutation_p(s: PairedSeries | tuple, n_perm: int = 10000, seed: int = 0) -> float:
    """Monte-Carlo two-sided permutation p for Spearman's rho."""
    x, y = _xy(s)
    rx, ry = average_ranks(x), average_ranks(y)
    obs = abs(_pearson_r(rx, ry))
    rng = np.random.default_rng(seed)
    hits = sum(abs(_pearson_r(rx, rng.permutation(ry))) >= obs - 1e-12 for _ in range(n_perm))
    return (hits + 1) / (n_perm + 1)


def _tie_groups(sorted_vals: np.ndarray) -> np.ndarray:
    if sorted_vals.size == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(np.diff(sorted_vals) != 0) + 1
    bounds = np.concatenate([[0], change, [sorted_vals.size]])
    return np.diff(bounds)


def _count_inversions(seq: np.ndarray) -> int:
    """Pairs i < j with seq[i] > seq[j], via a Fenwick tree over value ranks."""
    _, ranks = np.unique(seq, return_inverse=True)
    size = int(ranks.max()) + 1 if ranks.size else 0
    tree = [0] * (size + 1)
    inversions = 0
    seen = 0
    for r in ranks.tolist():
        # elements seen so far with rank <= r
        i, le = r + 1, 0
        while i > 0:
            le += tree[i]
            i -= i & -i
        inversions += seen - le
        i = r + 1
        while i <= size:
            tree[i] += 1
            i += i & -i
        seen += 1
    return inversions


def kendall_tau_b(s: PairedSeries | tuple) -> tuple[float, float]:
    """Tie-corrected Kendall tau and its normal-approximation p value.

    Uses Knight's sort-and-count algorithm in O(n log n).
    """
    x, y = _xy(s)
    n = x.size
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]

    tx = _tie_groups(xs)
    ty = _tie_groups(np.sort(y))
    # joint ties: consecutive equal (x, y) pairs after the lexicographic sort
    same = np.concatenate([[False], (np.diff(xs) == 0) & (np.diff(ys) == 0)])
    starts = np.flatnonzero(~same)
    txy = np.diff(np.concatenate([starts, [n]]))

    pairs = lambda t: int((t * (t - 1) // 2).sum())  # noqa: E731
    n0 = n * (n - 1) // 2
    n1, n2, n3 = pairs(tx), pairs(ty), pairs(txy)
    if n0 == n1 or n0 == n2:
        raise UndefinedCorrelationError("Kendall tau-b undefined: a series is entirely tied")
    discordant = _count_inversions(ys)
    s_stat = n0 - n1 - n2 + n3 - 2 * discordant
    tau = s_stat / math.sqrt((n0 - n1) * (n0 - n2))
    tau = max(-1.0, min(1.0, tau))

    tx, ty = tx.astype(np.float64), ty.astype(np.float64)
    var = (
        n * (n - 1) * (2 * n + 5)
        - float((tx * (tx - 1) * (2 * tx + 5)).sum())
        - float((ty * (ty - 1) * (2 * ty + 5)).sum())
    ) / 18.0
    var += float((tx * (tx - 1) * (tx - 2)).sum()) * float((ty * (ty - 1) * (ty - 2)).sum()) / (9.0 * n * (n - 1) * (n - 2))
    var += float((tx * (tx - 1)).sum()) * float((ty * (ty - 1)).sum()) / (2.0 * n * (n - 1))
    p = 1.0 if var <= 0 else float(min(1.0, erfc(abs(s_stat) / math.sqrt(2.0 * var))))
    return tau, p


def p_value_significance(p: float, alpha: float = 0.05) -> bool:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p value {p} outside [0, 1]")
    return p < alpha


# -- reports -------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationRow:
    metric: str
    dataset: str
    n: int
    pearson: float
    pearson_p: float
    spearman: float
    spearman_p: float
    kendall: float
    kendall_p: float
    alpha: float = 0.05

    def significant(self, which: str) -> bool:
        return p_value_significance(getattr(self, f"{which}_p"), self.alpha)


@dataclass
class CorrelationReport:
    rows: list[CorrelationRow] = field(default_factory=list)

    def extend(self, other: "CorrelationReport") -> "CorrelationReport":
        self.rows.extend(other.rows)
        return self

    @property
    def datasets(self) -> list[str]:
        return list(dict.fromkeys(r.dataset for r in self.rows))

    @property
    def metrics(self) -> list[str]:
        return list(dict.fromkeys(r.metric for r in self.rows))

    def row(self, metric: str, dataset: str) -> CorrelationRow | None:
        for r in self.rows:
            if r.metric == metric and r.dataset == dataset:
                return r
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "dataset", "n", "pearson", "pearson_p", "spearman", "spearman_p", "kendall", "kendall_p",
                    "pearson_significant", "spearman_significant", "kendall_significant"])
        for r in self.rows:
            w.writerow([r.metric, r.dataset, r.n, repr(r.pearson), repr(r.pearson_p), repr(r.spearman), repr(r.spearman_p),
                        repr(r.kendall), repr(r.kendall_p),
                        int(r.significant("pearson")), int(r.significant("spearman")), int(r.significant("kendall"))])
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table, one row per metric, three columns per dataset.

        Non-significant coefficients (p >= alpha) carry a trailing ``*``.
        """
        datasets, metrics = self.datasets, self.metrics
        head1 = ["" ] + [d for d in datasets for _ in range(3)]
        head2 = ["Metric"] + ["Pearson", "Spearman", "Kendall"] * len(datasets)
        body = []
        for m in metrics:
            cells = [m]
            for d in datasets:
                r = self.row(m, d)
                if r is None:
                    cells += ["N/A"] * 3
                    continue
                for which in ("pearson", "spearman", "kendall"):
                    v = getattr(r, which)
                    cells.append(f"{v:.3f}" + ("" if r.significant(which) else "*"))
            body.append(cells)
        table = [head1, head2] + body
        widths = [max(len(row[i]) for row in table) for i in range(len(head2))]
        lines = []
        for k, row in enumerate(table):
            first = row[0].ljust(widths[0])
            rest = [c.rjust(widths[i + 1]) for i, c in enumerate(row[1:])]
            lines.append("  ".join([first] + rest).rstrip())
            if k == 1:
                lines.append("-" * len(lines[-1]))
        alpha = self.rows[0].alpha if self.rows else 0.05
        lines.append(f"* not significant (p >= {alpha:g})")
        return "\n".join(lines) + "\n"


def correlate(series: PairedSeries, metric: str, dataset: str, alpha: float = 0.05) -> CorrelationRow:
    r, rp = pearson(series)
    rho, rhop = spearman(series)
    tau, taup = kendall_tau_b(series)
    return CorrelationRow(metric, dataset, len(series.ids), r, rp, rho, rhop, tau, taup, alpha)


def run_benchmark(
    scores: Mapping[str, Mapping[str, float]],
    human: Mapping[str, float],
    dataset: str = "dataset",
    alpha: float = 0.05,
) -> CorrelationReport:
    ids = sorted(human)
    gaps = {m: sorted(set(ids) - set(vals)) for m, vals in scores.items()}
    gaps = {m: g for m, g in gaps.items() if g}
    if gaps:
        detail = "; ".join(f"{m}: {', '.join(g[:10])}" + (" ..." if len(g) > 10 else "") for m, g in gaps.items())
        raise KeyError(f"metrics missing rated ids ({detail})")
    hv = np.array([human[i] for i in ids], dtype=np.float64)
    report = CorrelationReport()
    for m, vals in scores.items():
        series = PairedSeries(tuple(ids), np.array([vals[i] for i in ids], dtype=np.float64), hv)
        report.rows.append(correlate(series, m, dataset, alpha))
    return report


def write_report(report: CorrelationReport, csv_path: str | Path | None = None, table_path: str | Path | None = None) -> None:
    if csv_path is not None:
        Path(csv_path).write_text(report.to_csv(), encoding="utf-8")
    if table_path is not None:
        Path(table_path).write_text(report.to_table(), encoding="utf-8")
