"""Scoring of estimates against ground truth: optimal matching, error bands,
and binary fault/no-fault contingency counts over the candidate grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .fibermodel import FiberLink

__all__ = [
    "MatchResult",
    "ContingencyTable",
    "match_events",
    "stratify_errors",
    "contingency",
    "ERROR_BANDS",
    "format_band_table",
    "format_contingency_table",
]

ERROR_BANDS = ((0.0, 50.0), (50.0, 100.0), (100.0, 200.0), (200.0, math.inf))
DEFAULT_RADIUS_M = 50.0


@dataclass(frozen=True)
class MatchResult:
    """One-to-one pairing of truth events and estimates, smallest total
    distance first; the radius only classifies pairs downstream."""

    pairs: tuple[tuple[float, float, float], ...]   # (truth_pos, estimate_pos, error)
    unmatched_truths: tuple[float, ...]
    unmatched_estimates: tuple[float, ...]
    radius: float


@dataclass(frozen=True)
class ContingencyTable:
    true_positives: int
    false_positives: int
    false_negatives: int
    true_negatives: int

    def _ratio(self, num: int, den: int) -> float | None:
        return None if den == 0 else num / den

    @property
    def sensitivity(self) -> float | None:
        return self._ratio(self.true_positives, self.true_positives + self.false_negatives)

    @property
    def specificity(self) -> float | None:
        return self._ratio(self.true_negatives, self.true_negatives + self.false_positives)

    @property
    def precision(self) -> float | None:
        return self._ratio(self.true_positives, self.true_positives + self.false_positives)


def match_events(truth: FiberLink | np.ndarray, estimates, radius: float = DEFAULT_RADIUS_M) -> MatchResult:
    """Assign estimates to truth positions minimizing total absolute error."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    t = truth.positions if isinstance(truth, FiberLink) else np.asarray(truth, dtype=float)
    e = np.asarray([getattr(x, "position_m", x) for x in estimates], dtype=float)
    if t.size == 0 or e.size == 0:
        return MatchResult((), tuple(t.tolist()), tuple(e.tolist()), radius)
    cost = np.abs(t[:, None] - e[None, :])
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(
        (float(t[i]), float(e[j]), float(cost[i, j])) for i, j in zip(rows, cols)
    )
    ut = tuple(float(t[i]) for i in range(t.size) if i not in set(rows))
    ue = tuple(float(e[j]) for j in range(e.size) if j not in set(cols))
    return MatchResult(pairs, ut, ue, radius)


def stratify_errors(matches: list[MatchResult]) -> dict:
    """Percentage of truth events per error band; a missed truth counts in
    the open top band (its position error is unbounded)."""
    errors: list[float] = []
    for m in matches:
        errors.extend(err for _, _, err in m.pairs)
        errors.extend(math.inf for _ in m.unmatched_truths)
    n = len(errors)
    if n == 0:
        raise ValueError("no truth events to stratify")
    counts = []
    for lo, hi in ERROR_BANDS:
        if lo == 0.0:
            c = sum(1 for e in errors if lo <= e <= hi)
        else:
            c = sum(1 for e in errors if lo < e <= hi) if math.isfinite(hi) else sum(
                1 for e in errors if e > lo
            )
        counts.append(c)
    return {
        "bands_m": [[lo, hi] for lo, hi in ERROR_BANDS],
        "counts": counts,
        "percent": [100.0 * c / n for c in counts],
        "total_events": n,
    }


def contingency(matches: list[MatchResult], grid_sizes: list[int],
                radius: float = DEFAULT_RADIUS_M) -> ContingencyTable:
    """Binary classification over all candidate grid positions.

    A pair within the radius is a true positive; over-radius pairs count
    once as a false negative (the truth went undetected) and once as a
    false positive (the estimate marks an empty position). True negatives
    are the remaining grid positions.
    """
    if len(matches) != len(grid_sizes):
        raise ValueError("need one grid size per matched link")
    tp = fp = fn = 0
    for m in matches:
        for _, _, err in m.pairs:
            if err <= radius:
                tp += 1
            else:
                fn += 1
                fp += 1
        fn += len(m.unmatched_truths)
        fp += len(m.unmatched_estimates)
    tn = int(sum(grid_sizes)) - tp - fp - fn
    return ContingencyTable(tp, fp, fn, tn)


def _fmt_pct(x: float | None) -> str:
    return "undefined" if x is None else f"{100.0 * x:.2f}%"


def format_band_table(per_mode_per_set: dict[str, dict[str, dict]]) -> str:
    """Text table: rows are error bands, column groups are fault-count sets.

    ``per_mode_per_set[set_label][mode]`` holds a :func:`stratify_errors`
    result.
    """
    set_labels = list(per_mode_per_set)
    modes = list(next(iter(per_mode_per_set.values())))
    band_names = ["[0, 50]", "(50, 100]", "(100, 200]", "(200, inf)"]
    header1 = f"{'Error [m]':<12}" + "".join(f"{s:^{12 * len(modes)}}" for s in set_labels)
    header2 = f"{'':<12}" + "".join(f"{m:>12}" for _ in set_labels for m in modes)
    lines = [header1, header2, "-" * len(header2)]
    for bi, name in enumerate(band_names):
        cells = []
        for s in set_labels:
            for m in modes:
                cells.append(f"{per_mode_per_set[s][m]['percent'][bi]:>11.2f}%")
        lines.append(f"{name:<12}" + "".join(cells))
    return "\n".join(lines)


def format_contingency_table(per_mode: dict[str, ContingencyTable], radius: float) -> str:
    modes = list(per_mode)
    lines = [f"Contingency (+/- {radius:g} m)", ""]
    header = f"{'':<18}" + "".join(f"{m:>14}" for m in modes)
    lines.append(header)
    rows = [
        ("True Positives", lambda t: str(t.true_positives)),
        ("False Positives", lambda t: str(t.false_positives)),
        ("False Negatives", lambda t: str(t.false_negatives)),
        ("True Negatives", lambda t: str(t.true_negatives)),
        ("Sensitivity", lambda t: _fmt_pct(t.sensitivity)),
        ("Specificity", lambda t: _fmt_pct(t.specificity)),
        ("Precision", lambda t: _fmt_pct(t.precision)),
    ]
    for name, get in rows:
        lines.append(f"{name:<18}" + "".join(f"{get(per_mode[m]):>14}" for m in modes))
    return "\n".join(lines)
