"""
Scoring for reward matrices and trajectories.

pass^k is the chance that k independent trials of a task all succeed,
averaged over tasks: mean of C(c, k) / C(n, k). It is computed with exact
fractions; decimals appear only when a score is displayed.
"""

import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal, localcontext
from fractions import Fraction
from math import comb
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set

import numpy as np

from runner import RewardMatrix, Trajectory

logger = logging.getLogger(__name__)

SCORE_PLACES = 4


class MetricsUsageError(ValueError):
    pass


class EmptyMatrixError(MetricsUsageError):
    pass


class EmptySetError(ValueError):
    pass


# pass^k

def _check_k(matrix: RewardMatrix, k: int) -> int:
    if not matrix.rows:
        raise EmptyMatrixError("reward matrix has no rows")
    n = matrix.n
    if n is None:
        raise MetricsUsageError("rows have unequal trial counts")
    if k < 1 or k > n:
        raise MetricsUsageError(f"k must be between 1 and n={n}, got {k}")
    return n


def pass_hat_k(matrix: RewardMatrix, k: int) -> Fraction:
    _check_k(matrix, k)
    total = sum((Fraction(comb(row.c, k), comb(row.n, k)) for row in matrix.rows), Fraction(0))
    return total / len(matrix.rows)


def format_score(value: Any, places: int = SCORE_PLACES) -> str:
    """Fixed-point text, rounded half-to-even."""
    quantum = Decimal(1).scaleb(-places)
    with localcontext() as ctx:
        ctx.prec = 60
        if isinstance(value, Fraction):
            exact = Decimal(value.numerator) / Decimal(value.denominator)
        else:
            exact = Decimal(str(value))
        return str(exact.quantize(quantum, rounding=ROUND_HALF_EVEN))


@dataclass
class PassHatKReport:
    scores: Dict[int, Fraction]
    n: int
    K: int
    task_count: int
    exclusions: List[str] = field(default_factory=list)
    label: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "n": self.n,
            "K": self.K,
            "task_count": self.task_count,
            "exclusions": list(self.exclusions),
            "scores": {str(k): format_score(score) for k, score in self.scores.items()},
        }


def pass_hat_k_report(matrix: RewardMatrix, K: int, exclusions: Optional[Iterable[str]] = None,
                      label: str = "") -> PassHatKReport:
    applied = sorted(set(exclusions or ()) & set(matrix.task_ids))
    if exclusions:
        matrix = filter_tasks(matrix, set(exclusions))
    n = _check_k(matrix, K)
    scores = {k: pass_hat_k(matrix, k) for k in range(1, K + 1)}
    return PassHatKReport(scores=scores, n=n, K=K, task_count=len(matrix.rows), exclusions=applied, label=label)


# Task filtering

def filter_tasks(matrix: RewardMatrix, exclusions: Set[str]) -> RewardMatrix:
    known = set(matrix.task_ids)
    unknown = sorted(set(exclusions) - known)
    if unknown:
        logger.warning("Ignoring %d unknown excluded task id(s): %s", len(unknown), ", ".join(unknown))
    rows = [row for row in matrix.rows if row.task_id not in exclusions]
    return matrix.model_copy(update={"rows": rows})


def load_exclusions(path: str) -> Set[str]:
    """One task id per line; blank lines and '#' comments are skipped."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.split("#", 1)[0].strip() for line in f]
    return {line for line in lines if line}


def exclusions_from_tasks(tasks: Iterable[Any], flags: Iterable[str]) -> Set[str]:
    """Ids of tasks carrying any of the annotation flags (gt_error, ui_error)."""
    wanted = set(flags)
    return {task.id for task in tasks if wanted & set(task.annotations)}


def progressive_reports(matrix: RewardMatrix, K: int, gt_exclusions: Set[str],
                        ui_exclusions: Set[str]) -> List[PassHatKReport]:
    """All tasks, then without GT-error tasks, then without GT- and UI-error tasks."""
    return [
        pass_hat_k_report(matrix, K, label="all tasks"),
        pass_hat_k_report(matrix, K, gt_exclusions, label="without GT errors"),
        pass_hat_k_report(matrix, K, gt_exclusions | ui_exclusions, label="without GT+UI errors"),
    ]


def overall_score(domain_scores: Sequence[Any]) -> Decimal:
    """Unweighted mean of per-domain scores."""
    if not domain_scores:
        raise EmptySetError("no domain scores")
    values = [Decimal(str(score)) for score in domain_scores]
    return sum(values, Decimal(0)) / Decimal(len(values))


# Turns

@dataclass(frozen=True)
class TurnStats:
    count: int
    mean: float
    median: float
    histogram: Dict[int, int]


@dataclass(frozen=True)
class TurnComparison:
    label_a: str
    label_b: str
    mean_difference: float
    median_difference: float
    # Mean of a relative to b, in percent of b's mean.
    relative_percent: float


def turn_stats(trajectories: Sequence[Trajectory], success_only: bool = True) -> TurnStats:
    selected = [t for t in trajectories if t.reward == 1] if success_only else list(trajectories)
    if not selected:
        raise EmptySetError("no trajectories left to aggregate")
    turns = np.array([t.turn_count for t in selected])
    values, counts = np.unique(turns, return_counts=True)
    return TurnStats(
        count=len(selected),
        mean=float(np.mean(turns)),
        median=float(np.median(turns)),
        histogram={int(v): int(c) for v, c in zip(values, counts)},
    )


def compare_turns(stats_a: TurnStats, stats_b: TurnStats, label_a: str = "a", label_b: str = "b") -> TurnComparison:
    relative = (stats_a.mean - stats_b.mean) / stats_b.mean * 100.0 if stats_b.mean else 0.0
    return TurnComparison(
        label_a=label_a,
        label_b=label_b,
        mean_difference=stats_a.mean - stats_b.mean,
        median_difference=stats_a.median - stats_b.median,
        relative_percent=relative,
    )


# Rendering

def render_report_table(reports: Sequence[PassHatKReport], title: str = "PASS^K REPORT") -> str:
    K = max(report.K for report in reports)
    width = 30 + 8 * (K + 2)
    header = f"{'Tasks':<30}{'count':>8}{'n':>8}" + "".join(f"{f'k={k}':>8}" for k in range(1, K + 1))
    lines = ["=" * width, f" {title}", "=" * width, header, "-" * width]
    for report in reports:
        scores = "".join(f"{format_score(report.scores[k]):>8}" if k in report.scores else f"{'-':>8}"
                         for k in range(1, K + 1))
        lines.append(f"{(report.label or 'all tasks'):<30}{report.task_count:>8}{report.n:>8}{scores}")
    lines.append("=" * width)
    return "\n".join(lines)


def render_turn_stats(stats: TurnStats, label: str = "") -> str:
    histogram = ", ".join(f"{turns}: {count}" for turns, count in sorted(stats.histogram.items()))
    prefix = f"{label}: " if label else ""
    return (f"{prefix}{stats.count} trajectories, mean {stats.mean:.2f} turns, "
            f"median {stats.median:.1f} turns ({histogram})")


def render_turn_comparison(comparison: TurnComparison) -> str:
    return (f"{comparison.label_a} vs {comparison.label_b}: mean {comparison.mean_difference:+.2f} turns "
            f"({comparison.relative_percent:+.1f}%), median {comparison.median_difference:+.1f} turns")


def render_markdown(reports: Sequence[PassHatKReport], turns: Optional[TurnStats] = None,
                    title: str = "Results") -> str:
    K = max(report.K for report in reports)
    lines = [f"# {title}", "", "## pass^k", ""]
    lines.append("| Tasks | count | n | " + " | ".join(f"k={k}" for k in range(1, K + 1)) + " |")
    lines.append("|---|---:|---:|" + "---:|" * K)
    for report in reports:
        scores = " | ".join(format_score(report.scores[k]) if k in report.scores else "-" for k in range(1, K + 1))
        lines.append(f"| {report.label or 'all tasks'} | {report.task_count} | {report.n} | {scores} |")
        if report.exclusions:
            lines.append(f"| excluded: {', '.join(report.exclusions)} | | |" + " |" * K)
    if turns is not None:
        lines += ["", "## Turns in successful trials", "", f"- count: {turns.count}",
                  f"- mean: {turns.mean:.2f}", f"- median: {turns.median:.1f}", "", "| turns | trials |", "|---:|---:|"]
        lines += [f"| {t} | {c} |" for t, c in sorted(turns.histogram.items())]
    return "\n".join(lines) + "\n"
