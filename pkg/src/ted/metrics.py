"""Dataset metrics: pass@k family, max/mean progress, AUC, PPT and judge moments.

All functions are pure. Binomial ratios use exact integer arithmetic, so
results are correctly rounded for any n.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .judge import ProgressCurve, SubgoalAssessment

AUC_TURNS = "turns"  # integrate over [1, T_max], normalise by T_max - 1
AUC_ZERO = "zero"  # integrate over [0, T_max] with p(0) = 0, normalise by T_max


def _check_k(n: int, k: int) -> None:
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")


def count_successes(progresses: Sequence[float], threshold: float = 1.0) -> int:
    return sum(1 for p in progresses if p >= threshold)


def pass_at_k(progresses: Sequence[float], k: int, threshold: float = 1.0) -> float:
    """Probability that at least one of k trials drawn without replacement succeeds."""
    n = len(progresses)
    _check_k(n, k)
    c = count_successes(progresses, threshold)
    return float(1 - Fraction(math.comb(n - c, k), math.comb(n, k)))


def pass_hat_k(progresses: Sequence[float], k: int, threshold: float = 1.0) -> float:
    """Probability that all k trials drawn without replacement succeed."""
    n = len(progresses)
    _check_k(n, k)
    c = count_successes(progresses, threshold)
    return float(Fraction(math.comb(c, k), math.comb(n, k)))


def _first_k(per_sample: Mapping[str, Sequence[float]], k: int) -> dict[str, Sequence[float]]:
    if not per_sample:
        raise ValueError("no samples")
    out = {}
    for sample_id, values in per_sample.items():
        if len(values) < k:
            raise ValueError(f"sample {sample_id} has {len(values)} trials, fewer than k={k}")
        out[sample_id] = values[:k]
    return out


def max_progress_rate_at_k(per_sample: Mapping[str, Sequence[float]], k: int) -> float:
    """Mean over samples of the best final progress among the first k trials."""
    return max_over_trials(per_sample, k)


def mean_prog_at_k(per_sample: Mapping[str, Sequence[float]], k: int) -> float:
    trimmed = _first_k(per_sample, k)
    return statistics.fmean(statistics.fmean(v) for v in trimmed.values())


def max_over_trials(per_sample: Mapping[str, Sequence[float]], k: int) -> float:
    """Per-sample max of a per-trial metric over the first k trials, averaged over samples."""
    trimmed = _first_k(per_sample, k)
    return statistics.fmean(max(v) for v in trimmed.values())


def _values(curve: ProgressCurve | Sequence[float]) -> Sequence[float]:
    return curve.values if isinstance(curve, ProgressCurve) else curve


def auc(curve: ProgressCurve | Sequence[float], t_max: int | None = None, convention: str = AUC_TURNS) -> float:
    """Normalised trapezoidal area under p(1..T_max).

    A curve shorter than ``t_max`` is held flat at its last value.
    """
    values = list(_values(curve))
    if not values:
        raise ValueError("empty progress curve")
    t_max = t_max or len(values)
    if t_max < len(values):
        values = values[:t_max]
    values += [values[-1]] * (t_max - len(values))
    if convention == AUC_ZERO:
        points = [0.0] + values
        return sum((a + b) / 2 for a, b in zip(points, points[1:])) / t_max
    if convention != AUC_TURNS:
        raise ValueError(f"unknown AUC convention {convention!r}")
    if t_max == 1:
        return values[0]
    return sum((a + b) / 2 for a, b in zip(values, values[1:])) / (t_max - 1)


def first_turn_reaching_final(curve: ProgressCurve | Sequence[float]) -> int:
    values = _values(curve)
    if not values:
        raise ValueError("empty progress curve")
    final = values[-1]
    return next(t for t, v in enumerate(values, start=1) if v == final)


def ppt(curve: ProgressCurve | Sequence[float]) -> float:
    """Final progress divided by the earliest turn at which it was reached."""
    values = _values(curve)
    if not values:
        raise ValueError("empty progress curve")
    final = values[-1]
    if final == 0:
        return 0.0
    return final / first_turn_reaching_final(values)


def trial_moments(z: Sequence[float]) -> tuple[float, float]:
    """Mean and variance of progress when note outcomes are independent Bernoulli(z_j)."""
    g = len(z)
    if g == 0:
        raise ValueError("need at least one grading note")
    for value in z:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"success probability out of range: {value}")
    return sum(z) / g, sum(v * (1 - v) for v in z) / g**2


def moments_from_assessments(assessments: Sequence[SubgoalAssessment]) -> tuple[float, float]:
    return trial_moments([a.z for a in assessments])


def mean_ci95(values: Sequence[float]) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width."""
    mean = statistics.fmean(values)
    if len(values) < 2:
        return mean, 0.0
    return mean, 1.96 * statistics.stdev(values) / math.sqrt(len(values))


@dataclass(frozen=True)
class TrialOutcome:
    sample_id: str
    trial_index: int
    final_progress: float
    curve: ProgressCurve
    assessments: tuple[SubgoalAssessment, ...] = ()

    def __post_init__(self) -> None:
        if self.curve.values and self.final_progress != self.curve.terminal:
            raise ValueError("final_progress must equal the curve's terminal value")


@dataclass
class MetricReport:
    """Rows keyed by (persona, agent_model, metric, k, threshold)."""

    per_sample: list[dict] = field(default_factory=list)
    aggregate: list[dict] = field(default_factory=list)


SAMPLE_METRICS = ("MeanProg@k", "MaxProg@k", "MaxAUC@k", "MaxPPT@k", "pass@k", "pass^k")


def sample_metrics(
    outcomes: Sequence[TrialOutcome],
    k: int,
    threshold: float = 1.0,
    t_max: int | None = None,
    convention: str = AUC_TURNS,
) -> dict[str, float]:
    """All per-sample metrics over the first k trials (ordered by trial index)."""
    ordered = sorted(outcomes, key=lambda o: o.trial_index)
    _check_k(len(ordered), k)
    chosen = ordered[:k]
    progresses = [o.final_progress for o in chosen]
    aucs = [auc(o.curve, t_max, convention) for o in chosen]
    ppts = [ppt(o.curve) for o in chosen]
    return {
        "MeanProg@k": statistics.fmean(progresses),
        "MaxProg@k": max(progresses),
        "MaxAUC@k": max(aucs),
        "MaxPPT@k": max(ppts),
        "pass@k": pass_at_k(progresses, k, threshold),
        "pass^k": pass_hat_k(progresses, k, threshold),
    }


def build_report(
    groups: Mapping[tuple[str, str], Mapping[str, Sequence[TrialOutcome]]],
    ks: Iterable[int],
    threshold: float = 1.0,
    t_max_by_sample: Mapping[str, int] | None = None,
    convention: str = AUC_TURNS,
    dataset_tag_by_sample: Mapping[str, str] | None = None,
) -> MetricReport:
    """``groups`` maps (persona, agent_model) to {sample_id: outcomes}."""
    report = MetricReport()
    t_max_by_sample = t_max_by_sample or {}
    tags = dataset_tag_by_sample or {}
    for (persona, agent_model), samples in sorted(groups.items()):
        for k in ks:
            per_metric: dict[tuple[str, str], list[float]] = {}
            for sample_id, outcomes in sorted(samples.items()):
                if len(outcomes) < k:
                    continue
                values = sample_metrics(outcomes, k, threshold, t_max_by_sample.get(sample_id), convention)
                tag = tags.get(sample_id, "")
                for metric, value in values.items():
                    report.per_sample.append(
                        {
                            "dataset_tag": tag,
                            "sample_id": sample_id,
                            "persona": persona,
                            "agent_model": agent_model,
                            "metric": metric,
                            "k": k,
                            "threshold": threshold,
                            "value": value,
                        }
                    )
                    per_metric.setdefault((tag, metric), []).append(value)
            for (tag, metric), values in sorted(per_metric.items()):
                mean, half = mean_ci95(values)
                report.aggregate.append(
                    {
                        "dataset_tag": tag,
                        "persona": persona,
                        "agent_model": agent_model,
                        "metric": metric,
                        "k": k,
                        "threshold": threshold,
                        "n_samples": len(values),
                        "value": mean,
                        "ci95": half,
                    }
                )
    return report
