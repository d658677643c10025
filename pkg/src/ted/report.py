"""CSV and Markdown reports over completed run artifacts."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Sequence

from .metrics import MetricReport, build_report
from .pipeline import RunState, k_values, max_turns_for

TABLE_METRICS = ("MeanProg@k", "MaxProg@k", "MaxAUC@k", "MaxPPT@k", "pass@k")
PERSONA_ORDER = ("expert", "non_expert")


def compute_metrics(state: RunState) -> MetricReport:
    cfg = state.config
    groups: dict[tuple[str, str], dict[str, list]] = {}
    for (sample_id, persona), outcomes in state.outcomes.items():
        if outcomes:
            groups.setdefault((persona, cfg.agent.label), {})[sample_id] = [outcomes[t] for t in sorted(outcomes)]
    return build_report(
        groups,
        k_values(cfg, state.samples),
        threshold=cfg.threshold,
        t_max_by_sample={s.id: max_turns_for(cfg, s) for s in state.samples},
        convention=cfg.auc_convention,
        dataset_tag_by_sample={s.id: s.dataset_tag for s in state.samples},
    )


def _write_csv(path: Path, header: Sequence[str], rows: list[list[Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _num(value: Any) -> Any:
    return repr(float(value)) if isinstance(value, float) else value


def _cell(values: dict[str, float], fmt: str = "{:.2f}") -> str:
    parts = [fmt.format(values[p]) if p in values else "-" for p in PERSONA_ORDER]
    return " \\| ".join(parts)


def markdown_summary(report: MetricReport, failures: Sequence[dict[str, Any]] = ()) -> str:
    if not report.aggregate:
        return "# TED evaluation report\n\nNo results: no trial produced judged outcomes.\n"
    lines = ["# TED evaluation report", ""]
    index: dict[tuple, dict[str, float]] = {}
    for row in report.aggregate:
        key = (row["dataset_tag"], row["k"], row["threshold"], row["agent_model"], row["metric"])
        index.setdefault(key, {})[row["persona"]] = row["value"]
    tables = sorted({(tag, k, thr) for tag, k, thr, _, _ in index})
    for tag, k, thr in tables:
        title = tag or "dataset"
        lines += [f"## {title} (k={k}, threshold={thr:g})", "", "Each cell is expert \\| non-expert.", ""]
        lines.append("| Agent | " + " | ".join(TABLE_METRICS) + " | pass^k |")
        lines.append("|" + "---|" * (len(TABLE_METRICS) + 2))
        models = sorted({m for t, kk, th, m, _ in index if (t, kk, th) == (tag, k, thr)})
        for model in models:
            cells = [_cell(index.get((tag, k, thr, model, metric), {})) for metric in (*TABLE_METRICS, "pass^k")]
            lines.append(f"| {model} | " + " | ".join(cells) + " |")
        lines.append("")
    if failures:
        lines += ["## Failures", ""]
        for f in failures:
            trial = f"trial {f['trial_index']}" if f["trial_index"] is not None else "all trials"
            lines.append(f"- {f['stage']}: {f['sample_id']} / {f['persona']} / {trial}: {f['error']}")
        lines.append("")
    return "\n".join(lines)


def emit_report(state: RunState, out_dir: Path | None = None) -> tuple[Path, bool]:
    """Write all report files; returns (report dir, has_results)."""
    cfg = state.config
    out_dir = Path(out_dir or cfg.run_dir / "report")
    report = compute_metrics(state)

    per_sample = sorted(
        report.per_sample,
        key=lambda r: (r["dataset_tag"], r["sample_id"], r["persona"], r["agent_model"], r["metric"], r["k"]),
    )
    header = ["dataset_tag", "sample_id", "persona", "agent_model", "metric", "k", "threshold", "value"]
    _write_csv(out_dir / "per_sample_metrics.csv", header, [[_num(r[h]) for h in header] for r in per_sample])

    aggregate = sorted(
        report.aggregate, key=lambda r: (r["dataset_tag"], r["persona"], r["agent_model"], r["metric"], r["k"])
    )
    header = ["dataset_tag", "persona", "agent_model", "metric", "k", "threshold", "n_samples", "value", "ci95"]
    _write_csv(out_dir / "aggregate_metrics.csv", header, [[_num(r[h]) for h in header] for r in aggregate])

    curve_rows, scatter_rows = [], []
    for (sample_id, persona), outcomes in sorted(state.outcomes.items()):
        for trial_index in sorted(outcomes):
            o = outcomes[trial_index]
            for t, p in enumerate(o.curve.values, start=1):
                curve_rows.append([sample_id, persona, trial_index, t, _num(p)])
            zs = [a.z for a in o.assessments]
            expectation = sum(zs) / len(zs)
            variance = sum(z * (1 - z) for z in zs) / len(zs) ** 2
            scatter_rows.append([sample_id, persona, trial_index, _num(expectation), _num(variance)])
    _write_csv(out_dir / "curves.csv", ["sample_id", "persona", "trial_index", "t", "p"], curve_rows)
    _write_csv(out_dir / "scatter.csv", ["sample_id", "persona", "trial_index", "expectation", "variance"], scatter_rows)

    failures = [f.to_dict() for f in state.failures]
    (out_dir / "failures.json").write_text(json.dumps(failures, indent=2) + "\n", encoding="utf-8")
    (out_dir / "summary.md").write_text(markdown_summary(report, failures), encoding="utf-8")
    return out_dir, bool(report.aggregate)
