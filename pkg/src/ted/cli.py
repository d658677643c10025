"""``ted`` command line."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from . import datasets
from .config import ConfigError, RunConfig, load_config
from .diagnose import ErrorCluster, error_insertion
from .gateway import GatewayError
from .pipeline import ArtifactConflictError, RunState, make_gateway, read_json, run_eval, run_has_artifacts
from .report import emit_report


def _common(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Run config (YAML/JSON)."),
        click.option("--dataset", help="Dataset JSON file."),
        click.option("--persona", "personas", multiple=True, type=click.Choice(["expert", "non_expert"])),
        click.option("--trials", type=int, help="Override n_trials for every sample."),
        click.option("--max-turns", type=int, help="Override max_turns for every sample."),
        click.option("--k", "ks", multiple=True, type=int, help="k values (repeatable)."),
        click.option("--q", type=int, help="Judge runs per grading note (odd)."),
        click.option("--threshold", type=float),
        click.option("--provider", help="live | scripted:<path> | replay:<path> | record:<path>"),
        click.option("--out", help="Output root directory."),
        click.option("--run-id"),
        click.option("--workers", type=int),
        click.option("--resume", is_flag=True, help="Continue a run whose artifacts already exist."),
        click.option("-v", "--verbose", count=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _config(config_path, dataset, personas, trials, max_turns, ks, q, threshold, provider, out, run_id, workers, **_) -> RunConfig:
    cfg = load_config(config_path) if config_path else RunConfig()
    return cfg.with_overrides(
        dataset=dataset,
        personas=tuple(personas) or None,
        n_trials=trials,
        max_turns=max_turns,
        k=tuple(ks) or None,
        q=q,
        threshold=threshold,
        provider=provider,
        out=out,
        run_id=run_id,
        workers=workers,
    )


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _finish(state: RunState, report: bool = True) -> None:
    has_results = True
    if report:
        out_dir, has_results = emit_report(state)
        click.echo(f"report written to {out_dir}")
    for f in state.failures:
        click.echo(f"FAILED {f.stage} {f.sample_id}/{f.persona} trial={f.trial_index}: {f.error}", err=True)
    if state.failures or not has_results:
        if not has_results:
            click.echo("no results", err=True)
        sys.exit(1)


def _run(stages: tuple[str, ...], report: bool, **kwargs) -> None:
    _setup_logging(kwargs["verbose"])
    try:
        cfg = _config(**kwargs)
        if "talk" in stages and run_has_artifacts(cfg) and not kwargs["resume"]:
            raise click.ClickException(f"{cfg.run_dir} already has artifacts; pass --resume or use a new --run-id")
        state = run_eval(cfg, stages=stages)
    except (ConfigError, datasets.DatasetError, ArtifactConflictError, GatewayError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    _finish(state, report)


@click.group()
def main() -> None:
    """Talk, evaluate and diagnose conversational tool-using agents."""


@main.command()
@_common
def talk(**kwargs) -> None:
    """Simulate user/agent conversations and store trajectories."""
    _run(("talk",), report=False, **kwargs)


@main.command()
@_common
def judge(**kwargs) -> None:
    """Judge stored trajectories against their grading notes."""
    _run(("judge",), report=False, **kwargs)


@main.command()
@_common
def metrics(**kwargs) -> None:
    """Compute metrics from stored verdicts and write the report."""
    _run((), report=True, **kwargs)


@main.command()
@_common
@click.option("--augment-instruction", type=click.Path(exists=True, dir_okay=False), help="Agent instruction to extend with found errors.")
@click.option("--augmented-out", type=click.Path(dir_okay=False), help="Where to write the augmented instruction.")
@click.option("--human-notes", type=click.Path(exists=True, dir_okay=False), help="Extra failure-mode lines, one per line.")
def diagnose(augment_instruction, augmented_out, human_notes, **kwargs) -> None:
    """Find and cluster agent errors from stored verdicts."""
    _setup_logging(kwargs["verbose"])
    try:
        cfg = _config(**kwargs)
        state = run_eval(cfg, stages=("diagnose",))
    except (ConfigError, datasets.DatasetError, ArtifactConflictError, GatewayError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    if augment_instruction:
        clusters = []
        for path in sorted(cfg.run_dir.rglob("diagnosis*.json")):
            for c in read_json(path)["clusters"]:
                clusters.append(ErrorCluster(c["cluster_label"], tuple(c["error_types"]), tuple(c["error_ids"])))
        labels_seen: set[str] = set()
        unique = [c for c in clusters if not (c.cluster_label in labels_seen or labels_seen.add(c.cluster_label))]
        notes = Path(human_notes).read_text(encoding="utf-8").splitlines() if human_notes else []
        text = error_insertion(Path(augment_instruction).read_text(encoding="utf-8"), unique, [n for n in notes if n.strip()])
        target = Path(augmented_out or augment_instruction)
        target.write_text(text, encoding="utf-8")
        click.echo(f"inserted {len(unique)} error label(s) into {target}")
    _finish(state, report=False)


@main.command()
@_common
def run(**kwargs) -> None:
    """Run talk, judge and diagnose, then write the report."""
    _run(("talk", "judge", "diagnose"), report=True, **kwargs)


@main.command()
@_common
def report(**kwargs) -> None:
    """Write the report from stored artifacts without calling any model."""
    _run((), report=True, **kwargs)


@main.command()
@click.option("--scenarios", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Staging file to write.")
@click.option("--provider", default="live")
@click.option("--model", default="gpt-4.1")
@click.option("-v", "--verbose", count=True)
def convert(scenarios, out_path, provider, model, verbose) -> None:
    """Convert milestone scenarios into staged grading notes for review."""
    _setup_logging(verbose)
    gateway = make_gateway(RunConfig(provider=provider))
    samples = []
    try:
        for scenario in datasets.load_scenarios(scenarios):
            notes = datasets.convert_milestones(gateway, scenario, model=model)
            samples.append(datasets.scenario_to_sample(scenario, notes))
    except (ValueError, datasets.ConversionError, GatewayError) as exc:
        raise click.ClickException(str(exc)) from exc
    finally:
        gateway.close()
    datasets.write_staging(samples, out_path, source=str(scenarios))
    click.echo(f"staged {len(samples)} sample(s) in {out_path}; review, then run `ted promote`")


@main.command()
@click.argument("staging", type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", "dataset_path", required=True, type=click.Path(dir_okay=False), help="Dataset file to write.")
def promote(staging, dataset_path) -> None:
    """Promote a reviewed staging file into a runnable dataset."""
    try:
        samples = datasets.promote(staging, dataset_path)
    except datasets.DatasetError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"wrote {len(samples)} sample(s) to {dataset_path}")


if __name__ == "__main__":
    main()
