"""Command line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 backend error,
5 every consortium member abstained (no diagnosis possible).
"""

from __future__ import annotations

import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any

import click

from .catalog import CatalogError, default_catalog
from .config import ConfigError, ServiceConfig, load_config
from .dataset import DatasetError, ingest, prepare_data
from .evaluation import EvalCase, EvaluationError, Thresholds, analyze, evaluate, load_curve
from .prompts import PromptError
from .transcript import InvalidTranscript, parse_turns

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_BACKEND = 4
EXIT_ABSTAINED = 5


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _config(path: str | None) -> ServiceConfig:
    if path is None:
        raise click.UsageError("--config is required")
    try:
        return load_config(path)
    except ConfigError as exc:
        _fail(f"invalid config: {exc}", EXIT_DATA)
        raise


def _load_transcript(path: str) -> list:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        _fail(f"cannot read transcript {path}: {exc}", EXIT_DATA)
    if isinstance(obj, dict):
        obj = obj.get("transcript", obj.get("turns"))
    if not isinstance(obj, list):
        _fail("transcript file must hold a list of turns or an object with 'transcript'/'turns'", EXIT_DATA)
    try:
        return parse_turns(obj)
    except InvalidTranscript as exc:
        _fail(f"invalid transcript: {exc}", EXIT_DATA)
        raise


def _emit(obj: Any, out: str | None) -> None:
    text = json.dumps(obj, indent=2, ensure_ascii=False)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        click.echo(text)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose: bool) -> None:
    """Consortium diagnosis orchestration, data preparation and evaluation."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def serve(config_path: str | None) -> None:
    """Run the HTTP service."""
    from .service import run

    config = _config(config_path)
    try:
        run(config)
    except PromptError as exc:
        _fail(f"invalid templates: {exc}", EXIT_DATA)


@main.command()
@click.argument("transcript", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["adjudicate", "deterministic"]), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write JSON here.")
def diagnose(transcript: str, config_path: str | None, mode: str | None, out: str | None) -> None:
    """Run the full pipeline once on TRANSCRIPT and print the response."""
    from .service import Orchestrator

    config = _config(config_path)
    turns = _load_transcript(transcript)
    try:
        orch = Orchestrator(config)
        result = asyncio.run(orch.diagnose(turns, mode=mode))
    except InvalidTranscript as exc:
        _fail(f"invalid transcript: {exc}", EXIT_DATA)
    except PromptError as exc:
        _fail(f"cannot build prompt: {exc}", EXIT_DATA)
    _emit(result.to_dict(), out)
    final = result.outcome.final_code
    click.echo(f"final: {final.code if final else 'none'} ({result.outcome.status.value})", err=True)
    if result.status_code == 503:
        _fail(result.error or "backends unavailable", EXIT_BACKEND)
    if result.status_code == 422:
        _fail(result.error or "all members abstained", EXIT_ABSTAINED)


@main.command("prepare-data")
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("outdir", type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--template", default="diagnostic-default", show_default=True)
def prepare_data_cmd(source: str, outdir: str, seed: int, template: str) -> None:
    """Ingest SOURCE records and write train/validation/test JSONL to OUTDIR."""
    try:
        manifest = prepare_data(source, outdir, seed=seed, template=template)
    except (DatasetError, PromptError) as exc:
        _fail(str(exc), EXIT_DATA)
    counts = {name: s.count for name, s in manifest.splits.items()}
    click.echo(
        f"train={counts['train']} validation={counts['validation']} test={counts['test']} "
        f"rejects={manifest.rejects} -> {outdir}"
    )


def _read_predictions(path: str) -> dict[str, str | None]:
    preds = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if not isinstance(obj, dict) or "id" not in obj:
            raise EvaluationError(f"{path}:{lineno}: prediction needs an id")
        code = obj.get("predicted")
        preds[str(obj["id"])] = code if code else None
    return preds


@main.command("evaluate")
@click.argument("predictions", type=click.Path(exists=True, dir_okay=False))
@click.argument("gold", type=click.Path(exists=True, dir_okay=False))
@click.option("--abstentions", type=click.Choice(["wrong", "exclude"]), default="wrong", show_default=True)
@click.option("--source", default="consensus", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write JSON summary here.")
def evaluate_cmd(predictions: str, gold: str, abstentions: str, source: str, out: str | None) -> None:
    """Score PREDICTIONS ({id, predicted}) against GOLD raw records."""
    catalog = default_catalog()
    try:
        preds = _read_predictions(predictions)
        records = ingest(gold, catalog).records
        cases = []
        for r in records:
            if r.id not in preds:
                raise EvaluationError(f"no prediction for record {r.id}")
            code = preds[r.id]
            cases.append(EvalCase(r.id, r.gold_diagnosis, catalog.validate_code(code) if code else None, source))
        report = evaluate(cases, abstentions)
    except (OSError, ValueError, DatasetError, CatalogError) as exc:
        _fail(str(exc), EXIT_DATA)
    click.echo(report.format_text())
    if out:
        _emit(report.to_dict(), out)


@main.command("loss-report")
@click.argument("train", type=click.Path(exists=True, dir_okay=False))
@click.argument("validation", type=click.Path(exists=True, dir_okay=False))
@click.option("--spike-factor", type=float, default=2.0, show_default=True)
@click.option("--ratio-threshold", type=float, default=2.0, show_default=True)
@click.option("--divergence-steps", type=int, default=3, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write JSON summary here.")
def loss_report(
    train: str, validation: str, spike_factor: float, ratio_threshold: float,
    divergence_steps: int, out: str | None,
) -> None:
    """Area between curves, loss ratio, derivatives and flags for two loss logs."""
    try:
        curve = load_curve(train, validation)
        analytics = analyze(curve, Thresholds(spike_factor, 5, ratio_threshold, divergence_steps))
    except (OSError, ValueError) as exc:
        _fail(str(exc), EXIT_DATA)
    click.echo(analytics.format_text())
    if out:
        _emit(analytics.to_dict(), out)


@main.command("mock-backend")
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=11434, show_default=True)
def mock_backend(scenario: str, host: str, port: int) -> None:
    """Serve a scripted model-server emulator for SCENARIO."""
    from .mock_backend import PortInUse, Scenario, ScenarioError, serve_forever

    try:
        sc = Scenario.load(scenario)
    except (OSError, ValueError, ScenarioError) as exc:
        _fail(f"invalid scenario: {exc}", EXIT_DATA)
    click.echo(f"mock backend {sc.id} on http://{host}:{port}", err=True)
    try:
        serve_forever(sc, port, host)
    except PortInUse as exc:
        _fail(str(exc), EXIT_USAGE)


if __name__ == "__main__":
    main()
