"""
DeltaCharger command line

    python -m deltacharger gen --task angle --seed 42 --out data/angle.dtac
    python -m deltacharger train --model cnn --task angle --data data/angle.dtac --out models/angle.dmod
    python -m deltacharger bench --data data/angle.dtac --task angle
    python -m deltacharger dock --episodes 100 --seed 1
    python -m deltacharger render --state 4,0,0 --out figures/tilt4
    python -m deltacharger check

Exit codes: 0 success, 2 usage, 3 IO, 4 data, 5 kinematics, 6 illegal docking transition.
"""

import functools
import logging
from collections import Counter
from pathlib import Path
from typing import List, Tuple

import click
import numpy as np
from joblib import Parallel, delayed

from deltacharger.config import GlobalConfig, load_config
from deltacharger.contact import MisalignmentState, critical_angle, calibrated_gap, frame_centroid_rows, render_frame
from deltacharger.dataio import generate_dataset, read_dataset, split, write_dataset, write_model
from deltacharger.dockfsm import (
    ModelPerception,
    OraclePerception,
    Outcome,
    Scenario,
    max_transitions,
    run_episode,
    trace_lines,
    write_trace,
)
from deltacharger.errors import DataError, DeltaChargerError, UsageError
from deltacharger.kinematics import validate_workspace
from deltacharger.learn.tasks import TaskKind
from deltacharger.learn.training import MODEL_NAMES, EvalReport, train
from deltacharger.render import ascii_heatmap, write_pgm_pair, write_preview

logger = logging.getLogger("deltacharger")

TASK_CHOICES = [t.value for t in TaskKind]
TIMING_NOTE = "* timing columns are wall-clock and non-deterministic"


def reports_errors(func):
    """Turn DeltaChargerError into a one-line message and its exit code"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except DeltaChargerError as e:
            click.echo(f"❌ {e.detail}", err=True)
            raise click.exceptions.Exit(e.exit_code)

    return wrapper


def config_block(config: GlobalConfig) -> str:
    return "```json\n" + config.echo() + "\n```"


def _tasks_for(task: str) -> List[TaskKind]:
    task = TaskKind(task)
    if task == TaskKind.POSITION:
        return [TaskKind.VERTICAL, TaskKind.HORIZONTAL]
    return [task]


def format_reports(rows: List[Tuple[str, str, EvalReport]], fmt: str = "table") -> str:
    if fmt == "csv":
        lines = ["task,model,accuracy,inference_ms*,training_s*"]
        for task, model, report in rows:
            lines.append(f"{task},{model},{report.accuracy:.4f},{report.inference_ms:.4f},{report.training_s:.3f}")
        return "\n".join(lines)

    lines = [f"{'task':<11} {'model':<7} {'accuracy':>8} {'inference_ms*':>13} {'training_s*':>11}"]
    lines.append("-" * len(lines[0]))
    for task, model, report in rows:
        lines.append(
            f"{task:<11} {model:<7} {report.accuracy:>8.4f} {report.inference_ms:>13.4f} {report.training_s:>11.3f}"
        )
    lines.append(TIMING_NOTE)
    return "\n".join(lines)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="JSON file overriding the built-in defaults")
@click.option("--verbose", "-v", is_flag=True, help="Log debug messages")
@click.pass_context
@reports_errors
def cli(ctx, config_path, verbose):
    """DeltaCharger simulation and perception stack"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", force=True)
    ctx.obj = load_config(config_path)


@cli.command()
@click.option("--task", type=click.Choice(["angle", "position"]), required=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--jobs", type=int, default=None, help="Parallel render workers")
@click.pass_obj
@reports_errors
def gen(config: GlobalConfig, task, seed, out, jobs):
    """Generate a DTAC v1 dataset and its manifest"""
    config = config.override("paths", n_jobs=jobs)
    click.echo(f"🔄 Generating {task} dataset (seed {seed})...")
    dataset = generate_dataset(task, seed, config.plan, config.sensor, n_jobs=config.paths.n_jobs)
    manifest = write_dataset(dataset, out, fractions=config.train.split)
    click.echo(f"📦 Wrote {manifest.count} samples to {out}")
    click.echo(f"✅ checksum {manifest.checksum}")


@cli.command("train")
@click.option("--model", type=click.Choice(MODEL_NAMES), required=True)
@click.option("--task", type=click.Choice(TASK_CHOICES), required=True)
@click.option("--data", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.pass_obj
@reports_errors
def train_command(config: GlobalConfig, model, task, data, seed, out, epochs, learning_rate):
    """Train one model and write it as DMOD v1"""
    config = config.override("train", seed=seed, epochs=epochs, learning_rate=learning_rate)
    dataset = read_dataset(data)
    tasks = _tasks_for(task)
    rows = []
    for kind in tasks:
        labelled = dataset.for_task(kind)
        train_set, val_set = split(labelled, config.train.split, config.train.seed)
        click.echo(f"🔄 Training {model} on {kind.value} ({len(train_set)} train / {len(val_set)} validation)...")
        artifact, report = train(model, kind, train_set.features, train_set.labels, val_set.features,
                                 val_set.labels, config.train, n_jobs=config.paths.n_jobs, echo=config.echo_dict())
        target = out if len(tasks) == 1 else out.with_name(f"{out.stem}.{kind.value}{out.suffix or '.dmod'}")
        write_model(artifact, target)
        click.echo(f"📦 Wrote {target}")
        rows.append((kind.value, model, report))
    click.echo(format_reports(rows))
    click.echo(config_block(config))


@cli.command()
@click.option("--data", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--task", type=click.Choice(TASK_CHOICES), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--format", "fmt", type=click.Choice(["table", "csv"]), default="table", show_default=True)
@click.option("--models", "only", default=",".join(MODEL_NAMES), show_default=True,
              help="Comma separated subset of models")
@click.option("--epochs", type=int, default=None)
@click.pass_obj
@reports_errors
def bench(config: GlobalConfig, data, task, seed, fmt, only, epochs):
    """Train every model on one split and compare accuracy and timing"""
    config = config.override("train", seed=seed, epochs=epochs)
    names = [m.strip() for m in only.split(",") if m.strip()]
    unknown = sorted(set(names) - set(MODEL_NAMES))
    if unknown:
        raise UsageError(f"unknown model(s): {', '.join(unknown)}")

    dataset = read_dataset(data)
    rows = []
    for kind in _tasks_for(task):
        train_set, val_set = split(dataset.for_task(kind), config.train.split, config.train.seed)
        results = []
        for name in names:
            logger.info("bench %s on %s", name, kind.value)
            _, report = train(name, kind, train_set.features, train_set.labels, val_set.features, val_set.labels,
                              config.train, n_jobs=config.paths.n_jobs)
            results.append((kind.value, name, report))
        # stable sort keeps the model order for equal accuracy
        rows.extend(sorted(results, key=lambda r: -r[2].accuracy))

    click.echo(format_reports(rows, fmt))
    click.echo(config_block(config), err=(fmt == "csv"))


def _episode_plan(seed: int, episodes: int, config: GlobalConfig, phi, aligned: bool):
    plans = []
    for stream in np.random.SeedSequence(seed).spawn(episodes):
        rng = np.random.default_rng(stream)
        scenario = Scenario.random(rng, config.dock)
        update = {}
        if phi is not None:
            update["phi"] = phi
        if aligned:
            update["vision_error"] = (0.0, 0.0, 0.0)
        plans.append((scenario.model_copy(update=update), int(rng.integers(0, 2 ** 63 - 1))))
    return plans


@cli.command()
@click.option("--episodes", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--models", "models_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Directory with angle/vertical/horizontal .dmod files; ground truth when omitted")
@click.option("--phi", type=float, default=None, help="Fix the target tilt in degrees")
@click.option("--aligned", is_flag=True, help="Zero camera error")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--quiet", is_flag=True, help="Only print the outcome histogram")
@click.option("--jobs", type=int, default=None)
@click.pass_obj
@reports_errors
def dock(config: GlobalConfig, episodes, seed, models_dir, phi, aligned, trace_path, quiet, jobs):
    """Run docking episodes and report their outcomes"""
    if episodes < 1:
        raise UsageError("--episodes must be at least 1")
    config = config.override("paths", n_jobs=jobs)
    perception = ModelPerception.from_directory(models_dir) if models_dir else OraclePerception()
    sim = config.simulator()

    plans = _episode_plan(seed, episodes, config, phi, aligned)
    results = Parallel(n_jobs=config.paths.n_jobs)(
        delayed(run_episode)(scenario, perception, ep_seed, sim) for scenario, ep_seed in plans
    )

    if not quiet:
        for episode in results:
            click.echo("\n".join(trace_lines(episode)))
    counts = Counter(e.outcome for e in results)
    click.echo("Outcome histogram:")
    for outcome in Outcome:
        click.echo(f"  {outcome.value:<16} {counts.get(outcome, 0)}")
    longest = max(e.transitions for e in results)
    click.echo(f"✅ {episodes} episodes, longest {longest} transitions (bound {max_transitions(config.dock)})")
    if trace_path is not None:
        click.echo(f"📦 Wrote {write_trace(results, trace_path)}")
    click.echo(config_block(config))


def _parse_state(text: str) -> Tuple[float, float, float]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        values = ()
    if len(values) != 3:
        raise UsageError(f"--state expects 'phi,dx,dy', got '{text}'")
    return values


@cli.command()
@click.option("--state", "state_text", required=True, help="phi,dx,dy in degrees and millimetres")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dz", type=float, default=17.5, show_default=True, help="Penetration depth, negative for no contact")
@click.option("--noise/--no-noise", default=True, show_default=True)
@click.pass_obj
@reports_errors
def render(config: GlobalConfig, state_text, out, seed, dz, noise):
    """Render one tactile frame pair as PGM images and an ASCII heatmap"""
    phi, dx, dy = _parse_state(state_text)
    try:
        state = MisalignmentState(phi=phi, dx=dx, dy=dy, dz=dz)
    except ValueError as e:
        raise UsageError(f"state out of range: {e}")
    sensor = config.sensor if noise else config.sensor.model_copy(update={"sigma": 0.0, "dropout": 0.0})
    frame = render_frame(config.plan, state, seed, sensor)

    first, second = write_pgm_pair(frame, out)
    preview = write_preview(frame, out)
    click.echo("\n".join(ascii_heatmap(frame)))
    rows = frame_centroid_rows(frame)
    click.echo(f"centroid rows: A={rows[0]:.3f} B={rows[1]:.3f}")
    click.echo(f"📦 Wrote {first}, {second}, {preview}")
    click.echo(config_block(config))


@cli.command()
@click.pass_obj
@reports_errors
def check(config: GlobalConfig):
    """Workspace sweep and short-circuit calibration"""
    report = validate_workspace(config.geometry)
    click.echo(f"{'✅' if report.passed else '❌'} {report.message} (fraction {report.fraction:.4f})")
    onset = critical_angle(config.plan)
    if onset is None:
        click.echo("❌ no short circuit up to 15 deg")
    else:
        click.echo(f"✅ short-circuit onset at {onset:.4f} deg")
    click.echo(f"   gap for a 12 deg onset: {calibrated_gap(config.plan):.4f} mm (configured {config.plan.gap} mm)")
    click.echo(config_block(config))
    if not report.passed or onset is None:
        raise DataError("calibration checks failed")


def main():
    cli(prog_name="deltacharger")


if __name__ == "__main__":
    main()
