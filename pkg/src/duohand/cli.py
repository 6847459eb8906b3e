"""Command-line interface for duohand."""

import csv
import functools
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click
import yaml

from .adapt import Adapter, AdaptState, adapt_on_subset, checkpoint, initial_state, resume
from .config import (
    CONFIG_FILENAME,
    DEFAULT_CONFIG,
    OUTPUT_ROOT_ENV,
    AdaptationConfig,
    load_config,
    parse_adaptation,
    parse_scene,
    save_config,
)
from .container import file_sha256
from .errors import ConfigError, DuohandError, NonFiniteLossError, OverwriteRefusedError, TemplateMismatchError
from .estimators import LinearCorrectionEstimator
from .geometry import geodesic_angle
from .manifest import RunManifest
from .metrics import EvalReport, complementarity_analysis, evaluate
from .report import EVAL_FILENAME, SUMMARY_FILENAME, comparison_rows, load_run, render_markdown
from .report_site import ReportSiteGenerator
from .scene import DualViewDataset, generate_dataset, read_dataset, write_dataset

logger = logging.getLogger(__name__)

DATASET_FILENAME = "dataset.dhd"
EVENTS_FILENAME = "events.jsonl"


def _handle_errors(func: Callable) -> Callable:
    """Report package errors as a YAML record on stderr and exit with their code."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except DuohandError as e:
            record: Dict[str, Any] = {
                "error": type(e).__name__,
                "message": str(e),
                "exit_code": e.exit_code,
            }
            if isinstance(e, ConfigError) and e.field:
                record["field"] = e.field
            if isinstance(e, NonFiniteLossError) and e.state is not None:
                record["state"] = e.state
            click.echo(yaml.safe_dump(record, sort_keys=False), err=True, nl=False)
            sys.exit(e.exit_code)

    return wrapper


def _output_dir(out: Optional[str], command: str) -> Path:
    if out:
        return Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not root:
        raise ConfigError(f"no output directory: pass --out or set {OUTPUT_ROOT_ENV}", "--out")
    return Path(root) / command


def _prepare_output(out_dir: Path, artifacts: List[str], force: bool) -> None:
    existing = [name for name in artifacts if (out_dir / name).exists()]
    if existing and not force:
        raise OverwriteRefusedError(
            f"{out_dir} already holds {', '.join(existing)}; pass --force to overwrite"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in existing:
        (out_dir / name).unlink()


def _parse_list(text: str, option: str, convert: Callable[[str], Any]) -> List[Any]:
    try:
        return [convert(item.strip()) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}", option) from None


def _parse_beta(text: str) -> float:
    return math.e if text == "e" else float(text)


def _write_yaml(path: Path, data: Dict[str, Any]) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(data, f, default_flow_style=False, sort_keys=False)


def _rotation_errors(dataset: DualViewDataset, state: AdaptState) -> Dict[str, float]:
    if dataset.r_gt is None:
        return {}
    return {
        "initial": math.degrees(geodesic_angle(state.initial_rotation, dataset.r_gt)),
        "final": math.degrees(geodesic_angle(state.rotation, dataset.r_gt)),
    }


def _run_adaptation(dataset: DualViewDataset, config: AdaptationConfig, event_log: Optional[Path] = None):
    estimator = LinearCorrectionEstimator()
    baseline = initial_state(estimator, dataset, config)
    rotation0 = baseline.rotation.copy()
    state = Adapter(estimator, dataset, config, state=baseline, event_log=event_log).run()
    return estimator, rotation0, state


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log debug output.")
def main(verbose: bool) -> None:
    """duohand - single-to-dual-view adaptation for 3D hand pose estimation."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("init-config")
@click.option("--path", "path", type=click.Path(dir_okay=False), default=CONFIG_FILENAME, show_default=True)
@click.option("--force", is_flag=True, help="Overwrite an existing file.")
@_handle_errors
def init_config(path: str, force: bool) -> None:
    """Write a configuration file holding every default."""
    target = Path(path)
    if target.exists() and not force:
        raise OverwriteRefusedError(f"{target} exists; pass --force to overwrite")
    save_config(DEFAULT_CONFIG, target)
    click.echo(f"Configuration written to {target}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--force", is_flag=True, help="Overwrite an existing dataset.")
@_handle_errors
def synth(config_path: str, out: Optional[str], force: bool) -> None:
    """Synthesize a dual-view dataset."""
    config = load_config(Path(config_path))
    scene = parse_scene(config)
    out_dir = _output_dir(out, "synth")
    _prepare_output(out_dir, [DATASET_FILENAME, "dataset.yaml"], force)

    click.echo(f"Synthesizing {scene.count} samples (seed {scene.seed})...")
    dataset = generate_dataset(scene)
    path = out_dir / DATASET_FILENAME
    digest = write_dataset(dataset, path)

    manifest = RunManifest(command="synth", output_dir=str(out_dir), config={"scene": config["scene"]})
    manifest.add_artifact("dataset", path, digest)
    manifest.add_artifact("dataset_manifest", path.with_suffix(".yaml"))
    manifest.save()
    click.echo(f"Dataset written to {path}")


@main.command("adapt")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option(
    "--ablate",
    type=click.Choice(["abm-only", "rgr-only", "self", "none"]),
    default="none",
    show_default=True,
    help="Run one pseudo-label source alone.",
)
@click.option("--force", is_flag=True, help="Overwrite an existing run.")
@_handle_errors
def adapt_command(data_path: str, config_path: str, out: Optional[str], ablate: str, force: bool) -> None:
    """Adapt the estimator to a dataset."""
    raw_config = load_config(Path(config_path))
    config = parse_adaptation(raw_config)
    if ablate != "none":
        config = config.replace(mode=ablate)
    out_dir = _output_dir(out, "adapt")
    outputs = ["baseline.ckpt", "final.ckpt", EVENTS_FILENAME, SUMMARY_FILENAME]
    _prepare_output(out_dir, outputs, force)

    dataset = read_dataset(Path(data_path))
    click.echo(f"Adapting on {len(dataset)} samples (mode {config.mode})...")
    estimator = LinearCorrectionEstimator()
    state = initial_state(estimator, dataset, config)
    checkpoint(state, out_dir / "baseline.ckpt")
    baseline_report = evaluate(estimator, state.params, dataset, state.initial_rotation)

    state = Adapter(estimator, dataset, config, state=state, event_log=out_dir / EVENTS_FILENAME).run()
    checkpoint(state, out_dir / "final.ckpt")
    adapted_report = evaluate(estimator, state.params, dataset, state.initial_rotation)

    summary = {
        "dataset_sha256": file_sha256(Path(data_path)),
        "mode": config.mode,
        "steps": state.step,
        "rotation_error_deg": _rotation_errors(dataset, state),
        "baseline": baseline_report.to_dict(),
        "adapted": adapted_report.to_dict(),
    }
    _write_yaml(out_dir / SUMMARY_FILENAME, summary)

    manifest = RunManifest(command="adapt", output_dir=str(out_dir), config=config.to_dict())
    manifest.set_dataset(Path(data_path), summary["dataset_sha256"])
    for name, role in zip(outputs, ["baseline", "final", "events", "summary"]):
        if (out_dir / name).exists():
            manifest.add_artifact(role, out_dir / name)
    manifest.save()

    click.echo(
        f"Dual-M {baseline_report.dual_m:.2f} -> {adapted_report.dual_m:.2f} mm, "
        f"Mono-M {baseline_report.mono_m:.2f} -> {adapted_report.mono_m:.2f} mm"
    )


@main.command("eval")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--sweep-n", default=None, help="Comma-separated adaptation-set sizes, e.g. 50,100,250.")
@click.option(
    "--complementarity-samples",
    type=int,
    default=200,
    show_default=True,
    help="Samples used for the refinement complementarity table (0 skips it).",
)
@click.option("--force", is_flag=True, help="Overwrite an existing evaluation.")
@_handle_errors
def eval_command(
    data_path: str,
    ckpt_path: str,
    out: Optional[str],
    sweep_n: Optional[str],
    complementarity_samples: int,
    force: bool,
) -> None:
    """Evaluate a checkpoint on a dataset."""
    sizes = _parse_list(sweep_n, "--sweep-n", int) if sweep_n else []
    out_dir = _output_dir(out, "eval")
    outputs = [EVAL_FILENAME, "eval.md", "sweep.csv"]
    _prepare_output(out_dir, outputs, force)

    dataset = read_dataset(Path(data_path))
    state = resume(Path(ckpt_path))
    if state.template_hash != dataset.template_hash:
        raise TemplateMismatchError(
            f"checkpoint hand template {state.template_hash} does not match dataset {dataset.template_hash}"
        )
    estimator = LinearCorrectionEstimator()
    table = []
    if complementarity_samples > 0 and len(dataset):
        table = complementarity_analysis(
            estimator, state.params, dataset, state.rotation, state.config, limit=complementarity_samples
        )
    report = evaluate(estimator, state.params, dataset, state.initial_rotation, complementarity=table)

    dataset_sha = file_sha256(Path(data_path))
    _write_yaml(
        out_dir / EVAL_FILENAME,
        {"dataset_sha256": dataset_sha, "checkpoint": str(Path(ckpt_path).resolve()), "report": report.to_dict()},
    )
    with open(out_dir / "eval.md", "w") as f:
        f.write(report.to_markdown())

    manifest = RunManifest(command="eval", output_dir=str(out_dir), config=state.config.to_dict())
    manifest.set_dataset(Path(data_path), dataset_sha)
    manifest.add_artifact("eval", out_dir / EVAL_FILENAME)
    manifest.add_artifact("eval_markdown", out_dir / "eval.md")

    if sizes:
        with open(out_dir / "sweep.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["n", "mono_m", "dual_m"])
            for n in sizes:
                sweep_report = _sweep_point(dataset, state.config, n)
                writer.writerow([n, f"{sweep_report.mono_m:.6f}", f"{sweep_report.dual_m:.6f}"])
                click.echo(f"N={n}: Dual-M {sweep_report.dual_m:.2f} mm")
        manifest.add_artifact("sweep", out_dir / "sweep.csv")
    manifest.save()

    click.echo(report.to_markdown())


def _sweep_point(dataset: DualViewDataset, config: AdaptationConfig, n: int) -> EvalReport:
    if n < 1:
        raise ConfigError(f"sweep sizes must be >= 1, got {n}", "--sweep-n")
    _, report = adapt_on_subset(LinearCorrectionEstimator(), dataset, config, n)
    return report


@main.command()
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--alpha", "alphas", default="0.3,0.5,0.7,0.9", show_default=True)
@click.option("--beta", "betas", default="1,e,inf", show_default=True)
@click.option("--force", is_flag=True, help="Overwrite an existing sweep.")
@_handle_errors
def tune(data_path: str, config_path: str, out: Optional[str], alphas: str, betas: str, force: bool) -> None:
    """Sweep the fusion weight and attention softness."""
    config = parse_adaptation(load_config(Path(config_path)))
    alpha_values = _parse_list(alphas, "--alpha", float)
    beta_values = _parse_list(betas, "--beta", _parse_beta)
    out_dir = _output_dir(out, "tune")
    _prepare_output(out_dir, ["tune.csv", "tune.md"], force)
    dataset = read_dataset(Path(data_path))

    rows = []
    for alpha in alpha_values:
        for beta in beta_values:
            trial = config.replace(alpha=alpha, beta=beta)
            estimator, rotation0, state = _run_adaptation(dataset, trial)
            report = evaluate(estimator, state.params, dataset, rotation0)
            rows.append((alpha, beta, report.mono_m, report.dual_m))
            click.echo(f"alpha={alpha:g} beta={beta:g}: Dual-M {report.dual_m:.2f} mm")

    with open(out_dir / "tune.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["alpha", "beta", "mono_m", "dual_m"])
        for alpha, beta, mono, dual in rows:
            writer.writerow([alpha, beta, f"{mono:.6f}", f"{dual:.6f}"])
    lines = ["| alpha | beta | Mono-M | Dual-M |", "|---|---|---|---|"]
    lines += [f"| {a:g} | {b:g} | {m:.2f} | {d:.2f} |" for a, b, m, d in rows]
    with open(out_dir / "tune.md", "w") as f:
        f.write("\n".join(lines) + "\n")

    manifest = RunManifest(command="tune", output_dir=str(out_dir), config=config.to_dict())
    manifest.set_dataset(Path(data_path))
    manifest.add_artifact("table", out_dir / "tune.csv")
    manifest.add_artifact("markdown", out_dir / "tune.md")
    manifest.save()


@main.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Also write report.md and report.yaml.")
@click.option("--site", type=click.Path(file_okay=False), default=None, help="Write an MkDocs project here.")
@click.option("--build", is_flag=True, help="Run 'mkdocs build' on the site.")
@_handle_errors
def report(run_dirs: List[str], out: Optional[str], site: Optional[str], build: bool) -> None:
    """Compare finished runs side by side."""
    runs = [load_run(Path(d)) for d in run_dirs]
    rows = comparison_rows(runs)
    table = render_markdown(rows)
    click.echo(table)

    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.md", "w") as f:
            f.write(table)
        _write_yaml(out_dir / "report.yaml", {"runs": rows})

    if site:
        generator = ReportSiteGenerator(Path(site), runs)
        generator.generate()
        click.echo(f"Report site generated in {site}")
        if build:
            if generator.build():
                click.echo(f"Report site built in {Path(site) / 'site'}")
            else:
                click.echo("Building the report site failed.")
    elif build:
        raise ConfigError("--build needs --site", "--build")


if __name__ == "__main__":
    main()
