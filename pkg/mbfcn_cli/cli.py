"""Main CLI interface for mbfcn-cli using Typer."""

import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import typer
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

try:
    from typer._click.exceptions import ClickException, UsageError
except ImportError:  # typer < 0.26 runs on the external click package
    from click.exceptions import ClickException, UsageError

from mbfcn_cli.ablation import run_ablation, show_report, write_report
from mbfcn_cli.checkpoint import load_checkpoint, save_checkpoint
from mbfcn_cli.config import ConfigFile, parse_config
from mbfcn_cli.constants import (
    APP_NAME,
    APP_VERSION,
    DEFAULT_IMAGE_SIZE,
    DEFAULT_NMS_THRESH,
    DEFAULT_SCORE_THRESH,
    DEFAULT_SEED,
    GRADCHECK_INSTANCES,
)
from mbfcn_cli.dataset import SyntheticSpec, load_dataset, synth_generate
from mbfcn_cli.errors import InputError, MbfcnError
from mbfcn_cli.evaluation import evaluate, precision_at_fp, write_pr_curve
from mbfcn_cli.formats import AnnotatedImage, parse_annotations, read_detections, write_detections
from mbfcn_cli.gradcheck import run_gradcheck
from mbfcn_cli.inference import detect_images
from mbfcn_cli.training import train as train_model
from mbfcn_cli.utils import list_image_files, parse_float_list

app = typer.Typer(
    name=APP_NAME,
    help="MB-FCN CLI - multi-branch fully convolutional face detector toolkit",
    add_completion=False,
    context_settings={"help_option_names": ["-h", "--help"]},
)

console = Console(stderr=True)


@contextmanager
def handle_errors():
    """Turn library errors into the CLI's exit codes (1 input/config, 2 internal)."""
    try:
        yield
    except MbfcnError as e:
        console.print(f"❌ [bold red]{type(e).__name__}[/bold red]: {e}", markup=True, highlight=False)
        raise typer.Exit(e.exit_code)
    except (typer.Exit, typer.Abort, ClickException):
        raise
    except Exception as e:  # noqa: BLE001
        console.print(f"❌ [bold red]Internal error[/bold red]: {e!r}")
        raise typer.Exit(2)


def _int_pair(text: str, flag: str) -> tuple:
    try:
        values = [int(v) for v in text.split(",")]
    except ValueError:
        raise InputError(f"{flag} expects MIN,MAX integers, got '{text}'") from None
    if len(values) != 2:
        raise InputError(f"{flag} expects MIN,MAX integers, got '{text}'")
    return tuple(values)


@app.callback(invoke_without_command=True)
def main_callback(
    ctx: typer.Context,
    version: bool = typer.Option(
        False,
        "--version",
        "-v",
        help="Show version information.",
    ),
):
    """Main callback - shows welcome message if no command provided."""
    if version:
        typer.echo(f"{APP_NAME} version {APP_VERSION}")
        raise typer.Exit()

    if ctx.invoked_subcommand is None:
        welcome_message = Panel.fit(
            "[bold cyan]🚀 Welcome to MB-FCN CLI![/bold cyan]\n\n"
            "Train and evaluate a multi-branch face detector on synthetic or WIDER-style data.\n\n"
            "[yellow]Data:[/yellow]\n"
            "  • [cyan]synth[/cyan] - Generate a synthetic face-glyph dataset\n\n"
            "[yellow]Model:[/yellow]\n"
            "  • [cyan]train[/cyan] - Train a detector from a configuration file\n"
            "  • [cyan]detect[/cyan] - Run a trained detector over a directory of images\n"
            "  • [cyan]eval[/cyan] - Score detections (AP, precision at N false positives)\n"
            "  • [cyan]ablate[/cyan] - Compare several configurations under one seed\n"
            "  • [cyan]config-show[/cyan] - Validate and list a configuration file\n\n"
            "[yellow]Checks:[/yellow]\n"
            "  • [cyan]gradcheck[/cyan] - Finite-difference gradient self-check\n\n"
            f"[dim]Run '{APP_NAME} --help' or '{APP_NAME} -h' for more information[/dim]\n"
            f"[dim]Version {APP_VERSION}[/dim]",
            title="[bold]MB-FCN CLI[/bold]",
            border_style="cyan",
        )
        console.print(welcome_message)
        raise typer.Exit()


@app.command()
def synth(
    out: Path = typer.Option(..., "--out", help="Output dataset directory"),
    count: int = typer.Option(..., "--count", help="Number of images"),
    seed: int = typer.Option(DEFAULT_SEED, "--seed", help="Dataset seed"),
    size: int = typer.Option(DEFAULT_IMAGE_SIZE, "--size", help="Image side in pixels"),
    faces: str = typer.Option("1,6", "--faces", help="Faces per image as MIN,MAX"),
):
    """Generate a synthetic face-glyph dataset (PPM images + annotations.txt)."""
    with handle_errors():
        spec = SyntheticSpec(image_size=size, faces_per_image=_int_pair(faces, "--faces"), seed=seed, count=count)
        console.print(f"\n🎨 [bold]Generating {count} images in {out}...[/bold]\n")
        items = synth_generate(spec, out)
        total = sum(len(item.gts) for item in items)
        console.print(f"✅ Wrote {len(items)} images with {total} faces")


@app.command()
def train(
    config: Path = typer.Option(..., "--config", help="Configuration file"),
    data: Path = typer.Option(..., "--data", help="Dataset directory (annotations.txt + images)"),
    out: Path = typer.Option(..., "--out", help="Checkpoint path"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override train.seed"),
):
    """Train a detector; writes the checkpoint and a tab-separated <checkpoint>.log."""
    with handle_errors():
        model_cfg, train_cfg = parse_config(config)
        if seed is not None:
            train_cfg = replace(train_cfg, seed=seed)
        items = load_dataset(data)
        console.print(
            f"\n🏋️  [bold]Training {model_cfg.name} on {len(items)} images "
            f"({train_cfg.max_iters} iterations)[/bold]\n"
        )

        def on_checkpoint(params, iteration):
            save_checkpoint(params, model_cfg, train_cfg, out)
            console.print(f"💾 Checkpoint at iteration {iteration}: {out}")

        log_path = out.with_name(out.name + ".log")
        train_model(items, model_cfg, train_cfg, log_path=log_path, on_checkpoint=on_checkpoint)
        console.print(f"✅ Training finished; log written to {log_path}")


@app.command()
def detect(
    model: Path = typer.Option(..., "--model", help="Checkpoint path"),
    images: Path = typer.Option(..., "--images", help="Directory of PPM/PGM images"),
    out: Path = typer.Option(..., "--out", help="Detection file to write"),
    scales: Optional[str] = typer.Option(None, "--scales", help="Pyramid scales, e.g. 0.5,1.0,2.0"),
    score_thresh: float = typer.Option(DEFAULT_SCORE_THRESH, "--score-thresh", help="Minimum face probability"),
    nms_thresh: float = typer.Option(DEFAULT_NMS_THRESH, "--nms-thresh", help="NMS IoU threshold"),
):
    """Detect faces in every image of a directory."""
    with handle_errors():
        checkpoint = load_checkpoint(model)
        pyramid = None
        if scales is not None:
            try:
                pyramid = parse_float_list(scales)
            except ValueError:
                raise InputError(f"--scales expects comma-separated numbers, got '{scales}'") from None
        if not images.is_dir():
            raise InputError(f"image directory not found: {images}")
        items = [AnnotatedImage(path.stem, path, [], path.name) for path in list_image_files(images)]
        console.print(f"\n🔍 [bold]Detecting faces in {len(items)} images...[/bold]\n")
        dets = detect_images(
            items,
            checkpoint.model,
            checkpoint.params,
            checkpoint.train.max_side,
            pyramid,
            score_thresh,
            nms_thresh,
        )
        write_detections(dets, out)
        console.print(f"✅ Wrote {sum(len(d) for d in dets.values())} detections to {out}")


@app.command(name="eval")
def eval_command(
    det: Path = typer.Option(..., "--det", help="Detection file"),
    gt: Path = typer.Option(..., "--gt", help="Annotation file"),
    subset: str = typer.Option("all", "--subset", help="easy, medium, hard or all"),
    fp: Optional[int] = typer.Option(None, "--fp", help="Report precision at this many false positives"),
    pr_out: Optional[Path] = typer.Option(None, "--pr-out", help="Write recall/precision pairs here"),
    format: str = typer.Option("internal", "--format", help="Annotation format: internal or wider"),
):
    """Score detections against ground truth and print AP (and P@Nfp)."""
    with handle_errors():
        dets = read_detections(det)
        gts = {item.image_id: item.gts for item in parse_annotations(gt, format)}
        curve = evaluate(dets, gts, subset)
        typer.echo(f"AP={curve.ap:.6f}")
        if fp is not None:
            precision, recall = precision_at_fp(curve.outcomes(), fp, curve.n_gt)
            typer.echo(f"P@{fp}fp={precision:.6f}")
        if pr_out is not None:
            write_pr_curve(curve, pr_out)

        table = Table(title=f"Evaluation ({subset})")
        table.add_column("GT faces", justify="right")
        table.add_column("TP", justify="right", style="green")
        table.add_column("FP", justify="right", style="red")
        table.add_column("AP", justify="right", style="cyan")
        table.add_row(str(curve.n_gt), str(curve.num_tp), str(curve.num_fp), f"{curve.ap:.4f}")
        console.print(table)


@app.command()
def ablate(
    data: Path = typer.Option(..., "--data", help="Dataset directory"),
    configs: str = typer.Option(..., "--configs", help="Comma-separated configuration files"),
    out: Path = typer.Option(..., "--out", help="Report file (tab-separated)"),
    seed: int = typer.Option(DEFAULT_SEED, "--seed", help="Seed shared by every configuration"),
    val: Optional[Path] = typer.Option(None, "--val", help="Validation dataset (default: last sixth of --data)"),
):
    """Train each configuration with one seed and tabulate AP on easy/medium/hard."""
    with handle_errors():
        paths = [Path(p.strip()) for p in configs.split(",") if p.strip()]
        rows = run_ablation(data, paths, seed, val)
        write_report(rows, out)
        show_report(rows)
        console.print(f"✅ Report written to {out}")


@app.command(name="config-show")
def config_show(
    config: Path = typer.Option(..., "--config", help="Configuration file"),
):
    """Validate a configuration file and list its keys."""
    with handle_errors():
        config_file = ConfigFile.load(config)
        model_cfg = config_file.model_config()
        config_file.train_config(len(model_cfg.branches))
        config_file.show()
        console.print(f"✅ {model_cfg.name}: {len(model_cfg.branches)} branch(es)")


@app.command()
def gradcheck(
    instances: int = typer.Option(GRADCHECK_INSTANCES, "--instances", help="Random cases per operation"),
    seed: int = typer.Option(0, "--seed", help="Seed of the random cases"),
):
    """Compare analytic gradients with central finite differences (float64)."""
    with handle_errors():
        if instances < 1:
            raise InputError(f"--instances must be >= 1, got {instances}")
        console.print("\n🔍 [bold]Running gradient checks...[/bold]\n")
        results = run_gradcheck(instances, seed)

        table = Table(title="Gradient check")
        table.add_column("Operation", style="cyan")
        table.add_column("Instances", justify="right")
        table.add_column("Max rel. error", justify="right")
        table.add_column("Status")
        for result in results:
            status = "✅" if result.passed else "❌"
            table.add_row(result.name, str(result.instances), f"{result.max_error:.3e}", status)
        console.print(table)

        worst = max(r.max_error for r in results)
        typer.echo(f"max relative error={worst:.3e}")
        if not all(r.passed for r in results):
            console.print("❌ Gradient check failed")
            raise typer.Exit(2)


def run(argv: Optional[List[str]] = None) -> int:
    """
    Run the CLI on ``argv`` and return the exit code instead of exiting.

    Unknown flags or subcommands print usage and return 1.
    """
    command = typer.main.get_command(app)
    try:
        args = list(argv if argv is not None else sys.argv[1:])
        result = command.main(args=args, prog_name=APP_NAME, standalone_mode=False)
    except UsageError as e:
        e.show()
        return 1
    except typer.Abort:
        return 1
    return result if isinstance(result, int) else 0


def main():
    """Main entry point."""
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
