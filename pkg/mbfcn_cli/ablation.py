"""Configuration sweeps: train several detectors under one seed and compare subset APs."""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

from rich.console import Console
from rich.table import Table

from mbfcn_cli.config import parse_config
from mbfcn_cli.constants import HOLDOUT_FRACTION
from mbfcn_cli.dataset import load_dataset
from mbfcn_cli.errors import InputError
from mbfcn_cli.evaluation import evaluate_subsets
from mbfcn_cli.inference import detect_images
from mbfcn_cli.training import split_holdout, train

console = Console(stderr=True)

REPORT_SUBSETS = ("easy", "medium", "hard")
REPORT_HEADER = "config\tAP-easy\tAP-medium\tAP-hard"


@dataclass
class AblationRow:
    name: str
    ap_easy: float
    ap_medium: float
    ap_hard: float

    def to_line(self) -> str:
        return f"{self.name}\t{self.ap_easy:.6f}\t{self.ap_medium:.6f}\t{self.ap_hard:.6f}"


def run_ablation(
    data_dir: Path,
    config_paths: Sequence[Path],
    seed: int,
    val_dir: Optional[Path] = None,
) -> List[AblationRow]:
    """
    Train and evaluate each configuration, in the given order.

    Every configuration is trained with ``seed`` (overriding its own
    ``train.seed``). Without ``val_dir`` the last sixth of the dataset is held
    out for evaluation and the rest is used for training.

    Returns:
        One row per configuration
    """
    if not config_paths:
        raise InputError("ablate needs at least one configuration file")
    configs = [parse_config(path) for path in config_paths]
    items = load_dataset(data_dir)
    if val_dir is not None:
        train_items, val_items = items, load_dataset(val_dir)
    else:
        train_items, val_items = split_holdout(items, HOLDOUT_FRACTION)
    if not train_items or not val_items:
        raise InputError(f"{data_dir}: need at least two images to train and evaluate")

    gts = {item.image_id: item.gts for item in val_items}
    rows = []
    for path, (model_cfg, train_cfg) in zip(config_paths, configs):
        train_cfg = replace(train_cfg, seed=seed)
        console.print(f"🏋️  Training {model_cfg.name} ({path}) on {len(train_items)} images")
        result = train(train_items, model_cfg, train_cfg)
        dets = detect_images(val_items, model_cfg, result.params, train_cfg.max_side)
        curves = evaluate_subsets(dets, gts, REPORT_SUBSETS)
        rows.append(AblationRow(model_cfg.name, *(curves[s].ap for s in REPORT_SUBSETS)))
    return rows


def write_report(rows: Sequence[AblationRow], path: Path) -> None:
    """Tab-separated report: header row, then one row per configuration."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(REPORT_HEADER + "\n")
        for row in rows:
            f.write(row.to_line() + "\n")


def show_report(rows: Sequence[AblationRow]) -> None:
    table = Table(title="Ablation")
    table.add_column("Config", style="cyan")
    for subset in REPORT_SUBSETS:
        table.add_column(f"AP-{subset}", style="green", justify="right")
    for row in rows:
        table.add_row(row.name, f"{row.ap_easy:.4f}", f"{row.ap_medium:.4f}", f"{row.ap_hard:.4f}")
    console.print(table)
