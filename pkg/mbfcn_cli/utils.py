"""Utility functions for mbfcn-cli."""

import zlib
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import yaml
from rich.console import Console

from mbfcn_cli.constants import IMAGE_SUFFIXES

console = Console(stderr=True)


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """
    Build a generator fully determined by a seed and extra keys.

    Args:
        seed: Global seed
        keys: Integers or strings (strings are hashed with CRC32)

    Returns:
        numpy Generator
    """
    entropy = [int(seed)]
    for key in keys:
        entropy.append(zlib.crc32(key.encode("utf-8")) if isinstance(key, str) else int(key))
    return np.random.default_rng(entropy)


def load_yaml_file(file_path: Path) -> Dict[str, Any]:
    """
    Load YAML from file.

    Args:
        file_path: Path to YAML file

    Returns:
        Parsed mapping, empty when the file is missing or unreadable
    """
    try:
        with open(file_path, "r") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        return {}
    except yaml.YAMLError as e:
        console.print(f"⚠️  Warning: Could not parse {file_path}: {e}")
        return {}
    return data if isinstance(data, dict) else {}


def save_yaml_file(file_path: Path, data: Dict[str, Any]) -> None:
    """
    Save dictionary as YAML file.

    Args:
        file_path: Path to save YAML file
        data: Dictionary to save
    """
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, "w") as f:
        yaml.safe_dump(data, f, sort_keys=True)


def list_image_files(directory: Path) -> List[Path]:
    """Image files (PPM/PGM) directly inside ``directory``, sorted by name."""
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def parse_float_list(text: str) -> List[float]:
    """Parse ``"1.0, 0.5"`` into floats; raises ValueError on bad items."""
    return [float(item) for item in text.split(",") if item.strip()]
