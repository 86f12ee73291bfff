"""Deterministic synthetic face-glyph datasets."""

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw
from rich.console import Console

from mbfcn_cli.anchors import Box, iou
from mbfcn_cli.constants import (
    ANNOTATION_FILE,
    DEFAULT_CLUTTER_COUNT,
    DEFAULT_FACE_SIZE_RANGE,
    DEFAULT_FACES_PER_IMAGE,
    DEFAULT_IMAGE_SIZE,
    DEFAULT_SEED,
    IMAGES_DIR,
    MANIFEST_FILE,
    MAX_PAIRWISE_IOU,
    MAX_PLACEMENT_ATTEMPTS,
)
from mbfcn_cli.errors import InputError
from mbfcn_cli.formats import AnnotatedImage, parse_annotations, write_annotations, write_image
from mbfcn_cli.utils import derive_rng, load_yaml_file, save_yaml_file

console = Console(stderr=True)


@dataclass(frozen=True)
class SyntheticSpec:
    """What ``synth_generate`` produces: image size, face/clutter counts, face size range, seed, count."""

    image_size: int = DEFAULT_IMAGE_SIZE
    faces_per_image: Tuple[int, int] = DEFAULT_FACES_PER_IMAGE
    face_size_range: Tuple[float, float] = DEFAULT_FACE_SIZE_RANGE
    clutter_count: Tuple[int, int] = DEFAULT_CLUTTER_COUNT
    seed: int = DEFAULT_SEED
    count: int = 100

    def __post_init__(self):
        lo, hi = self.faces_per_image
        if self.image_size < 16:
            raise InputError(f"image size must be >= 16, got {self.image_size}")
        if lo < 0 or hi < lo:
            raise InputError(f"faces per image must satisfy 0 <= min <= max, got {lo},{hi}")
        small, large = self.face_size_range
        if small < 2 or large < small:
            raise InputError(f"face size range must satisfy 2 <= min <= max, got {small},{large}")
        c_lo, c_hi = self.clutter_count
        if c_lo < 0 or c_hi < c_lo:
            raise InputError(f"clutter count must satisfy 0 <= min <= max, got {c_lo},{c_hi}")
        if self.count < 0:
            raise InputError(f"image count must be >= 0, got {self.count}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        return {key: list(value) if isinstance(value, tuple) else value for key, value in data.items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticSpec":
        return cls(**{key: tuple(value) if isinstance(value, list) else value for key, value in data.items()})


def sample_face_size(rng: np.random.Generator, size_range: Tuple[float, float]) -> float:
    """Log-uniform face height in ``size_range``."""
    lo, hi = size_range
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _gray(level: float) -> Tuple[int, int, int]:
    value = int(np.clip(round(level), 0, 255))
    return value, value, value


def _draw_clutter(draw: ImageDraw.ImageDraw, rng: np.random.Generator, spec: SyntheticSpec) -> None:
    limit = spec.image_size
    lo, hi = spec.face_size_range
    for _ in range(int(rng.integers(spec.clutter_count[0], spec.clutter_count[1] + 1))):
        kind = int(rng.integers(3))
        w = min(limit, max(2, int(round(sample_face_size(rng, (lo, hi)) * rng.uniform(0.6, 1.6)))))
        h = min(limit, max(2, int(round(sample_face_size(rng, (lo, hi)) * rng.uniform(0.6, 1.6)))))
        x = int(rng.integers(0, limit - w + 1))
        y = int(rng.integers(0, limit - h + 1))
        color = _gray(rng.uniform(30, 230))
        shape = [x, y, x + w - 1, y + h - 1]
        if kind == 0:
            draw.rectangle(shape, fill=color if rng.random() < 0.5 else None, outline=color)
        elif kind == 1:
            draw.ellipse(shape, outline=color, width=max(1, min(w, h) // 8))
        else:
            draw.ellipse(shape, fill=color)


def _draw_face(draw: ImageDraw.ImageDraw, rng: np.random.Generator, box: Box) -> None:
    x, y, w, h = int(box.x), int(box.y), int(box.w), int(box.h)
    fill = rng.uniform(170, 240)
    border = max(1, int(round(min(w, h) / 12)))
    draw.ellipse([x, y, x + w - 1, y + h - 1], fill=_gray(fill), outline=_gray(fill - 110), width=border)
    dark = _gray(rng.uniform(10, 60))
    radius = max(1.0, 0.08 * min(w, h))
    for fx, fy in ((0.32, 0.38), (0.68, 0.38), (0.5, 0.72)):
        cx, cy = x + fx * w, y + fy * h
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=dark)


def _place_faces(rng: np.random.Generator, spec: SyntheticSpec, index: int) -> List[Box]:
    limit = spec.image_size
    size_range = (min(spec.face_size_range[0], limit), min(spec.face_size_range[1], limit))
    placed: List[Box] = []
    for _ in range(int(rng.integers(spec.faces_per_image[0], spec.faces_per_image[1] + 1))):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            h = min(limit, max(2, int(round(sample_face_size(rng, size_range)))))
            w = min(limit, max(2, int(round(h * rng.uniform(0.8, 1.0)))))
            candidate = Box(int(rng.integers(0, limit - w + 1)), int(rng.integers(0, limit - h + 1)), w, h)
            if all(iou(candidate, other) < MAX_PAIRWISE_IOU for other in placed):
                placed.append(candidate)
                break
        else:
            console.print(f"⚠️  Image {index}: dropped a face after {MAX_PLACEMENT_ATTEMPTS} placement attempts")
    return placed


def render(spec: SyntheticSpec, index: int) -> Tuple[np.ndarray, List[Box]]:
    """
    Render image ``index`` of ``spec``.

    The result depends only on (spec, index): gray noise, distractor shapes,
    then face glyphs (bordered disc with two eyes and a mouth) on top.

    Returns:
        (h, w, 3) uint8 pixels and the tight glyph boxes
    """
    rng = derive_rng(spec.seed, index)
    size = spec.image_size
    base = rng.uniform(80, 170)
    noise = rng.normal(base, 12.0, size=(size, size, 1))
    pixels = np.clip(np.rint(np.repeat(noise, 3, axis=2)), 0, 255).astype(np.uint8)
    image = Image.fromarray(pixels)
    draw = ImageDraw.Draw(image)
    _draw_clutter(draw, rng, spec)
    boxes = _place_faces(rng, spec, index)
    for box in boxes:
        _draw_face(draw, rng, box)
    return np.asarray(image), boxes


def image_name(index: int) -> str:
    return f"img_{index:05d}.ppm"


def synth_generate(spec: SyntheticSpec, out_dir: Path) -> List[AnnotatedImage]:
    """
    Write ``spec.count`` images, the annotation file and a manifest under ``out_dir``.

    Args:
        spec: Dataset description
        out_dir: Target directory (created if missing)

    Returns:
        The generated entries, pixels already attached
    """
    out_dir = Path(out_dir)
    (out_dir / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    items = []
    for index in range(spec.count):
        pixels, boxes = render(spec, index)
        source = f"{IMAGES_DIR}/{image_name(index)}"
        write_image(out_dir / source, pixels)
        item = AnnotatedImage(Path(source).stem, out_dir / source, boxes, source)
        item._pixels = np.ascontiguousarray(pixels.transpose(2, 0, 1)[None].astype(np.float32) / 255.0)
        items.append(item)
    write_annotations(items, out_dir / ANNOTATION_FILE)
    save_yaml_file(out_dir / MANIFEST_FILE, spec.to_dict())
    return items


def read_manifest(directory: Path) -> Optional[SyntheticSpec]:
    """The SyntheticSpec a dataset was generated from, or None without a manifest."""
    path = Path(directory) / MANIFEST_FILE
    data = load_yaml_file(path)
    if not data:
        return None
    try:
        return SyntheticSpec.from_dict(data)
    except TypeError as e:
        raise InputError(f"{path}: invalid manifest: {e}") from None


def load_dataset(directory: Path, format: str = "internal") -> List[AnnotatedImage]:
    """
    Annotated images of a dataset directory (its ``annotations.txt``).

    When the directory carries a manifest, a count that disagrees with the
    annotation file is reported as a warning.
    """
    path = Path(directory) / ANNOTATION_FILE
    if not path.exists():
        raise InputError(f"{directory} has no {ANNOTATION_FILE}")
    items = parse_annotations(path, format)
    manifest = read_manifest(directory)
    if manifest is not None and manifest.count != len(items):
        console.print(
            f"⚠️  {directory}: manifest lists {manifest.count} images but {ANNOTATION_FILE} has {len(items)}"
        )
    return items
