"""Image decoding/encoding, annotation files and detection files."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from rich.console import Console

from mbfcn_cli.anchors import Box
from mbfcn_cli.errors import InputError, ParseError
from mbfcn_cli.inference import Detection
from mbfcn_cli.tensor import Tensor

console = Console(stderr=True)

ANNOTATION_FORMATS = ("internal", "wider")


@dataclass
class AnnotatedImage:
    """
    One image entry of an annotation file.

    ``source`` is the path as written in the file, ``path`` the resolved one.
    Pixels are decoded on first access.
    """

    image_id: str
    path: Path
    gts: List[Box]
    source: str = ""
    _pixels: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def pixels(self) -> np.ndarray:
        if self._pixels is None:
            self._pixels = read_image(self.path).data
        return self._pixels


def read_image(path: Path) -> Tensor:
    """
    Decode a binary PPM (P6) or PGM (P5) file with max value 255.

    Args:
        path: Image file

    Returns:
        (1, 3, h, w) float32 Tensor in [0, 1] (no gradient); grayscale is replicated to 3 channels

    Raises:
        InputError: missing file or unsupported format
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise InputError(f"{path}: not a binary PPM/PGM image (magic {magic!r})")
        with Image.open(path) as image:
            image.load()
            if image.mode not in ("RGB", "L"):
                raise InputError(f"{path}: unsupported image mode {image.mode} (only 8-bit P5/P6)")
            array = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise InputError(f"image file not found: {path}") from None
    except (UnidentifiedImageError, OSError) as e:
        raise InputError(f"{path}: cannot decode image: {e}") from None
    return Tensor(np.ascontiguousarray(array.transpose(2, 0, 1)[None]), name=path.name)


def write_image(path: Path, pixels: np.ndarray) -> None:
    """Encode a (1, 3, h, w) array in [0, 1] or an (h, w, 3) uint8 array as binary PPM."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pixels.ndim == 4:
        pixels = np.clip(np.rint(pixels[0].transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PPM")


def _numbers(tokens: Sequence[str], path: Path, line: int, count: int) -> List[float]:
    if len(tokens) < count:
        raise ParseError(f"expected {count} numbers, got {len(tokens)}", str(path), line)
    try:
        return [float(t) for t in tokens[:count]]
    except ValueError:
        raise ParseError(f"expected numbers, got '{' '.join(tokens)}'", str(path), line) from None


def _count(text: str, path: Path, line: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ParseError(f"expected a face count, got '{text}'", str(path), line) from None
    if value < 0:
        raise ParseError(f"face count must be >= 0, got {value}", str(path), line)
    return value


def _keep_box(values: Sequence[float], path: Path, line: int) -> Optional[Box]:
    box = Box(*values)
    if not box.is_valid:
        shown = " ".join(f"{v:g}" for v in values)
        console.print(f"⚠️  {path}:{line}: dropping degenerate box {shown}")
        return None
    return box


def _entry(source: str, base: Path, gts: List[Box]) -> AnnotatedImage:
    resolved = Path(source) if Path(source).is_absolute() else base / source
    return AnnotatedImage(image_id=Path(source).stem, path=resolved, gts=gts, source=source)


def parse_annotations(path: Path, format: str = "internal") -> List[AnnotatedImage]:
    """
    Parse an annotation file.

    internal: per image ``<image_path> <n>`` then n lines ``x y w h``.
    wider: per image a path line, a face-count line, then that many lines whose
    first 4 integers are ``x y w h`` (attribute fields ignored). A zero count may
    be followed by the all-zero placeholder row.

    Image paths are resolved against the annotation file's directory; boxes with
    w <= 0 or h <= 0 are dropped with a warning.

    Raises:
        InputError: unreadable file or unknown format
        ParseError: malformed content, with the 1-based line number
    """
    if format not in ANNOTATION_FORMATS:
        raise InputError(f"unknown annotation format '{format}' (expected {' or '.join(ANNOTATION_FORMATS)})")
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise InputError(f"annotation file not found: {path}") from None
    base = path.parent
    entries: List[AnnotatedImage] = []
    i = 0

    def next_line():
        nonlocal i
        while i < len(lines) and not lines[i].strip():
            i += 1
        if i >= len(lines):
            return None, i
        i += 1
        return lines[i - 1].strip(), i

    while True:
        header, line_no = next_line()
        if header is None:
            break
        if format == "internal":
            parts = header.rsplit(maxsplit=1)
            if len(parts) != 2:
                raise ParseError("expected '<image_path> <count>'", str(path), line_no)
            source, count = parts[0], _count(parts[1], path, line_no)
        else:
            source = header
            text, count_line = next_line()
            if text is None:
                raise ParseError(f"missing face count for '{source}'", str(path), line_no + 1)
            count = _count(text, path, count_line)

        gts: List[Box] = []
        for _ in range(count):
            text, box_line = next_line()
            if text is None:
                message = f"block for '{source}' ends after {len(gts)} of {count} boxes"
                raise ParseError(message, str(path), len(lines) + 1)
            tokens = text.split()
            if format == "internal" and len(tokens) != 4:
                raise ParseError(f"expected 'x y w h', got '{text}'", str(path), box_line)
            box = _keep_box(_numbers(tokens, path, box_line, 4), path, box_line)
            if box is not None:
                gts.append(box)

        if format == "wider" and count == 0:
            saved = i
            text, _ = next_line()
            tokens = text.split() if text else []
            try:
                placeholder = len(tokens) >= 4 and all(float(t) == 0 for t in tokens[:4])
            except ValueError:
                placeholder = False
            if not placeholder:
                i = saved

        entries.append(_entry(source, base, gts))
    return entries


def _number(value: float) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def write_annotations(items: Sequence[AnnotatedImage], path: Path) -> None:
    """Write the internal annotation format; ``parse_annotations`` reads it back exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for item in items:
            source = item.source or str(item.path)
            f.write(f"{source} {len(item.gts)}\n")
            for box in item.gts:
                f.write(" ".join(_number(v) for v in (box.x, box.y, box.w, box.h)) + "\n")


def write_detections(dets_by_image: Mapping[str, Sequence[Detection]], path: Path) -> None:
    """
    Write detections grouped per image, images sorted by id.

    Each group is a ``# <image_id>`` header followed by ``x y w h score`` lines
    with 6 decimals.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for image_id in sorted(dets_by_image):
            f.write(f"# {image_id}\n")
            for det in dets_by_image[image_id]:
                b = det.box
                f.write(f"{b.x:.6f} {b.y:.6f} {b.w:.6f} {b.h:.6f} {det.score:.6f}\n")


def read_detections(path: Path) -> Dict[str, List[Detection]]:
    """Read a detection file written by ``write_detections``."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise InputError(f"detection file not found: {path}") from None
    result: Dict[str, List[Detection]] = {}
    current: Optional[str] = None
    for line_no, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        if text.startswith("#"):
            current = text[1:].strip()
            if not current:
                raise ParseError("empty image id in header", str(path), line_no)
            result.setdefault(current, [])
            continue
        if current is None:
            raise ParseError("detection line before any '# <image_id>' header", str(path), line_no)
        tokens = text.split()
        if len(tokens) != 5:
            raise ParseError(f"expected 'x y w h score', got '{text}'", str(path), line_no)
        x, y, w, h, score = _numbers(tokens, path, line_no, 5)
        result[current].append(Detection(Box(x, y, w, h), score, 0, current))
    return result
