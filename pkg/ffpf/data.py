"""
Synthetic small-object scenes: value-noise backgrounds with squares, disks and
bars of 4-10 px.  Images are binary PPM; annotations are one JSON record per line.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from ffpf.detect import GroundTruth
from ffpf.exceptions import DatasetError
from ffpf.models import SceneSpec
from ffpf.settings import get_settings
from ffpf.tensor import Tensor

logger = logging.getLogger(__name__)

ANNOTATIONS = "annotations.jsonl"
IMAGES = "images"
SCENE = "scene.json"
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
_PLACEMENT_ATTEMPTS = 30


@dataclass
class SceneRecord:
    image_id: str
    image: np.ndarray  # [H, W, 3] uint8
    boxes: np.ndarray  # [G, 4] x1 y1 x2 y2, pixels
    classes: np.ndarray  # [G]

    @property
    def ground_truth(self) -> GroundTruth:
        return GroundTruth(boxes=self.boxes, classes=self.classes)


def _background(spec: SceneSpec, rng: np.random.Generator) -> Image.Image:
    cells = spec.noise_cells
    coarse = rng.integers(40, 140, size=(cells, cells, 3), dtype=np.uint8)
    image = Image.fromarray(coarse, "RGB").resize(
        (spec.image_size, spec.image_size), Image.Resampling.BILINEAR
    )
    gain = 1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    pixels = np.clip(np.asarray(image, dtype=np.float64) * gain, 0, 255).astype(np.uint8)
    return Image.fromarray(pixels, "RGB")


def _object_extent(shape: str, size: int, spec: SceneSpec, rng: np.random.Generator) -> tuple[int, int]:
    if shape != "bar":
        return size, size
    short = max(spec.min_size, size // 2)
    return (size, short) if rng.integers(2) else (short, size)


def _overlaps(box: list[int], placed: list[list[int]]) -> bool:
    x1, y1, x2, y2 = box
    return any(x1 <= b[2] and b[0] <= x2 and y1 <= b[3] and b[1] <= y2 for b in placed)


def render_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[list[int]]]:
    """One image and its boxes as [x1, y1, x2, y2, class] (x2/y2 exclusive)."""
    image = _background(spec, rng)
    draw = ImageDraw.Draw(image)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[list[int]] = []
    annotations: list[list[int]] = []
    for _ in range(count):
        cls = int(rng.integers(len(spec.shapes)))
        shape = spec.shapes[cls]
        size = int(rng.integers(spec.min_size, spec.max_size + 1))
        w, h = _object_extent(shape, size, spec, rng)
        color = tuple(int(v) for v in rng.integers(170, 256, size=3))
        for _ in range(_PLACEMENT_ATTEMPTS):
            x1 = int(rng.integers(0, spec.image_size - w + 1))
            y1 = int(rng.integers(0, spec.image_size - h + 1))
            box = [x1, y1, x1 + w, y1 + h]
            if not _overlaps(box, placed):
                break
        else:
            continue
        corners = [x1, y1, x1 + w - 1, y1 + h - 1]
        if shape == "disk":
            draw.ellipse(corners, fill=color)
        else:
            draw.rectangle(corners, fill=color)
        placed.append(box)
        annotations.append([*box, cls])
    if not annotations:
        raise DatasetError("could not place any object; widen the scene or shrink objects")
    return np.asarray(image), annotations


def _write_one(spec: SceneSpec, seed: int, index: int, image_dir: Path) -> dict:
    rng = np.random.default_rng([seed, index])
    pixels, boxes = render_scene(spec, rng)
    name = f"{index:06d}.ppm"
    Image.fromarray(pixels, "RGB").save(image_dir / name, format="PPM")
    return {"image": name, "boxes": boxes}


def generate_dataset(spec: SceneSpec, n_images: int, seed: int, out_dir: Path) -> list[dict]:
    """Write ``n_images`` scenes to ``out_dir``; deterministic per (spec, seed).

    Each image has its own generator seeded by (seed, index), so images may be
    rendered in parallel and the files are identical for any thread count.

    Args:
        spec: Image size, object count and size ranges, shapes and noise.
        n_images: Number of scenes to render.
        seed: Base seed of the per-image generators.
        out_dir: Split directory. Receives the images, one annotation line
            per image and a record of the SceneSpec and seed.

    Returns:
        The annotation records in image order, as written.

    Raises:
        DatasetError: ``n_images`` is not positive or ``out_dir`` cannot be
            written.
    """
    if n_images <= 0:
        raise DatasetError(f"n_images must be positive, got {n_images}")
    image_dir = out_dir / IMAGES
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create {image_dir}: {e}") from e

    threads = max(1, get_settings().THREADS)
    try:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(
                pool.map(lambda i: _write_one(spec, seed, i, image_dir), range(n_images))
            )
        with open(out_dir / ANNOTATIONS, "w") as f:
            for record in records:
                f.write(json.dumps(record) + "\n")
        (out_dir / SCENE).write_text(
            json.dumps({"spec": spec.model_dump(), "seed": seed, "n_images": n_images}) + "\n"
        )
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {out_dir}: {e}") from e
    logger.info("wrote %d images to %s", n_images, out_dir)
    return records


def box_area_fractions(records: Sequence[dict], image_size: int) -> np.ndarray:
    areas = [
        (b[2] - b[0]) * (b[3] - b[1]) / (image_size * image_size)
        for r in records
        for b in r["boxes"]
    ]
    return np.asarray(areas, dtype=np.float64)


class Dataset:
    """An on-disk split (``annotations.jsonl`` + ``images/``), held in memory."""

    def __init__(self, root: Path, records: list[SceneRecord]) -> None:
        self.root = root
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    @property
    def image_size(self) -> tuple[int, int]:
        h, w = self.records[0].image.shape[:2]
        return h, w

    def batch(self, indices: Sequence[int]) -> tuple[Tensor, list[GroundTruth]]:
        pixels = np.stack([self.records[i].image for i in indices]).astype(np.float32)
        images = (pixels.transpose(0, 3, 1, 2) / 255.0 - PIXEL_MEAN) / PIXEL_STD
        return Tensor(images), [self.records[i].ground_truth for i in indices]

    def image_ids(self, indices: Sequence[int]) -> list[str]:
        return [self.records[i].image_id for i in indices]

    def ground_truth(self) -> dict[str, GroundTruth]:
        return {r.image_id: r.ground_truth for r in self.records}


def _parse_record(root: Path, line_no: int, line: str) -> SceneRecord:
    try:
        raw = json.loads(line)
        name = raw["image"]
        boxes = np.asarray([b[:4] for b in raw["boxes"]], dtype=np.float64).reshape(-1, 4)
        classes = np.asarray([b[4] for b in raw["boxes"]], dtype=np.int64)
    except (ValueError, KeyError, IndexError, TypeError) as e:
        raise DatasetError(f"{root / ANNOTATIONS}:{line_no}: malformed record ({e})") from e
    path = root / IMAGES / name
    if not path.exists():
        raise DatasetError(f"{root / ANNOTATIONS}:{line_no}: missing image {path}")
    with Image.open(path) as im:
        image = np.asarray(im.convert("RGB"))
    h, w = image.shape[:2]
    if len(boxes) and (
        np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1])
    ):
        raise DatasetError(f"{root / ANNOTATIONS}:{line_no}: degenerate (zero-area) box")
    if len(boxes) and (
        np.any(boxes[:, :2] < 0) or np.any(boxes[:, 2] > w) or np.any(boxes[:, 3] > h)
    ):
        raise DatasetError(f"{root / ANNOTATIONS}:{line_no}: box outside the image")
    return SceneRecord(image_id=Path(name).stem, image=image, boxes=boxes, classes=classes)


def load_dataset(root: Path) -> Dataset:
    annotations = root / ANNOTATIONS
    if not annotations.exists():
        raise DatasetError(f"no {ANNOTATIONS} under {root}")
    lines = [line for line in annotations.read_text().splitlines() if line.strip()]
    records = [_parse_record(root, i + 1, line) for i, line in enumerate(lines)]
    if not records:
        raise DatasetError(f"{annotations} is empty")
    sizes = {r.image.shape for r in records}
    if len(sizes) != 1:
        raise DatasetError(f"images under {root} differ in size: {sorted(sizes)}")
    logger.info("loaded %d images from %s", len(records), root)
    return Dataset(root, records)
