"""Synthetic detection scenes, ground-truth padding, and serialization.

Scenes are soft-edged elliptical bright blobs on a noisy dark
background; each ground-truth box is the tight bounding box of its blob
at half-maximum intensity (for an axis-aligned Gaussian blob that box is
analytic: the half-max radii are the configured blob radii).  Datasets
serialize as COCO-style JSON plus lossless grayscale PNGs.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry
from .errors import DatasetError
from .geometry import NormalizedBox

CATEGORY_ID = 1
CATEGORY_NAME = "lesion"
DUMMY_BOX = NormalizedBox(0.5, 0.5, 0.1, 0.1)

# Converts a half-maximum radius to the Gaussian sigma of the blob.
HALF_MAX_SIGMA = 1.0 / np.sqrt(2.0 * np.log(2.0))


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    n_objects_range: tuple[int, int] = (1, 3)
    object_scale_range: tuple[float, float] = (0.14, 0.40)
    noise_level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_objects_range
        if not (1 <= lo <= hi):
            raise ValueError(f"bad n_objects_range {self.n_objects_range}")
        slo, shi = self.object_scale_range
        if not (geometry.W_MIN < slo <= shi < 1.0):
            raise ValueError(f"bad object_scale_range {self.object_scale_range}")


@dataclass
class AnnotatedImage:
    image: np.ndarray                      # (H, W) float32 in [0, 1]
    gt_boxes: list[NormalizedBox] = field(default_factory=list)
    image_id: str = ""


def _sample_box(cfg: SceneConfig, rng: np.random.Generator,
                existing: list[NormalizedBox]) -> NormalizedBox:
    slo, shi = cfg.object_scale_range
    margin = 0.01
    for _ in range(40):
        w = rng.uniform(slo, shi)
        h = float(np.clip(w * rng.uniform(0.65, 1.55), slo, shi))
        cx = rng.uniform(w / 2 + margin, 1.0 - w / 2 - margin)
        cy = rng.uniform(h / 2 + margin, 1.0 - h / 2 - margin)
        box = NormalizedBox(cx, cy, w, h)
        c = geometry.to_corners(box)
        if all(geometry.iou(c, geometry.to_corners(b)) < 0.15 for b in existing):
            return box
    return box  # crowded scene: accept the last candidate


def generate_scene(cfg: SceneConfig, rng: np.random.Generator,
                   image_id: str = "scene") -> AnnotatedImage:
    """Render one scene; deterministic given the generator state."""
    size = cfg.image_size
    n = int(rng.integers(cfg.n_objects_range[0], cfg.n_objects_range[1] + 1))
    boxes: list[NormalizedBox] = []
    peaks: list[float] = []
    for _ in range(n):
        boxes.append(_sample_box(cfg, rng, boxes))
        peaks.append(rng.uniform(0.55, 0.95))

    coords = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(coords, coords)        # xx varies along width
    img = 0.08 + rng.normal(0.0, cfg.noise_level, size=(size, size))
    for box, peak in zip(boxes, peaks):
        sx = (box.w / 2.0) * HALF_MAX_SIGMA
        sy = (box.h / 2.0) * HALF_MAX_SIGMA
        img += peak * np.exp(-0.5 * (((xx - box.cx) / sx) ** 2
                                     + ((yy - box.cy) / sy) ** 2))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return AnnotatedImage(image=img, gt_boxes=boxes, image_id=image_id)


def pad_gt_boxes(boxes: list[NormalizedBox], n_prop: int) -> tuple[np.ndarray, np.ndarray]:
    """Cyclically repeat ground truths up to n_prop flow-space rows.

    Empty inputs get center dummy boxes with an all-false foreground
    mask; otherwise every padded row is a real (possibly repeated) box
    and the mask is all true.
    """
    if n_prop < 1:
        raise ValueError(f"n_prop must be >= 1, got {n_prop}")
    if boxes:
        chosen = [boxes[j % len(boxes)] for j in range(n_prop)]
        mask = np.ones(n_prop, dtype=bool)
    else:
        chosen = [DUMMY_BOX] * n_prop
        mask = np.zeros(n_prop, dtype=bool)
    arr = np.array([[b.cx, b.cy, b.w, b.h] for b in chosen], dtype=np.float64)
    return geometry.encode_flow_array(arr), mask


# ---------------------------------------------------------------------------
# Serialization: COCO-style annotations.json + images/*.png per split.
# ---------------------------------------------------------------------------

def write_json_atomic(path: Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(obj, f, sort_keys=True, indent=1)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(scenes: list[AnnotatedImage], path: Path) -> None:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for idx, scene in enumerate(scenes):
        h, w = scene.image.shape
        file_name = f"{scene.image_id}.png"
        images.append({"id": idx, "file_name": file_name, "width": w, "height": h})
        arr = np.clip(np.round(scene.image * 255.0), 0, 255).astype(np.uint8)
        tmp = path / "images" / (file_name + ".tmp")
        Image.fromarray(arr, mode="L").save(tmp, format="PNG")
        os.replace(tmp, path / "images" / file_name)
        for box in scene.gt_boxes:
            x1, y1, x2, y2 = geometry.to_corners(box)
            annotations.append({
                "id": ann_id,
                "image_id": idx,
                "bbox": [x1 * w, y1 * h, (x2 - x1) * w, (y2 - y1) * h],
                "category_id": CATEGORY_ID,
            })
            ann_id += 1
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": CATEGORY_ID, "name": CATEGORY_NAME}],
    }
    write_json_atomic(path / "annotations.json", payload)


def load_dataset(path: Path) -> list[AnnotatedImage]:
    path = Path(path)
    ann_path = path / "annotations.json"
    if not ann_path.exists():
        raise DatasetError(f"missing annotations file: {ann_path}")
    try:
        payload = json.loads(ann_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(
            f"malformed JSON in {ann_path} at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from None

    by_image: dict[int, list[NormalizedBox]] = {}
    dims: dict[int, tuple[int, int]] = {
        entry["id"]: (entry["width"], entry["height"]) for entry in payload["images"]
    }
    for ann in payload["annotations"]:
        w, h = dims[ann["image_id"]]
        x, y, bw, bh = ann["bbox"]
        box = NormalizedBox((x + bw / 2) / w, (y + bh / 2) / h, bw / w, bh / h)
        by_image.setdefault(ann["image_id"], []).append(box)

    scenes = []
    for entry in payload["images"]:
        img_path = path / "images" / entry["file_name"]
        if not img_path.exists():
            raise DatasetError(f"missing image file for id {entry['id']}: {img_path}")
        arr = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
        scenes.append(AnnotatedImage(
            image=arr,
            gt_boxes=by_image.get(entry["id"], []),
            image_id=Path(entry["file_name"]).stem,
        ))
    return scenes


def generate_scenes(cfg: SceneConfig, count: int, start_index: int = 0) -> list[AnnotatedImage]:
    """Generate `count` scenes with ids scene_{start_index}.. using
    per-scene child seeds, so any scene is reproducible in isolation."""
    out = []
    for i in range(count):
        child = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(start_index + i,))
        rng = np.random.default_rng(child)
        out.append(generate_scene(cfg, rng, image_id=f"scene_{start_index + i:05d}"))
    return out


def generate_dataset(root: Path, cfg: SceneConfig, train: int = 2000,
                     val: int = 300, test: int = 300) -> dict[str, Path]:
    """Write train/val/test splits with disjoint scene ids under root."""
    root = Path(root)
    counts = {"train": train, "val": val, "test": test}
    start = 0
    paths = {}
    for split, count in counts.items():
        scenes = generate_scenes(cfg, count, start_index=start)
        split_path = root / split
        save_dataset(scenes, split_path)
        paths[split] = split_path
        start += count
    return paths
