"""Datasets: label-exact synthetic scenes, FSC147 ingestion, resizing, augmentation.

Synthetic scenes draw a known number of same-family shapes onto a light noisy
background, so the count label is exact by construction. Rendering is
deterministic per (seed, index) and supersampled 2x for soft edges.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import InfeasiblePackingError, MalformedAnnotationError

SHAPE_KINDS = ("disk", "square", "triangle", "blob")

FSC147_SPLIT_SIZES = {"train": 3659, "test": 1286, "val": 1190}


@dataclass
class DatasetRecord:
    """One counting example: an image (in memory or on disk) and its count."""

    count: float
    split: str = "train"
    image: torch.Tensor | None = None
    image_path: str | None = None
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    points: list[tuple[float, float]] = field(default_factory=list)
    record_id: str = ""

    def load_image(self) -> torch.Tensor:
        """Return the (3, H, W) float image in [0, 1], reading from disk if needed."""
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise ValueError(f"record {self.record_id!r} has neither image nor path")
        return load_png(self.image_path)


def save_png(image: torch.Tensor, path) -> None:
    arr = (image.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    arr = arr.permute(1, 2, 0).numpy()
    Image.fromarray(arr, mode="RGB").save(Path(path), format="PNG")


def load_png(path) -> torch.Tensor:
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Geometry and appearance ranges for generated counting scenes.

    Object radii are fractions of the canvas side. Every object of a scene
    shares one shape kind and a base color, matching the assumption that a
    scene repeats a single object class.
    """

    canvas: int = 96
    shapes: tuple[str, ...] = SHAPE_KINDS
    count_min: int = 1
    count_max: int = 20
    scale_min: float = 0.05
    scale_max: float = 0.085
    max_iou: float = 0.1
    min_gap: float = 0.0
    noise: float = 0.02
    distractors: bool = False
    place_attempts: int = 200
    supersample: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.count_min < 0 or self.count_max < self.count_min:
            raise ValueError("need 0 <= count_min <= count_max")
        if not (0.0 < self.scale_min <= self.scale_max < 0.5):
            raise ValueError("object scale must fall in (0, 0.5) and be ordered")
        if not 0.0 <= self.max_iou <= 1.0:
            raise ValueError("max_iou must be in [0, 1]")
        if self.min_gap < 0.0:
            raise ValueError("min_gap must be >= 0")
        unknown = set(self.shapes) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds: {sorted(unknown)}")


def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float32)


def _shape_mask(kind: str, cx, cy, r, theta, yy, xx, rng) -> np.ndarray:
    """Boolean mask of one object at supersampled resolution.

    All kinds stay inside the radius-r bounding circle so the placement
    bookkeeping (axis-aligned box of side 2r) is exact.
    """
    dx = xx - cx
    dy = yy - cy
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        half = r / math.sqrt(2.0)
        u = math.cos(theta) * dx + math.sin(theta) * dy
        v = -math.sin(theta) * dx + math.cos(theta) * dy
        return np.maximum(np.abs(u), np.abs(v)) <= half
    if kind == "triangle":
        angles = theta + 2.0 * math.pi * np.arange(3) / 3.0
        vx = cx + r * np.cos(angles)
        vy = cy + r * np.sin(angles)
        mask = np.ones_like(dx, dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            ex, ey = vx[j] - vx[i], vy[j] - vy[i]
            cross = ex * (yy - vy[i]) - ey * (xx - vx[i])
            mask &= cross >= 0.0
        return mask
    if kind == "blob":
        amp = rng.uniform(-1.0, 1.0, size=3)
        phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
        phi = np.arctan2(dy, dx)
        wobble = sum(
            amp[k] * np.cos((k + 2) * phi + phase[k]) for k in range(3)
        ) / 3.0
        radius = r * (0.85 + 0.15 * wobble)
        return dx * dx + dy * dy <= radius * radius
    raise ValueError(f"unknown shape kind {kind!r}")


def _boxes_apart(a, b, gap: float) -> bool:
    """True when the boxes are separated by more than ``gap`` on some axis."""
    return (
        min(a[2], b[2]) + gap <= max(a[0], b[0])
        or min(a[3], b[3]) + gap <= max(a[1], b[1])
    )


def _place_objects(n, radii, size, max_iou, gap, attempts, rng):
    """Rejection-sample n boxes with pairwise IoU <= max_iou, or fail loudly.

    With ``gap`` > 0 every pair must additionally be at least that many
    pixels apart, which guarantees visually separable objects.
    """
    boxes = []
    for i in range(n):
        r = radii[i]
        for _ in range(attempts):
            cx = rng.uniform(r, size - r)
            cy = rng.uniform(r, size - r)
            box = (cx - r, cy - r, cx + r, cy + r)
            if all(
                _box_iou(box, other) <= max_iou
                and (gap <= 0.0 or _boxes_apart(box, other, gap))
                for other in boxes
            ):
                boxes.append(box)
                break
        else:
            raise InfeasiblePackingError(
                f"placed {i} of {n} objects after {attempts} attempts each; "
                "lower the count or the object scale"
            )
    return boxes


def render_scene(spec: SyntheticSceneSpec, rng) -> tuple[torch.Tensor, int]:
    """Draw one scene; returns the (3, H, W) image and its exact object count."""
    ss = spec.supersample
    size = spec.canvas * ss
    count = int(rng.integers(spec.count_min, spec.count_max + 1))
    kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
    base_hue = rng.uniform(0.0, 1.0)

    bg = rng.uniform(0.78, 0.92)
    img = np.full((size, size, 3), bg, dtype=np.float32)
    img += rng.normal(0.0, spec.noise, size=img.shape).astype(np.float32)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    yy += 0.5
    xx += 0.5

    radii = spec.canvas * ss * rng.uniform(spec.scale_min, spec.scale_max, size=count)
    boxes = _place_objects(
        count, radii, size, spec.max_iou, spec.min_gap * ss, spec.place_attempts, rng
    )
    for i, box in enumerate(boxes):
        cx, cy = (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0
        theta = rng.uniform(0.0, 2.0 * math.pi)
        hue = (base_hue + rng.uniform(-0.04, 0.04)) % 1.0
        color = _hsv_to_rgb(hue, rng.uniform(0.55, 0.95), rng.uniform(0.2, 0.5))
        mask = _shape_mask(kind, cx, cy, radii[i], theta, yy, xx, rng)
        img[mask] = color

    if spec.distractors:
        others = [k for k in SHAPE_KINDS if k != kind] or [kind]
        n_extra = int(rng.integers(0, 3))
        for _ in range(n_extra):
            r = spec.canvas * ss * rng.uniform(spec.scale_min, spec.scale_max)
            cx = rng.uniform(r, size - r)
            cy = rng.uniform(r, size - r)
            box = (cx - r, cy - r, cx + r, cy + r)
            if any(_box_iou(box, b) > spec.max_iou for b in boxes):
                continue
            other = others[int(rng.integers(len(others)))]
            theta = rng.uniform(0.0, 2.0 * math.pi)
            hue = (base_hue + 0.5 + rng.uniform(-0.04, 0.04)) % 1.0
            color = _hsv_to_rgb(hue, rng.uniform(0.55, 0.95), rng.uniform(0.2, 0.5))
            img[_shape_mask(other, cx, cy, r, theta, yy, xx, rng)] = color
            boxes.append(box)

    img = img.reshape(spec.canvas, ss, spec.canvas, ss, 3).mean(axis=(1, 3))
    img = np.clip(img, 0.0, 1.0)
    tensor = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))
    return tensor, count


def generate_synthetic(
    spec: SyntheticSceneSpec,
    n_records: int,
    split: str = "train",
    start_index: int = 0,
) -> list[DatasetRecord]:
    """Generate in-memory records; record i depends only on (spec.seed, start_index + i)."""
    records = []
    for i in range(n_records):
        index = start_index + i
        rng = np.random.default_rng([spec.seed, index])
        image, count = render_scene(spec, rng)
        records.append(
            DatasetRecord(
                count=float(count),
                split=split,
                image=image,
                record_id=f"{split}_{index:05d}",
            )
        )
    return records


def write_synthetic_dataset(spec: SyntheticSceneSpec, n_records: int, out_dir, split="train", start_index=0) -> Path:
    """Render a split to PNG files plus a manifest JSON; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in generate_synthetic(spec, n_records, split=split, start_index=start_index):
        name = f"{rec.record_id}.png"
        save_png(rec.image, out_dir / name)
        entries.append({"id": rec.record_id, "file": name, "count": rec.count})
    manifest = {
        "kind": "synthetic-counting",
        "spec": asdict(spec),
        "split": split,
        "n_records": n_records,
        "start_index": start_index,
        "records": entries,
    }
    path = out_dir / f"{split}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_synthetic_dataset(manifest_path) -> list[DatasetRecord]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    records = []
    for entry in manifest["records"]:
        records.append(
            DatasetRecord(
                count=float(entry["count"]),
                split=manifest["split"],
                image_path=str(manifest_path.parent / entry["file"]),
                record_id=entry["id"],
            )
        )
    return records


def load_fsc147(
    root,
    split: str,
    *,
    annotation_file: str = "annotation_FSC147_384.json",
    split_file: str = "Train_Test_Val_FSC_147.json",
    images_dir: str = "images_384_VarV2",
) -> list[DatasetRecord]:
    """Read FSC147-format annotations into records (count = number of dot points).

    Exemplar boxes ride along as metadata but are never consumed by the model.
    Missing files raise FileNotFoundError; schema violations raise
    MalformedAnnotationError; unexpected split sizes only warn.
    """
    root = Path(root)
    ann_path = root / annotation_file
    split_path = root / split_file
    if not ann_path.is_file():
        raise FileNotFoundError(f"annotation file not found: {ann_path}")
    if not split_path.is_file():
        raise FileNotFoundError(f"split file not found: {split_path}")
    try:
        annotations = json.loads(ann_path.read_text())
        splits = json.loads(split_path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedAnnotationError(f"unparseable annotation JSON: {e}") from e
    if split not in splits:
        raise ValueError(f"split {split!r} not in {sorted(splits)}")
    names = splits[split]
    expected = FSC147_SPLIT_SIZES.get(split)
    if expected is not None and len(names) != expected:
        warnings.warn(
            f"{split} split holds {len(names)} images, expected {expected}",
            stacklevel=2,
        )
    records = []
    for name in names:
        if name not in annotations:
            raise MalformedAnnotationError(f"image {name!r} missing from annotations")
        entry = annotations[name]
        try:
            points = [(float(p[0]), float(p[1])) for p in entry["points"]]
            boxes = []
            for corners in entry.get("box_examples_coordinates", []):
                xs = [float(c[0]) for c in corners]
                ys = [float(c[1]) for c in corners]
                boxes.append((min(xs), min(ys), max(xs), max(ys)))
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise MalformedAnnotationError(f"bad annotation for {name!r}: {e}") from e
        records.append(
            DatasetRecord(
                count=float(len(points)),
                split=split,
                image_path=str(root / images_dir / name),
                boxes=boxes,
                points=points,
                record_id=name,
            )
        )
    return records


def _round_to_multiple(x: float, multiple: int) -> int:
    return max(multiple, int(math.floor(x / multiple + 0.5)) * multiple)


def resize_policy(
    image: torch.Tensor,
    mode: str = "train_main",
    *,
    band: tuple[int, int] = (384, 1584),
    multiple: int = 16,
    exemplar_size: int = 512,
) -> torch.Tensor:
    """Resize one (3, H, W) image for a network branch.

    ``train_main`` keeps aspect ratio, pulls the longer side into ``band``,
    then rounds both sides to the nearest ``multiple`` (half up).
    ``exemplar`` forces a square ``exemplar_size`` input. Both return the
    input object untouched when no resize is needed.
    """
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {tuple(image.shape)}")
    h, w = image.shape[-2], image.shape[-1]
    if mode == "exemplar":
        target = (exemplar_size, exemplar_size)
    elif mode == "train_main":
        lo, hi = band
        longer = max(h, w)
        if longer < lo:
            scale = lo / longer
        elif longer > hi:
            scale = hi / longer
        else:
            scale = 1.0
        target = (_round_to_multiple(h * scale, multiple), _round_to_multiple(w * scale, multiple))
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    if target == (h, w):
        return image
    resized = F.interpolate(
        image.unsqueeze(0), size=target, mode="bilinear", align_corners=False
    )
    return resized.squeeze(0)


@dataclass(frozen=True)
class AugmentationConfig:
    """Count-preserving training augmentations, applied in a fixed order."""

    scale_min: float = 0.75
    scale_max: float = 1.25
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    cutout_count: int = 1
    cutout_frac: float = 0.125
    multiple: int = 16
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.scale_min <= self.scale_max):
            raise ValueError("need 0 < scale_min <= scale_max")
        for name in ("hflip_prob", "vflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.cutout_count < 0 or not 0.0 <= self.cutout_frac < 1.0:
            raise ValueError("cutout settings out of range")


def augment(image: torch.Tensor, cfg: AugmentationConfig, index: int) -> torch.Tensor:
    """Random scale, flips, and gray cutouts; deterministic per (cfg.seed, index).

    The count label is untouched: cutouts are small relative to objects and
    flips/scales are bijective on the scene.
    """
    rng = np.random.default_rng([cfg.seed, index])
    out = image.clone()
    scale = rng.uniform(cfg.scale_min, cfg.scale_max)
    h, w = out.shape[-2], out.shape[-1]
    target = (
        _round_to_multiple(h * scale, cfg.multiple),
        _round_to_multiple(w * scale, cfg.multiple),
    )
    if target != (h, w):
        out = F.interpolate(
            out.unsqueeze(0), size=target, mode="bilinear", align_corners=False
        ).squeeze(0)
    if rng.random() < cfg.hflip_prob:
        out = torch.flip(out, dims=[-1])
    if rng.random() < cfg.vflip_prob:
        out = torch.flip(out, dims=[-2])
    h, w = out.shape[-2], out.shape[-1]
    side = int(round(cfg.cutout_frac * min(h, w)))
    for _ in range(cfg.cutout_count):
        if side < 1:
            break
        x0 = int(rng.integers(0, w - side + 1))
        y0 = int(rng.integers(0, h - side + 1))
        out[:, y0 : y0 + side, x0 : x0 + side] = 0.5
    return out
