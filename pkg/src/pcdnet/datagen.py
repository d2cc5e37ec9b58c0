"""Synthetic tetromino-sprite scenes with ground-truth segmentation masks.

Each 35 x 35 image holds three non-overlapping four-cell sprites on a
black background. Sprites come from the 19 distinct tetromino
orientations (I x2, O x1, T x4, S x2, Z x2, J x4, L x4), rendered at
``cell_size`` pixels per cell with a one-pixel darker grid line between
adjacent cells (the tiled look), in one of six solid palette colors.

Output layout (see docs/formats.md):

    out_dir/images/NNNNNN.png   8-bit RGB scene
    out_dir/masks/NNNNNN.png    R = instance label (0..3), G = semantic
                                label (shape_id + 1), B = 0
    out_dir/manifest.jsonl      one record per image with sprite specs

The loader also accepts a bare directory of PNGs (no labels, training
only).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import InvalidArgumentError

# Six solid colors; grid-line pixels are the same color scaled by GRID_SHADE.
PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],  # red
        [0.0, 1.0, 0.0],  # green
        [0.0, 0.0, 1.0],  # blue
        [1.0, 1.0, 0.0],  # yellow
        [1.0, 0.0, 1.0],  # magenta
        [0.0, 1.0, 1.0],  # cyan
    ],
    dtype=np.float32,
)
GRID_SHADE = 0.5
DEFAULT_CELL_SIZE = 5
DEFAULT_IMAGE_SIZE = 35
SPRITES_PER_IMAGE = 3

_BASE_PIECES = [
    ("I", [(0, 0), (0, 1), (0, 2), (0, 3)]),
    ("O", [(0, 0), (0, 1), (1, 0), (1, 1)]),
    ("T", [(0, 0), (0, 1), (0, 2), (1, 1)]),
    ("S", [(0, 1), (0, 2), (1, 0), (1, 1)]),
    ("Z", [(0, 0), (0, 1), (1, 1), (1, 2)]),
    ("J", [(0, 0), (1, 0), (1, 1), (1, 2)]),
    ("L", [(0, 2), (1, 0), (1, 1), (1, 2)]),
]


def _normalize(cells):
    cells = list(cells)
    r0 = min(r for r, _ in cells)
    c0 = min(c for _, c in cells)
    return frozenset((r - r0, c - c0) for r, c in cells)


def _rotate_cw(cells):
    rmax = max(r for r, _ in cells)
    return _normalize((c, rmax - r) for r, c in cells)


def _build_shape_table():
    shapes = []
    for name, base in _BASE_PIECES:
        cells = _normalize(base)
        seen = []
        for rot in range(4):
            if cells not in seen:
                seen.append(cells)
                shapes.append((f"{name}{rot * 90}", cells))
            cells = _rotate_cw(cells)
    return shapes


# 19 distinct orientations, deterministic order (piece order, then rotation).
SHAPES = _build_shape_table()
NUM_SHAPES = len(SHAPES)


@dataclass(frozen=True)
class SpriteSpec:
    shape_id: int  # 0..18
    color_id: int  # 0..5
    row: int  # top-left pixel of the sprite bounding box
    col: int


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    instance_mask: np.ndarray | None  # (H, W) int, 0 = background
    semantic_mask: np.ndarray | None  # (H, W) int, shape_id + 1, 0 = background


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float32
    instance_masks: np.ndarray | None
    semantic_masks: np.ndarray | None
    records: list | None

    @property
    def labeled(self) -> bool:
        return self.instance_masks is not None

    def __len__(self) -> int:
        return self.images.shape[0]

    def labeled_image(self, i: int) -> LabeledImage:
        return LabeledImage(
            image=self.images[i],
            instance_mask=None if self.instance_masks is None else self.instance_masks[i],
            semantic_mask=None if self.semantic_masks is None else self.semantic_masks[i],
        )


def shape_cells(shape_id: int) -> frozenset:
    if not 0 <= shape_id < NUM_SHAPES:
        raise InvalidArgumentError(f"shape_id must be in [0, {NUM_SHAPES}), got {shape_id}")
    return SHAPES[shape_id][1]


def render_sprite(spec: SpriteSpec, cell_size: int = DEFAULT_CELL_SIZE):
    """Render one sprite; returns (image (h, w, 3) float32, mask (h, w) bool).

    Grid-line pixels (cell boundaries interior to the sprite) carry the
    palette color scaled by GRID_SHADE and count as foreground, so the
    mask area is exactly 4 * cell_size**2 pixels.
    """
    cells = shape_cells(spec.shape_id)
    if not 0 <= spec.color_id < len(PALETTE):
        raise InvalidArgumentError(f"color_id must be in [0, 6), got {spec.color_id}")
    if cell_size < 1:
        raise InvalidArgumentError(f"cell_size must be >= 1, got {cell_size}")
    s = cell_size
    nrows = max(r for r, _ in cells) + 1
    ncols = max(c for _, c in cells) + 1
    img = np.zeros((nrows * s, ncols * s, 3), dtype=np.float32)
    mask = np.zeros((nrows * s, ncols * s), dtype=bool)
    shade = np.zeros_like(mask)
    color = PALETTE[spec.color_id]
    for r, c in cells:
        img[r * s : (r + 1) * s, c * s : (c + 1) * s] = color
        mask[r * s : (r + 1) * s, c * s : (c + 1) * s] = True
        if (r - 1, c) in cells:
            shade[r * s, c * s : (c + 1) * s] = True
        if (r, c - 1) in cells:
            shade[r * s : (r + 1) * s, c * s] = True
    img[shade] *= GRID_SHADE
    return img, mask


def compose_scene(
    specs: list[SpriteSpec], image_size: int = DEFAULT_IMAGE_SIZE, cell_size: int = DEFAULT_CELL_SIZE
) -> LabeledImage:
    """Paint sprites onto a black canvas with instance/semantic labels."""
    image = np.zeros((image_size, image_size, 3), dtype=np.float32)
    instance = np.zeros((image_size, image_size), dtype=np.int32)
    semantic = np.zeros((image_size, image_size), dtype=np.int32)
    for k, spec in enumerate(specs):
        sprite, mask = render_sprite(spec, cell_size)
        h, w = mask.shape
        view = (slice(spec.row, spec.row + h), slice(spec.col, spec.col + w))
        image[view][mask] = sprite[mask]
        instance[view][mask] = k + 1
        semantic[view][mask] = spec.shape_id + 1
    return LabeledImage(image=image, instance_mask=instance, semantic_mask=semantic)


def _sample_scene(rng: np.random.Generator, image_size: int, cell_size: int):
    """Rejection-sample non-overlapping sprite placements for one image.

    Sprite identities (shape, color) are drawn up front so collisions
    only retry positions; resampling identity on collision would bias
    the shape distribution toward rarely-colliding pieces.
    """
    while True:
        identities = [
            (int(rng.integers(NUM_SHAPES)), int(rng.integers(len(PALETTE))))
            for _ in range(SPRITES_PER_IMAGE)
        ]
        occupied = np.zeros((image_size, image_size), dtype=bool)
        specs: list[SpriteSpec] = []
        rejections = 0
        for shape_id, color_id in identities:
            cells = shape_cells(shape_id)
            h = (max(r for r, _ in cells) + 1) * cell_size
            w = (max(c for _, c in cells) + 1) * cell_size
            placed = False
            while rejections <= 1000:
                row = int(rng.integers(image_size - h + 1))
                col = int(rng.integers(image_size - w + 1))
                _, mask = render_sprite(SpriteSpec(shape_id, color_id, row, col), cell_size)
                region = occupied[row : row + h, col : col + w]
                if (region & mask).any():
                    rejections += 1
                    continue
                region |= mask
                specs.append(SpriteSpec(shape_id, color_id, row, col))
                placed = True
                break
            if not placed:
                break  # restart the whole image
        if len(specs) == SPRITES_PER_IMAGE:
            return specs


def save_image_png(path, values: np.ndarray) -> None:
    """Store a float image in [0, 1] as 8-bit PNG (round(v * 255))."""
    arr = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


def load_image_png(path) -> np.ndarray:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def generate_dataset(
    n_images: int,
    seed: int,
    out_dir,
    image_size: int = DEFAULT_IMAGE_SIZE,
    cell_size: int = DEFAULT_CELL_SIZE,
) -> list[dict]:
    """Write ``n_images`` labeled scenes plus a JSON-lines manifest.

    Deterministic for a fixed seed (manifests byte-compare equal across
    runs). Returns the manifest records.
    """
    if n_images < 1:
        raise InvalidArgumentError(f"n_images must be >= 1, got {n_images}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    with open(out_dir / "manifest.jsonl", "w", encoding="utf-8") as manifest:
        for i in range(n_images):
            specs = _sample_scene(rng, image_size, cell_size)
            labeled = compose_scene(specs, image_size, cell_size)
            image_rel = f"images/{i:06d}.png"
            mask_rel = f"masks/{i:06d}.png"
            save_image_png(out_dir / image_rel, labeled.image)
            mask_png = np.zeros((image_size, image_size, 3), dtype=np.uint8)
            mask_png[:, :, 0] = labeled.instance_mask
            mask_png[:, :, 1] = labeled.semantic_mask
            PILImage.fromarray(mask_png).save(out_dir / mask_rel)
            record = {
                "index": i,
                "image": image_rel,
                "mask": mask_rel,
                "sprites": [
                    {
                        "shape_id": s.shape_id,
                        "color_id": s.color_id,
                        "row": s.row,
                        "col": s.col,
                    }
                    for s in specs
                ],
            }
            records.append(record)
            manifest.write(json.dumps(record, sort_keys=True) + "\n")
    return records


def load_dataset(path) -> Dataset:
    """Load a generated dataset, or a bare directory of PNGs (unlabeled)."""
    path = Path(path)
    manifest_path = path / "manifest.jsonl"
    if manifest_path.exists():
        records = [json.loads(line) for line in manifest_path.read_text().splitlines() if line]
        images, instances, semantics = [], [], []
        for rec in records:
            images.append(load_image_png(path / rec["image"]))
            mask_arr = np.asarray(PILImage.open(path / rec["mask"]))
            instances.append(mask_arr[:, :, 0].astype(np.int32))
            semantics.append(mask_arr[:, :, 1].astype(np.int32))
        return Dataset(
            images=np.stack(images),
            instance_masks=np.stack(instances),
            semantic_masks=np.stack(semantics),
            records=records,
        )
    pngs = sorted(path.glob("*.png"))
    if not pngs:
        raise InvalidArgumentError(f"{path}: no manifest.jsonl and no PNG files")
    images = np.stack([load_image_png(p) for p in pngs])
    return Dataset(images=images, instance_masks=None, semantic_masks=None, records=None)
