"""Synthetic scene generators and dataset IO.

Three built-in generators produce desk-scale datasets with exact ground
truth: colored tetromino triples on black, overlapping 2D shapes on a
solid random background, and single digits on mildly textured backgrounds
(for clustering runs). Scenes are assembled with the library's own
recursive compositor, so re-rendering the per-object records reproduces
every image bit-exactly.

On disk a dataset is a directory with ``manifest.json``, ``images/*.png``,
``gt/instance_*.png`` and ``gt/semantic_*.png`` (16-bit), per-object
records in ``objects.jsonl``, and optional per-image ``labels.json``.
Everything is keyed by (seed, image index), so identical specs produce
identical bytes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .compositing import compose_recursive


class DataError(Exception):
    """Unusable dataset or image input."""


FORMAT_VERSION = 1

# -- tetromino vocabulary ----------------------------------------------------

_BASE_PIECES = {
    "I": [(0, 0), (0, 1), (0, 2), (0, 3)],
    "O": [(0, 0), (0, 1), (1, 0), (1, 1)],
    "T": [(0, 0), (0, 1), (0, 2), (1, 1)],
    "S": [(0, 1), (0, 2), (1, 0), (1, 1)],
    "Z": [(0, 0), (0, 1), (1, 1), (1, 2)],
    "J": [(0, 0), (1, 0), (1, 1), (1, 2)],
    "L": [(0, 2), (1, 0), (1, 1), (1, 2)],
}


def _normalize(cells):
    r0 = min(r for r, _ in cells)
    c0 = min(c for _, c in cells)
    return tuple(sorted((r - r0, c - c0) for r, c in cells))


def _rotations(cells):
    out, cur = [], _normalize(cells)
    for _ in range(4):
        if cur not in out:
            out.append(cur)
        cur = _normalize([(c, -r) for r, c in cur])
    return out


def tetromino_shapes() -> list[tuple[tuple[int, int], ...]]:
    """The 19 one-sided tetrominoes (distinct discrete rotations)."""
    shapes = []
    for name in sorted(_BASE_PIECES):
        shapes.extend(_rotations(_BASE_PIECES[name]))
    return shapes


TETROMINO_SHAPES = tetromino_shapes()
assert len(TETROMINO_SHAPES) == 19

TETROMINO_PALETTE = np.array([
    [0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.15, 0.3, 0.95],
    [0.95, 0.85, 0.1], [0.85, 0.15, 0.85], [0.1, 0.8, 0.85],
])

# -- dataset container -------------------------------------------------------


@dataclass
class SceneDataset:
    images: np.ndarray                    # [N, H, W, 3] uint8
    instance: np.ndarray | None = None    # [N, H, W] int32, 0 = background
    semantic: np.ndarray | None = None    # [N, H, W] int32, 0 = background
    records: list | None = None           # per-image list of object dicts
    class_labels: np.ndarray | None = None  # [N] int, clustering datasets only
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def canvas(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def mean_image(self) -> torch.Tensor:
        """Dataset mean as a float tensor [3, H, W] in [0, 1]."""
        mean = self.images.astype(np.float64).mean(axis=0) / 255.0
        return torch.from_numpy(mean).permute(2, 0, 1).float()

    def to_tensor(self, idx) -> torch.Tensor:
        """Selected images as float tensors [n, 3, H, W] in [0, 1]."""
        batch = self.images[idx].astype(np.float32) / 255.0
        return torch.from_numpy(batch).permute(0, 3, 1, 2)

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        parent = out.parent
        if not parent.exists():
            raise DataError(f"parent directory does not exist: {parent}")
        (out / "images").mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.images):
            Image.fromarray(img).save(out / "images" / f"img_{i:05d}.png")
        if self.instance is not None:
            (out / "gt").mkdir(exist_ok=True)
            for i in range(len(self)):
                _save_label(out / "gt" / f"instance_{i:05d}.png", self.instance[i])
                _save_label(out / "gt" / f"semantic_{i:05d}.png", self.semantic[i])
        if self.records is not None:
            with open(out / "objects.jsonl", "w") as f:
                for i, objs in enumerate(self.records):
                    for obj in objs:
                        f.write(json.dumps({"image": i, **obj}) + "\n")
        if self.class_labels is not None:
            with open(out / "labels.json", "w") as f:
                json.dump([int(v) for v in self.class_labels], f)
        with open(out / "manifest.json", "w") as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)
        return out

    @classmethod
    def load(cls, path: str | Path) -> "SceneDataset":
        root = Path(path)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"not a dataset directory (no manifest.json): {root}")
        manifest = json.loads(manifest_path.read_text())
        image_paths = sorted((root / "images").glob("img_*.png"))
        if not image_paths:
            raise DataError(f"dataset has no images: {root}")
        images = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in image_paths])
        n = images.shape[0]
        instance = semantic = None
        if (root / "gt").exists():
            instance = np.stack([_load_label(root / "gt" / f"instance_{i:05d}.png")
                                 for i in range(n)])
            semantic = np.stack([_load_label(root / "gt" / f"semantic_{i:05d}.png")
                                 for i in range(n)])
        records = None
        objects_path = root / "objects.jsonl"
        if objects_path.exists():
            records = [[] for _ in range(n)]
            with open(objects_path) as f:
                for line in f:
                    obj = json.loads(line)
                    records[obj.pop("image")].append(obj)
        class_labels = None
        labels_path = root / "labels.json"
        if labels_path.exists():
            class_labels = np.array(json.loads(labels_path.read_text()), dtype=np.int64)
        return cls(images, instance, semantic, records, class_labels, manifest)


def _save_label(path: Path, labels: np.ndarray) -> None:
    Image.fromarray(labels.astype(np.uint16), mode="I;16").save(path)


def _load_label(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int32)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _compose_scene(background: np.ndarray | None, masks: list[np.ndarray],
                   colors: list[np.ndarray], hw: tuple[int, int]) -> np.ndarray:
    """Compose object layers back-to-front with the library compositor."""
    h, w = hw
    layers = []
    if background is not None:
        bg = np.concatenate([background, np.ones((1, h, w))], axis=0)
        layers.append(bg)
    for mask, color in zip(masks, colors):
        rgb = color[:, None, None] * np.ones((3, h, w))
        layers.append(np.concatenate([rgb * 1.0, mask[None]], axis=0))
    stack = torch.from_numpy(np.stack(layers)).double()
    return compose_recursive(stack).numpy()


def _visible_instances(masks: list[np.ndarray]) -> np.ndarray:
    """Front-most object id per pixel (1-based, order = depth, last on top)."""
    h, w = masks[0].shape
    vis = np.zeros((h, w), dtype=np.int32)
    for i, m in enumerate(masks):
        vis[m > 0.5] = i + 1
    return vis


# -- tetrominoes-like --------------------------------------------------------

def _tetromino_mask(shape_id: int, row: int, col: int, cell: int,
                    hw: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(hw)
    for r, c in TETROMINO_SHAPES[shape_id]:
        rr, cc = row + r * cell, col + c * cell
        mask[rr:rr + cell, cc:cc + cell] = 1.0
    return mask


def gen_tetrominoes_like(n_images: int, seed: int = 0, canvas: int = 35,
                         cell: int = 5, n_objects: int = 3) -> SceneDataset:
    """Non-overlapping colored tetromino triples on black, with exact GT."""
    if n_images < 1:
        raise DataError("n_images must be >= 1")
    hw = (canvas, canvas)
    images = np.zeros((n_images, canvas, canvas, 3), dtype=np.uint8)
    instance = np.zeros((n_images, canvas, canvas), dtype=np.int32)
    semantic = np.zeros_like(instance)
    records: list = []

    for i in range(n_images):
        rng = _rng(seed, i)
        while True:
            objs, masks, colors, occupied = [], [], [], np.zeros(hw, bool)
            for depth in range(n_objects):
                placed = False
                for _ in range(50):
                    shape_id = int(rng.integers(len(TETROMINO_SHAPES)))
                    cells = TETROMINO_SHAPES[shape_id]
                    rows = (max(r for r, _ in cells) + 1) * cell
                    cols = (max(c for _, c in cells) + 1) * cell
                    row = int(rng.integers(canvas - rows + 1))
                    col = int(rng.integers(canvas - cols + 1))
                    mask = _tetromino_mask(shape_id, row, col, cell, hw)
                    if not (occupied & (mask > 0)).any():
                        color_id = int(rng.integers(len(TETROMINO_PALETTE)))
                        occupied |= mask > 0
                        masks.append(mask)
                        colors.append(TETROMINO_PALETTE[color_id])
                        objs.append({"shape": shape_id, "color_id": color_id,
                                     "row": row, "col": col, "depth": depth})
                        placed = True
                        break
                if not placed:
                    break
            if len(objs) == n_objects:
                break
        img = _compose_scene(None, masks, colors, hw)
        images[i] = _quantize(np.moveaxis(img, 0, -1))
        instance[i] = _visible_instances(masks)
        for depth, obj in enumerate(objs):
            semantic[i][masks[depth] > 0.5] = obj["shape"] + 1
        records.append(objs)

    manifest = {"kind": "tetrominoes_like", "n_images": n_images, "seed": seed,
                "canvas": [canvas, canvas], "cell": cell, "n_objects": n_objects,
                "n_shapes": len(TETROMINO_SHAPES), "format_version": FORMAT_VERSION}
    return SceneDataset(images, instance, semantic, records, None, manifest)


# -- dsprites-like -----------------------------------------------------------

SHAPE_NAMES = ("square", "ellipse", "heart")


def _inside_shape(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.75
    if shape == "ellipse":
        return u**2 + (v / 0.6) ** 2 <= 1.0
    if shape == "heart":
        # classic sextic heart, y up, rescaled to the unit frame
        x = 1.2 * u
        y = -1.2 * v + 0.25
        return (x**2 + y**2 - 1) ** 3 - x**2 * y**3 <= 0
    raise ValueError(f"unknown shape {shape!r}")


def rasterize_shape(shape: str, center: tuple[float, float], scale: float,
                    angle: float, hw: tuple[int, int], supersample: int = 4
                    ) -> np.ndarray:
    """Binary mask via supersampled analytic coverage (threshold 0.5)."""
    h, w = hw
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    ys = np.arange(h)[:, None] + offs[None, :]  # [h, ss]
    xs = np.arange(w)[:, None] + offs[None, :]
    py = (ys[:, None, :, None] - center[0])
    px = (xs[None, :, None, :] - center[1])
    cos, sin = np.cos(angle), np.sin(angle)
    u = (cos * px + sin * py) / scale
    v = (-sin * px + cos * py) / scale
    inside = _inside_shape(shape, u, v)
    coverage = inside.mean(axis=(2, 3))
    return (coverage >= 0.5).astype(np.float64)


def gen_dsprites_like(n_images: int, seed: int = 0, canvas: int = 64,
                      n_obj_range: tuple[int, int] = (2, 5),
                      scale_range: tuple[float, float] = (7.0, 12.0),
                      margin: int = 14) -> SceneDataset:
    """Overlapping colored shapes on a solid random background.

    Depth follows placement order (later objects are in front); the GT
    instance map carries the front object's label wherever objects overlap.
    """
    if n_images < 1:
        raise DataError("n_images must be >= 1")
    hw = (canvas, canvas)
    lo, hi = n_obj_range
    images = np.zeros((n_images, canvas, canvas, 3), dtype=np.uint8)
    instance = np.zeros((n_images, canvas, canvas), dtype=np.int32)
    semantic = np.zeros_like(instance)
    records: list = []

    for i in range(n_images):
        rng = _rng(seed, i)
        n_obj = int(rng.integers(lo, hi + 1))
        bg_color = rng.uniform(0.0, 0.5, size=3)
        objs, masks, colors = [], [], []
        for depth in range(n_obj):
            while True:
                shape_id = int(rng.integers(len(SHAPE_NAMES)))
                center = rng.uniform(margin, canvas - margin, size=2)
                scale = float(rng.uniform(*scale_range))
                angle = float(rng.uniform(0, 2 * np.pi))
                mask = rasterize_shape(SHAPE_NAMES[shape_id], tuple(center),
                                       scale, angle, hw)
                if mask.sum() >= 20:
                    break
            color = rng.uniform(0.3, 1.0, size=3)
            masks.append(mask)
            colors.append(color)
            objs.append({"shape": shape_id, "color": color.tolist(),
                         "center": center.tolist(), "scale": scale,
                         "angle": angle, "depth": depth})
        img = _compose_scene(bg_color[:, None, None] * np.ones((3, canvas, canvas)),
                             masks, colors, hw)
        images[i] = _quantize(np.moveaxis(img, 0, -1))
        instance[i] = _visible_instances(masks)
        vis = instance[i]
        for depth, obj in enumerate(objs):
            semantic[i][vis == depth + 1] = obj["shape"] + 1
        records.append([{"background_color": bg_color.tolist()}] + objs)

    manifest = {"kind": "dsprites_like", "n_images": n_images, "seed": seed,
                "canvas": [canvas, canvas], "n_obj_range": [lo, hi],
                "scale_range": list(scale_range), "margin": margin,
                "format_version": FORMAT_VERSION}
    return SceneDataset(images, instance, semantic, records, None, manifest)


# -- digits on textured backgrounds (clustering) ------------------------------

DIGIT_FONT = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

DIGIT_PALETTE = np.array([
    [1.0, 0.25, 0.25], [0.25, 1.0, 0.3], [0.3, 0.45, 1.0], [1.0, 0.95, 0.2],
    [1.0, 0.35, 1.0], [0.25, 0.95, 1.0], [1.0, 0.65, 0.15], [0.9, 0.9, 0.9],
])


def _digit_mask(digit: str, scale: int) -> np.ndarray:
    rows = DIGIT_FONT[digit]
    bitmap = np.array([[int(ch) for ch in row] for row in rows], dtype=np.float64)
    return np.kron(bitmap, np.ones((scale, scale)))


def _texture(rng: np.random.Generator, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    base = rng.uniform(0.15, 0.6, size=3)
    tex = np.zeros((h, w))
    for _ in range(2):
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += rng.uniform(0.02, 0.06) * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
    return np.clip(base[:, None, None] + tex[None], 0.02, 0.98)


def gen_textured_digits(n_images: int, seed: int = 0, canvas: int = 28,
                        n_classes: int = 5, glyph_scale: int = 3,
                        jitter: int = 3) -> SceneDataset:
    """One colored digit per image over a smooth random texture."""
    if n_images < 1:
        raise DataError("n_images must be >= 1")
    if not 2 <= n_classes <= 10:
        raise DataError("n_classes must be in [2, 10]")
    hw = (canvas, canvas)
    digits = [str(d) for d in range(n_classes)]
    images = np.zeros((n_images, canvas, canvas, 3), dtype=np.uint8)
    instance = np.zeros((n_images, canvas, canvas), dtype=np.int32)
    semantic = np.zeros_like(instance)
    labels = np.zeros(n_images, dtype=np.int64)
    records: list = []

    for i in range(n_images):
        rng = _rng(seed, i)
        cls = int(rng.integers(n_classes))
        glyph = _digit_mask(digits[cls], glyph_scale)
        gh, gw = glyph.shape
        base_r = (canvas - gh) // 2
        base_c = (canvas - gw) // 2
        dr = int(rng.integers(-jitter, jitter + 1))
        dc = int(rng.integers(-jitter, jitter + 1))
        r = int(np.clip(base_r + dr, 0, canvas - gh))
        c = int(np.clip(base_c + dc, 0, canvas - gw))
        mask = np.zeros(hw)
        mask[r:r + gh, c:c + gw] = glyph
        color = DIGIT_PALETTE[int(rng.integers(len(DIGIT_PALETTE)))]
        bg = _texture(rng, hw)
        img = _compose_scene(bg, [mask], [color], hw)
        images[i] = _quantize(np.moveaxis(img, 0, -1))
        instance[i] = (mask > 0.5).astype(np.int32)
        semantic[i] = (mask > 0.5).astype(np.int32) * (cls + 1)
        labels[i] = cls
        records.append([{"digit": cls, "row": r, "col": c, "color": color.tolist()}])

    manifest = {"kind": "textured_digits", "n_images": n_images, "seed": seed,
                "canvas": [canvas, canvas], "n_classes": n_classes,
                "glyph_scale": glyph_scale, "jitter": jitter,
                "format_version": FORMAT_VERSION}
    return SceneDataset(images, instance, semantic, records, labels, manifest)


# -- external image folders ---------------------------------------------------

def load_image_folder(path: str | Path, resize: int | None = None,
                      center_crop: int | None = None) -> SceneDataset:
    """Load a folder of images as a dataset (sorted paths, normalized RGB)."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff", ".webp"}
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in exts)
    images = []
    for p in paths:
        try:
            img = Image.open(p).convert("RGB")
        except Exception as exc:  # unreadable file: skip, keep going
            warnings.warn(f"skipping unreadable image {p}: {exc}")
            continue
        if resize is not None:
            short = min(img.size)
            ratio = resize / short
            img = img.resize((max(1, round(img.width * ratio)),
                              max(1, round(img.height * ratio))), Image.BILINEAR)
        if center_crop is not None:
            left = (img.width - center_crop) // 2
            top = (img.height - center_crop) // 2
            img = img.crop((left, top, left + center_crop, top + center_crop))
        images.append(np.asarray(img))
    if not images:
        raise DataError(f"no readable images in {root}")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"images have mixed sizes {sorted(shapes)}; "
                        "pass resize/center_crop to normalize them")
    manifest = {"kind": "image_folder", "path": str(root), "n_images": len(images),
                "resize": resize, "center_crop": center_crop,
                "format_version": FORMAT_VERSION}
    return SceneDataset(np.stack(images), manifest=manifest)


GENERATORS = {
    "tetrominoes_like": gen_tetrominoes_like,
    "dsprites_like": gen_dsprites_like,
    "textured_digits": gen_textured_digits,
}


def generate(kind: str, n_images: int, seed: int = 0, **params) -> SceneDataset:
    if kind not in GENERATORS:
        raise DataError(f"unknown dataset kind {kind!r}; choose from {sorted(GENERATORS)}")
    return GENERATORS[kind](n_images, seed=seed, **params)
