"""Tiles, patches, label colour coding and a synthetic two-domain dataset.

Image arrays are channel-first ``uint8`` ``[3, H, W]``; label maps are
``[H, W]`` integer class indices with :data:`IGNORE_INDEX` for unknown pixels.

Patch images are normalised per channel as ``(value / 255 - mean) / std`` with
:data:`NORM_MEAN` / :data:`NORM_STD` (the ImageNet constants).

On-disk dataset layout::

    <root>/images/<tile_id>.png|.tif
    <root>/labels/<tile_id>.png        colour-coded, optional
    <root>/meta.json                   {"class_names", "palette", "splits"}
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .metrics import IGNORE_INDEX

NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)

ISPRS_CLASSES = (
    "impervious_surfaces",
    "building",
    "low_vegetation",
    "tree",
    "car",
    "clutter",
)
ISPRS_PALETTE = (
    (255, 255, 255),
    (0, 0, 255),
    (0, 255, 255),
    (0, 255, 0),
    (255, 255, 0),
    (255, 0, 0),
)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


class DatasetError(Exception):
    """Raised for malformed dataset directories or tiles."""


class LabelEncodingWarning(UserWarning):
    def __init__(self, count: int):
        super().__init__(f"{count} pixel(s) have colours outside the palette; set to ignore_index")
        self.count = count


@dataclass
class RawTile:
    pixels: np.ndarray  # uint8 [3, H, W]
    label: Optional[np.ndarray] = None  # [H, W]
    tile_id: str = ""
    domain: str = "source"

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DatasetError(f"tile {self.tile_id!r}: pixels must be [3, H, W], got {self.pixels.shape}")
        if self.label is not None and self.label.shape != self.pixels.shape[1:]:
            raise DatasetError(
                f"tile {self.tile_id!r}: label shape {self.label.shape} does not match image {self.pixels.shape[1:]}"
            )
        if self.domain not in ("source", "target"):
            raise DatasetError(f"domain must be 'source' or 'target', got {self.domain!r}")


@dataclass
class UnlabeledPatch:
    pixels: np.ndarray  # uint8 [3, P, P], a view into the tile
    origin: tuple  # (tile_id, row_offset, col_offset)

    @property
    def image(self) -> np.ndarray:
        return normalize(self.pixels)


@dataclass
class LabeledPatch(UnlabeledPatch):
    label: np.ndarray = None  # [P, P]


def normalize(pixels: np.ndarray) -> np.ndarray:
    mean = np.asarray(NORM_MEAN, dtype=np.float32)[:, None, None]
    std = np.asarray(NORM_STD, dtype=np.float32)[:, None, None]
    return (pixels.astype(np.float32) / 255.0 - mean) / std


def denormalize(image: np.ndarray) -> np.ndarray:
    mean = np.asarray(NORM_MEAN, dtype=np.float32)[:, None, None]
    std = np.asarray(NORM_STD, dtype=np.float32)[:, None, None]
    return np.clip(np.rint((image * std + mean) * 255.0), 0, 255).astype(np.uint8)


def tile_grid(h_tile: int, w_tile: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    """Row-major offsets of every full patch; trailing pixels are dropped."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    if patch_size > min(h_tile, w_tile):
        raise ValueError(f"patch_size {patch_size} exceeds tile dimensions {h_tile}x{w_tile}")
    rows = range(0, h_tile - patch_size + 1, stride)
    cols = range(0, w_tile - patch_size + 1, stride)
    return [(r, c) for r in rows for c in cols]


def grid_count(h_tile: int, w_tile: int, patch_size: int, stride: int) -> int:
    if patch_size > min(h_tile, w_tile):
        raise ValueError(f"patch_size {patch_size} exceeds tile dimensions {h_tile}x{w_tile}")
    return ((h_tile - patch_size) // stride + 1) * ((w_tile - patch_size) // stride + 1)


def crop_tile(tile: RawTile, patch_size: int, stride: int) -> list:
    """One patch per grid offset. Patches are views; no pixel data is copied."""
    _, h, w = tile.pixels.shape
    out = []
    for r, c in tile_grid(h, w, patch_size, stride):
        px = tile.pixels[:, r:r + patch_size, c:c + patch_size]
        origin = (tile.tile_id, r, c)
        if tile.label is None:
            out.append(UnlabeledPatch(px, origin))
        else:
            out.append(LabeledPatch(px, origin, tile.label[r:r + patch_size, c:c + patch_size]))
    return out


def reassemble(patches: Sequence, shape: tuple) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Paste patches back at their origins. Inverse of :func:`crop_tile` when stride == patch size."""
    first = patches[0]
    pixels = np.zeros((3,) + tuple(shape), dtype=first.pixels.dtype)
    label = None
    if isinstance(first, LabeledPatch):
        label = np.zeros(tuple(shape), dtype=first.label.dtype)
    for p in patches:
        _, r, c = p.origin
        ph, pw = p.pixels.shape[1:]
        pixels[:, r:r + ph, c:c + pw] = p.pixels
        if label is not None:
            label[r:r + ph, c:c + pw] = p.label
    return pixels, label


def encode_label(rgb_label: np.ndarray, palette, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Map a colour-coded ``[3, H, W]`` label to class indices.

    ``palette`` is a sequence of RGB triples (index = class) or a dict
    ``{class_index: rgb}``. Off-palette pixels become ``ignore_index`` and a
    :class:`LabelEncodingWarning` carrying the pixel count is emitted.
    """
    items = palette.items() if isinstance(palette, dict) else enumerate(palette)
    rgb = np.asarray(rgb_label).astype(np.int64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"colour label must be [3, H, W], got {rgb.shape}")
    key = (rgb[0] << 16) | (rgb[1] << 8) | rgb[2]
    out = np.full(key.shape, ignore_index, dtype=np.int64)
    known = np.zeros(key.shape, dtype=bool)
    for idx, color in items:
        r, g, b = (int(v) for v in color)
        hit = key == ((r << 16) | (g << 8) | b)
        out[hit] = int(idx)
        known |= hit
    n_unknown = int((~known).sum())
    if n_unknown:
        warnings.warn(LabelEncodingWarning(n_unknown), stacklevel=2)
    return out


def decode_label(index_map: np.ndarray, palette, ignore_color=(0, 0, 0)) -> np.ndarray:
    items = palette.items() if isinstance(palette, dict) else enumerate(palette)
    index_map = np.asarray(index_map)
    out = np.empty((3,) + index_map.shape, dtype=np.uint8)
    out[:] = np.asarray(ignore_color, dtype=np.uint8)[:, None, None]
    for idx, color in items:
        hit = index_map == int(idx)
        for ch in range(3):
            out[ch][hit] = color[ch]
    return out


# --------------------------------------------------------------------------- manifests


@dataclass(frozen=True)
class PatchRecord:
    tile_id: str
    row: int
    col: int


@dataclass
class DatasetManifest:
    patches: list
    class_names: list
    palette: list
    patch_size: int
    stride: int
    domain: str = "source"
    root: Optional[str] = None
    labels_eval_only: bool = False
    tile_files: dict = field(default_factory=dict)  # tile_id -> {"image": rel, "label": rel | None}
    tiles: dict = field(default_factory=dict, repr=False)  # in-memory RawTiles (synthetic data)

    def __len__(self):
        return len(self.patches)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def has_labels(self) -> bool:
        if self.tiles:
            return all(t.label is not None for t in self.tiles.values())
        return bool(self.tile_files) and all(f.get("label") for f in self.tile_files.values())

    def load_tile(self, tile_id: str) -> RawTile:
        if tile_id in self.tiles:
            return self.tiles[tile_id]
        if self.root is None or tile_id not in self.tile_files:
            raise DatasetError(f"tile {tile_id!r} is not available")
        files = self.tile_files[tile_id]
        root = Path(self.root)
        pixels = read_image(root / files["image"])
        label = None
        if files.get("label"):
            label = encode_label(read_image(root / files["label"]), self.palette)
        tile = RawTile(pixels, label, tile_id, self.domain)
        self.tiles[tile_id] = tile  # cache
        return tile

    def get(self, i: int, with_label: bool = True):
        rec = self.patches[i]
        tile = self.load_tile(rec.tile_id)
        p = self.patch_size
        px = tile.pixels[:, rec.row:rec.row + p, rec.col:rec.col + p]
        origin = (rec.tile_id, rec.row, rec.col)
        if with_label and tile.label is not None:
            return LabeledPatch(px, origin, tile.label[rec.row:rec.row + p, rec.col:rec.col + p])
        return UnlabeledPatch(px, origin)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "palette": [list(c) for c in self.palette],
            "patch_size": self.patch_size,
            "stride": self.stride,
            "domain": self.domain,
            "labels_eval_only": self.labels_eval_only,
            "root": self.root,
            "tile_files": self.tile_files,
            "patches": [[p.tile_id, p.row, p.col] for p in self.patches],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            patches=[PatchRecord(t, int(r), int(c)) for t, r, c in d["patches"]],
            class_names=list(d["class_names"]),
            palette=[tuple(c) for c in d["palette"]],
            patch_size=int(d["patch_size"]),
            stride=int(d["stride"]),
            domain=d.get("domain", "source"),
            root=d.get("root"),
            labels_eval_only=bool(d.get("labels_eval_only", False)),
            tile_files=d.get("tile_files", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls.from_dict(json.loads(text))

    def load_batch(self, indices, with_labels: bool = True):
        """Stack patches into ``(images [B, 3, P, P] float32, labels [B, P, P] long | None)``."""
        patches = [self.get(int(i), with_labels) for i in indices]
        images = torch.from_numpy(np.stack([p.image for p in patches]))
        labels = None
        if with_labels and all(isinstance(p, LabeledPatch) for p in patches):
            labels = torch.from_numpy(np.stack([p.label for p in patches]).astype(np.int64))
        return images, labels


def manifest_from_tiles(
    tiles: Sequence[RawTile],
    patch_size: int,
    stride: int,
    class_names=ISPRS_CLASSES,
    palette=ISPRS_PALETTE,
    domain: str = "source",
) -> DatasetManifest:
    patches = []
    for t in tiles:
        _, h, w = t.pixels.shape
        patches += [PatchRecord(t.tile_id, r, c) for r, c in tile_grid(h, w, patch_size, stride)]
    return DatasetManifest(
        patches=patches,
        class_names=list(class_names),
        palette=[tuple(c) for c in palette],
        patch_size=patch_size,
        stride=stride,
        domain=domain,
        tiles={t.tile_id: t for t in tiles},
    )


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def image_size(path) -> tuple[int, int]:
    from PIL import Image

    with Image.open(path) as im:
        w, h = im.size
    return h, w


def write_image(path, pixels: np.ndarray) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(np.asarray(pixels, dtype=np.uint8).transpose(1, 2, 0))).save(path)


def read_meta(root) -> dict:
    path = Path(root) / "meta.json"
    if not path.exists():
        raise DatasetError(f"{path} not found")
    meta = json.loads(path.read_text())
    for key in ("class_names", "palette"):
        if key not in meta:
            raise DatasetError(f"{path} lacks {key!r}")
    if len(meta["class_names"]) != len(meta["palette"]):
        raise DatasetError(f"{path}: class_names and palette lengths differ")
    return meta


def scan_dataset(
    root,
    patch_size: int,
    stride: int,
    split: Optional[str] = None,
    domain: str = "source",
    check_labels: bool = True,
) -> DatasetManifest:
    """Build a manifest from a dataset directory.

    Tiles are visited in sorted filename order (or the order of
    ``meta["splits"][split]``) so the manifest is a pure function of the
    directory contents and parameters.
    """
    root = Path(root)
    meta = read_meta(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DatasetError(f"{img_dir} not found")
    images = {p.stem: p for p in sorted(img_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    if split is not None:
        ids = meta.get("splits", {}).get(split)
        if ids is None:
            raise DatasetError(f"split {split!r} not listed in meta.json")
        missing = [i for i in ids if i not in images]
        if missing:
            raise DatasetError(f"split {split!r} names missing tiles: {missing}")
    else:
        ids = sorted(images)
    if not ids:
        raise DatasetError(f"no tiles found in {img_dir}")
    patches, tile_files = [], {}
    for tile_id in ids:
        img_path = images[tile_id]
        h, w = image_size(img_path)
        label_path = root / "labels" / f"{tile_id}.png"
        label_rel = None
        if label_path.exists():
            label_rel = str(label_path.relative_to(root))
            if check_labels and image_size(label_path) != (h, w):
                raise DatasetError(f"{label_path}: label size {image_size(label_path)} does not match image {(h, w)}")
        try:
            offsets = tile_grid(h, w, patch_size, stride)
        except ValueError as exc:
            raise DatasetError(f"{img_path}: {exc}") from None
        tile_files[tile_id] = {"image": str(img_path.relative_to(root)), "label": label_rel}
        patches += [PatchRecord(tile_id, r, c) for r, c in offsets]
    return DatasetManifest(
        patches=patches,
        class_names=list(meta["class_names"]),
        palette=[tuple(c) for c in meta["palette"]],
        patch_size=patch_size,
        stride=stride,
        domain=domain,
        root=str(root),
        labels_eval_only=bool(meta.get("labels_eval_only", False)),
        tile_files=tile_files,
    )


def write_dataset(root, tiles: Sequence[RawTile], class_names, palette, splits=None, labels_eval_only=False) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for t in tiles:
        write_image(root / "images" / f"{t.tile_id}.png", t.pixels)
        if t.label is not None:
            write_image(root / "labels" / f"{t.tile_id}.png", decode_label(t.label, palette))
    meta = {
        "class_names": list(class_names),
        "palette": [list(c) for c in palette],
        "splits": splits or {"all": [t.tile_id for t in tiles]},
        "labels_eval_only": labels_eval_only,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


# --------------------------------------------------------------------------- sampling


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of batch ``step`` in an endless stream of seeded permutations.

    Pure function of its arguments, so a resumed run draws the same batches.
    """
    if n < 1:
        raise ValueError("cannot sample from an empty manifest")
    start = step * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset:offset + take].tolist())
        pos += take
    return np.asarray(out, dtype=np.int64)


# --------------------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class ShiftSpec:
    """Target-domain transformation of synthetic source tiles.

    ``channel_perm`` reorders the RGB channels (sensor variation) and
    ``scale`` resizes the tile (ground sampling distance).
    """

    channel_perm: tuple = (0, 1, 2)
    scale: float = 1.0

    def __post_init__(self):
        if sorted(self.channel_perm) != [0, 1, 2]:
            raise ValueError(f"channel_perm must be a permutation of (0, 1, 2), got {self.channel_perm}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @classmethod
    def parse(cls, text: str) -> "ShiftSpec":
        """``identity``, ``perm:2,0,1``, ``scale:0.5`` or ``perm:2,0,1+scale:0.5``."""
        perm, scale = (0, 1, 2), 1.0
        if text and text != "identity":
            for part in text.split("+"):
                kind, _, arg = part.partition(":")
                if kind == "perm":
                    perm = tuple(int(v) for v in arg.split(","))
                elif kind == "scale":
                    scale = float(arg)
                else:
                    raise ValueError(f"unknown shift component {part!r}")
        return cls(perm, scale)

    def apply(self, tile: RawTile, tile_id: str) -> RawTile:
        pixels = tile.pixels[list(self.channel_perm)]
        label = tile.label
        if self.scale != 1.0:
            from PIL import Image

            h, w = pixels.shape[1:]
            size = (max(1, round(w * self.scale)), max(1, round(h * self.scale)))
            pixels = np.stack([
                np.asarray(Image.fromarray(ch).resize(size, Image.BILINEAR)) for ch in pixels
            ])
            if label is not None:
                label = np.asarray(Image.fromarray(label.astype(np.uint8)).resize(size, Image.NEAREST)).astype(np.int64)
        return RawTile(np.ascontiguousarray(pixels), None if label is None else label.copy(), tile_id, "target")


# per-class (grey level, colour tint, texture). Grey level and texture survive
# any channel permutation; the tint is the cue a permutation breaks.
_SYNTH_STYLE = (
    (200, (0, 0, 0), "flat"),
    (150, (20, -10, -10), "vstripe"),
    (120, (-10, 20, -10), "speckle"),
    (90, (-10, -10, 20), "hstripe"),
    (170, (15, 15, -30), "checker"),
    (60, (-15, -15, 30), "diag"),
)


def _texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "flat":
        return np.ones((size, size))
    if kind == "vstripe":
        return np.where((xx // 4) % 2 == 0, 1.3, 0.7)
    if kind == "hstripe":
        return np.where((yy // 2) % 2 == 0, 1.3, 0.7)
    if kind == "checker":
        return np.where((xx // 2 + yy // 2) % 2 == 0, 1.3, 0.7)
    if kind == "diag":
        return np.where(((xx + yy) // 3) % 2 == 0, 1.3, 0.7)
    if kind == "speckle":
        return 1.0 + 0.35 * rng.standard_normal((size, size))
    raise ValueError(f"unknown texture {kind!r}")


def synth_tile(rng: np.random.Generator, size: int, num_classes: int = 6, n_regions: int = 24, noise: float = 12.0) -> tuple[np.ndarray, np.ndarray]:
    """Voronoi class layout; each class has its own grey level, tint and texture."""
    if not 1 <= num_classes <= len(_SYNTH_STYLE):
        raise ValueError(f"synthetic generator supports 1..{len(_SYNTH_STYLE)} classes")
    seeds = rng.uniform(0, size, size=(n_regions, 2))
    classes = rng.integers(0, num_classes, size=n_regions)
    yy, xx = np.mgrid[0:size, 0:size]
    d = (yy[None] - seeds[:, 0, None, None]) ** 2 + (xx[None] - seeds[:, 1, None, None]) ** 2
    label = classes[d.argmin(axis=0)].astype(np.int64)
    img = np.zeros((3, size, size), dtype=np.float64)
    for k in range(num_classes):
        grey, tint, kind = _SYNTH_STYLE[k]
        mask = label == k
        tex = _texture(kind, size, rng)[mask]
        for ch in range(3):
            img[ch][mask] = (grey + tint[ch]) * tex
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), label


def synth_dataset(
    seed: int,
    n_tiles: int,
    shift: ShiftSpec = ShiftSpec(),
    tile_size: int = 128,
    patch_size: int = 64,
    stride: int = 64,
    num_classes: int = 6,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic source/target pair. Target tiles are the source tiles under ``shift``.

    Target labels exist for evaluation only (``labels_eval_only``).
    """
    if n_tiles < 1:
        raise ValueError("n_tiles must be >= 1")
    rng = np.random.default_rng(seed)
    src_tiles, tgt_tiles = [], []
    for i in range(n_tiles):
        pixels, label = synth_tile(rng, tile_size, num_classes)
        src = RawTile(pixels, label, f"src_{i:04d}", "source")
        src_tiles.append(src)
        tgt_tiles.append(shift.apply(src, f"tgt_{i:04d}"))
    names = ISPRS_CLASSES[:num_classes]
    palette = ISPRS_PALETTE[:num_classes]
    src_m = manifest_from_tiles(src_tiles, patch_size, stride, names, palette, "source")
    tgt_m = manifest_from_tiles(tgt_tiles, patch_size, stride, names, palette, "target")
    tgt_m.labels_eval_only = True
    return src_m, tgt_m
