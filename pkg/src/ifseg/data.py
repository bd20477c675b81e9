"""Merged two-source corpus, fold splits, masks, augmentation and padding.

The corpus merges two on-disk layouts covering the same 20 object classes:
a VOC-style tree (JPEGImages/ + SegmentationClass/ with indexed PNG masks,
255 = void) and an SBD-style tree (img/ + cls/ with MATLAB .mat or PNG
masks). Images present in both keep the second tree's mask.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

CLASS_NAMES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle",
    "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)
NUM_CLASSES = 20
VOID_LABEL = 255


@dataclass(frozen=True)
class ImageRecord:
    id: str
    image_uri: Path
    mask_uri: Path
    source: str  # "pascal" | "sbd"
    classes_present: frozenset

    def __post_init__(self):
        if self.source not in ("pascal", "sbd"):
            raise ValueError(f"bad source {self.source!r}")
        if not self.classes_present:
            raise ValueError("records must contain at least one class")


@dataclass(frozen=True)
class FoldSpec:
    fold: int
    val_classes: tuple
    train_classes: tuple


@dataclass(frozen=True)
class EpisodeSpec:
    class_chosen: int
    support_ids: tuple
    query_ids: tuple
    seed: int

    def __post_init__(self):
        if set(self.support_ids) & set(self.query_ids):
            raise ValueError("support and query sets must be disjoint")
        if not self.support_ids or not self.query_ids:
            raise ValueError("episodes need at least one support and one query")


def fold_split(fold: int) -> FoldSpec:
    """Fold i reserves classes 5i+1..5i+5 (canonical alphabetical order)."""
    if fold not in (0, 1, 2, 3):
        raise ValueError(f"fold must be 0..3, got {fold}")
    val = tuple(range(5 * fold + 1, 5 * fold + 6))
    train = tuple(c for c in range(1, NUM_CLASSES + 1) if c not in val)
    return FoldSpec(fold=fold, val_classes=val, train_classes=train)


# -- mask / image IO -----------------------------------------------------


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_class_mask(path) -> np.ndarray:
    """Read a class-indexed mask from an indexed/grayscale PNG or a .mat file."""
    path = Path(path)
    if path.suffix == ".mat":
        from scipy.io import loadmat

        payload = loadmat(str(path))
        gt = payload["GTcls"]
        seg = gt["Segmentation"][0, 0] if gt.dtype.names else gt
        return np.asarray(seg, dtype=np.uint8)
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8)


def classes_in_mask(mask: np.ndarray) -> frozenset:
    labels = np.unique(mask)
    return frozenset(int(v) for v in labels if 1 <= v <= NUM_CLASSES)


def binarize(mask: np.ndarray, class_id: int) -> np.ndarray:
    """1 where the label equals class_id; void and everything else are 0."""
    return np.asarray(mask) == class_id


# -- merged index --------------------------------------------------------


def _scan_pascal(root: Path) -> dict:
    mask_dir = root / "SegmentationClass"
    img_dir = root / "JPEGImages"
    found = {}
    for mask_path in sorted(mask_dir.glob("*.png")):
        rid = mask_path.stem
        for ext in (".jpg", ".jpeg", ".png"):
            img = img_dir / f"{rid}{ext}"
            if img.exists():
                found[rid] = (img, mask_path)
                break
    return found


def _scan_sbd(root: Path) -> dict:
    mask_dir = root / "cls"
    img_dir = root / "img"
    found = {}
    for mask_path in sorted(list(mask_dir.glob("*.mat")) + list(mask_dir.glob("*.png"))):
        rid = mask_path.stem
        if rid in found:
            continue
        for ext in (".jpg", ".jpeg", ".png"):
            img = img_dir / f"{rid}{ext}"
            if img.exists():
                found[rid] = (img, mask_path)
                break
    return found


def build_merged_index(pascal_root, sbd_root) -> list[ImageRecord]:
    """Union of both trees; the SBD mask wins for ids present in both.

    Unreadable masks and images without any of the 20 classes are skipped
    with a logged count.
    """
    pascal_root, sbd_root = Path(pascal_root), Path(sbd_root)
    for root, name in ((pascal_root, "pascal"), (sbd_root, "sbd")):
        if not root.is_dir():
            raise FileNotFoundError(f"{name} root not found: {root}")
    pascal = _scan_pascal(pascal_root)
    sbd = _scan_sbd(sbd_root)
    merged = dict(pascal)
    sources = {rid: "pascal" for rid in pascal}
    for rid, paths in sbd.items():
        merged[rid] = paths
        sources[rid] = "sbd"
    records, skipped = [], 0
    for rid in sorted(merged):
        img, mask_path = merged[rid]
        try:
            classes = classes_in_mask(load_class_mask(mask_path))
        except Exception:
            skipped += 1
            continue
        if not classes:
            skipped += 1
            continue
        records.append(
            ImageRecord(
                id=rid,
                image_uri=img,
                mask_uri=mask_path,
                source=sources[rid],
                classes_present=classes,
            )
        )
    if skipped:
        log.warning("skipped %d records (unreadable or classless masks)", skipped)
    return records


def write_manifest(path, records: list[ImageRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps({
                "id": r.id,
                "image": str(r.image_uri),
                "mask": str(r.mask_uri),
                "source": r.source,
                "classes": sorted(r.classes_present),
            }) + "\n")


def read_manifest(path) -> list[ImageRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        records.append(ImageRecord(
            id=d["id"],
            image_uri=Path(d["image"]),
            mask_uri=Path(d["mask"]),
            source=d["source"],
            classes_present=frozenset(d["classes"]),
        ))
    return records


class CorpusIndex:
    """Immutable record collection with by-class lookups and loaders."""

    def __init__(self, records: list[ImageRecord]):
        self.records = list(records)
        self._by_id = {r.id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise ValueError("duplicate record ids")
        self._by_class = {c: [] for c in range(1, NUM_CLASSES + 1)}
        for r in self.records:
            for c in r.classes_present:
                self._by_class[c].append(r)

    def __len__(self):
        return len(self.records)

    def get(self, rid: str) -> ImageRecord:
        return self._by_id[rid]

    def records_with_class(self, class_id: int) -> list[ImageRecord]:
        return list(self._by_class.get(class_id, []))

    def load_image(self, record: ImageRecord) -> np.ndarray:
        return load_image(record.image_uri)

    def load_class_mask(self, record: ImageRecord) -> np.ndarray:
        return load_class_mask(record.mask_uri)

    def binarize_mask(self, record: ImageRecord, class_chosen: int) -> np.ndarray:
        if class_chosen not in record.classes_present:
            raise ValueError(f"class {class_chosen} absent from record {record.id}")
        return binarize(self.load_class_mask(record), class_chosen)

    def other_classes_mask(self, record: ImageRecord, class_chosen: int) -> np.ndarray:
        mask = self.load_class_mask(record)
        return (mask >= 1) & (mask <= NUM_CLASSES) & (mask != class_chosen)

    def sample_support(self, class_chosen, k, exclude, rng) -> list[ImageRecord]:
        """k records containing the class, uniform without replacement."""
        pool = [r for r in self._by_class.get(class_chosen, []) if r.id not in exclude]
        if len(pool) < k:
            raise ValueError(
                f"need {k} support images for class {class_chosen}, found {len(pool)}"
            )
        idx = rng.choice(len(pool), size=k, replace=False)
        return [pool[int(i)] for i in idx]

    def training_records(self, fold: FoldSpec) -> list[ImageRecord]:
        """Records containing at least one training class of the fold."""
        train = set(fold.train_classes)
        return [r for r in self.records if r.classes_present & train]

    def validation_records(self, fold: FoldSpec) -> list[ImageRecord]:
        val = set(fold.val_classes)
        return [r for r in self.records if r.classes_present & val]


# -- training augmentation ------------------------------------------------


@dataclass(frozen=True)
class GeomParams:
    """One visit's geometric transform: flip, rotate about center, crop."""

    flip: bool
    angle_deg: float
    crop_top: int
    crop_left: int
    out_size: int
    src_h: int
    src_w: int


def sample_augment_params(h: int, w: int, rng, out_size: int = 512,
                          max_angle: float = 10.0) -> GeomParams:
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-max_angle, max_angle))
    pad_h, pad_w = max(h, out_size), max(w, out_size)
    top = int(rng.integers(0, pad_h - out_size + 1))
    left = int(rng.integers(0, pad_w - out_size + 1))
    return GeomParams(flip=flip, angle_deg=angle, crop_top=top, crop_left=left,
                      out_size=out_size, src_h=h, src_w=w)


def _rotation(params: GeomParams):
    """Forward rotation matrix and center for (row, col) coordinates."""
    theta = math.radians(params.angle_deg)
    pad_h = max(params.src_h, params.out_size)
    pad_w = max(params.src_w, params.out_size)
    cy, cx = (pad_h - 1) / 2.0, (pad_w - 1) / 2.0
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    return rot, (cy, cx), (pad_h, pad_w)


def apply_geometric(arr: np.ndarray, params: GeomParams, is_mask: bool) -> np.ndarray:
    """Flip, rotate and crop one array; masks use nearest-neighbor resampling.

    The resampling grid is built from the same rotation matrix as the point
    maps below, so array warping and coordinate mapping always agree.
    """
    out = np.asarray(arr)
    if params.flip:
        out = out[:, ::-1]
    pad_h = max(params.src_h, params.out_size)
    pad_w = max(params.src_w, params.out_size)
    if pad_h != out.shape[0] or pad_w != out.shape[1]:
        widths = [(0, pad_h - out.shape[0]), (0, pad_w - out.shape[1])]
        if out.ndim == 3:
            widths.append((0, 0))
        out = np.pad(out, widths)
    t, l, s = params.crop_top, params.crop_left, params.out_size
    if params.angle_deg == 0.0:
        warped = out[t:t + s, l:l + s]
        return warped.copy()
    rot, (cy, cx), _ = _rotation(params)
    rows, cols = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    dr = rows + t - cy
    dc = cols + l - cx
    src_r = rot[0, 0] * dr + rot[1, 0] * dc + cy
    src_c = rot[0, 1] * dr + rot[1, 1] * dc + cx
    order = 0 if is_mask else 1
    coords = np.stack([src_r, src_c])

    def warp(channel):
        return ndimage.map_coordinates(
            channel.astype(np.float64), coords, order=order, mode="constant", cval=0.0
        )

    if out.ndim == 2:
        warped = warp(out)
        if is_mask:
            return warped.astype(arr.dtype) if arr.dtype != bool else warped > 0.5
        return warped.astype(arr.dtype) if arr.dtype != np.uint8 else (
            np.clip(np.rint(warped), 0, 255).astype(np.uint8)
        )
    chans = [warp(out[:, :, i]) for i in range(out.shape[2])]
    warped = np.stack(chans, axis=2)
    if arr.dtype == np.uint8:
        return np.clip(np.rint(warped), 0, 255).astype(np.uint8)
    return warped.astype(arr.dtype)


def forward_point_map(params: GeomParams, rows: np.ndarray, cols: np.ndarray):
    """Map original (row, col) coordinates into crop coordinates (float)."""
    rot, (cy, cx), _ = _rotation(params)
    c = np.where(params.flip, params.src_w - 1 - cols, cols).astype(float)
    r = rows.astype(float)
    dr, dc = r - cy, c - cx
    pr = rot[0, 0] * dr + rot[0, 1] * dc + cy - params.crop_top
    pc = rot[1, 0] * dr + rot[1, 1] * dc + cx - params.crop_left
    return pr, pc


def inverse_point(params: GeomParams, row: float, col: float) -> tuple[int, int] | None:
    """Map a crop pixel back to original coordinates; None if out of bounds."""
    rot, (cy, cx), _ = _rotation(params)
    dr = row + params.crop_top - cy
    dc = col + params.crop_left - cx
    r = rot[0, 0] * dr + rot[1, 0] * dc + cy
    c = rot[0, 1] * dr + rot[1, 1] * dc + cx
    if params.flip:
        c = params.src_w - 1 - c
    ri, ci = int(round(r)), int(round(c))
    if 0 <= ri < params.src_h and 0 <= ci < params.src_w:
        return ri, ci
    return None


def valid_content_mask(params: GeomParams) -> np.ndarray:
    """Crop pixels that originate inside the original image bounds."""
    ones = np.ones((params.src_h, params.src_w), dtype=bool)
    return apply_geometric(ones, params, is_mask=True).astype(bool)


def merge_crop_into_original(
    crop_mask: np.ndarray, params: GeomParams, prior: np.ndarray | None
) -> np.ndarray:
    """Write a crop-space mask back into original coordinates.

    Original pixels whose forward image falls outside the crop keep their
    prior value (blank when no prior is given).
    """
    out = (
        np.zeros((params.src_h, params.src_w), dtype=bool)
        if prior is None
        else np.asarray(prior, dtype=bool).copy()
    )
    rows, cols = np.meshgrid(
        np.arange(params.src_h), np.arange(params.src_w), indexing="ij"
    )
    pr, pc = forward_point_map(params, rows, cols)
    ri, ci = np.rint(pr).astype(int), np.rint(pc).astype(int)
    inside = (ri >= 0) & (ri < params.out_size) & (ci >= 0) & (ci < params.out_size)
    out[inside] = crop_mask[ri[inside], ci[inside]]
    return out


def augment(image: np.ndarray, mask: np.ndarray, rng, out_size: int = 512):
    """Sample flip/rotation/crop parameters and apply them to both arrays."""
    params = sample_augment_params(image.shape[0], image.shape[1], rng, out_size)
    return (
        apply_geometric(image, params, is_mask=False),
        apply_geometric(mask, params, is_mask=True),
        params,
    )


# -- evaluation-time aspect-preserving pad --------------------------------


@dataclass(frozen=True)
class PadResize:
    """Aspect-preserving resize of the longest side to `target`, zero-padded
    to a square. Stores enough to restore masks at the original resolution
    (exact whenever the image was scaled up, the usual case)."""

    orig_h: int
    orig_w: int
    content_h: int
    content_w: int
    target: int

    @classmethod
    def fit(cls, h: int, w: int, target: int) -> "PadResize":
        if h >= w:
            ch = target
            cw = max(1, round(w * target / h))
        else:
            cw = target
            ch = max(1, round(h * target / w))
        return cls(orig_h=h, orig_w=w, content_h=ch, content_w=cw, target=target)

    def _index_map(self, n_src: int, n_dst: int) -> np.ndarray:
        return (np.arange(n_dst) * n_src) // n_dst

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        mask = np.asarray(mask)
        rows = self._index_map(self.orig_h, self.content_h)
        cols = self._index_map(self.orig_w, self.content_w)
        out = np.zeros((self.target, self.target), dtype=mask.dtype)
        out[: self.content_h, : self.content_w] = mask[rows][:, cols]
        return out

    def apply_image(self, image: np.ndarray) -> np.ndarray:
        import torch
        import torch.nn.functional as F

        arr = np.asarray(image, dtype=np.float32)
        t = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
        t = F.interpolate(
            t, size=(self.content_h, self.content_w), mode="bilinear",
            align_corners=False,
        )
        content = t.squeeze(0).permute(1, 2, 0).numpy()
        out = np.zeros((self.target, self.target, 3), dtype=np.float32)
        out[: self.content_h, : self.content_w] = content
        return np.clip(np.rint(out), 0, 255).astype(np.uint8) \
            if image.dtype == np.uint8 else out

    def restore_mask(self, padded: np.ndarray) -> np.ndarray:
        """Invert apply_mask: crop the content region then index back.

        When content >= original (upscale) the composite map is the exact
        inverse, so restore(apply(m)) == m.
        """
        content = np.asarray(padded)[: self.content_h, : self.content_w]
        rows = np.minimum(
            self.content_h - 1,
            -((-np.arange(self.orig_h) * self.content_h) // self.orig_h),
        )
        cols = np.minimum(
            self.content_w - 1,
            -((-np.arange(self.orig_w) * self.content_w) // self.orig_w),
        )
        return content[rows][:, cols]

    def map_point(self, row: int, col: int) -> tuple[int, int]:
        """Original pixel -> padded pixel (center-of-cell convention)."""
        r = min(self.content_h - 1, ((2 * row + 1) * self.content_h) // (2 * self.orig_h))
        c = min(self.content_w - 1, ((2 * col + 1) * self.content_w) // (2 * self.orig_w))
        return int(r), int(c)


def resize_with_aspect_pad(image: np.ndarray, mask: np.ndarray | None, target: int):
    """Pad-resize an image (and optionally its mask); returns the transform too."""
    pr = PadResize.fit(image.shape[0], image.shape[1], target)
    padded_mask = pr.apply_mask(mask) if mask is not None else None
    return pr.apply_image(image), padded_mask, pr
