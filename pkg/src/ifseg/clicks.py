"""Click generation, encoding and replay.

Two samplers live here: the stochastic training-time sampler, which draws a
polarity and then a region according to fixed region weights, and the
deterministic validation-time sampler, which clicks the distance-transform
center of the largest mislabeled region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

POSITIVE = "positive"
NEGATIVE = "negative"

_EIGHT = np.ones((3, 3), dtype=bool)


class NoClickPossible(Exception):
    """Raised when every candidate region of both polarities is empty."""


class Converged(Exception):
    """Raised when prediction equals ground truth: nothing left to click."""


@dataclass(frozen=True)
class Click:
    row: int
    col: int
    polarity: str
    order: int

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"bad polarity {self.polarity!r}")
        if self.row < 0 or self.col < 0 or self.order < 0:
            raise ValueError("row, col and order must be non-negative")

    def to_record(self) -> dict:
        return {"row": self.row, "col": self.col, "polarity": self.polarity,
                "order": self.order}

    @classmethod
    def from_record(cls, d: dict) -> "Click":
        return cls(row=int(d["row"]), col=int(d["col"]),
                   polarity=str(d["polarity"]), order=int(d["order"]))


@dataclass(frozen=True)
class RegionWeights:
    positive: dict = field(
        default_factory=lambda: {"gt_foreground": 0.2, "false_negative": 0.8}
    )
    negative: dict = field(
        default_factory=lambda: {
            "gt_background": 0.04,
            "other_class_objects": 0.06,
            "fg_border": 0.1,
            "false_positive": 0.8,
        }
    )

    def __post_init__(self):
        for name, table in (("positive", self.positive), ("negative", self.negative)):
            if any(w < 0 for w in table.values()):
                raise ValueError(f"{name} weights must be >= 0")
            if abs(sum(table.values()) - 1.0) > 1e-9:
                raise ValueError(f"{name} weights must sum to 1")


@dataclass
class ClickMasks:
    positive: np.ndarray
    negative: np.ndarray


def fg_border(gt: np.ndarray, width: int) -> np.ndarray:
    """Band of background pixels within `width` (Chebyshev) of the foreground."""
    if width < 1:
        raise ValueError("border width must be >= 1")
    gt = np.asarray(gt, dtype=bool)
    if not gt.any():
        return np.zeros_like(gt)
    dilated = ndimage.binary_dilation(gt, structure=_EIGHT, iterations=width)
    return dilated & ~gt


def positive_click_regions(gt: np.ndarray, pred: np.ndarray) -> dict[str, np.ndarray]:
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    fn = gt & ~pred
    return {"gt_foreground": gt & pred, "false_negative": fn}


def negative_click_regions(
    gt: np.ndarray,
    pred: np.ndarray,
    other_class: np.ndarray | None,
    border_width: int = 3,
    valid: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Candidate regions for a negative click.

    The four named regions all live in the ground-truth background; they
    are made pairwise disjoint (precedence: false positive, then border,
    then other-class objects, then plain background) so empirical click
    frequencies can be compared against the region weights directly.
    `valid`, when given, restricts every region (used to keep clicks off
    synthetic padding).
    """
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    bg = ~gt
    fp = pred & bg
    border = fg_border(gt, border_width) & ~fp if gt.any() else np.zeros_like(gt)
    other = (
        np.asarray(other_class, dtype=bool) & bg & ~fp & ~border
        if other_class is not None
        else np.zeros_like(gt)
    )
    plain = bg & ~fp & ~border & ~other
    regions = {
        "gt_background": plain,
        "other_class_objects": other,
        "fg_border": border,
        "false_positive": fp,
    }
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        regions = {k: v & valid for k, v in regions.items()}
    return regions


def _pick_pixel(mask: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    flat = np.flatnonzero(mask)
    idx = int(flat[rng.integers(len(flat))])
    return np.unravel_index(idx, mask.shape)


def sample_training_click(
    gt: np.ndarray,
    pred: np.ndarray,
    other_class: np.ndarray | None,
    weights: RegionWeights | None = None,
    rng: np.random.Generator | None = None,
    order: int = 0,
    border_width: int = 3,
    valid: np.ndarray | None = None,
) -> Click:
    """Draw one stochastic training click.

    Polarity is a fair coin over the polarities that have at least one
    nonempty region; within the polarity, a region is drawn by its weight
    (blank regions dropped, the rest renormalized) and a pixel uniformly
    within it. Raises NoClickPossible when nothing is clickable.
    """
    if weights is None:
        weights = RegionWeights()
    if rng is None:
        rng = np.random.default_rng()
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if gt.shape != pred.shape:
        raise ValueError("gt/pred shape mismatch")

    tables = {
        POSITIVE: (positive_click_regions(gt, pred), weights.positive),
        NEGATIVE: (
            negative_click_regions(gt, pred, other_class, border_width, valid=valid),
            weights.negative,
        ),
    }
    if valid is not None:
        regions, table = tables[POSITIVE]
        tables[POSITIVE] = ({k: v & valid for k, v in regions.items()}, table)

    feasible = [
        pol for pol, (regions, table) in tables.items()
        if any(regions[name].any() for name, w in table.items() if w > 0)
    ]
    if not feasible:
        raise NoClickPossible("all candidate regions empty for both polarities")
    polarity = feasible[int(rng.integers(len(feasible)))] if len(feasible) > 1 else feasible[0]
    regions, table = tables[polarity]
    names = [n for n, w in table.items() if w > 0 and regions[n].any()]
    probs = np.array([table[n] for n in names], dtype=float)
    probs /= probs.sum()
    name = names[int(rng.choice(len(names), p=probs))]
    r, c = _pick_pixel(regions[name], rng)
    return Click(row=int(r), col=int(c), polarity=polarity, order=order)


def largest_error_region(
    gt: np.ndarray, pred: np.ndarray
) -> tuple[np.ndarray, tuple[int, int], bool]:
    """Largest 8-connected component of gt XOR pred and its deepest pixel.

    Ties between equal-size components go to the one whose first pixel in
    raster order comes earliest. The returned center is the argmax of the
    Euclidean distance transform inside the component (raster order breaks
    ties), and the flag is True when the center is a false negative.
    Raises Converged when gt == pred.
    """
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if gt.shape != pred.shape:
        raise ValueError("gt/pred shape mismatch")
    err = gt ^ pred
    if not err.any():
        raise Converged("prediction matches ground truth")
    labels, n = ndimage.label(err, structure=_EIGHT)
    sizes = np.bincount(labels.ravel())[1:]
    best = sizes.max()
    candidates = np.flatnonzero(sizes == best) + 1
    if len(candidates) > 1:
        flat = labels.ravel()
        first = {int(lab): int(np.flatnonzero(flat == lab)[0]) for lab in candidates}
        label = min(first, key=first.get)
    else:
        label = int(candidates[0])
    region = labels == label
    # Pad with background so the border counts as "outside"; keeps the
    # center defined even when a region touches or fills the frame.
    dist = ndimage.distance_transform_edt(np.pad(region, 1))[1:-1, 1:-1]
    center = np.unravel_index(int(np.argmax(dist)), region.shape)
    return region, (int(center[0]), int(center[1])), bool(gt[center])


def sample_validation_click(gt: np.ndarray, pred: np.ndarray, order: int = 0) -> Click:
    """Deterministic click at the center of the largest mislabeled region."""
    _, (r, c), is_fn = largest_error_region(gt, pred)
    return Click(row=r, col=c, polarity=POSITIVE if is_fn else NEGATIVE, order=order)


def encode_clicks(history: list[Click], h: int, w: int, radius: int) -> ClickMasks:
    """Union of filled disks per polarity, clipped at the borders."""
    pos = np.zeros((h, w), dtype=bool)
    neg = np.zeros((h, w), dtype=bool)
    for click in history:
        if not (0 <= click.row < h and 0 <= click.col < w):
            raise ValueError(f"click ({click.row}, {click.col}) outside {h}x{w}")
        target = pos if click.polarity == POSITIVE else neg
        r0, r1 = max(0, click.row - radius), min(h, click.row + radius + 1)
        c0, c1 = max(0, click.col - radius), min(w, click.col + radius + 1)
        rr, cc = np.ogrid[r0:r1, c0:c1]
        target[r0:r1, c0:c1] |= (
            (rr - click.row) ** 2 + (cc - click.col) ** 2 <= radius ** 2
        )
    return ClickMasks(positive=pos, negative=neg)


def save_click_log(path, history: list[Click]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for click in history:
            fh.write(json.dumps(click.to_record()) + "\n")


def load_click_log(path) -> list[Click]:
    clicks = [
        Click.from_record(json.loads(line))
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]
    for i in range(1, len(clicks)):
        if clicks[i].order <= clicks[i - 1].order:
            raise ValueError("click orders must be strictly increasing")
    return clicks
