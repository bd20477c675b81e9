"""Iterative training loop with carried-over predictions and click masks.

Each visit of an image treats it as the query: a class is chosen among its
training classes, k support images containing that class are drawn, stored
predictions and click histories for every participating (image, class) pair
are either carried (probability carry_prob) or reset to blank, one new
training click is sampled per support image, and a full forward pass plus
one SGD contribution updates the network. Fresh predictions and clicks are
written back for the next visit. Ground-truth masks feed only the loss and
the click sampler, never the network inputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import clicks as ck
from .data import (
    CorpusIndex,
    FoldSpec,
    GeomParams,
    PadResize,
    apply_geometric,
    forward_point_map,
    inverse_point,
    merge_crop_into_original,
    sample_augment_params,
)
from .model import SegmentationModel, binarize_logits, compute_loss, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.0025
    batch: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.0001
    poly_power: float = 0.9
    carry_prob: float = 0.9
    k_shots: int = 1
    seed: int = 0
    augment: bool = True
    border_width: int = 3

    def __post_init__(self):
        if not (0.0 <= self.carry_prob <= 1.0):
            raise ValueError("carry_prob must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch < 1 or self.k_shots < 1 or self.epochs < 0:
            raise ValueError("batch and k_shots must be >= 1, epochs >= 0")


def poly_lr(iteration: int, total_iters: int, base: float, power: float) -> float:
    """base * (1 - iteration/total_iters) ** power."""
    if total_iters <= 0:
        raise ValueError("total_iters must be positive")
    if not (0 <= iteration <= total_iters):
        raise ValueError("iteration out of range")
    return base * (1.0 - iteration / total_iters) ** power


def carry_coin(rng: np.random.Generator, carry_prob: float) -> bool:
    """True when stored state should be carried over, False to reset."""
    return bool(rng.random() < carry_prob)


@dataclass
class StateEntry:
    """Stored per-(image, class) state, at original image resolution."""

    seg: np.ndarray | None = None
    clicks: list = field(default_factory=list)


class IterationState:
    """Carried-over predictions and click histories keyed by (image, class)."""

    def __init__(self):
        self._entries: dict[tuple[str, int], StateEntry] = {}

    def read(self, key, rng, carry_prob) -> StateEntry:
        """Fetch the stored bundle, resetting it to blank with prob 1-carry_prob.

        A fresh blank entry is returned (and stored) on first visit; the
        carry coin is flipped once per stored bundle.
        """
        entry = self._entries.get(key)
        if entry is None:
            entry = StateEntry()
            self._entries[key] = entry
            return entry
        if not carry_coin(rng, carry_prob):
            entry.seg = None
            entry.clicks = []
        return entry

    def peek(self, key) -> StateEntry | None:
        return self._entries.get(key)

    def __len__(self):
        return len(self._entries)


class Trainer:
    def __init__(
        self,
        dataset: CorpusIndex,
        fold: FoldSpec,
        model: SegmentationModel,
        cfg: TrainConfig,
        out_dir=None,
    ):
        self.dataset = dataset
        self.fold = fold
        self.model = model
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.state = IterationState()
        self.optimizer = torch.optim.SGD(
            model.trainable_parameters(),
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
        )
        self.patch = model.cfg.input_patch
        self._train_classes = set(fold.train_classes)
        self._val_classes = set(fold.val_classes)

    # -- geometry helpers -------------------------------------------------

    def _visit_geometry(self, h: int, w: int, rng) -> GeomParams:
        if self.cfg.augment:
            return sample_augment_params(h, w, rng, out_size=self.patch)
        # Deterministic resize-free geometry: zero-pad up to the patch.
        return GeomParams(flip=False, angle_deg=0.0, crop_top=0, crop_left=0,
                          out_size=self.patch, src_h=h, src_w=w)

    def _prepare_entry(self, record, class_chosen, rng, with_clicks):
        """Load, transform and (maybe) reset one image's carried state."""
        image = self.dataset.load_image(record)
        gt = self.dataset.binarize_mask(record, class_chosen)
        other = self.dataset.other_classes_mask(record, class_chosen)
        valid = np.ones(gt.shape, dtype=bool)
        h, w = gt.shape
        if h > self.patch or w > self.patch:
            # Keep state geometry simple: pre-shrink big images so the crop
            # always covers the whole frame at deterministic geometry.
            pr = PadResize.fit(h, w, self.patch)
            image = pr.apply_image(image)
            gt = pr.apply_mask(gt.astype(np.uint8)).astype(bool)
            other = pr.apply_mask(other.astype(np.uint8)).astype(bool)
            valid = pr.apply_mask(valid.astype(np.uint8)).astype(bool)
            h, w = gt.shape
        geom = self._visit_geometry(h, w, rng)
        entry = self.state.read((record.id, class_chosen), rng, self.cfg.carry_prob)
        prev_orig = entry.seg if entry.seg is not None else np.zeros((h, w), bool)
        out = {
            "record": record,
            "key": (record.id, class_chosen),
            "geom": geom,
            "orig_shape": (h, w),
            "image": apply_geometric(image, geom, is_mask=False),
            "gt": apply_geometric(gt, geom, is_mask=True).astype(bool),
            "other": apply_geometric(other, geom, is_mask=True).astype(bool),
            "prev": apply_geometric(prev_orig, geom, is_mask=True).astype(bool),
            "valid": apply_geometric(valid, geom, is_mask=True).astype(bool),
            "entry": entry,
        }
        if with_clicks:
            out["click_pts"] = self._transform_clicks(entry.clicks, geom)
        return out

    def _transform_clicks(self, history, geom) -> list[ck.Click]:
        pts = []
        for c in history:
            pr, pc = forward_point_map(geom, np.array([c.row]), np.array([c.col]))
            r, col = int(round(float(pr[0]))), int(round(float(pc[0])))
            if 0 <= r < geom.out_size and 0 <= col < geom.out_size:
                pts.append(ck.Click(row=r, col=col, polarity=c.polarity, order=c.order))
        return pts

    # -- the ten-step visit -----------------------------------------------

    def training_step(self, q_record, rng) -> float:
        """One query visit; accumulates gradients and returns the loss value."""
        classes = sorted(q_record.classes_present & self._train_classes)
        if not classes:
            raise ValueError(f"record {q_record.id} has no training classes")
        class_chosen = int(classes[int(rng.integers(len(classes)))])
        assert class_chosen not in self._val_classes, "validation class leaked into training"

        q = self._prepare_entry(q_record, class_chosen, rng, with_clicks=False)
        supports = self.dataset.sample_support(
            class_chosen, self.cfg.k_shots, exclude={q_record.id}, rng=rng
        )
        s_entries = [
            self._prepare_entry(r, class_chosen, rng, with_clicks=True)
            for r in supports
        ]

        radius = self.model.cfg.click_disk_radius
        support_feats, support_aux, s_masks = [], [], []
        for s in s_entries:
            try:
                new_click = ck.sample_training_click(
                    s["gt"], s["prev"], s["other"], rng=rng,
                    order=len(s["entry"].clicks),
                    border_width=self.cfg.border_width, valid=s["valid"],
                )
                s["click_pts"].append(new_click)
                back = inverse_point(s["geom"], new_click.row, new_click.col)
                if back is not None:
                    s["entry"].clicks.append(
                        ck.Click(row=back[0], col=back[1],
                                 polarity=new_click.polarity, order=new_click.order)
                    )
            except ck.NoClickPossible:
                pass
            masks = ck.encode_clicks(s["click_pts"], self.patch, self.patch, radius)
            support_aux.append((
                torch.from_numpy(masks.positive.astype(np.float32)),
                torch.from_numpy(masks.negative.astype(np.float32)),
                torch.from_numpy(s["prev"].astype(np.float32)),
            ))
            support_feats.append(self.model.extract_features(s["image"]))
            s_masks.append(torch.from_numpy(s["gt"].astype(np.float32)))

        q_feat = self.model.extract_features(q["image"])
        q_prev = torch.from_numpy(q["prev"].astype(np.float32))
        support_logits, finals, inters = self.model.episode_forward(
            support_feats, support_aux, [q_feat], [q_prev]
        )
        q_mask = torch.from_numpy(q["gt"].astype(np.float32))
        loss = compute_loss(support_logits, s_masks, inters[0], finals[0], q_mask)
        (loss / self.cfg.batch).backward()

        # Step 10: write fresh predictions back at original geometry.
        with torch.no_grad():
            q_pred = binarize_logits(finals[0]).numpy()
            q["entry"].seg = merge_crop_into_original(
                q_pred, q["geom"], prior=q["entry"].seg
            )
            for s, logits in zip(s_entries, support_logits):
                s_pred = binarize_logits(logits).numpy()
                s["entry"].seg = merge_crop_into_original(
                    s_pred, s["geom"], prior=s["entry"].seg
                )
        return float(loss.detach())

    def train(self) -> Path | None:
        """Full loop: epochs x one visit per eligible image, batched updates."""
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)
        records = self.dataset.training_records(self.fold)
        if not records:
            raise ValueError("no eligible training records for this fold")
        steps_per_epoch = (len(records) + cfg.batch - 1) // cfg.batch
        total_updates = max(1, cfg.epochs * steps_per_epoch)
        log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_fh = (self.out_dir / "train_log.jsonl").open("w")
        ckpt_path = None
        update = 0
        step = 0
        try:
            for epoch in range(cfg.epochs):
                order = rng.permutation(len(records))
                self.model.train()
                for start in range(0, len(order), cfg.batch):
                    batch_ids = order[start:start + cfg.batch]
                    lr = poly_lr(update, total_updates, cfg.lr, cfg.poly_power)
                    for g in self.optimizer.param_groups:
                        g["lr"] = lr
                    self.optimizer.zero_grad()
                    losses = []
                    for i in batch_ids:
                        losses.append(self.training_step(records[int(i)], rng))
                        step += 1
                    self.optimizer.step()
                    update += 1
                    if log_fh is not None:
                        for j, l in enumerate(losses):
                            log_fh.write(json.dumps(
                                {"step": step - len(losses) + j + 1, "loss": l, "lr": lr}
                            ) + "\n")
                        log_fh.flush()
                if self.out_dir is not None:
                    ckpt_path = save_checkpoint(
                        self.out_dir / f"checkpoint_epoch{epoch + 1:03d}.pt",
                        self.model, extra={"epoch": epoch + 1},
                    )
            if self.out_dir is not None:
                ckpt_path = save_checkpoint(
                    self.out_dir / "checkpoint_final.pt",
                    self.model, extra={"epochs": cfg.epochs},
                )
        finally:
            if log_fh is not None:
                log_fh.close()
        return ckpt_path
