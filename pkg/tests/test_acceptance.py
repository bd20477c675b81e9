"""Acceptance gate: one test per criterion, each printing a verdict line.

Full-scale headline numbers need ~100-epoch training on the real merged
corpus and are exercised by the documented scripts instead; these tests pin
the property-level contract at desk scale.

Run with `pytest tests/test_acceptance.py -v` (verdict lines print per
criterion regardless of capture settings).
"""

import base64
import io
import hashlib
import itertools
import os
import time

import numpy as np
import pytest
import torch
from PIL import Image
from scipy.stats import chisquare

import ifseg.clicks as ck
from ifseg import evaluate as ev
from ifseg.config import ModelConfig
from ifseg.data import EpisodeSpec, build_merged_index, fold_split
from ifseg.engine import MaskPredictor, QueryItem, SupportItem
from ifseg.model import SegmentationModel, attention_prior, compute_loss
from ifseg.model.core import compute_support_vector
from ifseg.model.support_path import SupportPath
from ifseg.model.types import FeatureMap, Logits
from ifseg.train import TrainConfig, Trainer, carry_coin, poly_lr

from conftest import TINY_CFG, make_synthetic_corpus
from oracles import (
    attention_prior_oracle,
    bce_oracle,
    border_oracle,
    click_vector_oracle,
    composite_loss_oracle,
    connected_components_oracle,
    disk_union_oracle,
    distance_transform_oracle,
    iou_oracle,
    masked_average_oracle,
    noc_oracle,
)

TOL = 1e-6


def fmap(arr):
    return FeatureMap(data=torch.as_tensor(arr, dtype=torch.float64), stride=8)


def fg_logits(fg):
    fg = np.asarray(fg, dtype=np.float64)
    return Logits(data=torch.as_tensor(np.stack([1.0 - fg, fg]) * 10.0 - 5.0))


def blob(h, w, r, c, rad):
    rr, cc = np.mgrid[0:h, 0:w]
    return (rr - r) ** 2 + (cc - c) ** 2 <= rad ** 2


@pytest.mark.acceptance(name="oracle equivalence")
def test_oracle_equivalence():
    start = time.time()
    rng = np.random.default_rng(0)

    # attention_prior: every instance up to 8x8 feature grids.
    for trial in range(30):
        sh, sw, qh, qw = rng.integers(1, 9, size=4)
        sfeat = rng.normal(size=(4, sh, sw))
        qfeat = rng.normal(size=(4, qh, qw))
        fg = rng.random((sh, sw)) < 0.4
        got = attention_prior(fmap(sfeat), fmap(qfeat), fg_logits(fg)).numpy()
        np.testing.assert_allclose(got, attention_prior_oracle(sfeat, qfeat, fg),
                                   atol=TOL)

    # compute_support_vector against the per-pixel loop.
    for trial in range(50):
        feat = rng.normal(size=(5, 8, 8))
        mask = rng.random((8, 8)) < 0.3
        got = compute_support_vector(fmap(feat), torch.as_tensor(mask)).numpy()
        np.testing.assert_allclose(got, masked_average_oracle(feat, mask), atol=TOL)

    # compute_click_vector against explicit conv + pool loops.
    torch.manual_seed(0)
    path = SupportPath(channels=4).double()
    kernel = path.vector_reduce.weight.detach().numpy()[:, :, 0, 0]
    bias = path.vector_reduce.bias.detach().numpy()
    for trial in range(10):
        bn = rng.normal(size=(32, 4, 4))
        got = path.click_vector(fmap(bn)).detach().numpy()
        np.testing.assert_allclose(got, click_vector_oracle(bn, kernel, bias), atol=TOL)

    # compute_loss against the loop-coded sum of BCE terms.
    from ifseg.model.core import downsample_mask

    for trial in range(10):
        k, n = 2, 4
        sl = [Logits(data=torch.as_tensor(rng.normal(size=(2, 6, 6)))) for _ in range(k)]
        sm = [torch.as_tensor((rng.random((6, 6)) < 0.5).astype(float)) for _ in range(k)]
        sizes = [(6, 6), (4, 4), (2, 2), (1, 1)]
        il = [Logits(data=torch.as_tensor(rng.normal(size=(2, h, w)))) for h, w in sizes]
        fl = Logits(data=torch.as_tensor(rng.normal(size=(2, 6, 6))))
        qm = torch.as_tensor((rng.random((6, 6)) < 0.5).astype(float))
        want = composite_loss_oracle(
            [l.data.numpy() for l in sl], [m.numpy().astype(bool) for m in sm],
            [l.data.numpy() for l in il],
            [downsample_mask(qm, s).numpy().astype(bool) for s in sizes],
            fl.data.numpy(), qm.numpy().astype(bool),
        )
        assert float(compute_loss(sl, sm, il, fl, qm)) == pytest.approx(want, abs=TOL)

    # iou and noc on exhaustive 3x3 pairs / random traces.
    for bits_a in range(64):
        a = np.array([(bits_a >> i) & 1 for i in range(6)], bool).reshape(2, 3)
        for bits_b in range(0, 64, 7):
            b = np.array([(bits_b >> i) & 1 for i in range(6)], bool).reshape(2, 3)
            assert ev.iou(a, b) == pytest.approx(iou_oracle(a, b), abs=TOL)
    for trial in range(200):
        trace = np.sort(rng.random(20))
        for thr in (0.85, 0.90):
            assert ev.noc(trace, thr) == noc_oracle(trace, thr)

    # encode_clicks and fg_border loop oracles.
    for trial in range(20):
        history = [
            ck.Click(row=int(rng.integers(8)), col=int(rng.integers(8)),
                     polarity=ck.POSITIVE if rng.random() < 0.5 else ck.NEGATIVE,
                     order=i)
            for i in range(int(rng.integers(0, 5)))
        ]
        radius = int(rng.integers(0, 4))
        masks = ck.encode_clicks(history, 8, 8, radius)
        pos, neg = disk_union_oracle(history, 8, 8, radius)
        assert (masks.positive == pos).all() and (masks.negative == neg).all()
    for trial in range(20):
        gt = rng.random((8, 8)) < 0.25
        width = int(rng.integers(1, 4))
        assert (ck.fg_border(gt, width) == border_oracle(gt, width)).all()

    assert time.time() - start < 60.0


@pytest.mark.acceptance(name="click-frequency suite")
def test_click_frequency_suite():
    start = time.time()
    weights = ck.RegionWeights()

    # Positive polarity: 0.2 / 0.8 over 10^4 effective draws.
    gt = np.zeros((40, 40), bool)
    gt[5:35, 5:35] = True
    pred = np.zeros_like(gt)
    pred[5:20, 5:35] = True  # top part predicted: FN is the bottom part
    regions_pos = ck.positive_click_regions(gt, pred)
    rng = np.random.default_rng(1)
    counts = {"gt_foreground": 0, "false_negative": 0}
    total = 0
    while total < 10_000:
        c = ck.sample_training_click(gt, pred, None, weights, rng)
        if c.polarity != ck.POSITIVE:
            continue
        total += 1
        for name, mask in regions_pos.items():
            if mask[c.row, c.col]:
                counts[name] += 1
                break
    _, p_pos = chisquare(
        [counts["gt_foreground"], counts["false_negative"]],
        [0.2 * total, 0.8 * total],
    )
    assert p_pos > 0.01

    # Negative polarity: 0.04 / 0.06 / 0.1 / 0.8 over 10^4 effective draws.
    gt = np.zeros((48, 48), bool)
    gt[12:24, 12:24] = True
    pred = gt.copy()
    pred[30:44, 30:44] = True  # false-positive blob
    other = np.zeros_like(gt)
    other[2:10, 34:46] = True
    regions_neg = ck.negative_click_regions(gt, pred, other)
    names = list(weights.negative)
    assert all(regions_neg[n].any() for n in names)
    counts = {n: 0 for n in names}
    total = 0
    while total < 10_000:
        c = ck.sample_training_click(gt, pred, other, weights, rng)
        if c.polarity != ck.NEGATIVE:
            continue
        total += 1
        for n in names:
            if regions_neg[n][c.row, c.col]:
                counts[n] += 1
                break
    _, p_neg = chisquare(
        [counts[n] for n in names],
        [weights.negative[n] * total for n in names],
    )
    assert p_neg > 0.01

    # Redistribution: every feasible blank/nonblank combination of the four
    # negative regions (border exists iff gt does; background always remains).
    for has_gt, has_fp, has_other in itertools.product([False, True], repeat=3):
        gt = np.zeros((40, 40), bool)
        if has_gt:
            gt[12:20, 12:20] = True
        pred = gt.copy()
        if has_fp:
            pred[28:36, 28:36] = True
        other = None
        if has_other:
            other = np.zeros_like(gt)
            other[2:8, 30:38] = True
        regions = ck.negative_click_regions(gt, pred, other)
        live = [n for n in names if regions[n].any()]
        assert "gt_background" in live
        assert ("false_positive" in live) == has_fp
        assert ("fg_border" in live) == has_gt
        assert ("other_class_objects" in live) == has_other
        scale = sum(weights.negative[n] for n in live)
        counts = {n: 0 for n in live}
        total = 0
        draw_rng = np.random.default_rng(10 + 4 * has_gt + 2 * has_fp + has_other)
        while total < 3000:
            c = ck.sample_training_click(gt, pred, other, weights, draw_rng)
            if c.polarity != ck.NEGATIVE:
                continue
            total += 1
            for n in live:
                if regions[n][c.row, c.col]:
                    counts[n] += 1
                    break
        if len(live) == 1:
            assert counts[live[0]] == total  # renormalized probability 1
        else:
            _, p = chisquare(
                [counts[n] for n in live],
                [weights.negative[n] / scale * total for n in live],
            )
            assert p > 0.01

    # Positive-side redistribution: pred == gt empties FN; probability moves
    # wholly to the ground-truth foreground.
    gt = np.zeros((30, 30), bool)
    gt[8:20, 8:20] = True
    draw_rng = np.random.default_rng(3)
    for _ in range(300):
        c = ck.sample_training_click(gt, gt, None, weights, draw_rng)
        if c.polarity == ck.POSITIVE:
            assert gt[c.row, c.col]

    assert time.time() - start < 60.0


@pytest.mark.acceptance(name="validation-click suite")
def test_validation_click_suite():
    rng = np.random.default_rng(2)

    # Click containment and center correctness on random instances.
    for _ in range(40):
        gt = rng.random((24, 24)) < 0.35
        pred = rng.random((24, 24)) < 0.35
        if not (gt ^ pred).any():
            continue
        click = ck.sample_validation_click(gt, pred)
        region, center, is_fn = ck.largest_error_region(gt, pred)
        labels, n = connected_components_oracle(gt ^ pred)
        sizes = [(labels == i).sum() for i in range(1, n + 1)]
        assert region.sum() == max(sizes)
        assert (click.row, click.col) == center
        assert region[click.row, click.col]
        dist = distance_transform_oracle(region)
        assert dist[center] == pytest.approx(dist.max())
        assert (click.polarity == ck.POSITIVE) == bool(gt[center])

    # Deterministic replay.
    gt = rng.random((32, 32)) < 0.4
    pred = rng.random((32, 32)) < 0.4
    seq_a = [ck.sample_validation_click(gt, pred, order=i) for i in range(5)]
    seq_b = [ck.sample_validation_click(gt, pred, order=i) for i in range(5)]
    assert seq_a == seq_b

    # Oracle flipper: error count strictly decreases to zero.
    gt = rng.random((20, 20)) < 0.3
    pred = rng.random((20, 20)) < 0.3
    errors = int((gt ^ pred).sum())
    while errors:
        click = ck.sample_validation_click(gt, pred)
        pred = pred.copy()
        pred[click.row, click.col] = ~pred[click.row, click.col]
        new_errors = int((gt ^ pred).sum())
        assert new_errors == errors - 1
        errors = new_errors


@pytest.mark.acceptance(name="architecture suite")
def test_architecture_suite():
    torch.manual_seed(11)
    cfg = ModelConfig(**TINY_CFG)
    model = SegmentationModel(cfg)
    model.train()

    def image(seed, h=64, w=64):
        return (np.random.default_rng(seed).random((h, w, 3)) * 255).astype(np.uint8)

    def aux(seed, h=64, w=64):
        r = np.random.default_rng(seed)
        return tuple(
            torch.from_numpy((r.random((h, w)) < p).astype(np.float32))
            for p in (0.05, 0.05, 0.3)
        )

    # Stride-8 shapes, including non-square ceil division.
    assert model.extract_features(image(0)).data.shape == (16, 8, 8)
    assert model.extract_features(image(1, 64, 48)).spatial == (8, 6)

    # Two-channel logits at input resolution; n intermediate + 1 final.
    feat = model.extract_features(image(2))
    sl, finals, inters = model.episode_forward(
        [feat], [aux(3)], [feat], [torch.zeros(64, 64)]
    )
    assert sl[0].data.shape == (2, 64, 64)
    assert finals[0].data.shape == (2, 64, 64)
    assert len(inters[0]) == cfg.num_query_scales

    # Frozen backbone: parameter/buffer hash stable across 10 training steps.
    opt = torch.optim.SGD(model.trainable_parameters(), lr=0.05, momentum=0.9)
    before = hashlib.sha256(model.extractor.trunk_state_bytes()).hexdigest()
    grads = {n: 0.0 for n, p in model.named_parameters() if p.requires_grad}
    for step in range(10):
        feat = model.extract_features(image(100 + step))
        sl, finals, inters = model.episode_forward(
            [feat], [aux(200 + step)], [feat], [torch.zeros(64, 64)]
        )
        gt = torch.from_numpy(
            (np.random.default_rng(step).random((64, 64)) < 0.4).astype(np.float32)
        )
        loss = compute_loss(sl, [gt], inters[0], finals[0], gt)
        opt.zero_grad()
        loss.backward()
        for n, p in model.named_parameters():
            if p.requires_grad and p.grad is not None:
                grads[n] += float(p.grad.abs().sum())
        opt.step()
    after = hashlib.sha256(model.extractor.trunk_state_bytes()).hexdigest()
    assert before == after

    # Gradient reaches every trainable parameter.
    dead = [n for n, g in grads.items() if g == 0.0]
    assert not dead, f"no gradient path: {dead}"

    # Support-set permutation invariance of the final query logits.
    model.eval()
    feats = [model.extract_features(image(20 + i)) for i in range(3)]
    auxes = [aux(30 + i) for i in range(3)]
    qfeat = model.extract_features(image(40))
    with torch.no_grad():
        base = model.episode_forward(feats, auxes, [qfeat], [torch.zeros(64, 64)])[1][0]
        perm = model.episode_forward(
            [feats[2], feats[0], feats[1]], [auxes[2], auxes[0], auxes[1]],
            [qfeat], [torch.zeros(64, 64)],
        )[1][0]
    assert float((base.data - perm.data).abs().max()) <= 1e-6


@pytest.mark.acceptance(name="overfit smoke test")
def test_overfit_smoke(tmp_path):
    start = time.time()
    corpus = make_synthetic_corpus(tmp_path, n_per_class=10, classes=(1,), h=48, w=64)
    torch.manual_seed(0)
    cfg = ModelConfig(
        backbone_variant="resnet18", feature_channels=64,
        num_query_scales=2, query_scale_fractions=(1.0, 0.5),
        input_patch=64, click_disk_radius=2,
    )
    model = SegmentationModel(cfg)
    tc = TrainConfig(epochs=20, lr=0.01, batch=1, k_shots=1, seed=0, augment=False)
    trainer = Trainer(corpus, fold_split(3), model, tc)
    rng = np.random.default_rng(0)
    records = corpus.training_records(trainer.fold)
    assert len(records) == 10
    losses = []
    step = 0
    model.train()
    for epoch in range(tc.epochs):
        for i in rng.permutation(len(records)):
            lr = poly_lr(step, 200, tc.lr, tc.poly_power)
            for g in trainer.optimizer.param_groups:
                g["lr"] = lr
            trainer.optimizer.zero_grad()
            losses.append(trainer.training_step(records[int(i)], rng))
            trainer.optimizer.step()
            step += 1
    assert len(losses) == 200
    first, last = np.mean(losses[:20]), np.mean(losses[-20:])
    assert last <= 0.5 * first, f"first20={first:.4f} last20={last:.4f}"
    assert time.time() - start < 600.0


@pytest.mark.acceptance(name="regime fidelity")
def test_regime_fidelity(tiny_model):
    # poly_lr endpoints exact.
    assert poly_lr(0, 77, 0.0025, 0.9) == 0.0025
    assert poly_lr(77, 77, 0.0025, 0.9) == 0.0

    # Carry coin empirically 0.9 / 0.1 within +-0.01 over 10^4 flips.
    rng = np.random.default_rng(4)
    resets = sum(not carry_coin(rng, 0.9) for _ in range(10_000))
    assert abs(resets / 10_000 - 0.1) <= 0.01

    # Seeded 1-support / 2-query episode is bit-reproducible and queries
    # receive zero clicks.
    rng = np.random.default_rng(5)
    images = {
        rid: (rng.random((24, 32, 3)) * 255).astype(np.uint8)
        for rid in ("s0", "q0", "q1")
    }
    gts = {"s0": blob(24, 32, 10, 12, 6), "q0": blob(24, 32, 12, 16, 7),
           "q1": blob(24, 32, 8, 20, 5)}

    class Stub:
        class _R:
            def __init__(self, rid):
                self.id = rid

        def get(self, rid):
            return self._R(rid)

        def load_image(self, record):
            return images[record.id]

        def binarize_mask(self, record, cls):
            return gts[record.id]

    spec = EpisodeSpec(class_chosen=1, support_ids=("s0",),
                       query_ids=("q0", "q1"), seed=7)
    a = ev.run_episode(spec, MaskPredictor(tiny_model), Stub(), budget=6)
    b = ev.run_episode(spec, MaskPredictor(tiny_model), Stub(), budget=6)
    assert (a.support_iou == b.support_iou).all()
    assert (a.query_iou == b.query_iou).all()
    assert a.click_log == b.click_log
    assert a.click_log["q0"] == [] and a.click_log["q1"] == []
    assert len(a.click_log["s0"]) >= 1


@pytest.mark.acceptance(name="dataset suite")
def test_dataset_suite(tmp_path):
    # Fold partition properties for all four folds.
    seen_val = []
    for fold in range(4):
        spec = fold_split(fold)
        assert len(spec.val_classes) == 5
        assert set(spec.val_classes) | set(spec.train_classes) == set(range(1, 21))
        assert not set(spec.val_classes) & set(spec.train_classes)
        seen_val.extend(spec.val_classes)
    assert sorted(seen_val) == list(range(1, 21))

    # Merge priority on a synthetic six-image fixture (two shared ids).
    from conftest import blob_mask, textured_image, write_pascal_record, write_sbd_record

    pascal, sbd = tmp_path / "pascal", tmp_path / "sbd"
    for i, rid in enumerate(["p0", "p1"]):
        m = blob_mask(32, 40, [(10, 10 + i)], 5, label=1)
        write_pascal_record(pascal, rid, textured_image(32, 40, i, m), m)
    for i, rid in enumerate(["s0", "s1"]):
        m = blob_mask(32, 40, [(16, 12 + i)], 5, label=2)
        write_sbd_record(sbd, rid, textured_image(32, 40, 10 + i, m), m)
    for i, rid in enumerate(["c0", "c1"]):
        pm = blob_mask(32, 40, [(8, 8)], 4, label=3)
        sm = blob_mask(32, 40, [(20, 30)], 6, label=4)
        img = textured_image(32, 40, 20 + i, sm)
        write_pascal_record(pascal, rid, img, pm)
        write_sbd_record(sbd, rid, img, sm, as_mat=(i == 0))
    records = {r.id: r for r in build_merged_index(pascal, sbd)}
    assert len(records) == 6
    assert records["p0"].source == "pascal"
    assert records["s0"].source == "sbd"
    for rid in ("c0", "c1"):
        assert records[rid].source == "sbd"
        assert records[rid].classes_present == frozenset({4})

    # Canonical-corpus count, gated behind the data-available flag.
    pascal_root = os.environ.get("IFSEG_PASCAL_ROOT")
    sbd_root = os.environ.get("IFSEG_SBD_ROOT")
    if pascal_root and sbd_root:
        assert len(build_merged_index(pascal_root, sbd_root)) == 12_031


@pytest.mark.acceptance(name="service equivalence")
def test_service_equivalence(tiny_model, tmp_path):
    from fastapi.testclient import TestClient

    from ifseg.service import SessionStore, create_app, decode_mask_png

    rng = np.random.default_rng(6)
    images = {
        rid: (rng.random((24, 32, 3)) * 255).astype(np.uint8)
        for rid in ("s0", "q0", "q1")
    }
    gts = {"s0": blob(24, 32, 10, 12, 6), "q0": blob(24, 32, 12, 16, 7),
           "q1": blob(24, 32, 8, 20, 5)}

    class Stub:
        class _R:
            def __init__(self, rid):
                self.id = rid

        def get(self, rid):
            return self._R(rid)

        def load_image(self, record):
            return images[record.id]

        def binarize_mask(self, record, cls):
            return gts[record.id]

    spec = EpisodeSpec(class_chosen=1, support_ids=("s0",),
                       query_ids=("q0", "q1"), seed=0)
    predictor = MaskPredictor(tiny_model)
    result = ev.run_episode(spec, predictor, Stub(), budget=5)
    log = result.click_log["s0"]
    assert log

    # Library-side mask trajectory through the shared engine.
    supports = [SupportItem(image=images["s0"])]
    queries = [QueryItem(image=images["q0"]), QueryItem(image=images["q1"])]
    lib_rounds = []
    for click in log:
        supports[0].clicks.append(click)
        s_masks, q_masks = predictor.predict(supports, queries)
        supports[0].prev_mask = s_masks[0]
        queries[0].prev_mask, queries[1].prev_mask = q_masks
        lib_rounds.append((s_masks[0], q_masks[0], q_masks[1]))

    def png_b64(arr):
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        return base64.b64encode(buf.getvalue()).decode()

    store = SessionStore(MaskPredictor(tiny_model), state_dir=tmp_path / "st",
                         checkpoint_version="acc")
    with TestClient(create_app(store)) as client:
        session = client.post("/sessions", json={
            "images": [{"id": rid, "png_b64": png_b64(img)}
                       for rid, img in images.items()],
            "support_ids": ["s0"],
        }).json()
        sid = session["id"]
        for t, click in enumerate(log):
            out = client.post(f"/sessions/{sid}/clicks", json={
                "image_id": "s0", "row": click.row, "col": click.col,
                "polarity": click.polarity, "expected_revision": t,
            })
            assert out.status_code == 200
            payload = out.json()
            masks = {
                e["image_id"]: decode_mask_png(base64.b64decode(e["mask_png_b64"]))
                for e in payload["supports"] + payload["queries"]
            }
            s_lib, q0_lib, q1_lib = lib_rounds[t]
            assert (masks["s0"] == s_lib).all()
            assert (masks["q0"] == q0_lib).all()
            assert (masks["q1"] == q1_lib).all()
            # Read-your-writes: an immediate snapshot equals the click response.
            snap = client.get(f"/sessions/{sid}").json()
            assert snap["revision"] == payload["revision"] == t + 1
            assert [e["mask_png_b64"] for e in snap["supports"] + snap["queries"]] \
                == [e["mask_png_b64"] for e in payload["supports"] + payload["queries"]]

        # Revision conflict: a stale expected_revision is rejected and the
        # session is untouched.
        stale = client.post(f"/sessions/{sid}/clicks", json={
            "image_id": "s0", "row": 1, "col": 1, "polarity": "negative",
            "expected_revision": 0,
        })
        assert stale.status_code == 409
        assert client.get(f"/sessions/{sid}").json()["revision"] == len(log)
