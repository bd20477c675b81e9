import numpy as np
import pytest
import torch
from PIL import Image
from scipy.io import savemat

from ifseg.config import ModelConfig
from ifseg.data import CorpusIndex, build_merged_index
from ifseg.model import SegmentationModel


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(name): spec acceptance criterion with a printed verdict"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and rep.when == "call":
        name = marker.kwargs.get("name") or (marker.args[0] if marker.args else item.name)
        verdict = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        capman = item.config.pluginmanager.getplugin("capturemanager")
        if capman:
            with capman.global_and_fixture_disabled():
                print(f"[ACCEPTANCE] {name}: {verdict}")
        else:
            print(f"[ACCEPTANCE] {name}: {verdict}")


TINY_CFG = dict(
    backbone_variant="resnet18",
    feature_channels=16,
    num_query_scales=2,
    query_scale_fractions=(1.0, 0.5),
    input_patch=64,
    click_disk_radius=2,
)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(**TINY_CFG)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    torch.manual_seed(7)
    model = SegmentationModel(tiny_cfg)
    model.eval()
    return model


def blob_mask(h, w, centers, radius, label):
    """Class-indexed mask with filled disks of one label."""
    mask = np.zeros((h, w), dtype=np.uint8)
    rr, cc = np.mgrid[0:h, 0:w]
    for (r, c) in centers:
        mask[(rr - r) ** 2 + (cc - c) ** 2 <= radius ** 2] = label
    return mask


def textured_image(h, w, seed, mask=None):
    """RGB test image; foreground pixels get a distinct color family."""
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 90, size=(h, w, 3), dtype=np.uint8)
    if mask is not None:
        fg = mask > 0
        img[fg] = rng.integers(160, 255, size=(int(fg.sum()), 3), dtype=np.uint8)
    return img


def write_pascal_record(root, rid, image, mask):
    (root / "JPEGImages").mkdir(parents=True, exist_ok=True)
    (root / "SegmentationClass").mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(root / "JPEGImages" / f"{rid}.jpg", quality=95)
    Image.fromarray(mask, mode="L").save(root / "SegmentationClass" / f"{rid}.png")


def write_sbd_record(root, rid, image, mask, as_mat=True):
    (root / "img").mkdir(parents=True, exist_ok=True)
    (root / "cls").mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(root / "img" / f"{rid}.jpg", quality=95)
    if as_mat:
        savemat(root / "cls" / f"{rid}.mat",
                {"GTcls": {"Segmentation": mask.astype(np.uint8)}})
    else:
        Image.fromarray(mask, mode="L").save(root / "cls" / f"{rid}.png")


def make_synthetic_corpus(tmp_path, n_per_class=4, classes=(1, 2), h=48, w=64):
    """Small two-source corpus with blob objects, one shared id."""
    pascal = tmp_path / "pascal"
    sbd = tmp_path / "sbd"
    for d in (pascal / "JPEGImages", pascal / "SegmentationClass",
              sbd / "img", sbd / "cls"):
        d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    rid_counter = 0
    for cls in classes:
        for i in range(n_per_class):
            rid = f"img{rid_counter:03d}"
            rid_counter += 1
            r = int(rng.integers(12, h - 12))
            c = int(rng.integers(12, w - 12))
            mask = blob_mask(h, w, [(r, c)], radius=int(rng.integers(6, 10)), label=cls)
            image = textured_image(h, w, seed=rid_counter, mask=mask)
            if i % 2 == 0:
                write_pascal_record(pascal, rid, image, mask)
            else:
                write_sbd_record(sbd, rid, image, mask)
    records = build_merged_index(pascal, sbd)
    return CorpusIndex(records)


@pytest.fixture()
def synthetic_corpus(tmp_path):
    return make_synthetic_corpus(tmp_path)
