import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tiledet.dataset import Annotation, Category, CategoryTable, DatasetIndex, EnvMetadata, ImageRecord
from tiledet.geometry import BBox

settings.register_profile(
    "default", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_ds(boxes_by_image, sizes=None, n_classes=2, metadata=None):
    """Tiny dataset: ``boxes_by_image`` maps image id to [(category, (x, y, w, h)), ...]."""
    cats = CategoryTable(Category(i, f"c{i}") for i in range(1, n_classes + 1))
    images, anns = [], []
    next_id = 1
    for img_id in sorted(boxes_by_image):
        w, h = (sizes or {}).get(img_id, (1000, 1000))
        meta = (metadata or {}).get(img_id)
        images.append(ImageRecord(img_id, f"img{img_id}.png", w, h, meta))
        for cid, box in boxes_by_image[img_id]:
            anns.append(Annotation(next_id, img_id, cid, BBox(*box)))
            next_id += 1
    return DatasetIndex(images, anns, cats)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def soft_meta():
    return EnvMetadata("soft", 450.0, 5.0)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Small synthetic dataset with rasters, shared by the slow integration tests."""
    from tiledet.synth import SynthSpec, write_synthetic

    root = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(n_images=8, width_range=(700, 900), height_range=(600, 800), objects_per_image=(15, 35),
                     large_side=(32, 160), seed=5)
    write_synthetic(spec, root)
    return root


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, TITLES

    ran = any("test_acceptance" in r.nodeid for rs in terminalreporter.stats.values() for r in rs
              if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in TITLES.items():
        ok, detail = RESULTS.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:>2}. {title}: {detail}")
