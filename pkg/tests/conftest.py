import numpy as np
import pytest

from vidcam import dataset, synthetic

# acceptance results, printed once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A small synthetic dataset with a split manifest: 3 classes, 32x32, 6 videos x 3 frames."""
    root = tmp_path_factory.mktemp("synth")
    spec = synthetic.SyntheticSpec(num_classes=3, size=32, videos_per_class=6, frames_per_video=3, seed=3)
    ds = synthetic.generate(spec, root)
    cat = dataset.read_catalog(ds.catalog_path)
    devs = dataset.DeviceCatalog([dataset.Device(d, "Synthetic", d, 1) for d in cat.devices()])
    manifest = dataset.build_split(devs, cat, seed=0)
    return ds, manifest
