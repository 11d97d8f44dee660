import numpy as np
import pytest

from kinfield import coords
from kinfield.synthetic import emit_dataset, load_manifest, make_scene


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4-frame 8x8 translate dataset shared by I/O and trainer tests."""
    out = tmp_path_factory.mktemp("tiny_ds")
    emit_dataset(make_scene("translate"), out, n_frames=4, width=8, height=8)
    return load_manifest(out / "manifest.txt")


@pytest.fixture
def cam():
    return coords.NdcCamera(near=2.0, far=6.0, right=0.8, top=0.8)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
