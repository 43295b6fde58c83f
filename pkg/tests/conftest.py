import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from palpsim import assets
from palpsim.geometry import decimate


@pytest.fixture(scope="session")
def liver_full():
    return assets.liver_mesh()


@pytest.fixture(scope="session")
def liver_rt(liver_full):
    return decimate(liver_full, assets.REALTIME_TRIS)


@pytest.fixture(scope="session")
def scene_bundle(tmp_path_factory):
    """Default scene bundle (meshes, scene XML, sample trajectory) on disk."""
    out = tmp_path_factory.mktemp("bundle")
    return assets.write_default_bundle(out)
