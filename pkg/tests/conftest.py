import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def unit_disc_32():
    from helipatch.disc_fem import build_disc_mesh

    return build_disc_mesh(1.0, 1 / 32)
