import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_scene(rng, n=None, size=8, feature_dim=3, sh_degree=2, dtype=np.float64):
    """A handful of random Gaussians in front of a camera at the origin looking down -z."""
    from splatstyle.gaussians import GaussianSet, sh_count
    from splatstyle.sceneio import Camera

    n = int(rng.integers(1, 21)) if n is None else n
    cam = Camera(np.eye(4), fx=1.2 * size, fy=1.1 * size, cx=(size - 1) / 2, cy=(size - 1) / 2,
                 width=size, height=size)
    z = rng.uniform(2.0, 5.0, n)
    xy = rng.uniform(-0.45, 0.45, (n, 2)) * z[:, None]
    means = np.stack([xy[:, 0], xy[:, 1], -z], 1)
    q = rng.standard_normal((n, 4))
    g = GaussianSet(
        means=means.astype(dtype),
        quats=q.astype(dtype),
        log_scales=np.log(rng.uniform(0.05, 0.4, (n, 3))).astype(dtype),
        opacity_logits=rng.uniform(-2.0, 3.0, n).astype(dtype),
        sh=(0.3 * rng.standard_normal((n, sh_count(sh_degree), 3))).astype(dtype),
        features=rng.standard_normal((n, feature_dim)).astype(dtype),
    )
    return g, cam


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance and echoed
# in the terminal summary so it survives output capturing
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.rstrip("ab")), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
