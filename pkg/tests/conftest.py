import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from refineloc.dataio import SyntheticConfig, generate_synthetic, load_all_features  # noqa: E402


MICRO = dict(N=3, D=16, video_count=40, T_range=(20, 36), segments_per_video_range=(1, 2),
             segment_len_range=(4, 8), noise_sigma=1.0, val_fraction=0.25, test_fraction=0.25)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro")
    m = generate_synthetic(SyntheticConfig(seed=7, **MICRO), out)
    return m, load_all_features(m)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
