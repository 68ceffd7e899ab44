import numpy as np
import pytest

from freeflow.core import apply_split, county_split, write_manifest
from freeflow.synthgen import SynthConfig, generate_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A 160-segment, 32px synthetic dataset with a split manifest."""
    root = tmp_path_factory.mktemp("tiny")
    segments = generate_dataset(SynthConfig(n_segments=160, county_grid=4, master_seed=7,
                                            chip_px=32), root)
    split = county_split(segments, 0.2, 0.15, seed=7)
    write_manifest(root / "split.jsonl", apply_split(segments, split))
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
