import warnings

import numpy as np
import pytest

from a2f.dataset import SynthSpec, generate_synthetic, load_manifest


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    """Three conventions, two identities each, six one-second clips per identity."""
    out = tmp_path_factory.mktemp("tiny_ds")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        generate_synthetic(SynthSpec(identities=2, sequences=12, seconds=1.0, seed=3), out)
    return load_manifest(out / "manifest.tsv")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
