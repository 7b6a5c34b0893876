import numpy as np
import pytest

from latefusion import synth


@pytest.fixture(scope="session")
def complementary_small():
    """A 4,000-sample complementary preset with a separate 2,000-sample test set."""
    cfg = synth.complementary_preset(n_samples=4000, seed=11)
    test_cfg = synth.complementary_preset(n_samples=2000, seed=12)
    return synth.generate(cfg), synth.generate(test_cfg, id_prefix="t")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


#: (criterion number, passed, detail) lines collected by the acceptance module
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
