from pathlib import Path

import pytest

from csrecon.pipeline import load_grayscale

ROOT = Path(__file__).resolve().parents[1]
TEST_IMAGE = ROOT / "data" / "coffee_200.bmp"

_VERDICTS = []


def record_verdict(line: str) -> None:
    """Print an acceptance verdict and keep it for the terminal summary."""
    print(line)
    _VERDICTS.append(line)


@pytest.fixture(scope="session")
def test_image():
    return load_grayscale(TEST_IMAGE)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
