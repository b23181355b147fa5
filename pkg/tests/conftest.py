import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]


def data_dir() -> Path:
    return Path(os.environ.get("MVDSSM_DATA_DIR", ROOT / "data" / "ml-100k"))


@pytest.fixture(scope="session")
def ml100k() -> Path:
    path = data_dir()
    if not (path / "u.data").is_file():
        pytest.skip(f"MovieLens-100K not found in {path}; run `mvdssm fetch-data`")
    return path


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# criterion number -> one-line verdict, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
