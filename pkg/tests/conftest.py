import os
from pathlib import Path

import pytest

from pelc.config import load_config
from pelc.pipeline import STAGES, Pipeline


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("micro")
    Pipeline(load_config("micro"), out).run_all()
    return out


@pytest.fixture(scope="session")
def desk_run() -> Path:
    """Desk-scale run directory, trained on first use and resumed from its manifests afterwards."""
    out = Path(os.environ.get("PELC_TEST_RUN", Path(__file__).resolve().parents[1] / "runs" / "desk"))
    pipe = Pipeline(load_config("desk"), out, workers=int(os.environ.get("PELC_WORKERS", "1")))
    for stage in STAGES:
        pipe.run(stage)
    return out


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
