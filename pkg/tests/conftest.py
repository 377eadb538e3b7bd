import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from turbmit.utils import write_png  # noqa: E402


def make_scenes(directory, n=3, size=(80, 96), seed=0):
    """Smooth random color fields standing in for photographs."""
    from scipy.ndimage import gaussian_filter

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        img = gaussian_filter(rng.random(size + (3,)), (6, 6, 0))
        img = (img - img.min()) / (np.ptp(img) + 1e-12)
        write_png(directory / f"scene_{i}.png", img)
    return directory


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory):
    return make_scenes(tmp_path_factory.mktemp("scenes"))



# one PASS/FAIL line per acceptance criterion, printed after the run
_CRITERIA = {}
_DETAILS = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        num = int(name.split("_")[2])
        _CRITERIA.setdefault(num, []).append(report.outcome)
        _DETAILS.setdefault(num, []).extend(v for k, v in report.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        outcomes = _CRITERIA[num]
        status = "FAIL" if "failed" in outcomes else "SKIP" if all(o == "skipped" for o in outcomes) else "PASS"
        detail = "; ".join(_DETAILS.get(num, []))
        terminalreporter.write_line(f"criterion {num}: {status}" + (f" ({detail})" if detail else ""))
