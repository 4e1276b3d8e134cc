import random

import pytest

from reachgrid import synthetic
from reachgrid.tilegrid import TileId
from reachgrid.trajectory import TilePath, TileVisit


def make_path(tid, cells, t0=0, step_s=5, step_mm=2000):
    """Tile path from a list of (x, y) with regular timing and distance."""
    return TilePath(tid, [TileVisit(TileId(x, y), t0 + k * step_s, k * step_mm)
                          for k, (x, y) in enumerate(cells)])


def random_paths(rng: random.Random, n_paths=10, grid=20, max_len=25, origin=(1000, 2000)):
    """Random walks on a grid x grid patch; no two consecutive visits share a tile."""
    paths = []
    for p in range(n_paths):
        n = rng.randint(2, max_len)
        x, y = rng.randrange(grid), rng.randrange(grid)
        t, mm = rng.randrange(10_000), 0
        visits = []
        for _ in range(n):
            visits.append(TileVisit(TileId(origin[0] + x, origin[1] + y), t, mm))
            while True:
                nx = min(grid - 1, max(0, x + rng.randint(-3, 3)))
                ny = min(grid - 1, max(0, y + rng.randint(-3, 3)))
                if rng.random() < 0.1:
                    nx, ny = rng.randrange(grid), rng.randrange(grid)
                if (nx, ny) != (x, y):
                    break
            x, y = nx, ny
            t += rng.randint(1, 120)
            mm += rng.randint(0, 40_000)
        paths.append(TilePath(f"p{p:03d}", visits))
    return paths


@pytest.fixture
def path_factory():
    return make_path


@pytest.fixture(scope="session")
def tdrive_small(tmp_path_factory):
    """About 1000 synthetic T-Drive records in 4 taxi files."""
    d = tmp_path_factory.mktemp("tdrive_small")
    return synthetic.write_tdrive_dir(d, 1000, n_taxis=4, seed=3)


# -- acceptance reporting ----------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal
# summary; a ``record_property("detail", ...)`` call adds the measured values.

_CRITERIA = pytest.StashKey[dict]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    store = item.config.stash.setdefault(_CRITERIA, {})
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if not detail and rep.failed:
        detail = rep.longrepr.reprcrash.message.splitlines()[0] if hasattr(rep.longrepr, "reprcrash") else ""
    store[n] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        verdict, title, detail = store[n]
        line = f"criterion {n:>2} {verdict}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
