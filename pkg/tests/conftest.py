import numpy as np
import pytest

from regimecast import gridio


@pytest.fixture
def tiny_grid():
    return gridio.LatLonGrid(lats=[-45.0, 0.0, 45.0], lons=[0.0, 90.0, 180.0, 270.0])


def make_stack(grid, dates, variables=("Z500",), fill=None, rng=None):
    t, v = len(dates), len(variables)
    if fill is not None:
        data = np.full((t, v, grid.ny, grid.nx), fill, dtype=np.float32)
    else:
        rng = rng or np.random.default_rng(0)
        data = rng.standard_normal((t, v, grid.ny, grid.nx)).astype(np.float32)
    return gridio.GridStack(grid, variables, np.asarray(dates, dtype=np.int64), data)


@pytest.fixture
def make_daily_stack(tiny_grid):
    def _make(start, end, variables=("Z500",), fill=None, rng=None):
        dates = gridio.epoch_days_range(start, end)
        return make_stack(tiny_grid, dates, variables, fill=fill, rng=rng)

    return _make
