import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_stack
from oracles import bilinear_closed_form, winter_days_in_year

from regimecast import gridio
from regimecast.gridio import (
    DateOrderError,
    DimensionError,
    FormatError,
    GridStack,
    LatLonGrid,
    anomalies,
    add_climatology,
    build_climatology,
    canonical_grid,
    drop_corrupt,
    epoch_days_range,
    read_arrays,
    read_gridstack,
    regrid_bilinear,
    to_epoch_day,
    winter_filter,
    write_arrays,
    write_gridstack,
)


# ---------------------------------------------------------------------------
# GSK1 round trips and diagnostics
# ---------------------------------------------------------------------------

def test_roundtrip_bitwise(tmp_path):
    grid = canonical_grid()
    rng = np.random.default_rng(42)
    stack = make_stack(grid, [10, 20], variables=("Z500",), rng=rng)
    path = tmp_path / "stack.gsk"
    write_gridstack(path, stack)
    back = read_gridstack(path)
    assert back.data.tobytes() == stack.data.tobytes()
    assert np.array_equal(back.dates, stack.dates)
    assert back.variables == stack.variables
    assert back.grid == stack.grid


def test_roundtrip_with_meta(tmp_path, tiny_grid):
    stack = make_stack(tiny_grid, [0, 5, 9], fill=1.25)
    path = tmp_path / "m.gsk"
    write_gridstack(path, stack, meta={"source": "unit test", "n": 3})
    back, meta = read_gridstack(path, want_meta=True)
    assert meta == {"source": "unit test", "n": 3}
    assert np.array_equal(back.data, stack.data)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.gsk"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(FormatError, match="magic"):
        read_gridstack(path)


def test_truncated_file(tmp_path, tiny_grid):
    path = tmp_path / "t.gsk"
    write_gridstack(path, make_stack(tiny_grid, [0, 1]))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 9])
    with pytest.raises(FormatError, match="truncated"):
        read_gridstack(path)


def test_non_monotone_dates_rejected(tiny_grid):
    with pytest.raises(DateOrderError):
        make_stack(tiny_grid, [3, 2])


def test_dimension_mismatch(tiny_grid):
    data = np.zeros((2, 1, 2, 4), dtype=np.float32)  # wrong ny
    with pytest.raises(DimensionError):
        GridStack(tiny_grid, ("Z500",), np.array([0, 1]), data)


def test_block_container_roundtrip(tmp_path):
    arrays = {
        "weights": np.arange(12, dtype=np.float32).reshape(3, 4),
        "scale": np.array(2.5, dtype=np.float64),
        "ids": np.array([5, -3], dtype=np.int64),
    }
    path = tmp_path / "blocks.gsk"
    write_arrays(path, arrays, meta={"kind": "test"})
    back, meta = read_arrays(path)
    assert meta == {"kind": "test"}
    for name, arr in arrays.items():
        assert back[name].dtype == arr.dtype
        assert np.array_equal(back[name], arr)


def test_container_kind_confusion(tmp_path, tiny_grid):
    gpath = tmp_path / "g.gsk"
    write_gridstack(gpath, make_stack(tiny_grid, [0]))
    with pytest.raises(FormatError):
        read_arrays(gpath)
    bpath = tmp_path / "b.gsk"
    write_arrays(bpath, {"a": np.zeros(3)})
    with pytest.raises(DimensionError):
        read_gridstack(bpath)


# ---------------------------------------------------------------------------
# regridding
# ---------------------------------------------------------------------------

def test_regrid_constant_preserved():
    src = LatLonGrid(np.linspace(-80, 80, 9), np.arange(0, 360, 45.0))
    dst = LatLonGrid(np.linspace(-60, 60, 5), np.arange(0, 360, 30.0))
    out = regrid_bilinear(np.full((9, 8), 3.25), src, dst)
    assert np.allclose(out, 3.25)


def test_regrid_identity_grid_exact():
    grid = canonical_grid()
    rng = np.random.default_rng(3)
    field = rng.standard_normal((grid.ny, grid.nx))
    out = regrid_bilinear(field, grid, grid)
    assert np.array_equal(out, field)


def test_regrid_planar_exact():
    # bilinear interpolation reproduces f(lat, lon) = a*lat + b*lon exactly,
    # so long as no destination point straddles the longitude wrap seam
    a, b = 0.7, -0.3
    src = LatLonGrid(np.linspace(-85, 85, 35), np.arange(0, 360, 2.5))
    dst = LatLonGrid(np.linspace(-80, 80, 13), np.arange(5.0, 350.0, 13.75))
    f_src = a * src.lats[:, None] + b * src.lons[None, :]
    expected = a * dst.lats[:, None] + b * dst.lons[None, :]
    out = regrid_bilinear(f_src, src, dst)
    assert np.allclose(out, expected, rtol=1e-6)


def test_regrid_latitude_extrapolation_error():
    src = LatLonGrid(np.linspace(-60, 60, 7), np.arange(0, 360, 45.0))
    dst = LatLonGrid(np.linspace(-80, 80, 5), np.arange(0, 360, 90.0))
    with pytest.raises(ValueError, match="extrapolate"):
        regrid_bilinear(np.zeros((7, 8)), src, dst)


def test_regrid_descending_latitudes():
    src_up = LatLonGrid(np.linspace(-80, 80, 9), np.arange(0, 360, 45.0))
    src_dn = LatLonGrid(src_up.lats[::-1], src_up.lons)
    dst = LatLonGrid(np.linspace(-70, 70, 8), np.arange(10, 350, 40.0))
    rng = np.random.default_rng(5)
    field = rng.standard_normal((9, 8))
    assert np.allclose(
        regrid_bilinear(field, src_up, dst),
        regrid_bilinear(field[::-1], src_dn, dst),
    )


@given(seed=st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_regrid_bounded_by_neighbors(seed):
    rng = np.random.default_rng(seed)
    src = LatLonGrid(np.linspace(-80, 80, 9), np.arange(0, 360, 45.0))
    field = rng.standard_normal((9, 8))
    lat = rng.uniform(-80, 80)
    lon = rng.uniform(0, 359.99)
    dst = LatLonGrid([lat - 0.001, lat], [lon, (lon + 1e-3) % 360] if lon < 359 else [lon - 1e-3, lon])
    out = regrid_bilinear(field, src, dst)
    i = np.searchsorted(src.lats, lat) - 1
    i = np.clip(i, 0, 7)
    j = int(np.floor((lon - src.lons[0]) / 45.0)) % 8
    corners = field[np.ix_([i, i + 1], [j, (j + 1) % 8])]
    assert out.max() <= corners.max() + 1e-9
    assert out.min() >= corners.min() - 1e-9


def test_regrid_matches_closed_form_oracle():
    src = LatLonGrid([0.0, 10.0], [0.0, 90.0, 180.0, 270.0])
    field = np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]])
    lat, lon = 3.0, 36.0  # wy = 0.3, wx = 0.4
    dst = LatLonGrid([lat, lat + 1], [lon, lon + 1])
    out = regrid_bilinear(field, src, dst)
    expected = bilinear_closed_form((field[0, 0], field[0, 1], field[1, 0], field[1, 1]), 0.3, 0.4)
    assert np.isclose(out[0, 0], expected, rtol=1e-12)


# ---------------------------------------------------------------------------
# climatology and anomalies
# ---------------------------------------------------------------------------

def _yearly_stack(first_year, last_year, value_fn, grid):
    dates = epoch_days_range((first_year, 1, 1), (last_year, 12, 31))
    years, months, _ = gridio.calendar_fields(dates)
    data = np.empty((len(dates), 1, grid.ny, grid.nx), dtype=np.float32)
    for t in range(len(dates)):
        data[t] = value_fn(int(years[t]), int(months[t]))
    return GridStack(grid, ("Z500",), dates, data)


def test_climatology_constant(tiny_grid):
    stack = _yearly_stack(1836, 1871, lambda y, m: 5.0, tiny_grid)
    clim = build_climatology(stack)
    assert np.allclose(clim.means, 5.0)


def test_climatology_epoch_sequence(tiny_grid):
    stack = _yearly_stack(1836, 1880, lambda y, m: 0.0, tiny_grid)
    clim = build_climatology(stack)
    assert clim.epochs == [(1836, 1866), (1841, 1871), (1846, 1876)]


def test_climatology_january_mean_oracle(tiny_grid):
    stack = _yearly_stack(1836, 1871, lambda y, m: float(y) if m == 1 else 0.0, tiny_grid)
    clim = build_climatology(stack)
    expected = sum(range(1836, 1867)) / len(range(1836, 1867))
    assert np.allclose(clim.means[0, 0], expected, rtol=1e-6)


def test_climatology_applicability_follows_window_ends(tiny_grid):
    # the second window (1841-1871) supplies anomalies for 1867-1871
    stack = _yearly_stack(1836, 1880, lambda y, m: 0.0, tiny_grid)
    clim = build_climatology(stack)
    assert clim.epoch_for_year(1836) == 0
    assert clim.epoch_for_year(1866) == 0
    assert clim.epoch_for_year(1867) == 1
    assert clim.epoch_for_year(1871) == 1
    assert clim.epoch_for_year(1872) == 2
    assert clim.epoch_for_year(1876) == 2
    # trailing years reuse the final epoch
    assert clim.epoch_for_year(1880) == 2


def test_climatology_short_span_rejected(tiny_grid):
    stack = _yearly_stack(1900, 1920, lambda y, m: 0.0, tiny_grid)
    with pytest.raises(ValueError, match="span"):
        build_climatology(stack)


def test_anomalies_zero_when_raw_equals_climatology(tiny_grid):
    stack = _yearly_stack(1836, 1871, lambda y, m: 7.5, tiny_grid)
    clim = build_climatology(stack)
    out = anomalies(stack, clim)
    assert np.allclose(out.data, 0.0)


def test_anomalies_shift_case(tiny_grid):
    stack = _yearly_stack(1836, 1871, lambda y, m: 2.0, tiny_grid)
    clim = build_climatology(stack)
    shifted = GridStack(stack.grid, stack.variables, stack.dates, stack.data + 1.5)
    out = anomalies(shifted, clim)
    assert np.allclose(out.data, 1.5, atol=1e-6)


def test_anomaly_reconstruction_oracle(tiny_grid):
    rng = np.random.default_rng(11)
    stack = _yearly_stack(1836, 1871, lambda y, m: 0.0, tiny_grid)
    stack = GridStack(
        stack.grid, stack.variables, stack.dates,
        rng.standard_normal(stack.data.shape).astype(np.float32),
    )
    clim = build_climatology(stack)
    anoms = anomalies(stack, clim)
    rebuilt = add_climatology(anoms, clim)
    err = np.abs(rebuilt.data - stack.data) / (np.abs(stack.data) + 1.0)
    assert err.max() < 1e-6


def test_anomalies_date_before_first_window(tiny_grid):
    stack = _yearly_stack(1836, 1871, lambda y, m: 0.0, tiny_grid)
    clim = build_climatology(stack)
    early = _yearly_stack(1830, 1830, lambda y, m: 0.0, tiny_grid)
    with pytest.raises(ValueError, match="precedes"):
        anomalies(early, clim)


# ---------------------------------------------------------------------------
# winter filtering and corruption handling
# ---------------------------------------------------------------------------

def test_winter_filter_boundary_days(tiny_grid):
    days = [
        to_epoch_day(2001, 11, 14),
        to_epoch_day(2001, 11, 15),
        to_epoch_day(2002, 3, 31),
        to_epoch_day(2002, 4, 1),
    ]
    stack = make_stack(tiny_grid, days)
    out = winter_filter(stack)
    assert list(out.dates) == [to_epoch_day(2001, 11, 15), to_epoch_day(2002, 3, 31)]


def test_winter_filter_all_summer_empty(tiny_grid):
    days = epoch_days_range((2000, 7, 1), (2000, 7, 31))
    out = winter_filter(make_stack(tiny_grid, days))
    assert out.n_days == 0


def test_winter_filter_leap_year_count_oracle(tiny_grid):
    days = epoch_days_range((2012, 1, 1), (2012, 12, 31))
    out = winter_filter(make_stack(tiny_grid, days))
    assert out.n_days == winter_days_in_year(2012)
    assert winter_days_in_year(2012) == 138  # 47 (Nov 15-Dec 31) + 91 (Jan-Mar incl Feb 29)


def test_winter_filter_idempotent(tiny_grid):
    days = epoch_days_range((2010, 1, 1), (2011, 12, 31))
    once = winter_filter(make_stack(tiny_grid, days))
    twice = winter_filter(once)
    assert np.array_equal(once.dates, twice.dates)
    assert np.array_equal(once.data, twice.data)


def test_drop_corrupt_clean(tiny_grid):
    stack = make_stack(tiny_grid, list(range(10)))
    out, report = drop_corrupt(stack)
    assert out.n_days == 10
    assert report.rows == []


def test_drop_corrupt_single_nan(tiny_grid):
    stack = make_stack(tiny_grid, list(range(10)))
    stack.data[3, 0, 1, 2] = np.nan
    out, report = drop_corrupt(stack)
    assert out.n_days == 9
    assert 3 not in list(out.dates)
    assert report.rows == [(3, "Z500", 1)]


def test_drop_corrupt_counts(tiny_grid):
    stack = make_stack(tiny_grid, list(range(100)))
    stack.data[5, 0, 0, 0] = np.inf
    stack.data[50, 0, 1, 1] = np.nan
    stack.data[99, 0, 2, 3] = -np.inf
    out, report = drop_corrupt(stack)
    assert out.n_days == 97
    assert len({r[0] for r in report.rows}) == 3


def test_removal_report_csv(tmp_path, tiny_grid):
    stack = make_stack(tiny_grid, [to_epoch_day(2000, 1, 1), to_epoch_day(2000, 1, 2)])
    stack.data[1, 0, 0, 0] = np.nan
    _, report = drop_corrupt(stack)
    path = tmp_path / "removed.csv"
    report.to_csv(path)
    assert path.read_text() == "date,variable,count_invalid\n2000-01-02,Z500,1\n"
