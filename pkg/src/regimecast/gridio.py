"""Gridded-field ingestion: the GSK1 on-disk format, bilinear regridding,
moving climatologies, anomaly derivation and calendar filtering.

Dates are "epoch days": integer days since 1970-01-01 (negative for the
19th century). All field data is float32; coordinates are float64.
"""

from __future__ import annotations

import datetime as _dt
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"GSK1"
_META_MARKER = b"META"
_BLOCK_SENTINEL = (0, 0, 0, 0)

VARIABLES = ("Z50", "Z200", "Z500", "Z700", "SST", "MSLP")

_EPOCH_ORDINAL = _dt.date(1970, 1, 1).toordinal()


class GskError(Exception):
    """Base error for GSK1 container problems."""


class FormatError(GskError):
    """Malformed magic, truncated header or undecodable sections."""


class DimensionError(GskError):
    """Header counts inconsistent with payload or with each other."""


class DateOrderError(GskError):
    """Dates not strictly increasing."""


def to_epoch_day(year, month, day):
    return _dt.date(year, month, day).toordinal() - _EPOCH_ORDINAL


def from_epoch_day(eday):
    return _dt.date.fromordinal(int(eday) + _EPOCH_ORDINAL)


def epoch_days_range(start, end):
    """All epoch days from date tuple `start` to `end`, inclusive."""
    a = to_epoch_day(*start)
    b = to_epoch_day(*end)
    return np.arange(a, b + 1, dtype=np.int64)


def calendar_fields(dates):
    """(years, months, days) arrays for an epoch-day array."""
    ymd = [from_epoch_day(d).timetuple()[:3] for d in np.asarray(dates)]
    arr = np.array(ymd, dtype=np.int64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


@dataclass
class LatLonGrid:
    lats: np.ndarray
    lons: np.ndarray

    def __post_init__(self):
        self.lats = np.asarray(self.lats, dtype=np.float64)
        self.lons = np.asarray(self.lons, dtype=np.float64)
        dlat = np.diff(self.lats)
        if self.lats.ndim != 1 or len(self.lats) < 2 or not (np.all(dlat > 0) or np.all(dlat < 0)):
            raise ValueError("lats must be strictly monotone")
        dlon = np.diff(self.lons)
        if self.lons.ndim != 1 or len(self.lons) < 2 or not np.all(dlon > 0):
            raise ValueError("lons must be strictly increasing")
        if not np.allclose(dlon, dlon[0]):
            raise ValueError("lons must be uniformly spaced")
        if self.lons.min() < 0 or self.lons.max() >= 360.0:
            raise ValueError("lons must lie in [0, 360)")

    @property
    def ny(self):
        return len(self.lats)

    @property
    def nx(self):
        return len(self.lons)

    def __eq__(self, other):
        return (
            isinstance(other, LatLonGrid)
            and np.array_equal(self.lats, other.lats)
            and np.array_equal(self.lons, other.lons)
        )


def canonical_grid():
    """The 32x64 global grid at 5.625 degree spacing used by the models."""
    lats = -90.0 + 5.625 * np.arange(32)
    lons = 5.625 * np.arange(64)
    return LatLonGrid(lats, lons)


@dataclass
class GridStack:
    grid: LatLonGrid
    variables: tuple
    dates: np.ndarray
    data: np.ndarray  # [time, variable, lat, lon] float32

    def __post_init__(self):
        self.variables = tuple(str(v) for v in self.variables)
        self.dates = np.asarray(self.dates, dtype=np.int64)
        self.data = np.asarray(self.data, dtype=np.float32)
        self.validate()

    def validate(self):
        expected = (len(self.dates), len(self.variables), self.grid.ny, self.grid.nx)
        if self.data.shape != expected:
            raise DimensionError(f"data shape {self.data.shape} != (T,V,ny,nx) {expected}")
        if len(self.dates) > 1 and not np.all(np.diff(self.dates) > 0):
            raise DateOrderError("dates must be strictly increasing")

    @property
    def n_days(self):
        return len(self.dates)

    def var_index(self, name):
        try:
            return self.variables.index(name)
        except ValueError:
            raise KeyError(f"variable {name!r} not in stack {self.variables}") from None

    def select_days(self, mask_or_index):
        return GridStack(self.grid, self.variables, self.dates[mask_or_index], self.data[mask_or_index])


# ---------------------------------------------------------------------------
# GSK1 container
# ---------------------------------------------------------------------------
#
# Grid layout (read_gridstack/write_gridstack):
#   magic "GSK1" | u32 T,V,ny,nx | f64 lats[ny] | f64 lons[nx]
#   | i64 dates[T] | V x (u16 len + utf8 id) | f32 data[T*V*ny*nx] row-major
#   | optional "META" + u64 len + utf8 JSON
# Everything little-endian. Byte layout is documented in docs/formats.md.
#
# Block layout (read_arrays/write_arrays) reuses the magic with the all-zero
# count sentinel; it stores named nd-arrays plus a JSON metadata object and
# backs checkpoints, EOF bases and centroid files.

_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "<i8"}
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def _write_meta(fh, meta):
    if meta is None:
        return
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    fh.write(_META_MARKER)
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)


def _read_meta(fh):
    marker = fh.read(4)
    if len(marker) == 0:
        return None
    if marker != _META_MARKER:
        raise FormatError("trailing bytes are not a META section")
    n = struct.unpack("<Q", _read_exact(fh, 8, "META length"))[0]
    return json.loads(_read_exact(fh, n, "META body").decode("utf-8"))


def write_gridstack(path, stack, meta=None):
    stack.validate()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        t, v = stack.n_days, len(stack.variables)
        fh.write(struct.pack("<4I", t, v, stack.grid.ny, stack.grid.nx))
        fh.write(stack.grid.lats.astype("<f8").tobytes())
        fh.write(stack.grid.lons.astype("<f8").tobytes())
        fh.write(stack.dates.astype("<i8").tobytes())
        for name in stack.variables:
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
        fh.write(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())
        _write_meta(fh, meta)


def read_gridstack(path, want_meta=False):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        t, v, ny, nx = struct.unpack("<4I", _read_exact(fh, 16, "header counts"))
        if (t, v, ny, nx) == _BLOCK_SENTINEL:
            raise DimensionError("file is a GSK1 block container, not a gridstack")
        if v < 1 or ny < 2 or nx < 2:
            raise DimensionError(f"implausible header counts T={t} V={v} ny={ny} nx={nx}")
        lats = np.frombuffer(_read_exact(fh, 8 * ny, "lats"), dtype="<f8").copy()
        lons = np.frombuffer(_read_exact(fh, 8 * nx, "lons"), dtype="<f8").copy()
        dates = np.frombuffer(_read_exact(fh, 8 * t, "dates"), dtype="<i8").copy()
        names = []
        for _ in range(v):
            n = struct.unpack("<H", _read_exact(fh, 2, "variable id length"))[0]
            names.append(_read_exact(fh, n, "variable id").decode("utf-8"))
        data = np.frombuffer(_read_exact(fh, 4 * t * v * ny * nx, "field data"), dtype="<f4")
        data = data.reshape(t, v, ny, nx).copy()
        meta = _read_meta(fh)
    try:
        grid = LatLonGrid(lats, lons)
    except ValueError as exc:
        raise FormatError(f"invalid coordinate axes: {exc}") from exc
    stack = GridStack(grid, names, dates, data)
    return (stack, meta) if want_meta else stack


def write_arrays(path, arrays, meta=None):
    """Write named nd-arrays (dict name -> array) plus JSON metadata."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", *_BLOCK_SENTINEL))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_TAGS:
                arr = arr.astype(np.float64)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (0,))))
            fh.write(np.ascontiguousarray(arr).tobytes())
        _write_meta(fh, meta)


def read_arrays(path):
    """Read a block container; returns (dict name -> array, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        counts = struct.unpack("<4I", _read_exact(fh, 16, "header counts"))
        if counts != _BLOCK_SENTINEL:
            raise FormatError("file is a gridstack, not a block container")
        nblocks = struct.unpack("<I", _read_exact(fh, 4, "block count"))[0]
        arrays = {}
        for _ in range(nblocks):
            n = struct.unpack("<H", _read_exact(fh, 2, "block name length"))[0]
            name = _read_exact(fh, n, "block name").decode("utf-8")
            tag = struct.unpack("<B", _read_exact(fh, 1, "dtype tag"))[0]
            if tag not in _DTYPE_CODES:
                raise FormatError(f"unknown dtype tag {tag}")
            ndim = struct.unpack("<I", _read_exact(fh, 4, "ndim"))[0]
            shape = struct.unpack(f"<{max(ndim, 1)}I", _read_exact(fh, 4 * max(ndim, 1), "shape"))
            shape = tuple(shape[:ndim])
            dtype = np.dtype(_DTYPE_CODES[tag])
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, dtype.itemsize * count, f"block {name!r} data")
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        meta = _read_meta(fh)
    return arrays, meta


# ---------------------------------------------------------------------------
# Regridding
# ---------------------------------------------------------------------------

def _axis_weights(src, dst, periodic_span=None):
    """Neighbor indices (lo, hi) and hi-side weights for 1-D linear interp."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if periodic_span is not None:
        step = src[1] - src[0]
        pos = np.mod(dst - src[0], periodic_span) / step
        # snap near-integer positions so identical grids reproduce exactly
        rounded = np.round(pos)
        pos = np.where(np.abs(pos - rounded) < 1e-9, rounded, pos)
        lo = np.floor(pos).astype(np.int64) % len(src)
        hi = (lo + 1) % len(src)
        w = pos - np.floor(pos)
        return lo, hi, w
    if dst.min() < src.min() - 1e-9 or dst.max() > src.max() + 1e-9:
        raise ValueError(
            f"destination latitudes [{dst.min()}, {dst.max()}] extend beyond "
            f"source range [{src.min()}, {src.max()}]; refusing to extrapolate"
        )
    dst = np.clip(dst, src.min(), src.max())
    lo = np.searchsorted(src, dst, side="right") - 1
    lo = np.clip(lo, 0, len(src) - 2)
    w = (dst - src[lo]) / (src[lo + 1] - src[lo])
    rounded = np.round(w)
    w = np.where(np.abs(w - rounded) < 1e-9, rounded, w)
    return lo, lo + 1, w


def regrid_bilinear(field, src, dst):
    """Bilinearly interpolate a 2-D field from `src` to `dst` coordinates.

    Longitude is periodic (east neighbor wraps modulo nx); destination
    latitudes outside the source range raise rather than extrapolate.
    """
    field = np.asarray(field)
    if field.shape != (src.ny, src.nx):
        raise ValueError(f"field shape {field.shape} != source grid ({src.ny}, {src.nx})")
    asc = src.lats if src.lats[1] > src.lats[0] else src.lats[::-1]
    f = field if src.lats[1] > src.lats[0] else field[::-1]
    i0, i1, wy = _axis_weights(asc, dst.lats)
    j0, j1, wx = _axis_weights(src.lons, dst.lons, periodic_span=360.0)
    wy = wy[:, None]
    wx = wx[None, :]
    out = (
        f[np.ix_(i0, j0)] * (1 - wy) * (1 - wx)
        + f[np.ix_(i0, j1)] * (1 - wy) * wx
        + f[np.ix_(i1, j0)] * wy * (1 - wx)
        + f[np.ix_(i1, j1)] * wy * wx
    )
    return out.astype(field.dtype, copy=False)


def regrid_stack(stack, dst):
    out = np.empty((stack.n_days, len(stack.variables), dst.ny, dst.nx), dtype=np.float32)
    for t in range(stack.n_days):
        for v in range(len(stack.variables)):
            out[t, v] = regrid_bilinear(stack.data[t, v], stack.grid, dst)
    return GridStack(dst, stack.variables, stack.dates, out)


# ---------------------------------------------------------------------------
# Climatology and anomalies
# ---------------------------------------------------------------------------

@dataclass
class ClimatologyTable:
    """Moving-window monthly means.

    Epoch k's window is the `window`+1 calendar years [start_k, start_k+window]
    inclusive, with start_k stepping by `step` years. Epoch 0 provides the
    reference for its whole window; every later epoch provides it for the
    `step` years ending at its window end; years past the last window reuse
    the final epoch.
    """

    epochs: list  # [(start_year, end_year)]
    means: np.ndarray  # [epoch, month, variable, lat, lon]
    grid: LatLonGrid
    variables: tuple
    step: int = 5

    def __post_init__(self):
        starts = [e[0] for e in self.epochs]
        if any(b - a != self.step for a, b in zip(starts, starts[1:])):
            raise ValueError(f"epoch starts must step by {self.step} years: {starts}")

    def epoch_for_year(self, year):
        first_start, first_end = self.epochs[0]
        if year < first_start:
            raise ValueError(f"year {year} precedes first climatology window {self.epochs[0]}")
        if year <= first_end:
            return 0
        k = -(-(year - first_end) // self.step)  # ceil division
        return min(k, len(self.epochs) - 1)

    def lookup(self, year, month):
        return self.means[self.epoch_for_year(year), month - 1]


def build_climatology(stack, window=30, step=5):
    """Monthly means over `window`-year moving windows stepped by `step`."""
    years, months, _ = calendar_fields(stack.dates)
    first, last = int(years.min()), int(years.max())
    if last - first < window:
        raise ValueError(f"stack spans {last - first} years; need at least {window}")
    epochs = []
    start = first
    while start + window <= last:
        epochs.append((start, start + window))
        start += step
    v, ny, nx = stack.data.shape[1:]
    means = np.zeros((len(epochs), 12, v, ny, nx), dtype=np.float32)
    for k, (a, b) in enumerate(epochs):
        in_window = (years >= a) & (years <= b)
        for m in range(1, 13):
            sel = in_window & (months == m)
            if not sel.any():
                raise ValueError(f"no data for month {m} in window {a}-{b}")
            means[k, m - 1] = stack.data[sel].mean(axis=0)
    return ClimatologyTable(epochs, means, stack.grid, stack.variables, step)


def anomalies(stack, clim):
    """Subtract the applicable epoch's monthly mean from each day."""
    if stack.grid != clim.grid or stack.variables != clim.variables:
        raise ValueError("stack and climatology disagree on grid or variables")
    years, months, _ = calendar_fields(stack.dates)
    out = np.empty_like(stack.data)
    for t in range(stack.n_days):
        out[t] = stack.data[t] - clim.lookup(int(years[t]), int(months[t]))
    return GridStack(stack.grid, stack.variables, stack.dates, out)


def add_climatology(stack, clim):
    """Inverse of `anomalies`: add the applicable monthly mean back."""
    years, months, _ = calendar_fields(stack.dates)
    out = np.empty_like(stack.data)
    for t in range(stack.n_days):
        out[t] = stack.data[t] + clim.lookup(int(years[t]), int(months[t]))
    return GridStack(stack.grid, stack.variables, stack.dates, out)


def is_extended_winter(dates):
    """Mask of days in the extended boreal winter, 15 Nov through 31 Mar."""
    _, months, days = calendar_fields(dates)
    return (months <= 3) | (months == 12) | ((months == 11) & (days >= 15))


def winter_filter(stack):
    return stack.select_days(is_extended_winter(stack.dates))


@dataclass
class RemovalReport:
    rows: list = field(default_factory=list)  # (epoch_day, variable, count_invalid)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("date,variable,count_invalid\n")
            for eday, var, count in self.rows:
                fh.write(f"{from_epoch_day(eday).isoformat()},{var},{count}\n")


def drop_corrupt(stack):
    """Remove days containing any NaN/Inf; report removals per variable."""
    bad = ~np.isfinite(stack.data)
    day_bad = bad.any(axis=(1, 2, 3))
    report = RemovalReport()
    for t in np.nonzero(day_bad)[0]:
        for v, name in enumerate(stack.variables):
            count = int(bad[t, v].sum())
            if count:
                report.rows.append((int(stack.dates[t]), name, count))
    return stack.select_days(~day_bad), report
