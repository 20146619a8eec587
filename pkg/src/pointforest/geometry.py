"""Observation windows, raster grids, point patterns and their file formats.

Every area used in this package is a pixel-counted area: quantities such as
cell areas, masked window areas and grid integrals are all computed on a
common raster whose resolution defaults to ``DEFAULT_RESOLUTION`` pixels on
the longer side of the window.  Working on one shared raster keeps counts and
areas exactly consistent with each other (a point always falls in the pixel
that is counted for its cell), which in turn makes mass-conservation
identities exact.

Raster text files use a single header line ``ncols nrows xmin ymin cellsize``
followed by ``nrows`` lines of ``ncols`` whitespace-separated values, bottom
row first (the first data line is the row of pixels touching ``ymin``).
Missing values are written as ``NA``; floats are written with 17 significant
digits so that write/read round-trips are bit exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DEFAULT_RESOLUTION",
    "DataError",
    "RasterGrid",
    "Window",
    "PointPattern",
    "CovariateStack",
    "window_area",
    "value_at",
    "mean_iqr",
    "read_raster",
    "write_raster",
    "read_points_csv",
    "write_points_csv",
    "window_from_mask",
    "fmt_float",
]

DEFAULT_RESOLUTION = 256

#: Relative tolerance used when checking that a mask's bounding box matches
#: the window rectangle it is attached to.
_BBOX_RTOL = 1e-9

_NA_TOKEN = "NA"


class DataError(ValueError):
    """An input file is missing, malformed, or internally inconsistent."""


def fmt_float(v: float) -> str:
    """Format a float with 17 significant digits (round-trip exact)."""
    return f"{float(v):.17g}"


# ---------------------------------------------------------------------------
# raster grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RasterGrid:
    """A regular grid of real values over an axis-aligned rectangle.

    Parameters
    ----------
    ncols, nrows : int
        Grid dimensions; both at least 1.
    xmin, ymin : float
        Coordinates of the lower-left corner of the grid.
    cellsize : float
        Side length of the square pixels; strictly positive.
    values : ndarray of shape (nrows, ncols)
        Pixel values with ``NaN`` marking NA pixels.  Row 0 is the bottom
        row of the grid.  The array is made read-only on construction.
    """

    ncols: int
    nrows: int
    xmin: float
    ymin: float
    cellsize: float
    values: np.ndarray

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise ValueError("grid must have at least one pixel per axis")
        if not (self.cellsize > 0 and math.isfinite(self.cellsize)):
            raise ValueError(f"cellsize must be positive, got {self.cellsize}")
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (self.nrows, self.ncols):
            raise ValueError(
                f"values shape {vals.shape} does not match "
                f"(nrows, ncols) = ({self.nrows}, {self.ncols})"
            )
        vals = np.ascontiguousarray(vals)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    # -- geometry ----------------------------------------------------------

    @property
    def xmax(self) -> float:
        return self.xmin + self.ncols * self.cellsize

    @property
    def ymax(self) -> float:
        return self.ymin + self.nrows * self.cellsize

    @property
    def pixel_area(self) -> float:
        return self.cellsize * self.cellsize

    def same_geometry(self, other: "RasterGrid") -> bool:
        """True when both grids share dimensions, origin and cellsize."""
        return (
            self.ncols == other.ncols
            and self.nrows == other.nrows
            and self.xmin == other.xmin
            and self.ymin == other.ymin
            and self.cellsize == other.cellsize
        )

    def with_values(self, values: np.ndarray) -> "RasterGrid":
        """A grid with the same geometry but different values."""
        return RasterGrid(self.ncols, self.nrows, self.xmin, self.ymin,
                          self.cellsize, values)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Arrays ``(X, Y)`` of shape (nrows, ncols) of pixel centers."""
        cs = self.cellsize
        xs = self.xmin + (np.arange(self.ncols) + 0.5) * cs
        ys = self.ymin + (np.arange(self.nrows) + 0.5) * cs
        return np.meshgrid(xs, ys)

    # -- lookup ------------------------------------------------------------

    def rowcol_of(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Row/col indices of the pixels containing ``(x, y)``.

        Locations outside the grid get index -1.  The right and top edges
        are inclusive, so a point exactly on ``xmax`` belongs to the last
        column.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        inside = (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)
        col = np.floor((x - self.xmin) / self.cellsize).astype(np.int64)
        row = np.floor((y - self.ymin) / self.cellsize).astype(np.int64)
        np.clip(col, 0, self.ncols - 1, out=col)
        np.clip(row, 0, self.nrows - 1, out=row)
        col = np.where(inside, col, -1)
        row = np.where(inside, row, -1)
        return row, col

    def values_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Nearest-pixel-center values at locations; NaN outside the grid."""
        row, col = self.rowcol_of(x, y)
        out = np.full(np.shape(row), np.nan)
        ok = row >= 0
        out[ok] = self.values[row[ok], col[ok]]
        return out

    def value_at(self, x: float, y: float) -> float:
        """Scalar version of :meth:`values_at`."""
        return float(self.values_at(np.array([x]), np.array([y]))[0])


def value_at(grid: RasterGrid, x: float, y: float) -> float:
    """Value of ``grid`` at ``(x, y)`` by nearest-pixel-center lookup.

    Returns NaN when the location falls outside the grid bounds.
    """
    return grid.value_at(x, y)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Window:
    """A rectangular observation window, optionally with a raster mask.

    The mask, when present, is a :class:`RasterGrid` with values in {0, 1}
    (NA counts as outside) whose bounding box coincides with the rectangle.
    A location is inside the window when it is inside the rectangle and its
    mask pixel equals 1.  The mask grid doubles as the common analysis
    raster for the window, so masked analyses always share its geometry.
    """

    xmin: float
    ymin: float
    xmax: float
    ymax: float
    mask: RasterGrid | None = None

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError("window must have positive width and height")
        for v in (self.xmin, self.ymin, self.xmax, self.ymax):
            if not math.isfinite(v):
                raise ValueError("window bounds must be finite")
        if self.mask is not None:
            m = self.mask
            span = max(self.xmax - self.xmin, self.ymax - self.ymin)
            tol = _BBOX_RTOL * span
            if (abs(m.xmin - self.xmin) > tol or abs(m.ymin - self.ymin) > tol
                    or abs(m.xmax - self.xmax) > tol or abs(m.ymax - self.ymax) > tol):
                raise ValueError("mask bounding box does not match the window rectangle")
            vals = m.values
            finite = vals[np.isfinite(vals)]
            if not np.all((finite == 0) | (finite == 1)):
                raise ValueError("mask values must be 0 or 1 (NA treated as 0)")
            if not np.any(finite == 1):
                raise ValueError("mask must contain at least one interior pixel")

    # -- basic geometry ----------------------------------------------------

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    def grid_geometry(self, resolution: int = DEFAULT_RESOLUTION) -> tuple[int, int, float]:
        """Common-raster shape ``(ncols, nrows, cellsize)`` for this window.

        The longer side gets ``resolution`` pixels; the shorter side gets as
        many as fit its length.  A masked window always uses its mask's
        geometry so that every analysis shares the mask raster exactly.
        """
        if self.mask is not None:
            return self.mask.ncols, self.mask.nrows, self.mask.cellsize
        long_side = max(self.width, self.height)
        cs = long_side / resolution
        # ceil so the raster always covers the rectangle (points can never
        # fall off the grid); the epsilon keeps exact divisions exact
        ncols = max(1, math.ceil(self.width / cs - 1e-9))
        nrows = max(1, math.ceil(self.height / cs - 1e-9))
        return ncols, nrows, cs

    def blank_grid(self, resolution: int = DEFAULT_RESOLUTION,
                   fill: float = 0.0) -> RasterGrid:
        """A grid on the common raster, ``fill`` inside the window, NA outside."""
        ncols, nrows, cs = self.grid_geometry(resolution)
        vals = np.full((nrows, ncols), fill, dtype=np.float64)
        if self.mask is not None:
            vals[~self.inside_grid(resolution)] = np.nan
        return RasterGrid(ncols, nrows, self.xmin, self.ymin, cs, vals)

    def inside_grid(self, resolution: int = DEFAULT_RESOLUTION) -> np.ndarray:
        """Boolean (nrows, ncols) array: pixel centers inside the window."""
        ncols, nrows, cs = self.grid_geometry(resolution)
        if self.mask is None:
            return np.ones((nrows, ncols), dtype=bool)
        return self.mask.values == 1

    # -- membership --------------------------------------------------------

    def contains_many(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ok = (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)
        if self.mask is not None and ok.any():
            mv = self.mask.values_at(x, y)
            ok &= mv == 1
        return ok

    def contains(self, x: float, y: float) -> bool:
        return bool(self.contains_many(np.array([x]), np.array([y]))[0])

    def area(self) -> float:
        return window_area(self)

    def center(self) -> tuple[float, float]:
        return 0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)

    def bounds_equal(self, other: "Window") -> bool:
        return (self.xmin == other.xmin and self.ymin == other.ymin
                and self.xmax == other.xmax and self.ymax == other.ymax)


def window_area(w: Window) -> float:
    """Area of a window.

    For a plain rectangle this is the exact rectangle area.  For a masked
    window it is the number of interior mask pixels times the pixel area,
    which is the same pixel-counting convention used for every other area in
    the package.
    """
    if w.mask is None:
        return w.width * w.height
    inside = int(np.count_nonzero(w.mask.values == 1))
    return inside * w.mask.pixel_area


def window_from_mask(mask: RasterGrid) -> Window:
    """Build a masked :class:`Window` whose rectangle is the mask's bbox."""
    return Window(mask.xmin, mask.ymin, mask.xmax, mask.ymax, mask=mask)


# ---------------------------------------------------------------------------
# point patterns
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointPattern:
    """A finite set of points in a window, with integer multiplicities.

    Multiplicities default to 1 and are mainly used to represent bootstrap
    resamples without duplicating coordinates.  The empty pattern (zero
    points) is valid.
    """

    points: np.ndarray
    window: Window
    multiplicities: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 2)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("points must be an (n, 2) array")
        mult = self.multiplicities
        if mult is None:
            mult = np.ones(len(pts), dtype=np.int64)
        else:
            mult = np.asarray(mult, dtype=np.int64)
            if mult.shape != (len(pts),):
                raise ValueError("multiplicities must have one entry per point")
            if np.any(mult < 0):
                raise ValueError("multiplicities must be nonnegative")
        if len(pts) and not np.all(self.window.contains_many(pts[:, 0], pts[:, 1])):
            raise DataError("pattern contains points outside the window")
        pts = np.ascontiguousarray(pts)
        pts.flags.writeable = False
        mult.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "multiplicities", mult)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def total_count(self) -> int:
        """Number of points counted with multiplicity."""
        return int(self.multiplicities.sum())

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    def shifted(self, dx: float, dy: float) -> "PointPattern":
        """The same pattern translated by ``(dx, dy)`` (window included)."""
        if self.window.mask is not None:
            m = self.window.mask
            mask = RasterGrid(m.ncols, m.nrows, m.xmin + dx, m.ymin + dy,
                              m.cellsize, m.values)
        else:
            mask = None
        w = Window(self.window.xmin + dx, self.window.ymin + dy,
                   self.window.xmax + dx, self.window.ymax + dy, mask=mask)
        return PointPattern(self.points + np.array([dx, dy]), w,
                            self.multiplicities.copy())


def mean_iqr(pattern: PointPattern) -> float:
    """Mean over coordinates of the coordinatewise interquartile range.

    Quantiles use linear interpolation between order statistics (numpy's
    default), with points repeated according to their multiplicities.
    Raises ``ValueError`` on an empty pattern.
    """
    if pattern.total_count == 0:
        raise ValueError("mean_iqr is undefined for an empty pattern")
    pts = pattern.points
    if np.any(pattern.multiplicities != 1):
        pts = np.repeat(pts, pattern.multiplicities, axis=0)
    q1, q3 = np.quantile(pts, [0.25, 0.75], axis=0)
    return float(np.mean(q3 - q1))


# ---------------------------------------------------------------------------
# covariate stacks
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CovariateStack:
    """Named covariate rasters sharing one grid geometry.

    All grids must agree on dimensions, origin, cellsize and NA pattern;
    names must be unique, non-empty and free of whitespace (they appear as
    bare tokens in model files).
    """

    names: tuple[str, ...]
    grids: tuple[RasterGrid, ...]

    def __post_init__(self):
        names = tuple(self.names)
        grids = tuple(self.grids)
        if len(names) != len(grids) or not names:
            raise ValueError("need one name per grid and at least one covariate")
        if len(set(names)) != len(names):
            raise ValueError("covariate names must be unique")
        for nm in names:
            if not nm or any(c.isspace() for c in nm):
                raise ValueError(f"invalid covariate name {nm!r}")
        ref = grids[0]
        ref_na = np.isnan(ref.values)
        for nm, g in zip(names[1:], grids[1:]):
            if not g.same_geometry(ref):
                raise ValueError(f"covariate {nm!r} has mismatched grid geometry")
            if not np.array_equal(np.isnan(g.values), ref_na):
                raise ValueError(f"covariate {nm!r} has a different NA pattern")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "grids", grids)

    @property
    def p(self) -> int:
        return len(self.names)

    @property
    def geometry(self) -> RasterGrid:
        """A reference grid carrying the shared geometry."""
        return self.grids[0]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no covariate named {name!r}") from None

    def grid(self, name: str) -> RasterGrid:
        return self.grids[self.index(name)]

    def values_matrix(self) -> np.ndarray:
        """All pixel values as an array of shape (nrows, ncols, p)."""
        return np.stack([g.values for g in self.grids], axis=-1)

    def values_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Covariate vectors at locations, shape (n, p); NaN outside."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return np.column_stack([g.values_at(x, y) for g in self.grids])


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_raster(grid: RasterGrid, path: str | Path) -> None:
    """Write a grid in the package's raster text format (bit-exact)."""
    path = Path(path)
    lines = [
        f"{grid.ncols} {grid.nrows} {fmt_float(grid.xmin)} "
        f"{fmt_float(grid.ymin)} {fmt_float(grid.cellsize)}"
    ]
    for row in grid.values:  # row 0 (bottom) first
        lines.append(" ".join(
            _NA_TOKEN if math.isnan(v) else fmt_float(v) for v in row
        ))
    path.write_text("\n".join(lines) + "\n")


def read_raster(path: str | Path) -> RasterGrid:
    """Read a raster text file; raises :class:`DataError` on malformed input."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read raster file {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{path}: empty raster file")
    header = lines[0].split()
    if len(header) != 5:
        raise DataError(f"{path}: header must be 'ncols nrows xmin ymin cellsize'")
    try:
        ncols, nrows = int(header[0]), int(header[1])
        xmin, ymin, cellsize = map(float, header[2:])
    except ValueError as exc:
        raise DataError(f"{path}: bad header: {exc}") from exc
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != nrows:
        raise DataError(f"{path}: expected {nrows} data rows, found {len(body)}")
    values = np.empty((nrows, ncols), dtype=np.float64)
    for r, ln in enumerate(body):
        toks = ln.split()
        if len(toks) != ncols:
            raise DataError(f"{path}: row {r} has {len(toks)} values, expected {ncols}")
        for c, tok in enumerate(toks):
            if tok == _NA_TOKEN:
                values[r, c] = np.nan
            else:
                try:
                    values[r, c] = float(tok)
                except ValueError as exc:
                    raise DataError(f"{path}: bad value {tok!r} at row {r}") from exc
    try:
        return RasterGrid(ncols, nrows, xmin, ymin, cellsize, values)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_points_csv(pattern: PointPattern, path: str | Path) -> None:
    """Write a pattern as a two-column ``x,y`` CSV (multiplicities expanded)."""
    path = Path(path)
    pts = pattern.points
    if np.any(pattern.multiplicities != 1):
        pts = np.repeat(pts, pattern.multiplicities, axis=0)
    lines = ["x,y"]
    lines.extend(f"{fmt_float(px)},{fmt_float(py)}" for px, py in pts)
    path.write_text("\n".join(lines) + "\n")


def read_points_csv(path: str | Path, window: Window) -> PointPattern:
    """Read an ``x,y`` CSV into a pattern on ``window``.

    Raises :class:`DataError` on malformed rows or points outside the window.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read points file {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "x,y":
        raise DataError(f"{path}: first line must be the header 'x,y'")
    pts = np.empty((len(lines) - 1, 2), dtype=np.float64)
    for i, ln in enumerate(lines[1:]):
        parts = ln.split(",")
        if len(parts) != 2:
            raise DataError(f"{path}: line {i + 2} is not 'x,y'")
        try:
            pts[i, 0] = float(parts[0])
            pts[i, 1] = float(parts[1])
        except ValueError as exc:
            raise DataError(f"{path}: line {i + 2}: {exc}") from exc
    try:
        return PointPattern(pts, window)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc
