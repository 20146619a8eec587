"""Point-process simulators, intensity models and synthetic covariates.

All randomness flows through :class:`RngSeed`, a (master seed, stream) pair
that deterministically derives independent numpy generators.  Two calls with
the same pair produce bit-identical output; different stream indices give
independent streams, so replications and forest trees can be generated in
any order (or concurrently) without changing results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    DEFAULT_RESOLUTION,
    CovariateStack,
    PointPattern,
    RasterGrid,
    Window,
)

__all__ = [
    "RngSeed",
    "IntensityModel",
    "simulate_homogeneous_poisson",
    "simulate_inhomogeneous_poisson",
    "simulate_thomas",
    "synthetic_covariates",
    "synthetic_intensity_model",
    "BEI_COVARIATE_NAMES",
    "surrogate_stack",
]

#: Covariate names used for the 15-field synthetic benchmark stack.
BEI_COVARIATE_NAMES = (
    "elev", "grad", "Al", "B", "Ca", "Cu", "Fe", "K",
    "Mg", "Mn", "P", "Zn", "N", "Nmin", "pH",
)


@dataclass(frozen=True)
class RngSeed:
    """Reproducible random stream: a master seed plus a stream index.

    ``derive(*indices)`` extends the stream key, giving hierarchies of
    mutually independent streams (per replication, per tree, ...) that do
    not depend on execution order.
    """

    seed: int
    stream: int = 0
    path: tuple[int, ...] = ()

    def generator(self) -> np.random.Generator:
        key = (self.stream, *self.path)
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def derive(self, *indices: int) -> "RngSeed":
        return RngSeed(self.seed, self.stream, self.path + tuple(int(i) for i in indices))


# ---------------------------------------------------------------------------
# intensity models
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class IntensityModel:
    """An intensity surface over a window, represented on the common raster.

    The surface is the pixel step function of ``grid``: ``value_at`` looks
    up the nearest pixel center, and the expected point count equals the
    grid integral (pixel sum times pixel area) exactly.  Construct via
    :meth:`constant`, :meth:`from_grid` or :func:`synthetic_intensity_model`.
    """

    window: Window
    grid: RasterGrid
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = self.grid.values
        if np.isinf(vals).any():
            raise ValueError("intensity grid contains non-finite values")
        inside = ~np.isnan(vals)
        if not inside.any():
            raise ValueError("intensity grid has no finite values")
        if np.any(vals[inside] < 0):
            raise ValueError("intensity must be nonnegative")

    @classmethod
    def constant(cls, window: Window, value: float,
                 resolution: int = DEFAULT_RESOLUTION) -> "IntensityModel":
        if not (value >= 0 and math.isfinite(value)):
            raise ValueError(f"constant intensity must be finite and >= 0, got {value}")
        grid = window.blank_grid(resolution, fill=value)
        return cls(window, grid, "constant", {"value": float(value)})

    @classmethod
    def from_grid(cls, grid: RasterGrid, window: Window | None = None) -> "IntensityModel":
        if window is None:
            if np.isnan(grid.values).any():
                mask_vals = np.where(np.isnan(grid.values), 0.0, 1.0)
                mask = grid.with_values(mask_vals)
                window = Window(grid.xmin, grid.ymin, grid.xmax, grid.ymax, mask=mask)
            else:
                window = Window(grid.xmin, grid.ymin, grid.xmax, grid.ymax)
        return cls(window, grid, "grid", {})

    def value_at(self, x: float, y: float) -> float:
        return self.grid.value_at(x, y)

    def values_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.grid.values_at(x, y)

    @property
    def lambda_max(self) -> float:
        return float(np.nanmax(self.grid.values))

    def integral(self) -> float:
        """Expected total count: sum of the grid times pixel area."""
        return float(np.nansum(self.grid.values) * self.grid.pixel_area)

    def scaled(self, factor: float) -> "IntensityModel":
        """The same surface multiplied by ``factor`` (infill scaling)."""
        if not (factor > 0 and math.isfinite(factor)):
            raise ValueError(f"scale factor must be positive, got {factor}")
        params = dict(self.params)
        params["scale"] = factor * params.get("scale", 1.0)
        return IntensityModel(self.window, self.grid.with_values(self.grid.values * factor),
                              self.kind, params)


# ---------------------------------------------------------------------------
# simulators
# ---------------------------------------------------------------------------

def _uniform_in_rect(gen: np.random.Generator, window: Window, n: int) -> np.ndarray:
    pts = gen.uniform(size=(n, 2))
    pts[:, 0] = window.xmin + pts[:, 0] * window.width
    pts[:, 1] = window.ymin + pts[:, 1] * window.height
    return pts


def simulate_homogeneous_poisson(window: Window, intensity: float,
                                 rng: RngSeed) -> PointPattern:
    """Simulate a homogeneous Poisson process on ``window``.

    The count is Poisson with mean ``intensity * area(window)`` and the
    locations are i.i.d. uniform on the window; masked windows are handled
    by rejection of points falling in mask holes.
    """
    if not (intensity >= 0 and math.isfinite(intensity)):
        raise ValueError(f"intensity must be finite and >= 0, got {intensity}")
    gen = rng.generator()
    n = gen.poisson(intensity * window.width * window.height)
    pts = _uniform_in_rect(gen, window, n)
    if window.mask is not None and n:
        pts = pts[window.contains_many(pts[:, 0], pts[:, 1])]
    return PointPattern(pts, window)


def simulate_inhomogeneous_poisson(window: Window, model: IntensityModel,
                                   rng: RngSeed) -> PointPattern:
    """Simulate an inhomogeneous Poisson process by thinning.

    A homogeneous proposal at the model's maximum intensity is thinned with
    retention probability ``model(u) / lambda_max``, giving expected count
    equal to the grid integral of the model.
    """
    if not model.window.bounds_equal(window):
        raise ValueError("model window does not match the simulation window")
    gen = rng.generator()
    lam_max = model.lambda_max
    if lam_max == 0:
        return PointPattern(np.empty((0, 2)), window)
    n = gen.poisson(lam_max * window.width * window.height)
    pts = _uniform_in_rect(gen, window, n)
    keep = window.contains_many(pts[:, 0], pts[:, 1])
    u = gen.uniform(size=n)
    lam = model.values_at(pts[:, 0], pts[:, 1])
    keep &= u * lam_max < np.where(np.isnan(lam), 0.0, lam)
    return PointPattern(pts[keep], window)


def simulate_thomas(window: Window, parent_intensity: float, mean_offspring: float,
                    cluster_sd: float, rng: RngSeed) -> PointPattern:
    """Simulate a Thomas cluster process restricted to ``window``.

    Poisson parents are drawn on the window rectangle dilated by four
    cluster standard deviations per side (so clusters centred just outside
    still contribute); each parent gets a Poisson number of Gaussian
    offspring, and offspring outside the window are discarded.
    """
    if not (parent_intensity > 0 and math.isfinite(parent_intensity)):
        raise ValueError("parent_intensity must be positive")
    if not (mean_offspring >= 0 and math.isfinite(mean_offspring)):
        raise ValueError("mean_offspring must be nonnegative")
    if not (cluster_sd > 0 and math.isfinite(cluster_sd)):
        raise ValueError("cluster_sd must be positive")
    gen = rng.generator()
    m = 4.0 * cluster_sd
    dil = Window(window.xmin - m, window.ymin - m, window.xmax + m, window.ymax + m)
    n_par = gen.poisson(parent_intensity * dil.width * dil.height)
    parents = _uniform_in_rect(gen, dil, n_par)
    counts = gen.poisson(mean_offspring, size=n_par)
    total = int(counts.sum())
    offsets = gen.normal(scale=cluster_sd, size=(total, 2))
    pts = np.repeat(parents, counts, axis=0) + offsets
    if total:
        pts = pts[window.contains_many(pts[:, 0], pts[:, 1])]
    return PointPattern(pts, window)


# ---------------------------------------------------------------------------
# synthetic covariates and the benchmark intensity model
# ---------------------------------------------------------------------------

def synthetic_covariates(window: Window, p: int, smoothness: float, rng: RngSeed,
                         resolution: int = DEFAULT_RESOLUTION,
                         names: tuple[str, ...] | None = None,
                         n_bumps: int | None = None) -> CovariateStack:
    """Generate ``p`` independent smooth random fields, scaled to [0, 1].

    Each field is a superposition of Gaussian bumps with width
    ``smoothness`` and standard-normal amplitudes, evaluated on the common
    raster and min-max normalised over in-window pixels.  The bump centers
    are drawn on a dilated rectangle so the fields have no edge depression.

    Parameters
    ----------
    smoothness : float
        Gaussian bump standard deviation, in window units; this is the
        correlation length of the fields.
    n_bumps : int, optional
        Bumps per field; defaults to enough bumps to cover the window a few
        times over at the given smoothness.
    """
    if p < 1:
        raise ValueError("need at least one covariate")
    if not (smoothness > 0 and math.isfinite(smoothness)):
        raise ValueError("smoothness must be positive")
    if names is None:
        names = tuple(f"z{i + 1:02d}" for i in range(p))
    if len(names) != p:
        raise ValueError("names must have length p")
    if n_bumps is None:
        area = window.width * window.height
        n_bumps = max(40, int(math.ceil(3.0 * area / (math.pi * smoothness ** 2))))
    gen = rng.generator()
    base = window.blank_grid(resolution)
    X, Y = base.pixel_centers()
    inside = np.isfinite(base.values)
    m = 2.0 * smoothness
    dil = Window(window.xmin - m, window.ymin - m, window.xmax + m, window.ymax + m)
    grids = []
    inv2s2 = 1.0 / (2.0 * smoothness * smoothness)
    for _ in range(p):
        centers = _uniform_in_rect(gen, dil, n_bumps)
        amps = gen.normal(size=n_bumps)
        field_vals = np.zeros_like(X)
        for (cx, cy), a in zip(centers, amps):
            d2 = (X - cx) ** 2 + (Y - cy) ** 2
            field_vals += a * np.exp(-d2 * inv2s2)
        lo = field_vals[inside].min()
        hi = field_vals[inside].max()
        if hi - lo > 0:
            field_vals = (field_vals - lo) / (hi - lo)
        else:  # pragma: no cover - constant field is vanishingly unlikely
            field_vals = np.zeros_like(field_vals)
        field_vals[~inside] = np.nan
        grids.append(base.with_values(field_vals))
    return CovariateStack(tuple(names), tuple(grids))


def synthetic_intensity_model(stack: CovariateStack,
                              names: tuple[str, str, str] = ("Mn", "Zn", "Fe"),
                              target_mean_count: float = 1000.0,
                              window: Window | None = None,
                              surrogate_mn: bool = False) -> IntensityModel:
    """Log-linear benchmark intensity driven by three covariates.

    The surface is ``c * exp(0.5 * psi + 1.2 * zn + 0.8 * fe)`` where
    ``psi = 1 + sin(20 + mn_raw / 100)`` is a nonlinear transform of the
    first named covariate and the other two are min-max normalised to
    [0, 1].  The constant ``c`` is calibrated so the expected point count
    equals ``target_mean_count``.

    With ``surrogate_mn=True`` the first covariate is assumed to already
    live on [0, 1] (a synthetic field) and is rescaled internally so the
    sine sweeps through several full oscillations, as it does for raw
    concentration data; without it the covariate is used as-is.
    """
    if target_mean_count <= 0:
        raise ValueError("target_mean_count must be positive")
    mn_name, zn_name, fe_name = names
    mn = stack.grid(mn_name).values
    zn = _minmax(stack.grid(zn_name).values)
    fe = _minmax(stack.grid(fe_name).values)
    mn_raw = 100.0 * (40.0 * mn - 20.0) if surrogate_mn else mn
    psi = 1.0 + np.sin(20.0 + mn_raw / 100.0)
    shape = np.exp(0.5 * psi + 1.2 * zn + 0.8 * fe)
    geom = stack.geometry
    total = np.nansum(shape) * geom.pixel_area
    c = target_mean_count / total
    grid = geom.with_values(c * shape)
    if window is None:
        if np.isnan(shape).any():
            mask = geom.with_values(np.where(np.isnan(shape), 0.0, 1.0))
            window = Window(geom.xmin, geom.ymin, geom.xmax, geom.ymax, mask=mask)
        else:
            window = Window(geom.xmin, geom.ymin, geom.xmax, geom.ymax)
    return IntensityModel(window, grid, "covariate_formula",
                          {"c": float(c), "names": tuple(names),
                           "surrogate_mn": bool(surrogate_mn)})


def _minmax(values: np.ndarray) -> np.ndarray:
    finite = values[np.isfinite(values)]
    lo, hi = finite.min(), finite.max()
    if hi - lo == 0:
        return np.where(np.isfinite(values), 0.0, np.nan)
    return (values - lo) / (hi - lo)


def surrogate_stack(window: Window, p: int = 15, smoothness: float | None = None,
                    rng: RngSeed = RngSeed(0), resolution: int = DEFAULT_RESOLUTION,
                    ) -> CovariateStack:
    """Synthetic covariate stack for the benchmark pipeline.

    Uses the 15 standard covariate names when ``p`` covers them, otherwise
    makes sure the three model-active names come first.  ``smoothness``
    defaults to a quarter of the shorter window side.
    """
    if p < 3:
        raise ValueError("the benchmark stack needs at least 3 covariates")
    if smoothness is None:
        smoothness = min(window.width, window.height) / 4.0
    if p <= len(BEI_COVARIATE_NAMES):
        names = BEI_COVARIATE_NAMES[:p]
        if not {"Mn", "Zn", "Fe"} <= set(names):
            names = ("Mn", "Zn", "Fe") + tuple(
                n for n in BEI_COVARIATE_NAMES if n not in ("Mn", "Zn", "Fe"))[: p - 3]
    else:
        names = BEI_COVARIATE_NAMES + tuple(
            f"z{i + 1:02d}" for i in range(p - len(BEI_COVARIATE_NAMES)))
    return synthetic_covariates(window, p, smoothness, rng, resolution, names)
