"""Model scoring, hyperparameter tuning and Monte Carlo study harnesses.

The likelihood cross-validation (LCV) criterion for a partition with counts
``n_j`` and areas ``|A_j|`` is ``sum_j (n_j log((n_j - 1)/|A_j|) 1[n_j>1] -
n_j)``; a realised split's score equals exactly the change it makes to this
criterion.  Out-of-bag (OOB) scores evaluate each bootstrap tree's
log-likelihood on the points it did not resample, with estimates floored at
a small epsilon before taking logs; larger is better, and tuning selects the
hyperparameter tuple with the largest mean OOB score.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .covariate import (
    CovariateForest,
    CovariateTree,
    fit_covariate_forest,
    predict_covariate_grid,
    variable_importance,
)
from .geometry import (
    DEFAULT_RESOLUTION,
    CovariateStack,
    PointPattern,
    RasterGrid,
    Window,
    window_area,
)
from .simulate import (
    IntensityModel,
    RngSeed,
    simulate_inhomogeneous_poisson,
    surrogate_stack,
    synthetic_intensity_model,
)
from .spatial import (
    SpatialForest,
    SpatialTree,
    fit_spatial_forest,
    forest_estimates_at,
    predict_spatial_grid,
    rule_of_thumb_gamma,
)

__all__ = [
    "ScoreReport",
    "TuningGrid",
    "lcv",
    "oob_score_tree",
    "oob_score_forest",
    "tune",
    "mise",
    "miae",
    "infill_study",
    "synthetic_study",
    "oob_oracle_study",
]

logger = logging.getLogger(__name__)

#: Relative floor applied to intensity estimates before taking logs in OOB
#: scores: the floor is ``EPS_FLOOR_SCALE * total_count / area(window)``.
EPS_FLOOR_SCALE = 1e-6


def lcv(counts, areas) -> float:
    """Likelihood cross-validation criterion of one partition.

    Empty cells contribute 0 and singleton cells contribute -1, so the
    criterion is always finite.  Larger is better.
    """
    counts = np.asarray(counts, dtype=np.float64)
    areas = np.asarray(areas, dtype=np.float64)
    if counts.shape != areas.shape:
        raise ValueError("counts and areas must have the same shape")
    if np.any(areas <= 0):
        raise ValueError("areas must be positive")
    s = -float(counts.sum())
    m = counts > 1
    if m.any():
        s += float(np.sum(counts[m] * np.log((counts[m] - 1.0) / areas[m])))
    return s


@dataclass(eq=False)
class ScoreReport:
    """Per-tree OOB scores for one fitted forest."""

    params: dict
    per_tree: np.ndarray
    mean_oob: float
    lcv: float | None = None
    empty_oob_trees: tuple[int, ...] = ()


@dataclass(eq=False)
class TuningGrid:
    """Candidate hyperparameter tuples and, after tuning, their scores."""

    candidates: tuple[dict, ...]
    reports: list[ScoreReport] | None = None
    best_index: int | None = None

    def best(self) -> dict:
        if self.best_index is None:
            raise ValueError("grid has not been scored yet")
        return dict(self.candidates[self.best_index])


def _default_floor(pattern: PointPattern) -> float:
    return EPS_FLOOR_SCALE * pattern.total_count / window_area(pattern.window)


def _tree_oob(tree: SpatialTree | CovariateTree, pattern: PointPattern,
              floor: float) -> tuple[float, bool]:
    if tree.boot_mult is None:
        raise ValueError("tree carries no bootstrap record; fit with bootstrap "
                         "to get out-of-bag scores")
    if len(tree.boot_mult) != len(pattern):
        raise ValueError("pattern does not match the one the tree was fitted on")
    oob = np.flatnonzero(tree.boot_mult == 0)
    if len(oob) == 0:
        return 0.0, True
    if isinstance(tree, CovariateTree):
        est = tree.leaf_estimates[tree.point_leaf[oob]]
    else:
        est = tree.estimates_at(pattern.x[oob], pattern.y[oob])
    est = np.maximum(est, floor)
    w = pattern.multiplicities[oob]
    return float(np.sum(w * np.log(est))), False


def oob_score_tree(tree: SpatialTree | CovariateTree, pattern: PointPattern,
                   eps_floor: float | None = None) -> float:
    """Out-of-bag log-likelihood of one bootstrap tree.

    Sums ``log(estimate)`` over the points absent from the tree's bootstrap
    resample, flooring estimates at ``eps_floor`` (default: one millionth
    of the pattern's mean intensity).  An empty out-of-bag set scores 0 and
    is logged as a warning.
    """
    floor = _default_floor(pattern) if eps_floor is None else eps_floor
    score, empty = _tree_oob(tree, pattern, floor)
    if empty:
        logger.warning("tree has an empty out-of-bag set; score reported as 0")
    return score


def oob_score_forest(forest: SpatialForest | CovariateForest, pattern: PointPattern,
                     eps_floor: float | None = None,
                     params: dict | None = None) -> ScoreReport:
    """Mean out-of-bag score over a forest's trees, as a report."""
    floor = _default_floor(pattern) if eps_floor is None else eps_floor
    scores = np.empty(forest.M)
    empties = []
    lcvs = np.empty(forest.M)
    for i, tree in enumerate(forest.trees):
        scores[i], empty = _tree_oob(tree, pattern, floor)
        if empty:
            empties.append(i)
        if isinstance(tree, CovariateTree):
            lcvs[i] = lcv([lf.n_boot for lf in tree.leaves],
                          [lf.area for lf in tree.leaves])
        else:
            lcvs[i] = lcv(tree.counts, tree.partition.cell_areas)
    if empties:
        logger.warning("%d trees had empty out-of-bag sets", len(empties))
    return ScoreReport(params=dict(params or {}), per_tree=scores,
                       mean_oob=float(scores.mean()), lcv=float(lcvs.mean()),
                       empty_oob_trees=tuple(empties))


def tune(pattern: PointPattern, candidates, rng: RngSeed,
         stack: CovariateStack | None = None, default_M: int = 50,
         a_n: float = 1.0, resolution: int = DEFAULT_RESOLUTION,
         eps_floor: float | None = None,
         threads: int = 1) -> tuple[dict, TuningGrid]:
    """Select the hyperparameter tuple with maximal mean OOB score.

    With a covariate ``stack`` the candidates are dicts with ``mtry`` and
    ``n_min`` (plus optional ``M``); without one they are spatial
    candidates with ``gamma`` (bootstrap resampling is then forced on so
    OOB scores exist).  Candidate ``t`` is fitted with the derived stream
    ``rng.derive(t)``; ties keep the earliest candidate.
    """
    candidates = tuple(dict(c) for c in candidates)
    if not candidates:
        raise ValueError("no candidates to tune over")
    reports: list[ScoreReport] = []
    best_i, best_score = None, -math.inf
    for t, cand in enumerate(candidates):
        sub = rng.derive(t)
        M = int(cand.get("M", default_M))
        if stack is None:
            forest = fit_spatial_forest(pattern, float(cand["gamma"]), M, sub,
                                        a_n=a_n, bootstrap=True,
                                        resolution=resolution, threads=threads)
        else:
            forest = fit_covariate_forest(pattern, stack, M, int(cand["mtry"]),
                                          int(cand["n_min"]), sub, a_n=a_n,
                                          threads=threads)
        rep = oob_score_forest(forest, pattern, eps_floor, params=cand)
        reports.append(rep)
        if rep.mean_oob > best_score:
            best_score, best_i = rep.mean_oob, t
    grid = TuningGrid(candidates, reports, best_i)
    return dict(candidates[best_i]), grid


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

def mise(estimate: RasterGrid, truth: RasterGrid) -> float:
    """Integrated squared error between two congruent grids.

    Sums ``(estimate - truth)^2`` times the pixel area over pixels where
    both grids are non-NA; raises ``ValueError`` on geometry mismatch.
    """
    if not estimate.same_geometry(truth):
        raise ValueError("estimate and truth grids have different geometry")
    ok = np.isfinite(estimate.values) & np.isfinite(truth.values)
    d = estimate.values[ok] - truth.values[ok]
    return float(np.sum(d * d) * estimate.pixel_area)


def miae(estimate: RasterGrid, truth: RasterGrid) -> float:
    """Integrated absolute error between two congruent grids."""
    if not estimate.same_geometry(truth):
        raise ValueError("estimate and truth grids have different geometry")
    ok = np.isfinite(estimate.values) & np.isfinite(truth.values)
    d = estimate.values[ok] - truth.values[ok]
    return float(np.sum(np.abs(d)) * estimate.pixel_area)


# ---------------------------------------------------------------------------
# study harnesses
# ---------------------------------------------------------------------------

def infill_study(model: IntensityModel, a_grid, h_rule, reps: int, rng: RngSeed,
                 M: int = 20, x: tuple[float, float] | None = None,
                 resolution: int = DEFAULT_RESOLUTION,
                 margin: float | None = None) -> list[dict]:
    """Monte Carlo infill study of the spatial forest at one location.

    For each ``a`` in ``a_grid``, patterns are simulated with intensity
    ``a * model``, a spatial forest with ``gamma = h_rule(a) ** -2`` and
    normalisation ``a_n = a`` is evaluated at ``x`` (window center by
    default), and the squared error against ``model(x)`` is averaged over
    ``reps`` replications.  Returns one record per level with the MSE and
    its Monte Carlo standard error.
    """
    a_levels = [float(a) for a in a_grid]
    if not a_levels or any(b <= a for a, b in zip(a_levels, a_levels[1:])):
        raise ValueError("a_grid must be a non-empty increasing sequence")
    window = model.window
    if x is None:
        x = window.center()
    if not window.contains(*x):
        raise ValueError("study location must lie inside the window")
    truth = model.value_at(*x)
    results = []
    for ia, a in enumerate(a_levels):
        h = float(h_rule(a))
        gamma = h ** -2.0
        errs = np.empty(reps)
        for r in range(reps):
            sub = rng.derive(ia, r)
            pat = simulate_inhomogeneous_poisson(window, model.scaled(a), sub.derive(0))
            ests = forest_estimates_at(pat, gamma, M, sub.derive(1), x[0], x[1],
                                       a_n=a, resolution=resolution, margin=margin)
            errs[r] = (float(ests.mean()) - truth) ** 2
        results.append({
            "a_n": a, "h_n": h, "gamma_n": gamma,
            "mse": float(errs.mean()),
            "stderr": float(errs.std(ddof=1) / math.sqrt(reps)),
            "truth": truth,
        })
    return results


def synthetic_study(reps: int, rng: RngSeed, window: Window | None = None,
                    p: int = 15, target_count: float = 1000.0,
                    smoothness: float | None = None,
                    resolution: int = DEFAULT_RESOLUTION,
                    M_covariate: int = 50, mtry: int = 8, n_min: int = 10,
                    M_spatial: int = 50, threads: int = 1) -> list[dict]:
    """End-to-end benchmark: covariate forest vs spatial forest.

    A single stack of ``p`` synthetic covariate fields is drawn once and
    plays the role of a fixed set of observed rasters; the benchmark
    intensity built on three of its fields is likewise fixed.  Each
    replication then simulates a fresh pattern from that intensity, fits
    both forests, and records their integrated squared errors against
    the true surface together with the covariate forest's variable
    importance ranking.
    """
    if window is None:
        window = Window(0.0, 0.0, 1000.0, 500.0)
    stack = surrogate_stack(window, p, smoothness, rng.derive(0, 0), resolution)
    model = synthetic_intensity_model(stack, ("Mn", "Zn", "Fe"), target_count,
                                      window=window, surrogate_mn=True)
    records = []
    for r in range(reps):
        pattern = simulate_inhomogeneous_poisson(window, model, rng.derive(1, r))
        covf = fit_covariate_forest(pattern, stack, M_covariate, mtry, n_min,
                                    rng.derive(2, r), threads=threads)
        spatf = fit_spatial_forest(pattern, rule_of_thumb_gamma(pattern),
                                   M_spatial, rng.derive(3, r),
                                   resolution=resolution, threads=threads)
        vip = variable_importance(covf)
        top3 = set(sorted(vip, key=vip.__getitem__, reverse=True)[:3])
        records.append({
            "rep": r,
            "n_points": len(pattern),
            "mise_covariate": mise(predict_covariate_grid(covf, stack), model.grid),
            "mise_spatial": mise(predict_spatial_grid(spatf), model.grid),
            "vip_top3": tuple(sorted(top3)),
            "vip_ok": top3 == {"Mn", "Zn", "Fe"},
            "vip": vip,
        })
    return records


def oob_oracle_study(reps: int, rng: RngSeed, window: Window | None = None,
                     p: int = 15, target_count: float = 1000.0,
                     smoothness: float | None = None,
                     resolution: int = DEFAULT_RESOLUTION,
                     mtry_grid=(4, 8, 15), n_min_grid=(5, 10, 20, 40),
                     M: int = 40, threads: int = 1) -> dict:
    """Agreement between the OOB score and the oracle error surface.

    A fixed synthetic stack and intensity are drawn once; each replication
    simulates a fresh pattern and, for every ``(mtry, n_min)`` tuple, fits
    a covariate forest and records both its mean OOB score and its
    integrated squared error against the truth.  Returns the per-rep
    Spearman rank correlation between OOB and negative error across
    tuples, plus the raw score tables.
    """
    if window is None:
        window = Window(0.0, 0.0, 1000.0, 500.0)
    stack = surrogate_stack(window, p, smoothness, rng.derive(0, 0), resolution)
    model = synthetic_intensity_model(stack, ("Mn", "Zn", "Fe"), target_count,
                                      window=window, surrogate_mn=True)
    candidates = [{"mtry": m, "n_min": nm} for m in mtry_grid for nm in n_min_grid]
    n_c = len(candidates)
    oob = np.empty((reps, n_c))
    err = np.empty((reps, n_c))
    rho = np.empty(reps)
    for r in range(reps):
        pattern = simulate_inhomogeneous_poisson(window, model, rng.derive(1, r))
        for t, cand in enumerate(candidates):
            forest = fit_covariate_forest(pattern, stack, M, cand["mtry"],
                                          cand["n_min"], rng.derive(2, r, t),
                                          threads=threads)
            oob[r, t] = oob_score_forest(forest, pattern).mean_oob
            err[r, t] = mise(predict_covariate_grid(forest, stack), model.grid)
        rho[r] = spearmanr(oob[r], -err[r]).statistic
    return {
        "candidates": candidates,
        "oob": oob,
        "mise": err,
        "spearman": rho,
        "mean_spearman": float(rho.mean()),
    }
