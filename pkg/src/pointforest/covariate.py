"""Covariate-driven intensity forests with likelihood-scored median splits.

Each tree is grown on a bootstrap resample of the pattern.  A cell (a set of
raster pixels) is split by thresholding one covariate at the median of its
pixel values inside the cell: the sub-level side keeps pixels with values at
or below the median.  Among ``mtry`` randomly drawn candidate covariates the
tree keeps the one maximising the split score

    s = n_minus * log((n_minus - 1) / area_minus) * [n_minus > 1]
      + n_plus  * log((n_plus  - 1) / area_plus)  * [n_plus  > 1]

where the counts are bootstrap counts and the areas are pixel-counted.  The
score is exactly the change this split makes to the cell's Poisson
cross-validated log-likelihood, so split gains accumulate into a variable
importance measure.  Splitting continues while a cell holds more than
``n_min`` bootstrap points; a candidate whose sub- or super-level side would
contain no pixels is ineligible, and a cell where every candidate is
ineligible becomes a leaf.  There is no improvement test: the best-scoring
eligible candidate is always applied.

A leaf estimates the intensity as ``n_leaf / (a_n * area_leaf)``.  Because
leaf regions are covariate level sets, prediction only needs a covariate
vector, so estimates extend beyond the window to anywhere covariates exist.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import CovariateStack, PointPattern, RasterGrid, Window
from .simulate import RngSeed
from .spatial import _bootstrap_multiplicities
from .tessellation import Partition

__all__ = [
    "SplitNode",
    "Leaf",
    "CovariateTree",
    "CovariateForest",
    "split_score",
    "fit_covariate_tree",
    "fit_covariate_forest",
    "predict_covariate",
    "predict_covariate_grid",
    "variable_importance",
    "leaf_partition",
]


def split_score(n_minus: int, area_minus: float, n_plus: int, area_plus: float) -> float:
    """Poisson likelihood score of a candidate split.

    Sides with at most one point contribute nothing; a side holding more
    than one point but no area makes the split impossible and the score is
    ``-inf``.
    """
    s = 0.0
    for n, area in ((n_minus, area_minus), (n_plus, area_plus)):
        if n > 1:
            if not area > 0:
                return -math.inf
            s += n * math.log((n - 1) / area)
    return s


@dataclass(eq=False)
class SplitNode:
    """Internal node: route to ``sub`` when ``z[covariate] <= threshold``."""

    covariate: int
    threshold: float
    sub: "SplitNode | Leaf | None" = None
    sup: "SplitNode | Leaf | None" = None


@dataclass(eq=False)
class Leaf:
    """Terminal cell: bootstrap count, raw count and pixel-counted area.

    ``pixels`` holds flat raster indices of the leaf's region for trees fit
    in-session; models loaded from disk carry only counts and areas.
    """

    index: int
    n_boot: int
    n_raw: int
    area: float
    pixels: np.ndarray | None = None


@dataclass(eq=False)
class SplitRecord:
    """Bookkeeping for one realised split (drives variable importance)."""

    covariate: int
    threshold: float
    score: float
    gain: float
    candidates: tuple[int, ...]


@dataclass(eq=False)
class CovariateTree:
    """One fitted covariate tree."""

    root: SplitNode | Leaf
    leaves: list[Leaf]
    p: int
    a_n: float = 1.0
    boot_mult: np.ndarray | None = None
    splits: list[SplitRecord] = field(default_factory=list)
    point_leaf: np.ndarray | None = None  # leaf index of each pattern point
    geometry: RasterGrid | None = None    # raster the pixel sets refer to

    @property
    def split_gains(self) -> list[tuple[int, float]]:
        return [(s.covariate, s.gain) for s in self.splits]

    @property
    def leaf_estimates(self) -> np.ndarray:
        return np.array([lf.n_boot / (self.a_n * lf.area) for lf in self.leaves])

    def predict_one(self, z: np.ndarray) -> float:
        node = self.root
        while isinstance(node, SplitNode):
            v = z[node.covariate]
            if math.isnan(v):
                raise ValueError("cannot predict with an NA covariate value")
            node = node.sub if v <= node.threshold else node.sup
        return node.n_boot / (self.a_n * node.area)

    def leaves_of(self, Z: np.ndarray) -> np.ndarray:
        """Leaf index for each row of covariate matrix ``Z`` (n, p)."""
        Z = np.asarray(Z, dtype=np.float64)
        if np.isnan(Z).any():
            raise ValueError("cannot predict with an NA covariate value")
        out = np.empty(len(Z), dtype=np.int64)
        stack = [(self.root, np.arange(len(Z)))]
        while stack:
            node, idx = stack.pop()
            if isinstance(node, Leaf):
                out[idx] = node.index
                continue
            go_sub = Z[idx, node.covariate] <= node.threshold
            stack.append((node.sub, idx[go_sub]))
            stack.append((node.sup, idx[~go_sub]))
        return out

    def predict_many(self, Z: np.ndarray) -> np.ndarray:
        return self.leaf_estimates[self.leaves_of(Z)]


@dataclass(eq=False)
class CovariateForest:
    """A collection of covariate trees sharing one covariate list."""

    trees: list[CovariateTree]
    names: tuple[str, ...]
    mtry: int
    n_min: int
    a_n: float = 1.0
    window: Window | None = None

    @property
    def M(self) -> int:
        return len(self.trees)

    @property
    def p(self) -> int:
        return len(self.names)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _stack_pixel_data(pattern: PointPattern, stack: CovariateStack):
    """Pixel covariate matrix, usable-pixel indices and per-point rows.

    Pixels outside the window or with any NA covariate are excluded from
    the tree's domain.  Points are identified with their pixel, so their
    covariate vectors are exactly the pixel values.
    """
    geom = stack.geometry
    window = pattern.window
    Z = stack.values_matrix().reshape(-1, stack.p)
    X, Y = geom.pixel_centers()
    usable = window.contains_many(X.ravel(), Y.ravel())
    usable &= ~np.isnan(Z).any(axis=1)
    pix = np.flatnonzero(usable)
    if not len(pix):
        raise ValueError("no usable pixels: covariates do not cover the window")
    rows, cols = geom.rowcol_of(pattern.x, pattern.y)
    pt_flat = rows * geom.ncols + cols
    bad = (rows < 0) | ~usable[np.clip(pt_flat, 0, len(usable) - 1)]
    if np.any(bad):
        raise ValueError("some pattern points have no covariate data at their pixel")
    pos = np.searchsorted(pix, pt_flat)
    return Z[pix], pix, pos, geom


def fit_covariate_tree(pattern: PointPattern, stack: CovariateStack, mtry: int,
                       n_min: int, rng: RngSeed, a_n: float = 1.0,
                       max_depth: int | None = None) -> CovariateTree:
    """Grow one covariate tree on a bootstrap resample of ``pattern``.

    Parameters
    ----------
    mtry : int
        Number of candidate covariates drawn (without replacement) afresh
        at every cell; between 1 and the number of covariates.
    n_min : int
        Cells with more than ``n_min`` bootstrap points keep splitting.
    max_depth : int, optional
        Safety cap on tree depth; unlimited by default.
    """
    p = stack.p
    if not 1 <= mtry <= p:
        raise ValueError(f"mtry must be in 1..{p}, got {mtry}")
    if n_min < 2:
        raise ValueError(f"n_min must be at least 2, got {n_min}")
    if a_n <= 0:
        raise ValueError("a_n must be positive")
    if pattern.total_count == 0:
        raise ValueError("cannot fit a covariate tree on an empty pattern")
    Zpix, pix, pt_pos, geom = _stack_pixel_data(pattern, stack)
    px_area = geom.pixel_area
    gen = rng.generator()
    boot = _bootstrap_multiplicities(gen, pattern)

    tree = CovariateTree(root=None, leaves=[], p=p, a_n=a_n, boot_mult=boot,
                         geometry=geom)
    point_leaf = np.full(len(pattern), -1, dtype=np.int64)

    def make_leaf(pix_idx, pts_idx):
        lf = Leaf(index=len(tree.leaves),
                  n_boot=int(boot[pts_idx].sum()),
                  n_raw=int(pattern.multiplicities[pts_idx].sum()),
                  area=len(pix_idx) * px_area,
                  pixels=pix[pix_idx])
        tree.leaves.append(lf)
        point_leaf[pts_idx] = lf.index
        return lf

    def attach(parent, side, child):
        if parent is None:
            tree.root = child
        elif side == 0:
            parent.sub = child
        else:
            parent.sup = child

    # FIFO over cells; each entry: (parent node, side, pixel rows, point ids, depth)
    queue = [(None, 0, np.arange(len(pix)), np.arange(len(pattern)), 0)]
    while queue:
        parent, side, pix_idx, pts_idx, depth = queue.pop(0)
        n_cell = int(boot[pts_idx].sum())
        if n_cell <= n_min or (max_depth is not None and depth >= max_depth):
            attach(parent, side, make_leaf(pix_idx, pts_idx))
            continue
        candidates = np.sort(gen.choice(p, size=mtry, replace=False))
        best = None  # (score, k, threshold, sub pixel mask, sub point mask)
        cell_area = len(pix_idx) * px_area
        for k in candidates:
            zp = Zpix[pix_idx, k]
            med = float(np.median(zp))
            sub_px = zp <= med
            n_sub_px = int(np.count_nonzero(sub_px))
            if n_sub_px == 0 or n_sub_px == len(pix_idx):
                continue  # a side with no pixels: candidate ineligible
            sub_pt = Zpix[pt_pos[pts_idx], k] <= med
            n_minus = int(boot[pts_idx[sub_pt]].sum())
            s = split_score(n_minus, n_sub_px * px_area,
                            n_cell - n_minus, (len(pix_idx) - n_sub_px) * px_area)
            if best is None or s > best[0]:
                best = (s, int(k), med, sub_px, sub_pt)
        if best is None:
            attach(parent, side, make_leaf(pix_idx, pts_idx))
            continue
        s, k, med, sub_px, sub_pt = best
        parent_term = n_cell * math.log((n_cell - 1) / cell_area) if n_cell > 1 else 0.0
        node = SplitNode(covariate=k, threshold=med)
        tree.splits.append(SplitRecord(k, med, s, s - parent_term,
                                       tuple(int(c) for c in candidates)))
        attach(parent, side, node)
        queue.append((node, 0, pix_idx[sub_px], pts_idx[sub_pt], depth + 1))
        queue.append((node, 1, pix_idx[~sub_px], pts_idx[~sub_pt], depth + 1))

    tree.point_leaf = point_leaf
    return tree


def fit_covariate_forest(pattern: PointPattern, stack: CovariateStack, M: int,
                         mtry: int, n_min: int, rng: RngSeed, a_n: float = 1.0,
                         max_depth: int | None = None,
                         threads: int = 1) -> CovariateForest:
    """Fit ``M`` covariate trees on independent bootstrap resamples.

    Tree ``i`` uses the derived stream ``rng.derive(i)``; results do not
    depend on scheduling.
    """
    if M < 1:
        raise ValueError("M must be at least 1")

    def build(i: int) -> CovariateTree:
        return fit_covariate_tree(pattern, stack, mtry, n_min, rng.derive(i),
                                  a_n, max_depth)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            trees = list(ex.map(build, range(M)))
    else:
        trees = [build(i) for i in range(M)]
    return CovariateForest(trees, stack.names, mtry, n_min, a_n, pattern.window)


# ---------------------------------------------------------------------------
# prediction and summaries
# ---------------------------------------------------------------------------

def predict_covariate(model: CovariateForest | CovariateTree,
                      z_values: np.ndarray) -> float:
    """Intensity estimate for one covariate vector (forest mean).

    Only the covariate values matter, so this works for locations outside
    the window as long as their covariates are known.  NA values raise
    ``ValueError``.
    """
    z = np.asarray(z_values, dtype=np.float64)
    trees = model.trees if isinstance(model, CovariateForest) else [model]
    if z.shape != (trees[0].p,):
        raise ValueError(f"expected {trees[0].p} covariate values, got shape {z.shape}")
    if np.isnan(z).any():
        raise ValueError("covariate vector contains NA values")
    return float(np.mean([t.predict_one(z) for t in trees]))


def _tree_grid_estimates(tree: CovariateTree, stack: CovariateStack) -> np.ndarray:
    """Per-pixel estimates for one tree on the stack's raster (flat array)."""
    geom = stack.geometry
    n_px = geom.nrows * geom.ncols
    out = np.full(n_px, np.nan)
    est = tree.leaf_estimates
    if tree.leaves and tree.leaves[0].pixels is not None \
            and tree.geometry is not None and tree.geometry.same_geometry(geom):
        for lf in tree.leaves:
            out[lf.pixels] = est[lf.index]
        return out
    Z = stack.values_matrix().reshape(-1, stack.p)
    ok = ~np.isnan(Z).any(axis=1)
    out[ok] = est[tree.leaves_of(Z[ok])]
    return out


def predict_covariate_grid(forest: CovariateForest | CovariateTree,
                           stack: CovariateStack) -> RasterGrid:
    """Forest estimate at every pixel of the stack's raster (NA off-domain).

    For trees fitted on this same raster the stored leaf regions are used
    directly; otherwise pixels are routed through the splits by their
    covariate values.
    """
    trees = forest.trees if isinstance(forest, CovariateForest) else [forest]
    geom = stack.geometry
    acc = np.zeros(geom.nrows * geom.ncols)
    for t in trees:
        acc += _tree_grid_estimates(t, stack)
    return geom.with_values((acc / len(trees)).reshape(geom.nrows, geom.ncols))


def variable_importance(forest: CovariateForest) -> dict[str, float]:
    """Mean per-tree sum of split gains, by covariate.

    Covariates a tree never splits on contribute zero for that tree;
    negative gains (splits that worsened the likelihood) are kept.
    """
    totals = np.zeros(forest.p)
    for t in forest.trees:
        for k, gain in t.split_gains:
            totals[k] += gain
    totals /= forest.M
    return {name: float(v) for name, v in zip(forest.names, totals)}


def leaf_partition(tree: CovariateTree) -> Partition:
    """The tree's leaf regions as a labelled :class:`Partition`.

    Only available for trees fitted in-session (pixel sets in memory).
    Leaf regions are covariate level sets, so unlike Voronoi cells they may
    be spatially disconnected.
    """
    if tree.geometry is None or not tree.leaves or tree.leaves[0].pixels is None:
        raise ValueError("leaf regions are not available on a loaded model")
    geom = tree.geometry
    ids = np.full(geom.nrows * geom.ncols, -1, dtype=np.int32)
    for lf in tree.leaves:
        ids[lf.pixels] = lf.index
    prov = {"kind": "covariate_tree",
            "splits": [(s.covariate, s.threshold) for s in tree.splits]}
    return Partition(ids.reshape(geom.nrows, geom.ncols), geom.xmin, geom.ymin,
                     geom.cellsize, prov)
