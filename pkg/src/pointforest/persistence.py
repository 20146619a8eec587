"""Saving and loading fitted forests as human-diffable text.

A model file starts with the magic line ``pointforest-model 1`` followed by
``key value`` lines and per-tree payloads.  Spatial trees reference their
label grids as sibling raster files (written next to the model file);
covariate trees serialise their split structure in preorder, one node per
line (``split <covariate> <threshold>`` or ``leaf <n_boot> <n_raw> <area>``,
with indentation for readability only).  Floats use 17 significant digits,
so a save/load round trip reproduces predictions bit for bit.

Loaded models predict exactly like the originals but drop fitting-only
state: bootstrap multiplicities (so OOB scoring needs a refit) and leaf
pixel sets (so covariate grid prediction routes through the splits).
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .covariate import CovariateForest, CovariateTree, Leaf, SplitNode, SplitRecord
from .geometry import DataError, Window, fmt_float, read_raster, write_raster
from .simulate import RngSeed
from .spatial import SpatialForest, SpatialTree
from .tessellation import Partition

__all__ = ["save_model", "load_model"]

_MAGIC = "pointforest-model"
_VERSION = 1


def save_model(model: SpatialForest | CovariateForest, path: str | Path,
               seed: RngSeed | None = None) -> None:
    """Write a fitted forest to ``path`` (plus sibling grid files).

    Spatial forests write one ``<stem>_tree<i>.grid`` raster per tree next
    to the model file.  ``seed`` records the master seed the forest was
    fitted with, for provenance.
    """
    path = Path(path)
    if isinstance(model, SpatialForest):
        _save_spatial(model, path, seed)
    elif isinstance(model, CovariateForest):
        _save_covariate(model, path, seed)
    else:
        raise TypeError(f"cannot save a {type(model).__name__}")


def load_model(path: str | Path) -> SpatialForest | CovariateForest:
    """Load a model file written by :func:`save_model`."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    lines = [ln for ln in lines if ln.strip()]
    if not lines or lines[0].split() != [_MAGIC, str(_VERSION)]:
        raise DataError(f"{path} is not a version-{_VERSION} model file")
    header, rest = _read_header(lines[1:])
    kind = (header.get("kind") or [None])[0]
    if kind == "spatial":
        return _load_spatial(header, rest, path)
    if kind == "covariate":
        return _load_covariate(header, rest, path)
    raise DataError(f"{path}: unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# shared header helpers
# ---------------------------------------------------------------------------

def _seed_token(seed: RngSeed | None) -> str | None:
    if seed is None:
        return None
    return ":".join(str(v) for v in (seed.seed, seed.stream, *seed.path))


def _window_line(window: Window | None) -> str | None:
    if window is None:
        return None
    return ("window " + " ".join(fmt_float(v) for v in
                                 (window.xmin, window.ymin, window.xmax, window.ymax)))


def _read_header(lines: list[str]) -> tuple[dict, list[str]]:
    """Consume ``key value`` lines until the first ``tree`` line."""
    header: dict = {}
    for i, ln in enumerate(lines):
        toks = ln.split()
        if toks[0] == "tree":
            return header, lines[i:]
        header[toks[0]] = toks[1:]
    return header, []


def _header_float(header: dict, key: str, path: Path) -> float:
    try:
        return float(header[key][0])
    except (KeyError, IndexError, ValueError) as exc:
        raise DataError(f"{path}: missing or bad header field {key!r}") from exc


def _header_window(header: dict) -> Window | None:
    if "window" not in header:
        return None
    b = [float(v) for v in header["window"]]
    return Window(b[0], b[1], b[2], b[3])


# ---------------------------------------------------------------------------
# spatial models
# ---------------------------------------------------------------------------

def _save_spatial(model: SpatialForest, path: Path, seed: RngSeed | None) -> None:
    lines = [f"{_MAGIC} {_VERSION}", "kind spatial",
             f"a_n {fmt_float(model.a_n)}",
             f"gamma {fmt_float(model.gamma)}",
             f"bootstrap {int(model.bootstrap)}"]
    tok = _seed_token(seed)
    if tok:
        lines.append(f"master_seed {tok}")
    wline = _window_line(model.window)
    if wline:
        lines.append(wline)
    lines.append(f"trees {model.M}")
    for i, tree in enumerate(model.trees):
        grid_name = f"{path.stem}_tree{i:03d}.grid"
        write_raster(tree.partition.labels, path.parent / grid_name)
        counts = " ".join(str(int(c)) for c in tree.counts)
        tree_seed = tree.partition.provenance.get("seed")
        seed_part = ""
        if tree_seed is not None:
            s, st, pa = tree_seed
            seed_part = " seed " + ":".join(str(v) for v in (s, st, *pa))
        lines.append(f"tree {i}{seed_part} labels {grid_name} counts {counts}")
    path.write_text("\n".join(lines) + "\n")


def _load_spatial(header: dict, tree_lines: list[str], path: Path) -> SpatialForest:
    a_n = _header_float(header, "a_n", path)
    gamma = _header_float(header, "gamma", path)
    bootstrap = bool(int(header.get("bootstrap", ["0"])[0]))
    trees = []
    for ln in tree_lines:
        toks = ln.split()
        try:
            i_labels = toks.index("labels")
            i_counts = toks.index("counts")
        except ValueError as exc:
            raise DataError(f"{path}: malformed tree line {ln!r}") from exc
        prov: dict = {"kind": "loaded"}
        if "seed" in toks[:i_labels]:
            parts = toks[toks.index("seed") + 1].split(":")
            prov["seed"] = (int(parts[0]), int(parts[1]),
                            tuple(int(v) for v in parts[2:]))
        labels = read_raster(path.parent / toks[i_labels + 1])
        counts = np.array([int(v) for v in toks[i_counts + 1:]], dtype=np.int64)
        ids = np.where(np.isnan(labels.values), -1,
                       labels.values).astype(np.int32)
        part = Partition(ids, labels.xmin, labels.ymin, labels.cellsize, prov)
        if len(counts) != part.n_cells:
            raise DataError(f"{path}: tree has {len(counts)} counts for "
                            f"{part.n_cells} cells")
        trees.append(SpatialTree(part, counts, a_n, None))
    if not trees:
        raise DataError(f"{path}: model contains no trees")
    window = _header_window(header)
    if window is None:
        g = trees[0].partition.labels
        window = Window(g.xmin, g.ymin, g.xmax, g.ymax)
    if np.isnan(trees[0].partition.labels.values).any():
        mask = trees[0].partition.labels.with_values(
            np.where(trees[0].partition.ids >= 0, 1.0, 0.0))
        window = Window(window.xmin, window.ymin, window.xmax, window.ymax, mask=mask)
    return SpatialForest(trees, window, gamma, a_n, bootstrap)


# ---------------------------------------------------------------------------
# covariate models
# ---------------------------------------------------------------------------

def _write_node(lines: list[str], node: SplitNode | Leaf, depth: int) -> None:
    ind = "  " * depth
    if isinstance(node, Leaf):
        lines.append(f"{ind}leaf {node.n_boot} {node.n_raw} {fmt_float(node.area)}")
    else:
        lines.append(f"{ind}split {node.covariate} {fmt_float(node.threshold)}")
        _write_node(lines, node.sub, depth + 1)
        _write_node(lines, node.sup, depth + 1)


def _save_covariate(model: CovariateForest, path: Path, seed: RngSeed | None) -> None:
    lines = [f"{_MAGIC} {_VERSION}", "kind covariate",
             f"a_n {fmt_float(model.a_n)}",
             f"mtry {model.mtry}",
             f"n_min {model.n_min}",
             "covariates " + " ".join(model.names)]
    tok = _seed_token(seed)
    if tok:
        lines.append(f"master_seed {tok}")
    wline = _window_line(model.window)
    if wline:
        lines.append(wline)
    lines.append(f"trees {model.M}")
    for i, tree in enumerate(model.trees):
        lines.append(f"tree {i}")
        _write_node(lines, tree.root, 1)
    path.write_text("\n".join(lines) + "\n")


def _parse_node(lines: list[str], pos: int, leaves: list[Leaf],
                path: Path) -> tuple[SplitNode | Leaf, int]:
    if pos >= len(lines):
        raise DataError(f"{path}: truncated tree serialisation")
    toks = lines[pos].split()
    if toks[0] == "leaf":
        if len(toks) != 4:
            raise DataError(f"{path}: bad leaf line {lines[pos]!r}")
        leaf = Leaf(index=len(leaves), n_boot=int(toks[1]), n_raw=int(toks[2]),
                    area=float(toks[3]), pixels=None)
        leaves.append(leaf)
        return leaf, pos + 1
    if toks[0] == "split":
        if len(toks) != 3:
            raise DataError(f"{path}: bad split line {lines[pos]!r}")
        node = SplitNode(covariate=int(toks[1]), threshold=float(toks[2]))
        node.sub, pos = _parse_node(lines, pos + 1, leaves, path)
        node.sup, pos = _parse_node(lines, pos, leaves, path)
        return node, pos
    raise DataError(f"{path}: unexpected token {toks[0]!r} in tree serialisation")


def _subtree_stats(node: SplitNode | Leaf) -> tuple[int, float]:
    if isinstance(node, Leaf):
        return node.n_boot, node.area
    n1, a1 = _subtree_stats(node.sub)
    n2, a2 = _subtree_stats(node.sup)
    return n1 + n2, a1 + a2

def _rebuild_split_records(node: SplitNode | Leaf, records: list[SplitRecord]) -> None:
    """Recompute split scores and gains from the stored counts and areas."""
    if isinstance(node, Leaf):
        return
    n_sub, a_sub = _subtree_stats(node.sub)
    n_sup, a_sup = _subtree_stats(node.sup)
    s = 0.0
    for n, a in ((n_sub, a_sub), (n_sup, a_sup)):
        if n > 1:
            s += n * math.log((n - 1) / a)
    n_all, a_all = n_sub + n_sup, a_sub + a_sup
    parent = n_all * math.log((n_all - 1) / a_all) if n_all > 1 else 0.0
    records.append(SplitRecord(node.covariate, node.threshold, s, s - parent, ()))
    _rebuild_split_records(node.sub, records)
    _rebuild_split_records(node.sup, records)


def _load_covariate(header: dict, tree_lines: list[str], path: Path) -> CovariateForest:
    a_n = _header_float(header, "a_n", path)
    try:
        mtry = int(header["mtry"][0])
        n_min = int(header["n_min"][0])
        names = tuple(header["covariates"])
    except (KeyError, IndexError, ValueError) as exc:
        raise DataError(f"{path}: missing or bad covariate header: {exc}") from exc
    # split tree payloads at their "tree <i>" marker lines
    starts = [i for i, ln in enumerate(tree_lines) if ln.split()[0] == "tree"]
    trees = []
    for s, e in zip(starts, starts[1:] + [len(tree_lines)]):
        body = [ln.strip() for ln in tree_lines[s + 1:e]]
        leaves: list[Leaf] = []
        root, pos = _parse_node(body, 0, leaves, path)
        if pos != len(body):
            raise DataError(f"{path}: trailing lines after a tree serialisation")
        records: list[SplitRecord] = []
        _rebuild_split_records(root, records)
        trees.append(CovariateTree(root=root, leaves=leaves, p=len(names),
                                   a_n=a_n, boot_mult=None, splits=records,
                                   point_leaf=None, geometry=None))
    if not trees:
        raise DataError(f"{path}: model contains no trees")
    return CovariateForest(trees, names, mtry, n_min, a_n, _header_window(header))
