"""Static 2-d KD-tree over the fixed target pixels, and closest-point pairing.

Queries are exact: neighbors are ordered by ``(squared distance, index)``
so equal distances resolve to the lowest target index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ConfigurationError

STACK_SIZE = 128
LEAF_SIZE = 8


@numba.njit(cache=True)
def _insert(out_idx, out_d2, row, count, k, node, d2):
    # insertion into the (d2, index)-sorted row; returns the new count
    pos = count if count < k else k - 1
    while pos > 0 and (
        out_d2[row, pos - 1] > d2 or (out_d2[row, pos - 1] == d2 and out_idx[row, pos - 1] > node)
    ):
        if pos < k:
            out_d2[row, pos] = out_d2[row, pos - 1]
            out_idx[row, pos] = out_idx[row, pos - 1]
        pos -= 1
    out_d2[row, pos] = d2
    out_idx[row, pos] = node
    return count + 1 if count < k else count


@numba.njit(cache=True)
def _box_d2(box, node, qx, qy):
    dx = max(box[node, 0] - qx, 0.0, qx - box[node, 2])
    dy = max(box[node, 1] - qy, 0.0, qy - box[node, 3])
    return dx * dx + dy * dy


@numba.njit(cache=True)
def radius_knn_one(tree_lo, tree_hi, tree_box, tree_child, order, spts,
                   qx, qy, k, r2, out_idx, out_d2, row, stack_node, stack_bound):
    """Up to k nearest targets with d2 <= r2 for one query, written into row
    ``row`` of ``out_idx`` / ``out_d2``; with r2 = inf this is plain k-NN.
    If nothing lies within r2 the single nearest target fills slot 0.
    Returns the number of tree nodes visited."""
    count = 0
    for s in range(k):
        out_idx[row, s] = -1
        out_d2[row, s] = np.inf
    best_i = -1
    best_d = np.inf
    stack_node[0] = 0
    stack_bound[0] = _box_d2(tree_box, 0, qx, qy)
    top = 1
    visits = 0
    lim = r2  # current pruning radius: r2, or the k-th distance once k are found
    while top > 0:
        top -= 1
        node = stack_node[top]
        bound = stack_bound[top]
        # ties are explored so that the lowest index wins
        if bound > lim and bound > best_d:
            continue
        visits += 1
        a = tree_child[node, 0]
        if a >= 0:
            b = tree_child[node, 1]
            da = _box_d2(tree_box, a, qx, qy)
            db = _box_d2(tree_box, b, qx, qy)
            if da > db:
                a, b = b, a
                da, db = db, da
            # farther child below the nearer one on the stack
            if not (db > lim and db > best_d):
                stack_node[top] = b
                stack_bound[top] = db
                top += 1
            if not (da > lim and da > best_d):
                stack_node[top] = a
                stack_bound[top] = da
                top += 1
            continue
        for p in range(tree_lo[node], tree_hi[node]):
            dx = qx - spts[p, 0]
            dy = qy - spts[p, 1]
            d2 = dx * dx + dy * dy
            if d2 > lim and d2 > best_d:
                continue
            t = order[p]
            if d2 < best_d or (d2 == best_d and t < best_i):
                best_d = d2
                best_i = t
            if d2 <= r2 and (
                count < k
                or d2 < out_d2[row, k - 1]
                or (d2 == out_d2[row, k - 1] and t < out_idx[row, k - 1])
            ):
                count = _insert(out_idx, out_d2, row, count, k, t, d2)
                if count == k and out_d2[row, k - 1] < lim:
                    lim = out_d2[row, k - 1]
    if count == 0:
        out_idx[row, 0] = best_i
        out_d2[row, 0] = best_d
    return visits


@numba.njit(cache=True)
def _batch_query(tree_lo, tree_hi, tree_box, tree_child, order, spts,
                 queries, k, r2, out_idx, out_d2, visits):
    stack_node = np.empty(STACK_SIZE, dtype=np.int64)
    stack_bound = np.empty(STACK_SIZE, dtype=np.float64)
    for qi in range(queries.shape[0]):
        visits[qi] = radius_knn_one(
            tree_lo, tree_hi, tree_box, tree_child, order, spts,
            queries[qi, 0], queries[qi, 1], k, r2, out_idx, out_d2, qi,
            stack_node, stack_bound,
        )


def _build(points: np.ndarray, leaf_size: int):
    """Median-split bucket tree.  Node ranges index into ``order``; every
    node stores the tight bounding box of its points."""
    order = np.arange(len(points), dtype=np.int64)
    lo, hi, box, child = [], [], [], []

    def rec(a, b):
        node = len(lo)
        seg = order[a:b]
        p = points[seg]
        lo.append(a)
        hi.append(b)
        box.append([*p.min(axis=0), *p.max(axis=0)])
        child.append([-1, -1])
        if b - a <= leaf_size:
            return node
        ax = 0 if np.ptp(p[:, 0]) >= np.ptp(p[:, 1]) else 1
        order[a:b] = seg[np.argsort(p[:, ax], kind="stable")]
        mid = (a + b) // 2
        child[node] = [rec(a, mid), rec(mid, b)]
        return node

    rec(0, len(points))
    return (
        np.array(lo, dtype=np.int64),
        np.array(hi, dtype=np.int64),
        np.array(box, dtype=np.float64).reshape(-1, 4),
        np.array(child, dtype=np.int64).reshape(-1, 2),
        order,
    )


@dataclass(frozen=True, eq=False)
class TargetIndex:
    """Static 2-d tree over the target pixels.

    Nodes split at the median of the wider axis and keep the bounding box
    of their points; leaves hold up to ``LEAF_SIZE`` points.  ``order`` maps tree storage back to input indices.
    """

    points: np.ndarray
    tree_lo: np.ndarray
    tree_hi: np.ndarray
    tree_box: np.ndarray
    tree_child: np.ndarray
    order: np.ndarray
    sorted_points: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    @property
    def arrays(self) -> tuple:
        return (
            self.tree_lo, self.tree_hi, self.tree_box, self.tree_child,
            self.order, self.sorted_points,
        )

    def _run(self, queries, k, r2):
        if k < 1:
            raise ConfigurationError("k must be >= 1")
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 2)
        idx = np.empty((len(q), k), dtype=np.int64)
        d2 = np.empty((len(q), k), dtype=np.float64)
        visits = np.empty(len(q), dtype=np.int64)
        _batch_query(*self.arrays, q, k, float(r2), idx, d2, visits)
        return idx, d2, visits

    def query(self, queries: np.ndarray, k: int = 1, return_visits: bool = False):
        """k nearest targets per query row, sorted by (squared distance, index).

        Returns ``(idx, d2)`` of shape (Q, k); slots beyond the number of
        stored points hold -1 / inf.  ``return_visits`` adds the number of
        tree nodes touched per query.
        """
        idx, d2, visits = self._run(queries, k, np.inf)
        if return_visits:
            return idx, d2, visits
        return idx, d2

    def query_radius(self, queries: np.ndarray, k: int, r2: float):
        """Like ``query`` but keeps only neighbors with d2 <= ``r2``.

        A query with no target inside the radius gets its single nearest
        target in slot 0, so slot 0 is always filled.
        """
        idx, d2, _ = self._run(queries, k, r2)
        return idx, d2

    def nearest(self, p) -> tuple[int, float]:
        idx, d2 = self.query(np.asarray(p, dtype=float).reshape(1, 2), 1)
        return int(idx[0, 0]), float(d2[0, 0])


def build_index(targets: np.ndarray, leaf_size: int = LEAF_SIZE) -> TargetIndex:
    pts = np.array(targets, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ConfigurationError("target set must be a non-empty (M, 2) array")
    if not np.all(np.isfinite(pts)):
        raise ConfigurationError("target coordinates must be finite")
    lo, hi, box, child, order = _build(pts, leaf_size)
    spts = np.ascontiguousarray(pts[order])
    for a in (pts, lo, hi, box, child, order, spts):
        a.setflags(write=False)
    return TargetIndex(pts, lo, hi, box, child, order, spts)


@dataclass(frozen=True)
class CorrespondenceSet:
    """One nearest-target pair per visible source point.

    ``excluded`` lists source indices that were behind the camera; they
    carry no pair.
    """

    source: np.ndarray
    target: np.ndarray
    d2: np.ndarray
    excluded: np.ndarray
    iteration: int = 0

    def __len__(self) -> int:
        return len(self.source)

    @property
    def distances(self) -> np.ndarray:
        return np.sqrt(self.d2)


def closest_point_search(
    index: TargetIndex,
    projected: np.ndarray,
    iteration: int = 0,
    valid: np.ndarray | None = None,
) -> CorrespondenceSet:
    projected = np.asarray(projected, dtype=float).reshape(-1, 2)
    if len(projected) == 0:
        raise ConfigurationError("no projected points to pair")
    if valid is None:
        valid = np.ones(len(projected), dtype=bool)
    src = np.flatnonzero(valid)
    idx, d2 = index.query(projected[src], 1)
    return CorrespondenceSet(
        source=src,
        target=idx[:, 0],
        d2=d2[:, 0],
        excluded=np.flatnonzero(~valid),
        iteration=iteration,
    )


def linear_scan(targets: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force nearest neighbor, lowest index on ties.  Test oracle."""
    targets = np.asarray(targets, dtype=float)
    queries = np.asarray(queries, dtype=float).reshape(-1, 2)
    out_i = np.empty(len(queries), dtype=np.int64)
    out_d = np.empty(len(queries))
    for s in range(0, len(queries), 512):
        q = queries[s : s + 512]
        d2 = ((q[:, None, 0] - targets[None, :, 0]) ** 2) + (
            (q[:, None, 1] - targets[None, :, 1]) ** 2
        )
        i = np.argmin(d2, axis=1)  # first occurrence == lowest index
        out_i[s : s + 512] = i
        out_d[s : s + 512] = d2[np.arange(len(q)), i]
    return out_i, out_d
