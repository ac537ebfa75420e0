"""Dice, ASSD and label-migration accounting for 2D label maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

# ASSD conventions, reported alongside results
SURFACE_CONNECTIVITY = 4
PIXEL_SPACING = 1.0


def _check(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(pred, true, k):
    """2|P∩G| / (|P|+|G|) for class ``k``; None when the class is in neither mask."""
    pred, true = _check(pred, true)
    p = pred == k
    g = true == k
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return None
    return 2.0 * int((p & g).sum()) / denom


def surface(region):
    """Pixels of ``region`` with a 4-neighbour outside it (outside the image counts)."""
    r = np.asarray(region, dtype=bool)
    padded = np.pad(r, 1, constant_values=False)
    inner = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return r & ~inner


def assd(pred, true, k):
    """Average symmetric surface distance for class ``k`` in pixel units.

    None if either surface is empty.
    """
    pred, true = _check(pred, true)
    sp = np.argwhere(surface(pred == k)).astype(np.float64)
    sg = np.argwhere(surface(true == k)).astype(np.float64)
    if len(sp) == 0 or len(sg) == 0:
        return None
    d = cdist(sp, sg) * PIXEL_SPACING
    return float((d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(sp) + len(sg)))


@dataclass
class ClassScores:
    dice: list  # per class, float or None
    assd: list

    @staticmethod
    def _macro(values, classes):
        vals = [values[k] for k in classes if values[k] is not None]
        return float(np.mean(vals)) if vals else None

    def macro_dice(self, classes=None):
        return self._macro(self.dice, classes if classes is not None else range(1, len(self.dice)))

    def macro_assd(self, classes=None):
        return self._macro(self.assd, classes if classes is not None else range(1, len(self.assd)))


def score_image(pred, true, num_classes):
    return ClassScores(
        [dice(pred, true, k) for k in range(num_classes)],
        [assd(pred, true, k) for k in range(num_classes)],
    )


def average_scores(per_image, num_classes):
    """Mean of per-image scores, skipping images where a class is absent."""
    out_d, out_a = [], []
    for k in range(num_classes):
        d = [s.dice[k] for s in per_image if s.dice[k] is not None]
        a = [s.assd[k] for s in per_image if s.assd[k] is not None]
        out_d.append(float(np.mean(d)) if d else None)
        out_a.append(float(np.mean(a)) if a else None)
    return ClassScores(out_d, out_a)


@dataclass
class MigrationTable:
    """``cells[i][j] = (pct_moved, pct_true_source, pct_true_dest)``; a row is None
    when no pixel was labelled ``i`` before adaptation."""

    cells: list

    def row_sums(self):
        return [None if row is None else sum(c[0] for c in row) for row in self.cells]


def migration_table(pre, post, true, num_classes):
    pre, post = _check(pre, post)
    _, true = _check(pre, true)
    pre, post, true = pre.ravel(), post.ravel(), true.ravel()
    cells = []
    for i in range(num_classes):
        src = pre == i
        n_i = int(src.sum())
        if n_i == 0:
            cells.append(None)
            continue
        row = []
        for j in range(num_classes):
            moved = src & (post == j)
            n_ij = int(moved.sum())
            if n_ij == 0:
                row.append((0.0, 0.0, 0.0))
                continue
            row.append((
                100.0 * n_ij / n_i,
                100.0 * int((moved & (true == i)).sum()) / n_ij,
                100.0 * int((moved & (true == j)).sum()) / n_ij,
            ))
        cells.append(row)
    return MigrationTable(cells)


def pca_2d(points):
    """Project (N, F) points onto their two leading principal axes."""
    x = np.asarray(points, dtype=np.float64)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    basis = vt[:2]
    # fix the sign so the projection is reproducible
    signs = np.sign(basis[np.arange(len(basis)), np.abs(basis).argmax(axis=1)])
    return x @ (basis * signs[:, None]).T
