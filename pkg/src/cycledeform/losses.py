"""Training objectives.

Two implementations live here:

* the per-term functions (``cy2``, ``cy3``, ``l_cy``, ``l_ch``, ``sr``, ...)
  follow the definitions literally and accept any *mapper* object exposing
  ``map_points(source, target, points)`` / ``map(source, target)``;
* ``batch_losses`` evaluates every term for a batch of triplets at once.
  Because the deformation acts point-wise and a projection always lands on
  an existing target point, ``f_{Y,X}(pi_Y(q))`` is a row of ``f_{Y,X}(Y)``.
  All cycle compositions therefore reduce to index compositions over the six
  deformed clouds ``f_{X,Y}(X)``, which gives identical values and gradients
  at a fraction of the cost.

Projections are hard nearest-neighbour selections; no gradient flows
through the selected index or the projected coordinates.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import LabelSpaceMismatch
from .geometry import AugmentationTransform, KdTree, apply_augmentation

ORDERED_PAIRS = [(x, y) for x in range(3) for y in range(3) if x != y]
PERMUTATIONS = list(itertools.permutations(range(3)))
PAIR_SLOT = {pair: i for i, pair in enumerate(ORDERED_PAIRS)}


@dataclass
class Triplet:
    """Three clouds of equal size, optionally labelled."""

    clouds: list
    labels: list | None = None

    def __post_init__(self):
        self.clouds = [np.asarray(c, dtype=np.float64) for c in self.clouds]
        if len(self.clouds) != 3 or len({len(c) for c in self.clouds}) != 1:
            raise ValueError("a triplet needs three clouds with the same point count")
        self.trees = [KdTree(c) for c in self.clouds]


def _mean_dist(a, b) -> ad.Tensor:
    return ad.mean(ad.euclid_norm_rows(ad.sub(a, b)))


def _as_value(t) -> np.ndarray:
    return t.value if isinstance(t, ad.Tensor) else np.asarray(t)


def chamfer_asym_t(deformed, target, nn_index: np.ndarray | None = None) -> ad.Tensor:
    """Asymmetric Chamfer between a deformed cloud (Tensor) and a fixed target:
    mean over target points of the distance to the nearest deformed point."""
    deformed = ad.as_tensor(deformed)
    target = np.asarray(target, dtype=deformed.dtype)
    if nn_index is None:
        nn_index, _ = KdTree(deformed.value).query(target)
    return _mean_dist(ad.take_rows(deformed, nn_index), target)


def cy2(mapper, X, Y, P=None, tree_y: KdTree | None = None) -> ad.Tensor:
    """Mean over p in X of |p - f_{Y,X}(pi_Y(f_{X,Y}(p)))|."""
    tree_y = tree_y or KdTree(Y)
    fxy = mapper.map(X, Y, P)
    idx, _ = tree_y.query(_as_value(fxy))
    q = ad.gather_rows(np.asarray(Y, dtype=fxy.dtype), idx)
    back = mapper.map_points(Y, X, q.value, P)
    return _mean_dist(np.asarray(X, dtype=back.dtype), back)


def cy3(mapper, X, Y, Z, P=None, tree_y: KdTree | None = None, tree_z: KdTree | None = None) -> ad.Tensor:
    """Mean over p in X of |p - f_{Z,X}(pi_Z(f_{Y,Z}(pi_Y(f_{X,Y}(p)))))|."""
    tree_y = tree_y or KdTree(Y)
    tree_z = tree_z or KdTree(Z)
    fxy = mapper.map(X, Y, P)
    j, _ = tree_y.query(_as_value(fxy))
    qy = ad.gather_rows(np.asarray(Y, dtype=fxy.dtype), j)
    fyz = mapper.map_points(Y, Z, qy.value, P)
    k, _ = tree_z.query(_as_value(fyz))
    qz = ad.gather_rows(np.asarray(Z, dtype=fyz.dtype), k)
    back = mapper.map_points(Z, X, qz.value, P)
    return _mean_dist(np.asarray(X, dtype=back.dtype), back)


def cycle_residual(mapper, clouds: list, P=None) -> float:
    """Mean return distance of the closed cycle clouds[0] -> ... -> clouds[-1] -> clouds[0]
    with a projection after every map but the last."""
    start = np.asarray(clouds[0], dtype=np.float64)
    pts = start
    L = len(clouds)
    for i in range(L):
        a, b = clouds[i], clouds[(i + 1) % L]
        moved = _as_value(mapper.map_points(a, b, pts, P))
        if i < L - 1:
            idx, _ = KdTree(b).query(moved)
            pts = np.asarray(b, dtype=np.float64)[idx]
        else:
            pts = np.asarray(moved, dtype=np.float64)
    return float(np.linalg.norm(start - pts, axis=1).mean())


def l_cy_terms(mapper, triplet: Triplet, P=None) -> list[tuple[str, tuple, ad.Tensor]]:
    """The twelve cycle terms: Cy2(X, Y) and Cy3(X, Y, Z) for each ordering of the triplet."""
    c, t = triplet.clouds, triplet.trees
    terms = []
    for x, y, z in PERMUTATIONS:
        terms.append(("cy2", (x, y), cy2(mapper, c[x], c[y], P, t[y])))
        terms.append(("cy3", (x, y, z), cy3(mapper, c[x], c[y], c[z], P, t[y], t[z])))
    return terms


def l_cy(mapper, triplet: Triplet, P=None) -> ad.Tensor:
    return _sum([term for _, _, term in l_cy_terms(mapper, triplet, P)])


def l_ch_terms(mapper, triplet: Triplet, P=None) -> list[tuple[tuple, ad.Tensor]]:
    c = triplet.clouds
    terms = []
    for x, y in [(0, 1), (0, 2), (1, 2)]:
        terms.append(((x, y), chamfer_asym_t(mapper.map(c[x], c[y], P), c[y])))
        terms.append(((y, x), chamfer_asym_t(mapper.map(c[y], c[x], P), c[x])))
    return terms


def l_ch(mapper, triplet: Triplet, P=None) -> ad.Tensor:
    return _sum([term for _, term in l_ch_terms(mapper, triplet, P)])


def _restricted_nn(deformed: np.ndarray, src_labels, target: np.ndarray, tgt_labels) -> np.ndarray:
    """Nearest deformed point carrying the same label as each target point;
    labels missing from the deformed source fall back to the whole cloud."""
    idx = np.empty(len(target), dtype=np.int64)
    for label in np.unique(tgt_labels):
        rows = np.flatnonzero(tgt_labels == label)
        pool = np.flatnonzero(src_labels == label)
        if len(pool) == 0:
            pool = np.arange(len(deformed))
        local, _ = KdTree(deformed[pool]).query(target[rows])
        idx[rows] = pool[local]
    return idx


def chamfer_perpart_t(deformed, src_labels, target, tgt_labels) -> ad.Tensor:
    """Per-label asymmetric Chamfer, averaged with weights proportional to
    the label counts of the target."""
    deformed = ad.as_tensor(deformed)
    target = np.asarray(target, dtype=deformed.dtype)
    idx = _restricted_nn(deformed.value, np.asarray(src_labels), target, np.asarray(tgt_labels))
    return _mean_dist(ad.take_rows(deformed, idx), target)


def l_ch_perpart(mapper, triplet: Triplet, P=None) -> ad.Tensor:
    if triplet.labels is None:
        raise LabelSpaceMismatch("per-part Chamfer needs labelled clouds")
    c, lab = triplet.clouds, [np.asarray(v) for v in triplet.labels]
    terms = []
    for x, y in [(0, 1), (0, 2), (1, 2)]:
        terms.append(chamfer_perpart_t(mapper.map(c[x], c[y], P), lab[x], c[y], lab[y]))
        terms.append(chamfer_perpart_t(mapper.map(c[y], c[x], P), lab[y], c[x], lab[x]))
    return _sum(terms)


def sr(mapper, X, psi: AugmentationTransform, P=None) -> ad.Tensor:
    """Mean over p in X of |f_{X, psi(X)}(p) - psi(p)|."""
    target = apply_augmentation(X, psi)
    out = mapper.map(X, target, P)
    return _mean_dist(out, np.asarray(target, dtype=out.dtype))


def l_sr(mapper, triplet: Triplet, psis, P=None) -> ad.Tensor:
    return _sum([sr(mapper, c, psi, P) for c, psi in zip(triplet.clouds, psis)])


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


@dataclass
class LossReport:
    l_ch: float
    l_cy2: float
    l_cy3: float
    l_sr: float
    l_total: float
    sr_active: bool
    cycle_weight: float

    @property
    def l_cy(self) -> float:
        return self.l_cy2 + self.l_cy3

    def recombined(self) -> float:
        """The total rebuilt from the components."""
        if math.isinf(self.cycle_weight):
            return self.l_cy
        return self.l_ch + self.cycle_weight * self.l_cy + (self.l_sr if self.sr_active else 0.0)


def combine(l_ch_t, l_cy2_t, l_cy3_t, l_sr_t, sr_active: bool, cycle_weight: float):
    """Weighted total as a Tensor plus the float report.

    ``cycle_weight = inf`` keeps only the cycle terms.
    """
    cy = ad.add(l_cy2_t, l_cy3_t)
    if math.isinf(cycle_weight):
        total = cy
    else:
        total = ad.add(l_ch_t, ad.scale(cy, cycle_weight))
        if sr_active:
            total = ad.add(total, l_sr_t)
    val = lambda t: 0.0 if t is None else float(ad.as_tensor(t).value)  # noqa: E731
    report = LossReport(
        val(l_ch_t), val(l_cy2_t), val(l_cy3_t),
        val(l_sr_t) if sr_active else 0.0,
        float(total.value), sr_active, float(cycle_weight),
    )
    return total, report


def sr_active_at(epoch: int, cutoff: int, cycle_weight: float) -> bool:
    return epoch < cutoff and not math.isinf(cycle_weight)


def l_total(mapper, triplet: Triplet, psis, epoch: int, sr_cutoff: int = 30,
            cycle_weight: float = 1.0, P=None):
    """Reference total loss for one triplet; returns ``(Tensor, LossReport)``."""
    active = sr_active_at(epoch, sr_cutoff, cycle_weight)
    terms = l_cy_terms(mapper, triplet, P)
    cy2_t = _sum([t for kind, _, t in terms if kind == "cy2"])
    cy3_t = _sum([t for kind, _, t in terms if kind == "cy3"])
    sr_t = l_sr(mapper, triplet, psis, P) if active else None
    return combine(l_ch(mapper, triplet, P), cy2_t, cy3_t, sr_t, active, cycle_weight)


# ---------------------------------------------------------------------------
# batched evaluation used by the trainer


@dataclass
class TripletBatch:
    """``clouds``: (T, 3, n, 3). ``sr_targets``: (T, 3, n, 3) images psi(p) of
    each cloud under a self-reconstruction transform, or None.
    ``labels``: (T, 3, n) integer part ids, or None."""

    clouds: np.ndarray
    sr_targets: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.clouds = np.asarray(self.clouds, dtype=np.float64)
        if self.clouds.ndim != 4 or self.clouds.shape[1] != 3 or self.clouds.shape[3] != 3:
            raise ValueError(f"triplet batch must be (T, 3, n, 3), got {self.clouds.shape}")

    @property
    def size(self) -> int:
        return self.clouds.shape[0]


def batch_losses(mapper, batch: TripletBatch, epoch: int, sr_cutoff: int = 30,
                 cycle_weight: float = 1.0, part_supervision: bool = False,
                 P=None, nn_cache: dict | None = None):
    """Mean over the batch of every per-triplet term; returns ``(Tensor, LossReport)``.

    ``nn_cache`` (a dict) stores the discrete nearest-neighbour choices on the
    first call and replays them on later calls, which freezes the piecewise
    structure for finite-difference checks.
    """
    T, _, n, _ = batch.clouds.shape
    active = sr_active_at(epoch, sr_cutoff, cycle_weight) and batch.sr_targets is not None
    m = 6 if active else 3
    stack = batch.clouds if not active else np.concatenate([batch.clouds, batch.sr_targets], axis=1)
    stack = stack.reshape(T * m, n, 3)
    pairs = [(t * m + x, t * m + y) for t in range(T) for x, y in ORDERED_PAIRS]
    if active:
        pairs += [(t * m + x, t * m + 3 + x) for t in range(T) for x in range(3)]
    D = mapper.map_pairs(stack, pairs, P)
    dtype = D.dtype
    Dflat = ad.reshape(D, (len(pairs) * n, 3))
    Dv = D.value

    def pair_row(t, x, y):
        return (t * 6 + PAIR_SLOT[(x, y)]) * n

    cache = nn_cache if nn_cache is not None else {}
    if "ch" not in cache:
        ch_idx = np.empty((T, 6, n), dtype=np.int64)
        proj = np.empty((T, 6, n), dtype=np.int64)
        for t in range(T):
            trees = [KdTree(batch.clouds[t, c]) for c in range(3)]
            for x, y in ORDERED_PAIRS:
                slot = PAIR_SLOT[(x, y)]
                deformed = Dv[t * 6 + slot]
                if part_supervision:
                    ch_idx[t, slot] = _restricted_nn(
                        deformed, batch.labels[t, x], batch.clouds[t, y], batch.labels[t, y])
                else:
                    ch_idx[t, slot] = KdTree(deformed).query(batch.clouds[t, y])[0]
                proj[t, slot] = trees[y].query(deformed)[0]
        cache["ch"], cache["proj"] = ch_idx, proj
    ch_idx, proj = cache["ch"], cache["proj"]

    ch_rows, ch_tgt = [], []
    cy2_rows, cy3_rows, cyc_src = [], [], []
    for t in range(T):
        for x, y in ORDERED_PAIRS:
            slot = PAIR_SLOT[(x, y)]
            ch_rows.append(pair_row(t, x, y) + ch_idx[t, slot])
            ch_tgt.append(batch.clouds[t, y])
            j = proj[t, slot]
            cy2_rows.append(pair_row(t, y, x) + j)
            cyc_src.append(batch.clouds[t, x])
            z = 3 - x - y
            k = proj[t, PAIR_SLOT[(y, z)]][j]
            cy3_rows.append(pair_row(t, z, x) + k)

    def term(rows, targets):
        picked = ad.take_rows(Dflat, np.concatenate(rows))
        dist = ad.euclid_norm_rows(ad.sub(picked, np.concatenate(targets).astype(dtype)))
        # each pair term is a mean over n points; sum over pairs, mean over triplets
        return ad.scale(ad.total(dist), 1.0 / (n * T))

    l_ch_t = term(ch_rows, ch_tgt)
    l_cy2_t = term(cy2_rows, cyc_src)
    l_cy3_t = term(cy3_rows, cyc_src)
    l_sr_t = None
    if active:
        base = 6 * T * n
        sr_rows = [base + (t * 3 + x) * n + np.arange(n) for t in range(T) for x in range(3)]
        sr_tgt = [batch.sr_targets[t, x] for t in range(T) for x in range(3)]
        l_sr_t = term(sr_rows, sr_tgt)
    return combine(l_ch_t, l_cy2_t, l_cy3_t, l_sr_t, active, cycle_weight)
