"""Few-shot label transfer: source scoring and selection, deformation-based
label propagation with voting, rigid/identity baselines and oracle selection."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import LabelSpaceMismatch, LengthMismatch
from .geometry import KdTree, LabeledCloud, as_cloud, chamfer_sym, icp_align, miou
from .losses import cy2


class Criterion(enum.Enum):
    NEAREST_NEIGHBOR = "nn"
    DEFORMATION = "deformation"
    COSINE = "cosine"
    CYCLE = "cycle"

    @classmethod
    def parse(cls, name: str) -> "Criterion":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown criterion {name!r}; expected one of {[c.value for c in cls]}") from None


@dataclass(frozen=True)
class SourceScore:
    source_id: str
    criterion: Criterion
    score: float


def _pts(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, LabeledCloud) else as_cloud(cloud)


class CachedMapper:
    """Wraps a model and memoises deformations and slot-A codes by object
    identity; the wrapped clouds must stay alive while the cache is used."""

    def __init__(self, model):
        self.model = model
        self._maps: dict = {}
        self._codes: dict = {}
        self._keep: list = []

    def map(self, source, target, P=None):
        key = (id(source), id(target))
        if key not in self._maps:
            self._keep += [source, target]
            self._maps[key] = self.model.map(source, target)
        return self._maps[key]

    def map_points(self, source, target, points, P=None):
        return self.model.map_points(source, target, points)

    def encode(self, points, slot="encA", P=None):
        key = (id(points), slot)
        if key not in self._codes:
            self._keep.append(points)
            self._codes[key] = self.model.encode(points, slot)
        return self._codes[key]


def deformed(mapper, S, T) -> np.ndarray:
    return np.asarray(mapper.map(_pts(S), _pts(T)).value, dtype=np.float64)


def score_source(mapper, S, T, criterion: Criterion) -> float:
    """Lower is better."""
    s, t = _pts(S), _pts(T)
    if criterion is Criterion.NEAREST_NEIGHBOR:
        return chamfer_sym(s, t)
    if criterion is Criterion.DEFORMATION:
        return chamfer_sym(deformed(mapper, s, t), t)
    if criterion is Criterion.COSINE:
        # both codes from the slot-A encoder so they share one space
        va = np.asarray(mapper.encode(s, "encA").value, dtype=np.float64)
        vb = np.asarray(mapper.encode(t, "encA").value, dtype=np.float64)
        denom = np.linalg.norm(va) * np.linalg.norm(vb)
        return 0.0 if denom == 0 else float(1.0 - va @ vb / denom)
    if criterion is Criterion.CYCLE:
        return float(cy2(mapper, s, t).value)
    raise ValueError(f"unknown criterion {criterion}")


def select_sources(mapper, pool: list[LabeledCloud], T, criterion: Criterion, k: int = 1) -> list[SourceScore]:
    """The ``k`` lowest-scoring pool members, ascending, ties by id."""
    if not pool:
        raise ValueError("empty source pool")
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = [SourceScore(S.name, criterion, score_source(mapper, S, T, criterion)) for S in pool]
    scores.sort(key=lambda sc: (sc.score, sc.source_id))
    return scores[:k]


def nearest_labels(source_points: np.ndarray, source_labels: np.ndarray, target) -> np.ndarray:
    """Each target point takes the label of its nearest source point."""
    idx, _ = KdTree(source_points).query(_pts(target))
    return np.asarray(source_labels)[idx]


def transfer_labels(mapper, S: LabeledCloud, T) -> np.ndarray:
    """Deform ``S`` towards ``T``; labels ride on the deformed source points."""
    return nearest_labels(deformed(mapper, S.points, _pts(T)), S.labels, T)


def identity_baseline(S: LabeledCloud, T) -> np.ndarray:
    return nearest_labels(S.points, S.labels, T)


def icp_baseline(S: LabeledCloud, T) -> np.ndarray:
    aligned = icp_align(S.points, _pts(T)).aligned
    return nearest_labels(aligned, S.labels, T)


def vote(label_sets: list, num_parts: int) -> np.ndarray:
    """Per-point plurality; ties go to the smallest label."""
    stack = np.stack([np.asarray(v, dtype=np.int64) for v in label_sets])
    n = stack.shape[1]
    counts = np.zeros((n, num_parts), dtype=np.int64)
    for labels in stack:
        counts[np.arange(n), labels] += 1
    return counts.argmax(axis=1)


def _check_label_space(sources: list[LabeledCloud]) -> int:
    if not sources:
        raise ValueError("need at least one source")
    parts = {s.num_parts for s in sources}
    if len(parts) != 1:
        raise LabelSpaceMismatch(f"sources disagree on the label space: {sorted(parts)}")
    return parts.pop()


def vote_labels(mapper, sources: list[LabeledCloud], T) -> np.ndarray:
    num_parts = _check_label_space(sources)
    return vote([transfer_labels(mapper, S, T) for S in sources], num_parts)


METHODS = ("ours", "identity", "icp")


def transfer_fn(method: str, mapper=None):
    """``(S, T) -> labels`` for one of :data:`METHODS`."""
    if method == "ours":
        if mapper is None:
            raise ValueError("method 'ours' needs a model")
        return lambda S, T: transfer_labels(mapper, S, T)
    if method == "identity":
        return identity_baseline
    if method == "icp":
        return icp_baseline
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def oracle_select(mapper, pool: list[LabeledCloud], T, gt_labels, method: str = "ours") -> str:
    """Id of the pool member whose transferred labels score the best mIoU
    against ``gt_labels`` (ties by id). Evaluation only."""
    return oracle_scores(mapper, pool, T, gt_labels, method)[0][0]


def oracle_scores(mapper, pool: list[LabeledCloud], T, gt_labels, method: str = "ours") -> list:
    """``(id, mIoU)`` for every pool member, best first, ties by id."""
    fn = transfer_fn(method, mapper)
    num_parts = _check_label_space(pool)
    scored = [(S.name, miou(fn(S, T), gt_labels, num_parts)) for S in pool]
    return sorted(scored, key=lambda item: (-item[1], item[0]))


# ---------------------------------------------------------------------------
# few-shot experiment


@dataclass
class FewShotRun:
    method: str
    criterion: str
    k: int
    seed: int
    shots: list
    predictions: dict = field(default_factory=dict)  # target name -> labels
    mious: dict = field(default_factory=dict)  # target name -> mIoU

    @property
    def mean_miou(self) -> float:
        return float(np.mean(list(self.mious.values())))


def sample_shots(labeled: list[LabeledCloud], shots: int, seed: int) -> list[LabeledCloud]:
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(labeled), size=min(shots, len(labeled)), replace=False)
    return [labeled[i] for i in sorted(pick)]


def predict_target(mapper, pool: list[LabeledCloud], T: LabeledCloud, method: str,
                   criterion: str, k: int = 1) -> np.ndarray:
    """Labels for ``T`` with the given method and selection criterion
    (``criterion="oracle"`` uses ``T``'s ground truth)."""
    fn = transfer_fn(method, mapper)
    num_parts = _check_label_space(pool + [T])
    if criterion == "oracle":
        chosen = oracle_select(mapper, pool, T.points, T.labels, method)
        return fn(next(S for S in pool if S.name == chosen), T.points)
    picked = select_sources(mapper, pool, T.points, Criterion.parse(criterion), k)
    by_name = {S.name: S for S in pool}
    return vote([fn(by_name[sc.source_id], T.points) for sc in picked], num_parts)


def few_shot(mapper, labeled: list[LabeledCloud], targets: list[LabeledCloud], shots: int,
             method: str = "ours", criterion: str = "nn", k: int = 1, seed: int = 0) -> FewShotRun:
    """Draw ``shots`` labelled sources from ``labeled`` and label every target."""
    if mapper is not None and not isinstance(mapper, CachedMapper):
        mapper = CachedMapper(mapper)
    pool = sample_shots(labeled, shots, seed)
    run = FewShotRun(method, criterion, k, seed, [S.name for S in pool])
    for T in targets:
        if len(T.labels) != len(T.points):
            raise LengthMismatch(f"{T.name}: labels and points disagree")
        pred = predict_target(mapper, pool, T, method, criterion, k)
        run.predictions[T.name] = pred
        run.mious[T.name] = miou(pred, T.labels, T.num_parts)
    return run
