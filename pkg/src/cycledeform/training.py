"""Triplet sampling, Adam optimisation and the training loop."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .errors import InsufficientShapes, NonFiniteLoss, NumericalError
from .geometry import AugmentationTransform, LabeledCloud, apply_augmentation, normalize_bbox
from .losses import LossReport, TripletBatch, batch_losses
from .model import Model, ModelConfig, parameter_shapes

log = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-3
    lr_drop_epoch: int = 400
    lr_drop_factor: float = 10.0
    sr_cutoff_epoch: int = 30
    knn_k: int = 20
    cycle_weight: float = 1.0
    points_per_cloud: int = 1024
    triplets_per_batch: int = 8
    seed: int = 0
    precision: str = "f32"
    random_triplets: bool = False
    part_supervision: bool = False
    checkpoint_every: int = 0
    threads: int = 1
    enc_widths: tuple = (64, 128, 512)
    pred_hidden: int = 512
    deform_width: int = 64
    num_modules: int = 7

    def __post_init__(self):
        self.enc_widths = tuple(int(v) for v in self.enc_widths)
        counts = (self.epochs, self.knn_k, self.points_per_cloud, self.triplets_per_batch, self.threads)
        if min(counts) < 1:
            raise ValueError("epochs, knn_k, points_per_cloud, triplets_per_batch and threads must be positive")
        if not 0 <= self.lr_drop_epoch < self.epochs:
            raise ValueError("lr_drop_epoch must lie in [0, epochs)")
        if self.sr_cutoff_epoch < 0 or self.checkpoint_every < 0:
            raise ValueError("sr_cutoff_epoch and checkpoint_every must be non-negative")
        if not (self.cycle_weight >= 0):
            raise ValueError("cycle_weight must be >= 0 (inf allowed)")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.enc_widths, self.pred_hidden, self.deform_width, self.num_modules)

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.lr_drop_epoch else self.lr / self.lr_drop_factor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# KNN graph and triplets


@dataclass
class KnnGraph:
    neighbors: list  # neighbors[i] -> array of shape indices, nearest first
    distances: np.ndarray  # all-pairs symmetric Chamfer

    def __len__(self):
        return len(self.neighbors)


def chamfer_matrix(clouds: list) -> np.ndarray:
    """All-pairs symmetric Chamfer distance."""
    clouds = [np.asarray(c, dtype=np.float64) for c in clouds]
    n = len(clouds)
    everything = np.concatenate(clouds)
    owner = np.repeat(np.arange(n), [len(c) for c in clouds])
    counts = np.bincount(owner, minlength=n)
    asym = np.zeros((n, n))
    for i in range(n):
        # distances only, so tie-breaking between equidistant points is moot
        d, _ = cKDTree(clouds[i]).query(everything)
        # row i: mean over each cloud j of the distance to cloud i
        asym[i] = np.bincount(owner, weights=d, minlength=n) / counts
    np.fill_diagonal(asym, 0.0)
    return asym + asym.T


def build_knn_graph(clouds: list, k: int = 20) -> KnnGraph:
    if len(clouds) < 2:
        raise InsufficientShapes("a KNN graph needs at least two shapes")
    dist = chamfer_matrix(clouds)
    n = len(clouds)
    kk = min(k, n - 1)
    neighbors = []
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        # stable sort on distance keeps ties in index order
        order = others[np.argsort(dist[i, others], kind="stable")]
        neighbors.append(order[:kk])
    return KnnGraph(neighbors, dist)


def sample_triplet(graph: KnnGraph, rng: np.random.Generator, anchor: int | None = None,
                   random_triplets: bool = False) -> tuple[int, int, int]:
    """Anchor A (uniform unless given) and two distinct partners drawn from
    A's neighbour list, or from the whole set when ``random_triplets``."""
    n = len(graph)
    a = int(rng.integers(n)) if anchor is None else int(anchor)
    pool = np.array([j for j in range(n) if j != a]) if random_triplets else graph.neighbors[a]
    if len(pool) == 1:
        log.info("shape %d has a single neighbour; using it twice", a)
        return a, int(pool[0]), int(pool[0])
    b, c = rng.choice(pool, size=2, replace=False)
    return a, int(b), int(c)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def update(self, params: dict, grads: dict, lr: float) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.step
        c2 = 1 - b2 ** self.step
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            g = g.astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingState:
    cfg: TrainConfig
    model: Model
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    history: list = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainingState:
    model_seed, stream_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    model = Model(cfg.model_config(), seed=int(model_seed.generate_state(1)[0]), dtype=cfg.dtype)
    rng = np.random.Generator(np.random.PCG64(stream_seed))
    return TrainingState(cfg, model, AdamState.zeros_like(model.params), rng)


@dataclass
class PreparedTriplet:
    clouds: np.ndarray
    sr_targets: np.ndarray | None
    labels: np.ndarray | None


def prepare_triplet(shapes: list, ids, n_points: int, seed: int, with_sr: bool) -> PreparedTriplet:
    """Resample, augment and normalise three shapes; optionally add the
    self-reconstruction images psi(X) of each augmented cloud."""
    rng = np.random.default_rng(seed)
    clouds, labels, targets = [], [], []
    for i in ids:
        shape = shapes[i]
        pick = rng.integers(0, len(shape.points), size=n_points)
        psi = AugmentationTransform.sample(rng, translate=True)
        cloud = apply_augmentation(shape.points[pick], psi)
        clouds.append(cloud)
        labels.append(shape.labels[pick])
        if with_sr:
            targets.append(apply_augmentation(cloud, AugmentationTransform.sample(rng, translate=False)))
    return PreparedTriplet(np.stack(clouds), np.stack(targets) if with_sr else None, np.stack(labels))


def _epoch_record(epoch: int, lr: float, reports: list, weights: list) -> dict:
    w = np.asarray(weights, dtype=np.float64)
    avg = lambda name: float(np.dot([getattr(r, name) for r in reports], w) / w.sum())  # noqa: E731
    return {
        "epoch": epoch,
        "l_ch": avg("l_ch"),
        "l_cy2": avg("l_cy2"),
        "l_cy3": avg("l_cy3"),
        "l_sr": avg("l_sr"),
        "l_total": avg("l_total"),
        "lr": lr,
    }


def train_epoch(state: TrainingState, shapes: list, graph: KnnGraph, executor=None) -> dict:
    """One pass in which every training shape is an anchor exactly once."""
    cfg, rng = state.cfg, state.rng
    epoch = state.epoch
    lr = cfg.lr_at(epoch)
    with_sr = epoch < cfg.sr_cutoff_epoch and not math.isinf(cfg.cycle_weight)
    anchors = rng.permutation(len(shapes))
    triplets = [sample_triplet(graph, rng, a, cfg.random_triplets) for a in anchors]
    seeds = rng.integers(0, 2**63 - 1, size=len(triplets))
    reports, weights = [], []
    for start in range(0, len(triplets), cfg.triplets_per_batch):
        chunk = list(zip(triplets[start:start + cfg.triplets_per_batch],
                         seeds[start:start + cfg.triplets_per_batch]))
        job = lambda item: prepare_triplet(shapes, item[0], cfg.points_per_cloud, int(item[1]), with_sr)  # noqa: E731
        prepared = list(executor.map(job, chunk)) if executor else [job(item) for item in chunk]
        batch = TripletBatch(
            np.stack([p.clouds for p in prepared]),
            np.stack([p.sr_targets for p in prepared]) if with_sr else None,
            np.stack([p.labels for p in prepared]),
        )
        try:
            with ad.Tape() as tape:
                P = state.model.tensors(tape)
                total, report = batch_losses(
                    state.model, batch, epoch, cfg.sr_cutoff_epoch, cfg.cycle_weight,
                    cfg.part_supervision, P,
                )
            if not np.isfinite(total.value):
                raise NonFiniteLoss(f"loss is {total.value}")
            tape.backward(total)
        except NumericalError as exc:
            _dump_diagnostics(state, batch, exc)
            raise NonFiniteLoss(f"epoch {epoch}: {exc}") from exc
        state.adam.update(state.model.params, {k: t.grad for k, t in P.items()}, lr)
        reports.append(report)
        weights.append(batch.size)
    record = _epoch_record(epoch, lr, reports, weights)
    state.history.append(record)
    state.epoch += 1
    return record


def _dump_diagnostics(state: TrainingState, batch: TripletBatch, exc: Exception) -> None:
    log.error("numerical failure at epoch %d: %s", state.epoch, exc)
    finite = {k: bool(np.isfinite(v).all()) for k, v in state.model.params.items()}
    log.error("finite parameters: %s", finite)
    log.error("batch clouds finite: %s, extent %s", bool(np.isfinite(batch.clouds).all()),
              float(np.abs(batch.clouds).max()))


def normalized_shapes(shapes: list) -> list:
    return [LabeledCloud(normalize_bbox(s.points), s.labels, s.num_parts, s.name) for s in shapes]


def train(cfg: TrainConfig, shapes: list, state: TrainingState | None = None,
          graph: KnnGraph | None = None, checkpoint_path=None, on_epoch=None) -> TrainingState:
    """Train (or resume ``state``) until ``cfg.epochs`` epochs are done."""
    if len(shapes) < 3:
        raise InsufficientShapes("training needs at least three shapes")
    shapes = normalized_shapes(shapes)
    if graph is None:
        graph = build_knn_graph([s.points for s in shapes], cfg.knn_k)
    state = state or init_state(cfg)
    from .checkpoint import save_checkpoint

    executor = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        while state.epoch < cfg.epochs:
            record = train_epoch(state, shapes, graph, executor)
            log.info("epoch %d %s", record["epoch"],
                     " ".join(f"{k}={v:.5f}" for k, v in record.items() if k != "epoch"))
            if on_epoch is not None:
                on_epoch(state, record)
            if checkpoint_path and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, state)
    finally:
        if executor:
            executor.shutdown()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state)
    return state


LOSS_COLUMNS = ["epoch", "l_ch", "l_cy2", "l_cy3", "l_sr", "l_total", "lr"]


def report_from_record(record: dict, cfg: TrainConfig) -> LossReport:
    active = record["epoch"] < cfg.sr_cutoff_epoch and not math.isinf(cfg.cycle_weight)
    return LossReport(record["l_ch"], record["l_cy2"], record["l_cy3"], record["l_sr"],
                      record["l_total"], active, cfg.cycle_weight)


__all__ = [
    "AdamState", "KnnGraph", "TrainConfig", "TrainingState", "build_knn_graph", "chamfer_matrix",
    "init_state", "parameter_shapes", "prepare_triplet", "sample_triplet", "train", "train_epoch",
]
