"""Finite-difference checks for every autodiff op and for the full training
loss on a small double-precision model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import AugmentationTransform, apply_augmentation, normalize_bbox
from .losses import TripletBatch, batch_losses
from .model import Model, ModelConfig

OP_TOL = 1e-6
LOSS_TOL = 1e-3
STEP = 1e-4
KINK_MARGIN = 1e-2


def _away_from_zero(rng, shape, margin=0.05):
    """Random values with |v| >= margin."""
    mag = rng.uniform(margin, 1.0, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _distinct_columns(rng, n, d, gap=KINK_MARGIN):
    """Random (n, d) matrix whose column maxima beat the runners-up by ``gap``."""
    while True:
        x = rng.standard_normal((n, d))
        top2 = np.sort(x, axis=0)[-2:]
        if n == 1 or (top2[1] - top2[0]).min() > gap:
            return x


def _readout(out: ad.Tensor, rng) -> ad.Tensor:
    """Scalar of an arbitrary tensor that depends on every entry nonlinearly."""
    c = rng.standard_normal(out.shape)
    return ad.sum_sq_norm(ad.sub(out, c))


def _pre_activation_ok(pre: np.ndarray) -> bool:
    return np.abs(pre).min() > KINK_MARGIN


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (f(tensors) -> scalar, params)."""
    cases = {}
    r = rng

    def add(name, f, params):
        cases[name] = (f, params)

    x45 = r.standard_normal((4, 5))
    W35 = r.standard_normal((3, 5))
    b3 = r.standard_normal(3)
    add("linear", lambda P: _readout(ad.linear(P["x"], P["W"], P["b"]), np.random.default_rng(1)),
        {"x": x45, "W": W35, "b": b3})
    while True:
        xr, Wr, br = r.standard_normal((4, 5)), r.standard_normal((3, 5)), r.standard_normal(3)
        if _pre_activation_ok(xr @ Wr.T + br):
            break
    add("linear_relu", lambda P: _readout(ad.linear(P["x"], P["W"], P["b"], relu=True), np.random.default_rng(2)),
        {"x": xr, "W": Wr, "b": br})
    add("hadamard_affine",
        lambda P: _readout(ad.hadamard_affine(P["x"], P["s"], P["b"]), np.random.default_rng(3)),
        {"x": r.standard_normal((2, 4, 3)), "s": r.standard_normal((2, 3)), "b": r.standard_normal((2, 3))})
    add("modulated_linear",
        lambda P: _readout(ad.modulated_linear(P["x"], P["s"], P["b"], P["W"]), np.random.default_rng(4)),
        {"x": r.standard_normal((2, 4, 3)), "s": r.standard_normal((2, 3)), "b": r.standard_normal((2, 3)),
         "W": r.standard_normal((5, 3))})
    while True:
        p = {"x": r.standard_normal((2, 4, 3)), "s": r.standard_normal((2, 3)),
             "b": r.standard_normal((2, 3)), "W": r.standard_normal((5, 3))}
        pre = np.einsum("bnd,bd,od->bno", p["x"], p["s"], p["W"]) + (p["b"] @ p["W"].T)[:, None, :]
        if _pre_activation_ok(pre):
            break
    add("modulated_linear_relu",
        lambda P: _readout(ad.modulated_linear(P["x"], P["s"], P["b"], P["W"], relu=True), np.random.default_rng(5)),
        p)
    add("relu", lambda P: _readout(ad.relu(P["x"]), np.random.default_rng(6)), {"x": _away_from_zero(r, (4, 3))})
    add("tanh_act", lambda P: _readout(ad.tanh_act(P["x"]), np.random.default_rng(7)), {"x": r.standard_normal((4, 3))})
    add("max_pool_points", lambda P: _readout(ad.max_pool_points(P["x"]), np.random.default_rng(8)),
        {"x": _distinct_columns(r, 6, 4)})
    while True:
        xm, Wm, bm = r.standard_normal((2, 6, 3)), r.standard_normal((4, 3)), r.standard_normal(4)
        pre = xm @ Wm.T + bm
        top2 = np.sort(pre, axis=1)[:, -2:, :]
        if (top2[:, 1] - top2[:, 0]).min() > KINK_MARGIN:
            break
    add("linear_max_pool", lambda P: _readout(ad.linear_max_pool(P["x"], P["W"], P["b"]), np.random.default_rng(9)),
        {"x": xm, "W": Wm, "b": bm})
    add("concat", lambda P: _readout(ad.concat([P["a"], P["b"]]), np.random.default_rng(10)),
        {"a": r.standard_normal((3, 2)), "b": r.standard_normal((3, 4))})
    add("slice_last", lambda P: _readout(ad.slice_last(P["x"], 1, 4), np.random.default_rng(11)),
        {"x": r.standard_normal((3, 5))})
    add("reshape", lambda P: _readout(ad.reshape(P["x"], (6, 2)), np.random.default_rng(12)),
        {"x": r.standard_normal((3, 4))})
    add("add_sub_scale",
        lambda P: _readout(ad.scale(ad.sub(ad.add(P["a"], P["b"]), P["c"]), -1.7), np.random.default_rng(13)),
        {"a": r.standard_normal((3, 2)), "b": r.standard_normal((3, 2)), "c": r.standard_normal((3, 2))})
    add("total", lambda P: ad.total(ad.tanh_act(P["x"])), {"x": r.standard_normal((4, 3))})
    add("mean", lambda P: _readout(ad.mean(P["x"], axis=0), np.random.default_rng(14)),
        {"x": r.standard_normal((5, 3))})
    add("sum_sq_norm", lambda P: ad.sum_sq_norm(P["x"]), {"x": r.standard_normal((4, 3))})
    add("euclid_norm_rows", lambda P: _readout(ad.euclid_norm_rows(P["x"]), np.random.default_rng(15)),
        {"x": r.standard_normal((8, 3))})
    idx = np.array([2, 0, 2, 1, 3])
    add("take_rows", lambda P: _readout(ad.take_rows(P["x"], idx), np.random.default_rng(16)),
        {"x": r.standard_normal((4, 3))})
    return cases


def gather_rows_is_blocked(seed: int = 0) -> bool:
    """``gather_rows`` must add exactly nothing to upstream gradients."""
    x = np.random.default_rng(seed).standard_normal((4, 3))
    with ad.Tape() as tape:
        leaf = tape.watch(x)
        out = ad.add(ad.sum_sq_norm(leaf), ad.sum_sq_norm(ad.gather_rows(ad.scale(leaf, 3.0), [2, 0, 2])))
    tape.backward(out)
    return bool(np.array_equal(leaf.grad, 2 * x))


def run_op_checks(seed: int = 0, tol: float = OP_TOL) -> dict:
    rng = np.random.default_rng(seed)
    return {name: ad.grad_check(f, params, h=STEP, tol_rel=tol)
            for name, (f, params) in op_cases(rng).items()}


def toy_triplet(rng: np.random.Generator, n_points: int = 64):
    """Three random bbox-normalised clouds plus self-reconstruction targets."""
    clouds = np.stack([normalize_bbox(rng.uniform(-1, 1, (n_points, 3)) * rng.uniform(0.3, 1.0, 3))
                       for _ in range(3)])
    psis = [AugmentationTransform.sample(rng, translate=False) for _ in range(3)]
    targets = np.stack([apply_augmentation(c, psi) for c, psi in zip(clouds, psis)])
    return TripletBatch(clouds[None], targets[None])


def run_loss_check(seed: int = 0, n_points: int = 64, width: int = 16, max_entries: int = 100,
                   tol: float = LOSS_TOL, epoch: int = 0) -> ad.GradCheckReport:
    """Gradient of the summed training objective with respect to every model
    parameter, with nearest-neighbour choices frozen at the base point."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig((width, width, width), width, width, 7)
    model = Model(cfg, seed=seed, dtype=np.float64)
    batch = toy_triplet(rng, n_points)
    cache: dict = {}

    def f(P):
        total, _ = batch_losses(model, batch, epoch=epoch, sr_cutoff=30, cycle_weight=1.0, P=P, nn_cache=cache)
        return total

    # populate the cache at the unperturbed parameters
    f(model.tensors())
    return ad.grad_check(f, model.params, h=STEP, tol_rel=tol, max_entries=max_entries,
                         rng=np.random.default_rng(seed + 1), freeze_branches=True)


@dataclass
class SuiteResult:
    ops: dict
    gather_blocked: bool
    loss: ad.GradCheckReport
    seconds: float
    lines: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.ops.values()) and self.gather_blocked and self.loss.passed


def run_suite(seed: int = 0, n_points: int = 64, width: int = 16, max_entries: int = 100) -> SuiteResult:
    t0 = time.perf_counter()
    ops = run_op_checks(seed)
    blocked = gather_rows_is_blocked(seed)
    loss = run_loss_check(seed, n_points, width, max_entries)
    result = SuiteResult(ops, blocked, loss, time.perf_counter() - t0)
    for name, rep in ops.items():
        result.lines.append(f"{'PASS' if rep.passed else 'FAIL'} op {name}: {rep.summary()}")
    result.lines.append(f"{'PASS' if blocked else 'FAIL'} op gather_rows: zero upstream gradient")
    result.lines.append(f"{'PASS' if loss.passed else 'FAIL'} full loss: {loss.summary()}")
    return result
