"""Pairwise deformation model f_{A,B}.

Two independent PointNet trunks encode the source (slot A) and target
(slot B). An MLP maps the concatenated codes to per-pair scale/bias vectors
that condition a stack of fully-connected deformation modules shared by all
pairs::

    x_k = act_k(W_k (s_k * x_{k-1} + b_k)),   act = relu for k < K, tanh for k = K
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch


@dataclass(frozen=True)
class ModelConfig:
    enc_widths: tuple = (64, 128, 512)
    pred_hidden: int = 512
    deform_width: int = 64
    num_modules: int = 7

    def __post_init__(self):
        object.__setattr__(self, "enc_widths", tuple(int(w) for w in self.enc_widths))
        if self.num_modules < 2:
            raise ValueError("need at least two deformation modules")

    @property
    def code_size(self) -> int:
        return self.enc_widths[-1]

    @property
    def module_dims(self) -> list[tuple[int, int]]:
        """(input, output) width of each deformation module."""
        w = self.deform_width
        dims = [(3, w)] + [(w, w)] * (self.num_modules - 2) + [(w, 3)]
        return dims

    @property
    def pair_param_count(self) -> int:
        return sum(2 * d_in for d_in, _ in self.module_dims)

    def descriptor(self) -> list[int]:
        """Flat integer description of every layer size, stored in checkpoints."""
        return [
            len(self.enc_widths), *self.enc_widths,
            self.pred_hidden, self.deform_width, self.num_modules,
        ]

    @classmethod
    def from_descriptor(cls, desc) -> "ModelConfig":
        desc = [int(v) for v in desc]
        n = desc[0]
        if len(desc) != n + 4:
            raise ValueError(f"bad architecture descriptor {desc}")
        return cls(tuple(desc[1:1 + n]), desc[n + 1], desc[n + 2], desc[n + 3])

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_CONFIG = ModelConfig()


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Every learnable array, in the fixed declaration order used for
    optimisation and serialisation."""
    shapes = []
    for slot in ("encA", "encB"):
        d_in = 3
        for i, w in enumerate(cfg.enc_widths):
            shapes.append((f"{slot}.W{i}", (w, d_in)))
            shapes.append((f"{slot}.b{i}", (w,)))
            d_in = w
    shapes.append(("pred.W0", (cfg.pred_hidden, 2 * cfg.code_size)))
    shapes.append(("pred.b0", (cfg.pred_hidden,)))
    shapes.append(("pred.W1", (cfg.pair_param_count, cfg.pred_hidden)))
    shapes.append(("pred.b1", (cfg.pair_param_count,)))
    for k, (d_in, d_out) in enumerate(cfg.module_dims, start=1):
        shapes.append((f"deform.W{k}", (d_out, d_in)))
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-balanced uniform matrices and zero biases, except that the
    predictor's output bias puts every scale s_k at 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg):
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    # predicted scales start at 1: with zero-centred scales the modulated
    # stack attenuates its input to a constant within a few modules
    at = 0
    for d_in, _ in cfg.module_dims:
        params["pred.b1"][at:at + d_in] = 1
        at += 2 * d_in
    return params


def encode(P: dict, slot: str, points, depth: int) -> ad.Tensor:
    """PointNet code of ``points`` (``(..., n, 3)``) with encoder ``slot``."""
    x = points
    for i in range(depth - 1):
        x = ad.linear(x, P[f"{slot}.W{i}"], P[f"{slot}.b{i}"], relu=True)
    # relu commutes with the column max, so pooling first is exact
    last = depth - 1
    return ad.relu(ad.linear_max_pool(x, P[f"{slot}.W{last}"], P[f"{slot}.b{last}"]))


def predict_params(P: dict, code_a, code_b) -> ad.Tensor:
    h = ad.linear(ad.concat([code_a, code_b]), P["pred.W0"], P["pred.b0"], relu=True)
    return ad.linear(h, P["pred.W1"], P["pred.b1"])


def split_pair_params(cfg: ModelConfig, flat) -> list[tuple[ad.Tensor, ad.Tensor]]:
    """Cut the flat predictor output into ``[(s_1, b_1), ..., (s_K, b_K)]``."""
    if flat.shape[-1] != cfg.pair_param_count:
        raise ShapeMismatch(f"expected {cfg.pair_param_count} pair parameters, got {flat.shape[-1]}")
    out, at = [], 0
    for d_in, _ in cfg.module_dims:
        s = ad.slice_last(flat, at, at + d_in)
        b = ad.slice_last(flat, at + d_in, at + 2 * d_in)
        out.append((s, b))
        at += 2 * d_in
    return out


def deform(cfg: ModelConfig, P: dict, pair_params, points) -> ad.Tensor:
    """Move ``points`` (``(..., n, 3)``) with the modules conditioned on
    ``pair_params`` (``(..., P)``, same leading dims)."""
    x = ad.as_tensor(points)
    if x.shape[-1] != 3:
        raise ShapeMismatch(f"deform expects 3D points, got {x.shape}")
    modules = split_pair_params(cfg, pair_params)
    last = len(modules)
    batched = x.value.ndim == 3 and pair_params.value.ndim == 2
    for k, (s, b) in enumerate(modules, start=1):
        hidden = k < last
        if batched:
            x = ad.modulated_linear(x, s, b, P[f"deform.W{k}"], relu=hidden)
        else:
            x = ad.linear(ad.hadamard_affine(x, s, b), P[f"deform.W{k}"], relu=hidden)
    return ad.tanh_act(x)


class Model:
    """Learnable map f_{source,target}; weights live in ``params``."""

    def __init__(self, cfg: ModelConfig = DEFAULT_CONFIG, seed: int = 0, dtype=np.float32,
                 params: dict | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(cfg, seed, self.dtype)
        expected = parameter_shapes(cfg)
        if [k for k, _ in expected] != list(self.params):
            raise ShapeMismatch("parameter names do not match the architecture")
        for name, shape in expected:
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"{name}: {self.params[name].shape} != {shape}")

    def tensors(self, tape: ad.Tape | None = None) -> dict[str, ad.Tensor]:
        if tape is None:
            return {k: ad.Tensor(v) for k, v in self.params.items()}
        return {k: tape.watch(v) for k, v in self.params.items()}

    def _P(self, P):
        return self.tensors() if P is None else P

    def _points(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=self.dtype)

    def encode(self, points, slot: str = "encA", P=None) -> ad.Tensor:
        return encode(self._P(P), slot, self._points(points), len(self.cfg.enc_widths))

    def predict_params(self, code_a, code_b, P=None) -> ad.Tensor:
        return predict_params(self._P(P), code_a, code_b)

    def deform(self, pair_params, points, P=None) -> ad.Tensor:
        return deform(self.cfg, self._P(P), pair_params, self._points(points))

    def map_points(self, source, target, points, P=None) -> ad.Tensor:
        """f_{source,target} evaluated at arbitrary ``points``."""
        P = self._P(P)
        flat = self.predict_params(self.encode(source, "encA", P), self.encode(target, "encB", P), P)
        return self.deform(flat, points, P)

    def map(self, source, target, P=None) -> ad.Tensor:
        """f_{source,target}(source); row i of the result is the image of source point i."""
        return self.map_points(source, target, source, P)

    def map_pairs(self, clouds, pairs, P=None) -> ad.Tensor:
        """Deform ``clouds[i]`` towards ``clouds[j]`` for every ``(i, j)`` in ``pairs``.

        ``clouds`` is ``(m, n, 3)``. Each cloud is encoded at most once per
        encoder slot. Returns ``(len(pairs), n, 3)``.
        """
        P = self._P(P)
        clouds = self._points(clouds)
        src = sorted({i for i, _ in pairs})
        tgt = sorted({j for _, j in pairs})
        code_a = self.encode(clouds[src], "encA", P)
        code_b = self.encode(clouds[tgt], "encB", P)
        ia = np.array([src.index(i) for i, _ in pairs])
        ib = np.array([tgt.index(j) for _, j in pairs])
        flat = self.predict_params(ad.take_rows(code_a, ia), ad.take_rows(code_b, ib), P)
        return self.deform(flat, clouds[[i for i, _ in pairs]], P)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


class IdentityMapper:
    """Stand-in for a model whose every map is the identity."""

    def map_points(self, source, target, points, P=None):
        return ad.Tensor(np.asarray(points, dtype=np.float64))

    def map(self, source, target, P=None):
        return self.map_points(source, target, source)

    def map_pairs(self, clouds, pairs, P=None):
        clouds = np.asarray(clouds, dtype=np.float64)
        return ad.Tensor(clouds[[i for i, _ in pairs]])
