"""Parametric labelled shapes built from axis-aligned boxes.

Each family is a union of boxes tagged with a part id. Points are drawn
uniformly over the union of box surfaces (faces chosen with probability
proportional to their area), so the expected share of each part equals its
share of the total box surface area. Z is up.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import LabeledCloud, normalize_bbox

FAMILIES = {
    "table": ("top", "leg"),
    "lamp": ("base", "pole", "shade"),
    "chair": ("seat", "back", "leg"),
}

# parameter ranges, all lengths in arbitrary units before normalisation
DEFAULT_RANGES = {
    "table": {
        "top_width": (1.2, 2.2), "top_depth": (0.7, 1.4), "top_thickness": (0.04, 0.12),
        "leg_height": (0.6, 1.2), "leg_thickness": (0.05, 0.14), "leg_inset": (0.0, 0.15),
    },
    "lamp": {
        "base_width": (0.4, 0.9), "base_height": (0.04, 0.12), "pole_height": (0.6, 1.6),
        "pole_thickness": (0.03, 0.08), "shade_width": (0.4, 1.0), "shade_height": (0.25, 0.7),
    },
    "chair": {
        "seat_width": (0.8, 1.2), "seat_depth": (0.8, 1.2), "seat_thickness": (0.05, 0.12),
        "back_height": (0.6, 1.2), "back_thickness": (0.05, 0.12), "leg_height": (0.6, 1.0),
        "leg_thickness": (0.05, 0.12),
    },
}


@dataclass
class SynthSpec:
    family: str = "table"
    count: int = 200
    seed: int = 0
    points_per_shape: int = 2048
    ranges: dict = field(default_factory=dict)  # overrides of DEFAULT_RANGES entries
    leg_counts: tuple = (3, 4)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {sorted(FAMILIES)}")
        if self.count < 1 or self.points_per_shape < 1:
            raise ValueError("count and points_per_shape must be positive")
        known = DEFAULT_RANGES[self.family]
        for key, (lo, hi) in self.ranges.items():
            if key not in known:
                raise ValueError(f"unknown {self.family} parameter {key!r}")
            if not 0 <= lo <= hi:
                raise ValueError(f"bad range for {key}: ({lo}, {hi})")
        if not set(self.leg_counts) <= {3, 4}:
            raise ValueError("leg counts must be 3 or 4")

    @property
    def num_parts(self) -> int:
        return len(FAMILIES[self.family])

    def resolved_ranges(self) -> dict:
        return {**DEFAULT_RANGES[self.family], **{k: tuple(v) for k, v in self.ranges.items()}}


def _box(center, size, part):
    return np.asarray(center, float), np.asarray(size, float), part


def _leg_positions(count, half_w, half_d):
    corners = [(-half_w, -half_d), (half_w, -half_d), (half_w, half_d), (-half_w, half_d)]
    if count == 4:
        return corners
    # tripod: both front corners and the middle of the back edge
    return corners[:2] + [(0.0, half_d)]


def table_boxes(p: dict, legs: int) -> list:
    top_z = p["leg_height"] + p["top_thickness"] / 2
    boxes = [_box((0, 0, top_z), (p["top_width"], p["top_depth"], p["top_thickness"]), 0)]
    hw = p["top_width"] / 2 - p["leg_inset"] - p["leg_thickness"] / 2
    hd = p["top_depth"] / 2 - p["leg_inset"] - p["leg_thickness"] / 2
    for x, y in _leg_positions(legs, max(hw, 0.0), max(hd, 0.0)):
        boxes.append(_box((x, y, p["leg_height"] / 2),
                          (p["leg_thickness"], p["leg_thickness"], p["leg_height"]), 1))
    return boxes


def lamp_boxes(p: dict, legs: int) -> list:
    bh, ph = p["base_height"], p["pole_height"]
    return [
        _box((0, 0, bh / 2), (p["base_width"], p["base_width"], bh), 0),
        _box((0, 0, bh + ph / 2), (p["pole_thickness"], p["pole_thickness"], ph), 1),
        _box((0, 0, bh + ph + p["shade_height"] / 2),
             (p["shade_width"], p["shade_width"], p["shade_height"]), 2),
    ]


def chair_boxes(p: dict, legs: int) -> list:
    lh, st = p["leg_height"], p["seat_thickness"]
    w, d = p["seat_width"], p["seat_depth"]
    boxes = [_box((0, 0, lh + st / 2), (w, d, st), 0)]
    bt, bh = p["back_thickness"], p["back_height"]
    boxes.append(_box((0, d / 2 - bt / 2, lh + st + bh / 2), (w, bt, bh), 1))
    lt = p["leg_thickness"]
    for x, y in _leg_positions(legs, w / 2 - lt / 2, d / 2 - lt / 2):
        boxes.append(_box((x, y, lh / 2), (lt, lt, lh), 2))
    return boxes


BUILDERS = {"table": table_boxes, "lamp": lamp_boxes, "chair": chair_boxes}


def _faces(boxes):
    """Every box face as (origin, edge_u, edge_v, part)."""
    faces = []
    for center, size, part in boxes:
        lo = center - size / 2
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            eu = np.zeros(3)
            ev = np.zeros(3)
            eu[u], ev[v] = size[u], size[v]
            for side in (0.0, 1.0):
                origin = lo.copy()
                origin[axis] += side * size[axis]
                faces.append((origin, eu, ev, part))
    return faces


def part_areas(boxes, num_parts: int) -> np.ndarray:
    """Total box surface area per part."""
    areas = np.zeros(num_parts)
    for _, size, part in boxes:
        x, y, z = size
        areas[part] += 2 * (x * y + y * z + x * z)
    return areas


def sample_boxes(boxes, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    faces = _faces(boxes)
    area = np.array([np.linalg.norm(np.cross(eu, ev)) for _, eu, ev, _ in faces])
    pick = rng.choice(len(faces), size=n, p=area / area.sum())
    origin = np.array([f[0] for f in faces])[pick]
    eu = np.array([f[1] for f in faces])[pick]
    ev = np.array([f[2] for f in faces])[pick]
    uv = rng.random((n, 2))
    points = origin + uv[:, :1] * eu + uv[:, 1:] * ev
    labels = np.array([f[3] for f in faces], dtype=np.int64)[pick]
    return points, labels


def sample_parameters(spec: SynthSpec, rng: np.random.Generator) -> tuple[dict, int]:
    params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in spec.resolved_ranges().items()}
    legs = int(rng.choice(spec.leg_counts))
    return params, legs


def generate_synthetic(spec: SynthSpec) -> list[LabeledCloud]:
    """``spec.count`` normalised labelled shapes; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    shapes = []
    for i in range(spec.count):
        params, legs = sample_parameters(spec, rng)
        boxes = BUILDERS[spec.family](params, legs)
        points, labels = sample_boxes(boxes, spec.points_per_shape, rng)
        shapes.append(LabeledCloud(normalize_bbox(points), labels, spec.num_parts, f"{spec.family}_{i:04d}"))
    return shapes
