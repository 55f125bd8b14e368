"""Sketch-and-extrude model types, quantization, normalization and validation.

A :class:`CadModel` is an ordered list of parts, each a 2-D :class:`Sketch`
swept by an :class:`Extrusion`.  Sketch coordinates live in the sketch plane;
the extrusion places that plane in space::

    world = tau + sigma * (u * R[:, 0] + v * R[:, 1]) + h * R[:, 2]

with ``R = Rz(theta) @ Ry(phi) @ Rz(gamma)`` and ``h`` the height along the
plane normal, ``-d_neg <= h <= d_pos``.

Continuous parameters are quantized to 8 bits.  Each field is first mapped
linearly onto [0, 1]:

=============  ===============  ==========
field          source range     note
=============  ===============  ==========
coordinates    [0, 1]           after normalization
theta/phi/gam  [-pi, pi]
tau            [-1, 1]
sigma          [0, 2]           clamped
d_pos/d_neg    [0, 1]
=============  ===============  ==========
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Union

import numpy as np

from .errors import DegenerateInput, OutOfRange

QUANT_LEVELS = 255
COORD_TOKEN_MIN = 11
COORD_TOKEN_MAX = COORD_TOKEN_MIN + QUANT_LEVELS

ANGLE_RANGE = (-math.pi, math.pi)
TAU_RANGE = (-1.0, 1.0)
SIGMA_RANGE = (0.0, 2.0)
DEPTH_RANGE = (0.0, 1.0)

_QUANT_TOL = 1e-9
_GEOM_TOL = 1e-9


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def __iter__(self):
        yield self.x
        yield self.y

    def __sub__(self, other: Point2D) -> Point2D:
        return Point2D(self.x - other.x, self.y - other.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


def _cross(a: Point2D, b: Point2D) -> float:
    return a.x * b.y - a.y * b.x


def _dist(a: Point2D, b: Point2D) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass(frozen=True)
class Line:
    start: Point2D
    end: Point2D

    kind = "line"

    @property
    def points(self) -> tuple[Point2D, ...]:
        return (self.start, self.end)

    def length(self) -> float:
        return _dist(self.start, self.end)

    def reversed(self) -> Line:
        return Line(self.end, self.start)


@dataclass(frozen=True)
class Arc:
    """Circular arc through ``start``, ``mid`` and ``end`` (in that order)."""

    start: Point2D
    mid: Point2D
    end: Point2D

    kind = "arc"

    @property
    def points(self) -> tuple[Point2D, ...]:
        return (self.start, self.mid, self.end)

    def reversed(self) -> Arc:
        return Arc(self.end, self.mid, self.start)

    def circle(self) -> tuple[Point2D, float, float, float]:
        """Return ``(center, radius, start_angle, signed_sweep)``."""
        s, m, e = self.start, self.mid, self.end
        d = 2.0 * (s.x * (m.y - e.y) + m.x * (e.y - s.y) + e.x * (s.y - m.y))
        if d == 0.0:
            raise DegenerateInput("collinear arc")
        s2, m2, e2 = s.x**2 + s.y**2, m.x**2 + m.y**2, e.x**2 + e.y**2
        cx = (s2 * (m.y - e.y) + m2 * (e.y - s.y) + e2 * (s.y - m.y)) / d
        cy = (s2 * (e.x - m.x) + m2 * (s.x - e.x) + e2 * (m.x - s.x)) / d
        r = math.hypot(s.x - cx, s.y - cy)
        a0 = math.atan2(s.y - cy, s.x - cx)
        a2 = math.atan2(e.y - cy, e.x - cx)
        if _cross(m - s, e - s) > 0:
            sweep = (a2 - a0) % (2 * math.pi)
        else:
            sweep = -((a0 - a2) % (2 * math.pi))
        return Point2D(cx, cy), r, a0, sweep

    def length(self) -> float:
        _, r, _, sweep = self.circle()
        return r * abs(sweep)


@dataclass(frozen=True)
class Circle:
    """Full circle given by its center and its top-most point."""

    center: Point2D
    top: Point2D

    kind = "circle"

    @property
    def points(self) -> tuple[Point2D, ...]:
        return (self.center, self.top)

    @property
    def radius(self) -> float:
        return _dist(self.center, self.top)

    @classmethod
    def from_radius(cls, center: Point2D, radius: float) -> Circle:
        return cls(center, Point2D(center.x, center.y + radius))

    def length(self) -> float:
        return 2 * math.pi * self.radius


Curve = Union[Line, Arc, Circle]


def curve_start(c: Curve) -> Point2D:
    return c.top if isinstance(c, Circle) else c.start


def curve_end(c: Curve) -> Point2D:
    return c.top if isinstance(c, Circle) else c.end


@dataclass(frozen=True)
class Loop:
    curves: tuple[Curve, ...]

    def __post_init__(self):
        object.__setattr__(self, "curves", tuple(self.curves))

    @property
    def is_circle(self) -> bool:
        return len(self.curves) == 1 and isinstance(self.curves[0], Circle)


@dataclass(frozen=True)
class Face:
    outer: Loop
    holes: tuple[Loop, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "holes", tuple(self.holes))

    @property
    def loops(self) -> tuple[Loop, ...]:
        return (self.outer, *self.holes)


@dataclass(frozen=True)
class Sketch:
    faces: tuple[Face, ...]

    def __post_init__(self):
        object.__setattr__(self, "faces", tuple(self.faces))

    @property
    def loops(self) -> tuple[Loop, ...]:
        return tuple(lp for f in self.faces for lp in f.loops)

    @property
    def curves(self) -> tuple[Curve, ...]:
        return tuple(c for lp in self.loops for c in lp.curves)


class BooleanOp(Enum):
    NEW = "New"
    CUT = "Cut"
    JOIN = "Join"
    INTERSECT = "Intersect"

    @property
    def token(self) -> int:
        return 7 + list(BooleanOp).index(self)

    @classmethod
    def from_token(cls, value: int) -> BooleanOp:
        return list(cls)[value - 7]


@dataclass(frozen=True)
class Extrusion:
    theta: float
    phi: float
    gamma: float
    tau: tuple[float, float, float]
    sigma: float
    d_pos: float
    d_neg: float
    boolean_op: BooleanOp = BooleanOp.NEW

    def __post_init__(self):
        object.__setattr__(self, "tau", tuple(float(t) for t in self.tau))

    def params(self) -> tuple[float, ...]:
        """The nine numeric parameters in token order."""
        return (self.d_pos, self.d_neg, *self.tau, self.theta, self.phi, self.gamma, self.sigma)


@dataclass(frozen=True)
class Part:
    sketch: Sketch
    extrusion: Extrusion


@dataclass(frozen=True)
class CadModel:
    parts: tuple[Part, ...]

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))


class Reason(str, Enum):
    DegenerateLine = "DegenerateLine"
    DegenerateArc = "DegenerateArc"
    DegenerateCircle = "DegenerateCircle"
    OpenLoop = "OpenLoop"
    ZeroExtrusion = "ZeroExtrusion"
    ZeroScale = "ZeroScale"
    EmptySketch = "EmptySketch"
    MalformedStructure = "MalformedStructure"


@dataclass(frozen=True)
class ValidityReport:
    reasons: tuple[Reason, ...] = field(default_factory=tuple)

    @property
    def valid(self) -> bool:
        return not self.reasons


# -- quantization -----------------------------------------------------------


def quantize(v: float) -> int:
    """Map ``v`` in [0, 1] to a token value in [11, 266] (round half up)."""
    if not (-_QUANT_TOL <= v <= 1.0 + _QUANT_TOL) or math.isnan(v):
        raise OutOfRange(f"{v!r} outside [0, 1]")
    v = min(max(v, 0.0), 1.0)
    return int(math.floor(v * QUANT_LEVELS + 0.5)) + COORD_TOKEN_MIN


def dequantize(q: int) -> float:
    if not COORD_TOKEN_MIN <= q <= COORD_TOKEN_MAX:
        raise OutOfRange(f"token value {q!r} outside [{COORD_TOKEN_MIN}, {COORD_TOKEN_MAX}]")
    return (q - COORD_TOKEN_MIN) / QUANT_LEVELS


def quantize_param(v: float, lo: float, hi: float, clamp: bool = False) -> int:
    u = (v - lo) / (hi - lo)
    if clamp:
        u = min(max(u, 0.0), 1.0)
    return quantize(u)


def dequantize_param(q: int, lo: float, hi: float) -> float:
    return lo + (hi - lo) * dequantize(q)


def extrusion_tokens(ex: Extrusion) -> list[int]:
    """Quantized values of the nine numeric extrusion parameters, token order."""
    return [
        quantize_param(ex.d_pos, *DEPTH_RANGE),
        quantize_param(ex.d_neg, *DEPTH_RANGE),
        *(quantize_param(t, *TAU_RANGE) for t in ex.tau),
        quantize_param(ex.theta, *ANGLE_RANGE),
        quantize_param(ex.phi, *ANGLE_RANGE),
        quantize_param(ex.gamma, *ANGLE_RANGE),
        quantize_param(ex.sigma, *SIGMA_RANGE, clamp=True),
    ]


def extrusion_from_tokens(values: list[int], op: BooleanOp) -> Extrusion:
    dp, dn, tx, ty, tz, th, ph, ga, sg = values
    return Extrusion(
        theta=dequantize_param(th, *ANGLE_RANGE),
        phi=dequantize_param(ph, *ANGLE_RANGE),
        gamma=dequantize_param(ga, *ANGLE_RANGE),
        tau=tuple(dequantize_param(t, *TAU_RANGE) for t in (tx, ty, tz)),
        sigma=dequantize_param(sg, *SIGMA_RANGE),
        d_pos=dequantize_param(dp, *DEPTH_RANGE),
        d_neg=dequantize_param(dn, *DEPTH_RANGE),
        boolean_op=op,
    )


def _snap(v: float) -> float:
    return dequantize(quantize(v))


def _snap_point(p: Point2D) -> Point2D:
    return Point2D(_snap(p.x), _snap(p.y))


def _map_curve(c: Curve, fn) -> Curve:
    return type(c)(*(fn(p) for p in c.points))


def map_points(model: CadModel, fn) -> CadModel:
    """Apply ``fn`` to every sketch coordinate of ``model``."""

    def loop(lp: Loop) -> Loop:
        return Loop(tuple(_map_curve(c, fn) for c in lp.curves))

    parts = []
    for part in model.parts:
        faces = tuple(Face(loop(f.outer), tuple(loop(h) for h in f.holes)) for f in part.sketch.faces)
        parts.append(Part(Sketch(faces), part.extrusion))
    return CadModel(tuple(parts))


def quantize_model(model: CadModel) -> CadModel:
    """Snap every field to its 8-bit grid value.

    The result is a fixed point: encoding and decoding it is lossless.
    """
    snapped = map_points(model, _snap_point)
    parts = []
    for part in snapped.parts:
        ex = extrusion_from_tokens(extrusion_tokens(part.extrusion), part.extrusion.boolean_op)
        parts.append(Part(part.sketch, ex))
    return CadModel(tuple(parts))


# -- geometry helpers -------------------------------------------------------


def curve_bbox(c: Curve) -> tuple[float, float, float, float]:
    """Tight axis-aligned bounds ``(xmin, ymin, xmax, ymax)`` of the curve."""
    if isinstance(c, Line):
        xs, ys = (c.start.x, c.end.x), (c.start.y, c.end.y)
        return min(xs), min(ys), max(xs), max(ys)
    if isinstance(c, Circle):
        r = c.radius
        return c.center.x - r, c.center.y - r, c.center.x + r, c.center.y + r
    try:
        center, r, a0, sweep = c.circle()
    except DegenerateInput:
        xs = [p.x for p in c.points]
        ys = [p.y for p in c.points]
        return min(xs), min(ys), max(xs), max(ys)
    xs = [c.start.x, c.end.x]
    ys = [c.start.y, c.end.y]
    lo, hi = (a0, a0 + sweep) if sweep >= 0 else (a0 + sweep, a0)
    for k in range(-4, 5):
        a = k * math.pi / 2
        if lo < a < hi:
            xs.append(center.x + r * math.cos(a))
            ys.append(center.y + r * math.sin(a))
    return min(xs), min(ys), max(xs), max(ys)


def sketch_bbox(sketch: Sketch) -> tuple[float, float, float, float]:
    boxes = [curve_bbox(c) for c in sketch.curves]
    if not boxes:
        raise DegenerateInput("empty sketch")
    b = np.array(boxes)
    return b[:, 0].min(), b[:, 1].min(), b[:, 2].max(), b[:, 3].max()


def rotation_matrix(theta: float, phi: float, gamma: float) -> np.ndarray:
    """``Rz(theta) @ Ry(phi) @ Rz(gamma)`` (z-y-z Euler convention)."""

    def rz(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    c, s = math.cos(phi), math.sin(phi)
    ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return rz(theta) @ ry @ rz(gamma)


def euler_from_rotation(rot: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_matrix`; gimbal-locked cases put all yaw in gamma."""
    rot = np.asarray(rot, dtype=float)
    cphi = min(max(rot[2, 2], -1.0), 1.0)
    phi = math.acos(cphi)
    if math.sin(phi) > 1e-9:
        theta = math.atan2(rot[1, 2], rot[0, 2])
        gamma = math.atan2(rot[2, 1], -rot[2, 0])
    elif cphi > 0:
        phi, theta = 0.0, 0.0
        gamma = math.atan2(rot[1, 0], rot[0, 0])
    else:
        phi, theta = math.pi, 0.0
        gamma = math.atan2(rot[1, 0], -rot[0, 0])
    return theta, phi, gamma


def part_corners(part: Part) -> np.ndarray:
    """World-space corners of the part's sketch bounding prism, shape (8, 3)."""
    ex = part.extrusion
    x0, y0, x1, y1 = sketch_bbox(part.sketch)
    rot = rotation_matrix(ex.theta, ex.phi, ex.gamma)
    pts = []
    for u in (x0, x1):
        for v in (y0, y1):
            for h in (-ex.d_neg, ex.d_pos):
                pts.append(np.asarray(ex.tau) + ex.sigma * (u * rot[:, 0] + v * rot[:, 1]) + h * rot[:, 2])
    return np.array(pts)


def model_bbox(model: CadModel) -> tuple[np.ndarray, np.ndarray]:
    corners = np.concatenate([part_corners(p) for p in model.parts])
    return corners.min(axis=0), corners.max(axis=0)


# -- normalization ----------------------------------------------------------


def normalize_sketches(model: CadModel) -> CadModel:
    """Move each sketch so its bounding box starts at the origin and its larger side is 1.

    The removed offset is folded into ``tau`` and the removed scale into
    ``sigma`` so the solid does not move.
    """
    parts = []
    for part in model.parts:
        x0, y0, x1, y1 = sketch_bbox(part.sketch)
        extent = max(x1 - x0, y1 - y0)
        if extent <= _GEOM_TOL:
            raise DegenerateInput("sketch has zero extent in both axes")
        sk = map_points(CadModel((part,)), lambda p: Point2D((p.x - x0) / extent, (p.y - y0) / extent))
        ex = part.extrusion
        rot = rotation_matrix(ex.theta, ex.phi, ex.gamma)
        tau = np.asarray(ex.tau) + ex.sigma * (x0 * rot[:, 0] + y0 * rot[:, 1])
        ex = replace(ex, tau=tuple(tau), sigma=ex.sigma * extent)
        parts.append(Part(sk.parts[0].sketch, ex))
    return CadModel(tuple(parts))


def normalize_model(model: CadModel) -> CadModel:
    """Normalize sketches, then scale and center the whole model into the unit cube.

    After this the union of the parts' bounding prisms has its largest side
    equal to 1 and is centered at ``(0.5, 0.5, 0.5)``.
    """
    if not model.parts:
        raise DegenerateInput("model has no parts")
    model = normalize_sketches(model)
    lo, hi = model_bbox(model)
    size = float((hi - lo).max())
    if size <= _GEOM_TOL:
        raise DegenerateInput("model has zero extent")
    center = (lo + hi) / 2
    scale = 1.0 / size
    parts = []
    for part in model.parts:
        ex = part.extrusion
        tau = (np.asarray(ex.tau) - center) * scale + 0.5
        ex = replace(ex, tau=tuple(tau), sigma=ex.sigma * scale, d_pos=ex.d_pos * scale, d_neg=ex.d_neg * scale)
        parts.append(Part(part.sketch, ex))
    return CadModel(tuple(parts))


# -- validation -------------------------------------------------------------


def _finite(*vals: float) -> bool:
    return all(math.isfinite(v) for v in vals)


def _curve_reasons(c: Curve) -> list[Reason]:
    if not _finite(*(v for p in c.points for v in p)):
        return [Reason.MalformedStructure]
    if isinstance(c, Line):
        return [Reason.DegenerateLine] if _dist(c.start, c.end) <= _GEOM_TOL else []
    if isinstance(c, Arc):
        s, m, e = c.points
        chord = _dist(s, e)
        if min(chord, _dist(s, m), _dist(m, e)) <= _GEOM_TOL:
            return [Reason.DegenerateArc]
        if abs(_cross(m - s, e - s)) <= 1e-9 * chord**2:
            return [Reason.DegenerateArc]
        return []
    if c.radius <= _GEOM_TOL or abs(c.top.x - c.center.x) > _GEOM_TOL or c.top.y <= c.center.y:
        return [Reason.DegenerateCircle]
    return []


def _loop_reasons(lp: Loop) -> list[Reason]:
    if not lp.curves:
        return [Reason.MalformedStructure]
    circles = sum(isinstance(c, Circle) for c in lp.curves)
    if circles and len(lp.curves) > 1:
        return [Reason.MalformedStructure]
    reasons = [r for c in lp.curves for r in _curve_reasons(c)]
    if not circles:
        n = len(lp.curves)
        for k in range(n):
            if curve_end(lp.curves[k]) != curve_start(lp.curves[(k + 1) % n]):
                reasons.append(Reason.OpenLoop)
                break
    return reasons


def _face_reasons(face: Face) -> list[Reason]:
    reasons = [r for lp in face.loops for r in _loop_reasons(lp)]
    if reasons or not face.holes:
        return reasons
    from .geometry import holes_well_placed

    return [] if holes_well_placed(face) else [Reason.MalformedStructure]


def validate_model(model: CadModel) -> ValidityReport:
    """Every violated invariant, in traversal order."""
    reasons: list[Reason] = []
    if not model.parts:
        return ValidityReport((Reason.MalformedStructure,))
    for k, part in enumerate(model.parts):
        if not part.sketch.faces:
            reasons.append(Reason.EmptySketch)
        for face in part.sketch.faces:
            reasons.extend(_face_reasons(face))
        ex = part.extrusion
        if not _finite(ex.theta, ex.phi, ex.gamma, ex.sigma, ex.d_pos, ex.d_neg, *ex.tau):
            reasons.append(Reason.MalformedStructure)
            continue
        if ex.d_pos < 0 or ex.d_neg < 0 or ex.d_pos + ex.d_neg <= 0:
            reasons.append(Reason.ZeroExtrusion)
        if ex.sigma <= 0:
            reasons.append(Reason.ZeroScale)
        if k == 0 and ex.boolean_op is not BooleanOp.NEW:
            reasons.append(Reason.MalformedStructure)
    return ValidityReport(tuple(reasons))
