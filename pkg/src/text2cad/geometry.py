"""Turning a CadModel into geometry.

Solids are never built as boundary representations.  Membership of a world
point is decided analytically, part by part, and the boolean operations are
folded left to right.  Point clouds come from a voxel grid over that
membership function, meshes from extruding tessellated profiles (booleans are
ignored there; meshes are only for looking at).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .cad import (
    Arc,
    BooleanOp,
    CadModel,
    Circle,
    Extrusion,
    Face,
    Line,
    Loop,
    Sketch,
    model_bbox,
    rotation_matrix,
)
from .errors import DegenerateInput, DegenerateLoop, EmptySolid, SelfIntersectingProfile

DEFAULT_CHORD_TOL = 1.0 / 512
DEFAULT_RESOLUTION = 64
DEFAULT_POINTS = 2048


@dataclass(frozen=True)
class PlaneFrame:
    rotation: np.ndarray
    origin: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[:, 2]


def plane_frame(ex: Extrusion) -> PlaneFrame:
    return PlaneFrame(rotation_matrix(ex.theta, ex.phi, ex.gamma), np.asarray(ex.tau, dtype=float))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray


@dataclass(frozen=True)
class VoxelGrid:
    resolution: int
    occupancy: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def pitch(self) -> np.ndarray:
        return (self.hi - self.lo) / self.resolution

    def centers(self, flat_index: np.ndarray) -> np.ndarray:
        ijk = np.stack(np.unravel_index(flat_index, self.occupancy.shape), axis=-1)
        return self.lo + (ijk + 0.5) * self.pitch


# -- curve evaluation -------------------------------------------------------


def _arc_params(arc: Arc) -> tuple[float, float, float, float, float]:
    try:
        center, r, a0, sweep = arc.circle()
    except DegenerateInput as exc:
        raise DegenerateLoop(str(exc)) from None
    return center.x, center.y, r, a0, sweep


def _curve_point(c, t: np.ndarray) -> np.ndarray:
    """Points at normalized arc-length parameters ``t`` in [0, 1]."""
    t = np.asarray(t, dtype=float)
    if isinstance(c, Line):
        s, e = c.start.as_array(), c.end.as_array()
        return s + t[:, None] * (e - s)
    if isinstance(c, Circle):
        cx, cy, r = c.center.x, c.center.y, c.radius
        a = math.pi / 2 + 2 * math.pi * t
    else:
        cx, cy, r, a0, sweep = _arc_params(c)
        a = a0 + sweep * t
    return np.stack([cx + r * np.cos(a), cy + r * np.sin(a)], axis=-1)


def sample_loop(loop: Loop, n: int) -> np.ndarray:
    """``n`` boundary points evenly spaced by arc length, shape ``(n, 2)``.

    Starts at the first curve's start (a circle's top point) and follows the
    curve order; circles run counterclockwise.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if not loop.curves:
        raise DegenerateLoop("empty loop")
    lengths = np.array([c.length() if not isinstance(c, Arc) else _arc_length(c) for c in loop.curves])
    total = lengths.sum()
    if not total > 0:
        raise DegenerateLoop("loop has zero length")
    s = np.arange(n) * (total / n)
    bounds = np.concatenate([[0.0], np.cumsum(lengths)])
    which = np.clip(np.searchsorted(bounds, s, side="right") - 1, 0, len(lengths) - 1)
    out = np.empty((n, 2))
    for k, c in enumerate(loop.curves):
        sel = which == k
        if sel.any():
            t = (s[sel] - bounds[k]) / lengths[k] if lengths[k] > 0 else np.zeros(sel.sum())
            out[sel] = _curve_point(c, t)
    return out


def _arc_length(arc: Arc) -> float:
    _, _, r, _, sweep = _arc_params(arc)
    return r * abs(sweep)


def _segments_for(r: float, sweep: float, chord_tol: float, segments: int | None, minimum: int) -> int:
    if segments is not None:
        return max(minimum, math.ceil(segments * abs(sweep) / (2 * math.pi) - 1e-9))
    if chord_tol >= r:
        step = math.pi / 2
    else:
        step = 2 * math.acos(1 - chord_tol / r)
    return max(minimum, math.ceil(abs(sweep) / step - 1e-9))


def loop_polyline(loop: Loop, chord_tol: float = DEFAULT_CHORD_TOL, segments: int | None = None) -> np.ndarray:
    """Closed polyline approximating the loop (no repeated closing vertex).

    Arcs and circles get enough segments that the sagitta stays below
    ``chord_tol``; ``segments`` instead fixes the count per full turn.
    """
    if loop.is_circle:
        c = loop.curves[0]
        n = _segments_for(c.radius, 2 * math.pi, chord_tol, segments, 8)
        return _curve_point(c, np.arange(n) / n)
    pts = []
    for c in loop.curves:
        if isinstance(c, Line):
            pts.append(c.start.as_array()[None])
        elif isinstance(c, Arc):
            _, _, r, _, sweep = _arc_params(c)
            n = _segments_for(r, sweep, chord_tol, segments, 2)
            pts.append(_curve_point(c, np.arange(n) / n))
        else:
            raise DegenerateLoop("circle inside a multi-curve loop")
    return np.concatenate(pts)


# -- point in region --------------------------------------------------------


def _line_crossings(x0, y0, x1, y1, px, py) -> np.ndarray:
    cond = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    return cond & (px < xi)


def _arc_crossings(arc: Arc, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    cx, cy, r, a0, sweep = _arc_params(arc)
    # split into y-monotone pieces at the top and bottom of the circle
    lo, hi = (a0, a0 + sweep) if sweep >= 0 else (a0 + sweep, a0)
    cuts = [k * math.pi + math.pi / 2 for k in range(-4, 5)]
    angles = [lo] + [a for a in cuts if lo < a < hi] + [hi]
    ends = {lo: (arc.start if sweep >= 0 else arc.end), hi: (arc.end if sweep >= 0 else arc.start)}
    count = np.zeros(px.shape, dtype=bool)
    for a, b in zip(angles[:-1], angles[1:]):
        ya = ends[a].y if a in ends else cy + r * math.sin(a)
        yb = ends[b].y if b in ends else cy + r * math.sin(b)
        side = 1.0 if math.cos((a + b) / 2) >= 0 else -1.0
        cond = (ya > py) != (yb > py)
        xi = cx + side * np.sqrt(np.maximum(r * r - (py - cy) ** 2, 0.0))
        count ^= cond & (px < xi)
    return count


def point_in_loop(loop: Loop, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Even-odd inside test against the exact curves (no polygon approximation)."""
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    if loop.is_circle:
        c = loop.curves[0]
        return (px - c.center.x) ** 2 + (py - c.center.y) ** 2 < c.radius**2
    inside = np.zeros(px.shape, dtype=bool)
    for c in loop.curves:
        if isinstance(c, Line):
            inside ^= _line_crossings(c.start.x, c.start.y, c.end.x, c.end.y, px, py)
        else:
            inside ^= _arc_crossings(c, px, py)
    return inside


def point_in_face(face: Face, px, py) -> np.ndarray:
    inside = point_in_loop(face.outer, px, py)
    for hole in face.holes:
        if inside.any():
            inside &= ~point_in_loop(hole, px, py)
    return inside


def point_in_sketch(sketch: Sketch, px, py) -> np.ndarray:
    px = np.asarray(px, dtype=float)
    inside = np.zeros(px.shape, dtype=bool)
    for face in sketch.faces:
        inside |= point_in_face(face, px, py)
    return inside


def holes_well_placed(face: Face, samples: int = 64) -> bool:
    """Holes strictly inside the outer loop and pairwise disjoint (checked on boundary samples)."""
    try:
        outer_pts = sample_loop(face.outer, samples)
        hole_pts = [sample_loop(h, samples) for h in face.holes]
    except DegenerateLoop:
        return False
    for k, (hole, pts) in enumerate(zip(face.holes, hole_pts)):
        if not point_in_loop(face.outer, pts[:, 0], pts[:, 1]).all():
            return False
        if point_in_loop(hole, outer_pts[:, 0], outer_pts[:, 1]).any():
            return False
        for j, other in enumerate(face.holes):
            if j != k and point_in_loop(other, pts[:, 0], pts[:, 1]).any():
                return False
    return True


# -- tessellation -----------------------------------------------------------


def _signed_area(p: np.ndarray) -> float:
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _dedupe(p: np.ndarray) -> np.ndarray:
    keep = np.any(np.abs(p - np.roll(p, 1, axis=0)) > 1e-12, axis=1)
    return p[keep]


def _check_simple(rings: list[np.ndarray]) -> None:
    """Raise if any two non-adjacent boundary segments intersect."""
    a = np.concatenate(rings)
    b = np.concatenate([np.roll(r, -1, axis=0) for r in rings])
    ring_id = np.concatenate([np.full(len(r), k) for k, r in enumerate(rings)])
    local = np.concatenate([np.arange(len(r)) for r in rings])
    sizes = np.array([len(r) for r in rings])[ring_id]

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    A, B = a[:, None], b[:, None]
    C, D = a[None, :], b[None, :]
    d1, d2 = orient(A, B, C), orient(A, B, D)
    d3, d4 = orient(C, D, A), orient(C, D, B)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)
    same = ring_id[:, None] == ring_id[None, :]
    gap = np.abs(local[:, None] - local[None, :])
    adjacent = same & ((gap <= 1) | (gap == sizes[:, None] - 1))
    if (proper & ~adjacent).any():
        raise SelfIntersectingProfile("profile boundary intersects itself")


def _bridge_holes(verts: np.ndarray, outer: list[int], holes: list[list[int]]) -> list[int]:
    ring = list(outer)
    order = sorted(holes, key=lambda h: -verts[h, 0].max())
    for hole in order:
        m_pos = int(np.argmax(verts[hole, 0]))
        m = hole[m_pos]
        mx, my = verts[m]
        best_x, best_edge = math.inf, None
        for i in range(len(ring)):
            a, b = verts[ring[i]], verts[ring[(i + 1) % len(ring)]]
            if a[1] == b[1] or not min(a[1], b[1]) <= my <= max(a[1], b[1]):
                continue
            xi = a[0] + (my - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if mx <= xi < best_x:
                best_x, best_edge = xi, i
        if best_edge is None:
            raise SelfIntersectingProfile("hole is not inside the outer loop")
        ia, ib = best_edge, (best_edge + 1) % len(ring)
        a, b = verts[ring[ia]], verts[ring[ib]]
        if a[1] == my and a[0] == best_x:
            ip = ia
        elif b[1] == my and b[0] == best_x:
            ip = ib
        else:
            ip = ia if a[0] >= b[0] else ib
            # a reflex vertex inside triangle (M, I, P) would block the bridge
            tri = (np.array([mx, my]), np.array([best_x, my]), verts[ring[ip]])
            best_key = (math.inf, math.inf)
            for j, idx in enumerate(ring):
                v = verts[idx]
                if j == ip or not _in_triangle(v, tri, inclusive=True):
                    continue
                prev, nxt = verts[ring[j - 1]], verts[ring[(j + 1) % len(ring)]]
                if _cross3(prev, v, nxt) >= 0:
                    continue
                key = (abs(math.atan2(v[1] - my, v[0] - mx)), math.hypot(v[0] - mx, v[1] - my))
                if key < best_key:
                    best_key, ip = key, j
        hole_cycle = hole[m_pos:] + hole[: m_pos + 1]
        ring = ring[: ip + 1] + hole_cycle + ring[ip:]
    return ring


def _cross3(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _in_triangle(p, tri, inclusive: bool) -> bool:
    a, b, c = tri
    d1, d2, d3 = _cross3(a, b, p), _cross3(b, c, p), _cross3(c, a, p)
    if inclusive:
        return (d1 >= 0 and d2 >= 0 and d3 >= 0) or (d1 <= 0 and d2 <= 0 and d3 <= 0)
    return (d1 > 0 and d2 > 0 and d3 > 0) or (d1 < 0 and d2 < 0 and d3 < 0)


def _ear_clip(verts: np.ndarray, ring: list[int]) -> list[tuple[int, int, int]]:
    ring = list(ring)
    tris = []
    scale = float(np.ptp(verts, axis=0).max()) or 1.0
    eps = 1e-12 * scale * scale
    start = 0
    while len(ring) > 3:
        n = len(ring)
        clipped = False
        for step in range(n):
            i = (start + step) % n
            ia, ib, ic = ring[i - 1], ring[i], ring[(i + 1) % n]
            a, b, c = verts[ia], verts[ib], verts[ic]
            cr = _cross3(a, b, c)
            if abs(cr) <= eps:
                del ring[i]
                start, clipped = max(i - 1, 0), True
                break
            if cr < 0:
                continue
            tri = (a, b, c)
            blocked = False
            for j in range(n):
                if j in (i - 1 if i else n - 1, i, (i + 1) % n):
                    continue
                v = verts[ring[j]]
                if (v == a).all() or (v == b).all() or (v == c).all():
                    continue
                if _in_triangle(v, tri, inclusive=True):
                    blocked = True
                    break
            if not blocked:
                tris.append((ia, ib, ic))
                del ring[i]
                start, clipped = max(i - 1, 0), True
                break
        if not clipped:
            raise SelfIntersectingProfile("ear clipping found no ear")
    if len(ring) == 3:
        a, b, c = (verts[k] for k in ring)
        if abs(_cross3(a, b, c)) > eps:
            tris.append(tuple(ring))
    return tris


def _face_rings(face: Face, chord_tol: float, segments: int | None) -> list[np.ndarray]:
    rings = []
    for k, loop in enumerate(face.loops):
        p = _dedupe(loop_polyline(loop, chord_tol, segments))
        if len(p) < 3:
            raise SelfIntersectingProfile("loop collapses to fewer than three vertices")
        area = _signed_area(p)
        if (k == 0 and area < 0) or (k > 0 and area > 0):
            p = p[::-1]
        rings.append(p)
    return rings


def triangulate_face(
    face: Face, chord_tol: float = DEFAULT_CHORD_TOL, segments: int | None = None
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Triangulate a face.

    Returns ``(vertices, triangles, rings)``: the 2-D boundary vertices,
    counterclockwise index triples into them, and the vertex indices of each
    loop in boundary order (outer counterclockwise, holes clockwise).
    """
    rings_pts = _face_rings(face, chord_tol, segments)
    _check_simple(rings_pts)
    verts = np.concatenate(rings_pts)
    offsets = np.cumsum([0] + [len(r) for r in rings_pts])
    rings = [list(range(offsets[k], offsets[k + 1])) for k in range(len(rings_pts))]
    ring = _bridge_holes(verts, rings[0], rings[1:])
    tris = np.array(_ear_clip(verts, ring), dtype=np.int64).reshape(-1, 3)
    return verts, tris, [np.array(r) for r in rings]


def tessellate_profile(face: Face, chord_tol: float = DEFAULT_CHORD_TOL, segments: int | None = None) -> np.ndarray:
    """Triangles covering the face, shape ``(T, 3, 2)``."""
    verts, tris, _ = triangulate_face(face, chord_tol, segments)
    return verts[tris]


def triangles_area(tris: np.ndarray) -> float:
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    return float(np.abs(_cross3((a[:, 0], a[:, 1]), (b[:, 0], b[:, 1]), (c[:, 0], c[:, 1]))).sum() / 2)


# -- solids -----------------------------------------------------------------


def part_membership(sketch: Sketch, ex: Extrusion, points: np.ndarray) -> np.ndarray:
    frame = plane_frame(ex)
    local = (points - frame.origin) @ frame.rotation
    h = local[:, 2]
    inside = (h >= -ex.d_neg) & (h <= ex.d_pos)
    idx = np.flatnonzero(inside)
    if len(idx):
        u = local[idx, 0] / ex.sigma
        v = local[idx, 1] / ex.sigma
        inside[idx] = point_in_sketch(sketch, u, v)
    return inside


def solid_membership(model: CadModel, p) -> np.ndarray | bool:
    """Is ``p`` inside the solid?  Accepts one point ``(3,)`` or many ``(N, 3)``."""
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    acc = np.zeros(len(pts), dtype=bool)
    for part in model.parts:
        m = part_membership(part.sketch, part.extrusion, pts)
        op = part.extrusion.boolean_op
        if op in (BooleanOp.NEW, BooleanOp.JOIN):
            acc |= m
        elif op is BooleanOp.CUT:
            acc &= ~m
        else:
            acc &= m
    return bool(acc[0]) if single else acc


def voxelize(model: CadModel, resolution: int = DEFAULT_RESOLUTION, chunk: int = 1 << 16) -> VoxelGrid:
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    lo, hi = model_bbox(model)
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    pitch = (hi - lo) / resolution
    axes = [lo[k] + (np.arange(resolution) + 0.5) * pitch[k] for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    occ = np.empty(len(grid), dtype=bool)
    for s in range(0, len(grid), chunk):
        occ[s : s + chunk] = solid_membership(model, grid[s : s + chunk])
    return VoxelGrid(resolution, occ.reshape((resolution,) * 3), lo, hi)


def surface_voxels(grid: VoxelGrid) -> np.ndarray:
    """Flat indices of occupied voxels with at least one empty 6-neighbour."""
    occ = np.pad(grid.occupancy, 1, constant_values=False)
    inner = occ[1:-1, 1:-1, 1:-1]
    full = inner.copy()
    for axis in range(3):
        for shift in (-1, 1):
            sl = [slice(1, -1)] * 3
            sl[axis] = slice(1 + shift, occ.shape[axis] - 1 + shift)
            full &= occ[tuple(sl)]
    return np.flatnonzero(inner & ~full)


def extract_surface_points(
    model: CadModel, resolution: int = DEFAULT_RESOLUTION, n: int = DEFAULT_POINTS, seed: int = 0
) -> PointCloud:
    grid = voxelize(model, resolution)
    if not grid.occupancy.any():
        raise EmptySolid("no voxel is occupied")
    idx = surface_voxels(grid)
    if len(idx) > n:
        rng = np.random.Generator(np.random.Philox(seed))
        idx = idx[np.sort(rng.choice(len(idx), size=n, replace=False))]
    return PointCloud(grid.centers(idx))


# -- meshes -----------------------------------------------------------------


def _world(ex: Extrusion, uv: np.ndarray, h: float) -> np.ndarray:
    frame = plane_frame(ex)
    local = np.column_stack([uv * ex.sigma, np.full(len(uv), h)])
    return frame.origin + local @ frame.rotation.T


def export_mesh(model: CadModel, chord_tol: float = DEFAULT_CHORD_TOL, segments: int | None = None) -> TriangleMesh:
    """Per-part extrusion meshes, concatenated; boolean operations are not applied."""
    all_v, all_t = [], []
    base = 0
    for part in model.parts:
        ex = part.extrusion
        for face in part.sketch.faces:
            verts, tris, rings = triangulate_face(face, chord_tol, segments)
            nv = len(verts)
            bottom = _world(ex, verts, -ex.d_neg)
            top = _world(ex, verts, ex.d_pos)
            faces = [tris[:, ::-1], tris + nv]
            for ring in rings:
                i, j = ring, np.roll(ring, -1)
                faces.append(np.column_stack([i, j, j + nv]))
                faces.append(np.column_stack([i, j + nv, i + nv]))
            all_v.append(np.concatenate([bottom, top]))
            all_t.append(np.concatenate(faces) + base)
            base += 2 * nv
    vertices = np.concatenate(all_v)
    triangles = np.concatenate(all_t)
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    keep = np.linalg.norm(np.cross(b - a, c - a), axis=1) > 1e-15
    return TriangleMesh(vertices, triangles[keep])


def obj_bytes(mesh: TriangleMesh) -> bytes:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.triangles]
    return ("\n".join(lines) + "\n").encode()


def stl_bytes(mesh: TriangleMesh, header: bytes = b"text2cad binary stl") -> bytes:
    tri = mesh.vertices[mesh.triangles]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)
    rec = np.zeros(len(tri), dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")]))
    rec["n"] = normals
    rec["v"] = tri
    return header[:80].ljust(80, b"\0") + struct.pack("<I", len(tri)) + rec.tobytes()


def xyz_bytes(cloud: PointCloud) -> bytes:
    return "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in cloud.points).encode()
