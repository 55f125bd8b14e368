"""Sequence-level metrics: primitive and extrusion F1, chamfer distance, invalidity ratio.

Loops of a ground-truth sketch are paired with predicted loops by minimum
cost assignment over a loop-to-loop chamfer cost; curves inside paired loops
are assigned the same way.  A pair counts as a true positive when every
defining quantized value is within ``tolerance`` grid steps.
"""

from __future__ import annotations

import json
import math
import statistics
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field

import numpy as np

from .cad import Arc, CadModel, Circle, Line, Loop, Sketch, extrusion_tokens, quantize
from .codec import CadSequence, try_decode
from .errors import EmptyCloud, EmptySolid, InvalidInput, ManifestMismatch, NonFiniteCost
from .geometry import extract_surface_points, sample_loop

REPORT_VERSION = 1
DEFAULT_TOLERANCE = 3
LOOP_SAMPLES = 64
CURVE_TYPES = ("line", "arc", "circle")

# -- assignment -------------------------------------------------------------


def _solve(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting path assignment for a square matrix.

    Returns ``(col_of_row, u, v)`` with ``u``/``v`` optimal dual potentials,
    so ``cost[i, j] - u[i] - v[j] >= 0`` with equality on the assignment.
    """
    n = cost.shape[0]
    INF = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j] = row matched to column j (1-based, 0 = none)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = INF, 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col = np.zeros(n, dtype=int)
    for j in range(1, n + 1):
        col[p[j] - 1] = j - 1
    return col, u[1:], v[1:]


def _lexicographic(tight: np.ndarray, col: np.ndarray) -> np.ndarray:
    """Smallest row-by-row perfect matching inside the tight-edge graph.

    ``col`` is any perfect matching of ``tight``; rows are fixed in order, each
    to the lowest column that still admits a perfect matching of the rest.
    """
    n = len(col)
    col = col.copy()
    row = np.empty(n, dtype=int)
    row[col] = np.arange(n)
    locked = np.zeros(n, dtype=bool)

    def reroute(r: int, target: int, banned: int, seen: np.ndarray) -> bool:
        # move row r off its column onto some path ending at column ``target``
        for c in np.flatnonzero(tight[r]):
            if c == banned or seen[c]:
                continue
            seen[c] = True
            if c == target or (not locked[row[c]] and reroute(row[c], target, banned, seen)):
                col[r] = c
                row[c] = r
                return True
        return False

    for i in range(n):
        for c in np.flatnonzero(tight[i]):
            if c == col[i]:
                break
            other, freed = row[c], col[i]
            if locked[other]:
                continue
            snapshot = col.copy(), row.copy()
            seen = np.zeros(n, dtype=bool)
            seen[c] = True
            if reroute(other, freed, c, seen):
                col[i] = c
                row[c] = i
                break
            col[:], row[:] = snapshot
        locked[i] = True
    return col


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost assignment of ``min(m, n)`` pairs.

    Among optimal assignments the lexicographically smallest list of
    ``(row, col)`` pairs is returned.  ``total`` is the exact sum of the
    chosen entries.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or 0 in cost.shape:
        raise InvalidInput("cost matrix must be 2-D and non-empty")
    if not np.isfinite(cost).all():
        raise NonFiniteCost("cost matrix has non-finite entries")
    m, n = cost.shape
    k = max(m, n)
    square = np.zeros((k, k))
    square[:m, :n] = cost
    col, u, v = _solve(square)
    reduced = square - u[:, None] - v[None, :]
    scale = max(1.0, float(np.abs(square).max()))
    tight = reduced <= 1e-9 * scale
    col = _lexicographic(tight, col)
    pairs = [(i, int(col[i])) for i in range(m) if col[i] < n]
    return pairs, math.fsum(cost[i, j] for i, j in pairs)


# -- chamfer ----------------------------------------------------------------


def _nearest_sq(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = np.empty(len(a))
    for s in range(0, len(a), chunk):
        diff = a[s : s + chunk, None, :] - b[None, :, :]
        out[s : s + chunk] = (diff * diff).sum(axis=-1).min(axis=1)
    return out


def chamfer(P, Q) -> float:
    """Mean squared nearest-neighbour distance from P to Q plus from Q to P."""
    P = np.asarray(getattr(P, "points", P), dtype=float)
    Q = np.asarray(getattr(Q, "points", Q), dtype=float)
    if len(P) == 0 or len(Q) == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    return float(_nearest_sq(P, Q).mean() + _nearest_sq(Q, P).mean())


# -- loop and curve matching ------------------------------------------------


@dataclass
class LoopMatching:
    pairs: list[tuple[int, int]]
    cost: float
    unmatched_gt: list[int]
    unmatched_pred: list[int]


def match_loops(gt: Sketch, pred: Sketch) -> LoopMatching:
    """Pair loops (indexed in sketch order) by 2-D chamfer over boundary samples."""
    g, p = gt.loops, pred.loops
    if not g or not p:
        return LoopMatching([], 0.0, list(range(len(g))), list(range(len(p))))
    gs = [sample_loop(lp, LOOP_SAMPLES) for lp in g]
    ps = [sample_loop(lp, LOOP_SAMPLES) for lp in p]
    cost = np.array([[chamfer(a, b) for b in ps] for a in gs])
    pairs, total = hungarian(cost)
    return LoopMatching(
        pairs,
        total,
        [i for i in range(len(g)) if i not in {a for a, _ in pairs}],
        [j for j in range(len(p)) if j not in {b for _, b in pairs}],
    )


def _kind(c) -> str:
    return "line" if isinstance(c, Line) else "arc" if isinstance(c, Arc) else "circle"


def _qpoints(c, reverse: bool = False) -> np.ndarray:
    pts = list(c.points)
    if reverse and not isinstance(c, Circle):
        pts = pts[::-1]
    return np.array([(quantize(p.x), quantize(p.y)) for p in pts])


def _orientations(c) -> list[np.ndarray]:
    if isinstance(c, Circle):
        return [_qpoints(c)]
    return [_qpoints(c), _qpoints(c, reverse=True)]


_CROSS_TYPE = 1e6


def _curve_cost(a, b) -> float:
    if _kind(a) != _kind(b):
        return _CROSS_TYPE
    qa = _qpoints(a)
    return min(float(np.linalg.norm(qa - qb, axis=1).mean()) for qb in _orientations(b))


def _curve_tp(a, b, tol: int) -> bool:
    qa = _qpoints(a)
    return any(int(np.abs(qa - qb).max()) <= tol for qb in _orientations(b))


@dataclass
class Counts:
    tp: int = 0
    n_gt: int = 0
    n_pred: int = 0

    def __iadd__(self, other: Counts) -> Counts:
        self.tp += other.tp
        self.n_gt += other.n_gt
        self.n_pred += other.n_pred
        return self

    def prf(self) -> dict:
        """Precision, recall, F1; a type absent from both sides scores 1."""
        if self.n_gt == 0 and self.n_pred == 0:
            return {"precision": 1.0, "recall": 1.0, "f1": 1.0}
        p = self.tp / self.n_pred if self.n_pred else 0.0
        r = self.tp / self.n_gt if self.n_gt else 0.0
        return {"precision": p, "recall": r, "f1": 2 * p * r / (p + r) if p + r > 0 else 0.0}


def _match_curves(g: Loop, p: Loop, tol: int, counts: dict[str, Counts]) -> None:
    gc, pc = g.curves, p.curves
    cost = np.array([[_curve_cost(a, b) for b in pc] for a in gc])
    pairs, _ = hungarian(cost)
    for i, j in pairs:
        if _kind(gc[i]) == _kind(pc[j]) and _curve_tp(gc[i], pc[j], tol):
            counts[_kind(gc[i])].tp += 1


def primitive_counts(gt: CadModel, pred: CadModel, tolerance: int = DEFAULT_TOLERANCE) -> dict[str, Counts]:
    if not gt.parts or not pred.parts:
        raise InvalidInput("both models need at least one part")
    counts = {k: Counts() for k in CURVE_TYPES}
    for model, side in ((gt, "n_gt"), (pred, "n_pred")):
        for part in model.parts:
            for c in part.sketch.curves:
                setattr(counts[_kind(c)], side, getattr(counts[_kind(c)], side) + 1)
    for gp, pp in zip(gt.parts, pred.parts):
        lm = match_loops(gp.sketch, pp.sketch)
        gl, pl = gp.sketch.loops, pp.sketch.loops
        for i, j in lm.pairs:
            _match_curves(gl[i], pl[j], tolerance, counts)
    return counts


def primitive_f1(gt: CadModel, pred: CadModel, tolerance: int = DEFAULT_TOLERANCE) -> dict[str, dict]:
    """Per-type precision/recall/F1 for lines, arcs and circles.

    Parts are paired by index; a matched curve pair that is not a true
    positive counts against both precision and recall.
    """
    return {k: c.prf() for k, c in primitive_counts(gt, pred, tolerance).items()}


def extrusion_counts(gt: CadModel, pred: CadModel, tolerance: int = DEFAULT_TOLERANCE) -> Counts:
    if not gt.parts or not pred.parts:
        raise InvalidInput("both models need at least one part")
    tp = 0
    for gp, pp in zip(gt.parts, pred.parts):
        a, b = gp.extrusion, pp.extrusion
        if a.boolean_op is b.boolean_op:
            diff = np.abs(np.array(extrusion_tokens(a)) - np.array(extrusion_tokens(b)))
            tp += int(diff.max() <= tolerance)
    return Counts(tp, len(gt.parts), len(pred.parts))


def extrusion_f1(gt: CadModel, pred: CadModel, tolerance: int = DEFAULT_TOLERANCE) -> dict:
    return extrusion_counts(gt, pred, tolerance).prf()


# -- corpus report ----------------------------------------------------------


@dataclass
class EvalReport:
    f1_line: float
    f1_arc: float
    f1_circle: float
    f1_extrusion: float
    invalidity_ratio: float
    sample_count: int
    valid_count: int
    tolerance: int
    cd_mean: float | None = None
    cd_median: float | None = None
    cd_count: int = 0
    version: int = REPORT_VERSION
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = asdict(self)
        if self.cd_mean is None:
            del doc["cd_mean"], doc["cd_median"]
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def mean_primitive_f1(self) -> float:
        return (self.f1_line + self.f1_arc + self.f1_circle) / 3

    def table(self, name: str = "model") -> str:
        def pct(v):
            return f"{100 * v:.2f}"

        def cd(v):
            return "-" if v is None else f"{v:.3f}"

        head = ["Model", "Line F1", "Arc F1", "Circle F1", "Extrusion F1", "Mean CD", "Median CD", "IR (%)"]
        row = [name, pct(self.f1_line), pct(self.f1_arc), pct(self.f1_circle), pct(self.f1_extrusion),
               cd(self.cd_mean), cd(self.cd_median), pct(self.invalidity_ratio)]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        line = " | ".join(h.ljust(w) for h, w in zip(head, widths))
        sep = "-+-".join("-" * w for w in widths)
        return f"{line}\n{sep}\n" + " | ".join(r.ljust(w) for r, w in zip(row, widths)) + "\n(CD x 10^3)\n"


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "f1_line", "f1_arc", "f1_circle", "f1_extrusion", "invalidity_ratio",
                 "sample_count", "valid_count", "tolerance", "cd_count"],
    "properties": {
        "version": {"const": REPORT_VERSION},
        "f1_line": {"type": "number", "minimum": 0, "maximum": 1},
        "f1_arc": {"type": "number", "minimum": 0, "maximum": 1},
        "f1_circle": {"type": "number", "minimum": 0, "maximum": 1},
        "f1_extrusion": {"type": "number", "minimum": 0, "maximum": 1},
        "invalidity_ratio": {"type": "number", "minimum": 0, "maximum": 1},
        "cd_mean": {"type": "number", "minimum": 0},
        "cd_median": {"type": "number", "minimum": 0},
        "cd_count": {"type": "integer", "minimum": 0},
        "sample_count": {"type": "integer", "minimum": 0},
        "valid_count": {"type": "integer", "minimum": 0},
        "tolerance": {"type": "integer", "minimum": 0},
        "details": {"type": "object"},
    },
    "additionalProperties": False,
}


def evaluate_models(
    gt: Mapping[str, CadModel],
    preds: Mapping[str, CadSequence],
    tolerance: int = DEFAULT_TOLERANCE,
    resolution: int = 64,
    n_points: int = 2048,
    seed: int = 0,
    with_cd: bool = True,
) -> EvalReport:
    """Score predicted sequences against ground-truth models with the same ids."""
    if not preds:
        raise ManifestMismatch("no predictions to evaluate")
    missing = sorted(set(preds) - set(gt))
    if missing:
        raise ManifestMismatch(f"predictions without ground truth: {missing[:5]}")
    prim = {k: Counts() for k in CURVE_TYPES}
    ext = Counts()
    cds: list[float] = []
    invalid = 0
    reasons: dict[str, int] = {}
    empty = 0
    for sid in sorted(preds):
        model, report, _ = try_decode(preds[sid])
        if model is None:
            invalid += 1
            for r in report.reasons:
                reasons[r.value] = reasons.get(r.value, 0) + 1
            continue
        g = gt[sid]
        for k, c in primitive_counts(g, model, tolerance).items():
            prim[k] += c
        ext += extrusion_counts(g, model, tolerance)
        if with_cd:
            try:
                a = extract_surface_points(g, resolution, n_points, seed)
                b = extract_surface_points(model, resolution, n_points, seed)
            except EmptySolid:
                empty += 1
                continue
            cds.append(chamfer(a, b) * 1e3)
    n = len(preds)
    details = {
        "primitive": {k: {**asdict(c), **c.prf()} for k, c in prim.items()},
        "extrusion": {**asdict(ext), **ext.prf()},
        "invalid_reasons": dict(sorted(reasons.items())),
        "empty_solids": empty,
    }
    return EvalReport(
        f1_line=prim["line"].prf()["f1"],
        f1_arc=prim["arc"].prf()["f1"],
        f1_circle=prim["circle"].prf()["f1"],
        f1_extrusion=ext.prf()["f1"],
        invalidity_ratio=invalid / n,
        sample_count=n,
        valid_count=n - invalid,
        tolerance=tolerance,
        cd_mean=statistics.fmean(cds) if cds else None,
        cd_median=statistics.median(cds) if cds else None,
        cd_count=len(cds),
        details=details,
    )


def evaluate_corpus(manifest, preds: Mapping[str, CadSequence], **kw) -> EvalReport:
    """``manifest`` is a :class:`~text2cad.dataset.DatasetManifest`; predictions are keyed by id."""
    entries = manifest.by_id()
    missing = sorted(set(preds) - set(entries))
    if missing:
        raise ManifestMismatch(f"predictions for ids not in the manifest: {missing[:5]}")
    gt = {sid: manifest.model(entries[sid]) for sid in preds}
    return evaluate_models(gt, preds, **kw)
