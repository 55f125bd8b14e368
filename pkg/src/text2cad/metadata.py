"""Human-readable restructuring of a model ("minimal metadata")."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .cad import Arc, BooleanOp, CadModel, Circle, Line

OPERATION_NAMES = {
    BooleanOp.NEW: "NewBodyFeatureOperation",
    BooleanOp.CUT: "CutFeatureOperation",
    BooleanOp.JOIN: "JoinFeatureOperation",
    BooleanOp.INTERSECT: "IntersectFeatureOperation",
}
OPERATION_FROM_NAME = {v: k for k, v in OPERATION_NAMES.items()}


@dataclass
class MinimalMetadata:
    parts: dict[str, dict]
    description: str | None = None

    def to_dict(self) -> dict:
        out: dict = {"parts": self.parts}
        if self.description is not None:
            out["final_shape"] = self.description
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> MinimalMetadata:
        return cls(parts=doc["parts"], description=doc.get("final_shape"))


def _r(v: float) -> float:
    out = round(float(v), 4)
    return 0.0 if out == 0 else out


def _pt(p) -> list[float]:
    return [_r(p.x), _r(p.y)]


def _curve_entry(c) -> tuple[str, dict]:
    if isinstance(c, Line):
        return "line", {"start": _pt(c.start), "end": _pt(c.end)}
    if isinstance(c, Arc):
        return "arc", {"start": _pt(c.start), "mid": _pt(c.mid), "end": _pt(c.end)}
    assert isinstance(c, Circle)
    return "circle", {"center": _pt(c.center), "radius": _r(c.radius)}


def minimal_metadata(model: CadModel, shape_descriptions: dict[str, str] | None = None) -> MinimalMetadata:
    """Rename everything to ``part_i``/``face_i``/``loop_i``/``line_i`` keys, source order kept.

    ``shape_descriptions`` may hold ``"final"`` and ``"part_<i>"`` entries.
    """
    descriptions = shape_descriptions or {}
    parts: dict[str, dict] = {}
    for i, part in enumerate(model.parts, 1):
        ex = part.extrusion
        sketch: dict[str, dict] = {}
        for f, face in enumerate(part.sketch.faces, 1):
            loops: dict[str, dict] = {}
            for lnum, loop in enumerate(face.loops, 1):
                counters: dict[str, int] = {}
                curves: dict[str, dict] = {}
                for c in loop.curves:
                    kind, entry = _curve_entry(c)
                    counters[kind] = counters.get(kind, 0) + 1
                    curves[f"{kind}_{counters[kind]}"] = entry
                loops[f"loop_{lnum}"] = curves
            sketch[f"face_{f}"] = loops
        entry = {
            "coordinate_system": {
                "euler_angles": [_r(ex.theta), _r(ex.phi), _r(ex.gamma)],
                "translation": [_r(t) for t in ex.tau],
            },
            "sketch": sketch,
            "extrusion": {
                "depth_towards_normal": _r(ex.d_pos),
                "depth_opposite_normal": _r(ex.d_neg),
                "scale": _r(ex.sigma),
                "operation": OPERATION_NAMES[ex.boolean_op],
            },
        }
        if f"part_{i}" in descriptions:
            entry["description"] = descriptions[f"part_{i}"]
        parts[f"part_{i}"] = entry
    return MinimalMetadata(parts=parts, description=descriptions.get("final"))
