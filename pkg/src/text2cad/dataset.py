"""Corpus construction: DeepCAD-style JSON ingestion and a synthetic generator.

Directory layout written by :func:`generate_synthetic_dataset` (and by the
``ingest`` command)::

    manifest.json
    sequences/<id>.cadseq     one "x y" token pair per line
    metadata/<id>.json        minimal metadata
    prompts/<id>.json         {"L0": ..., "L3": ..., "template_version": ...}
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

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
    Part,
    Point2D,
    Sketch,
    euler_from_rotation,
    normalize_model,
    quantize_model,
    rotation_matrix,
    validate_model,
)
from .codec import encode, read_cadseq, decode
from .errors import DegenerateInput, ManifestMismatch, SchemaError, Text2CadError, UnsupportedCurve
from .geometry import voxelize
from .metadata import OPERATION_FROM_NAME, OPERATION_NAMES, MinimalMetadata, minimal_metadata
from .prompts import TEMPLATE_VERSION, PromptSet, generate_prompts, part_phrase, shape_phrase

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# -- manifest ---------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    source: str
    split: str
    sequence_file: str
    prompt_file: str
    metadata_file: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    template_version: str = TEMPLATE_VERSION
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestMismatch("duplicate ids in manifest")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestMismatch(f"entry {e.id}: unknown split {e.split!r}")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.id: e for e in self.entries}

    def to_json(self) -> str:
        doc = {
            "version": MANIFEST_VERSION,
            "template_version": self.template_version,
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, indent=1) + "\n"

    def save(self, root: str | Path) -> Path:
        self.root = Path(root)
        path = self.root / "manifest.json"
        atomic_write(path, self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            doc = json.loads(path.read_text())
            entries = [ManifestEntry(**e) for e in doc["entries"]]
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ManifestMismatch(f"{path}: not a dataset manifest ({exc})") from None
        return cls(entries, doc.get("template_version", TEMPLATE_VERSION), root=path.parent)

    def sequence(self, entry: ManifestEntry):
        return read_cadseq(self.root / entry.sequence_file)

    def model(self, entry: ManifestEntry) -> CadModel:
        return decode(self.sequence(entry))

    def prompts(self, entry: ManifestEntry) -> PromptSet:
        doc = json.loads((self.root / entry.prompt_file).read_text())
        return PromptSet(doc["L0"], doc["L1"], doc["L2"], doc["L3"])

    def metadata(self, entry: ManifestEntry) -> MinimalMetadata:
        return MinimalMetadata.from_dict(json.loads((self.root / entry.metadata_file).read_text()))


def assign_splits(n: int, seed: int) -> list[str]:
    """80/10/10 split of ``n`` items, shuffled deterministically."""
    n_train, n_val = int(0.8 * n), int(0.1 * n)
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    order = np.random.default_rng([seed, 1]).permutation(n)
    out = [""] * n
    for slot, idx in enumerate(order):
        out[idx] = labels[slot]
    return out


def write_sample(root: Path, sample_id: str, model: CadModel, meta: MinimalMetadata, prompts: PromptSet) -> dict:
    """Write sequence, metadata and prompt files; returns their relative paths."""
    files = {
        "sequence_file": f"sequences/{sample_id}.cadseq",
        "metadata_file": f"metadata/{sample_id}.json",
        "prompt_file": f"prompts/{sample_id}.json",
    }
    atomic_write(root / files["sequence_file"], encode(model).to_text())
    atomic_write(root / files["metadata_file"], meta.to_json() + "\n")
    write_prompts(root / files["prompt_file"], prompts)
    return files


def write_prompts(path: Path, prompts: PromptSet) -> None:
    doc = {**prompts.to_dict(), "template_version": TEMPLATE_VERSION}
    atomic_write(path, json.dumps(doc, indent=1) + "\n")


def describe(model: CadModel) -> MinimalMetadata:
    """Minimal metadata with template shape descriptions attached."""
    desc = {"final": shape_phrase(model)}
    for i, part in enumerate(model.parts, 1):
        desc[f"part_{i}"] = part_phrase(part)
    return minimal_metadata(model, desc)


# -- synthetic generator ----------------------------------------------------

# Sketch-plane orientations (theta, phi, gamma) for the whole model.
_ORIENTATIONS = [
    (0.0, 0.0, 0.0),
    (0.0, math.pi / 2, 0.0),
    (math.pi / 2, math.pi / 2, 0.0),
    (0.0, math.pi, 0.0),
]
_SHAPES = ("rect", "circle", "rounded", "ring")


def _p(x: float, y: float) -> Point2D:
    return Point2D(float(x), float(y))


def _polygon(pts: list[Point2D]) -> Loop:
    return Loop(tuple(Line(pts[i], pts[(i + 1) % len(pts)]) for i in range(len(pts))))


def _shape_face(kind: str, w: float, h: float, rng: np.random.Generator) -> Face:
    """A profile whose bounding box is ``[0, w] x [0, h]`` (circles use ``min(w, h)``)."""
    if kind == "rect":
        return Face(_polygon([_p(0, 0), _p(w, 0), _p(w, h), _p(0, h)]))
    if kind in ("circle", "ring"):
        r = min(w, h) / 2
        outer = Loop((Circle(_p(r, r), _p(r, 2 * r)),))
        if kind == "circle":
            return Face(outer)
        ri = r * rng.uniform(0.3, 0.7)
        return Face(outer, (Loop((Circle(_p(r, r), _p(r, r + ri)),)),))
    rc = min(w, h) * rng.uniform(0.25, 0.5)
    a = math.pi / 4
    corner = _p(w - rc + rc * math.cos(a), h - rc + rc * math.sin(a))
    return Face(
        Loop(
            (
                Line(_p(0, 0), _p(w, 0)),
                Line(_p(w, 0), _p(w, h - rc)),
                Arc(_p(w, h - rc), corner, _p(w - rc, h)),
                Line(_p(w - rc, h), _p(0, h)),
                Line(_p(0, h), _p(0, 0)),
            )
        )
    )


def _extent(face: Face) -> tuple[float, float]:
    from .cad import sketch_bbox

    x0, y0, x1, y1 = sketch_bbox(Sketch((face,)))
    return x1 - x0, y1 - y0


def _random_model(rng: np.random.Generator) -> CadModel:
    """One raw (unnormalized) model in a shared local frame of the base part."""
    orient = _ORIENTATIONS[rng.integers(len(_ORIENTATIONS))]
    rot = rotation_matrix(*orient)
    n_parts = int(rng.choice([1, 2, 3], p=[0.4, 0.35, 0.25]))

    kind = _SHAPES[rng.integers(len(_SHAPES))]
    bw, bh = rng.uniform(0.4, 1.0, size=2)
    if kind in ("circle", "ring"):
        bw = bh = min(bw, bh)
    base = _shape_face(kind, bw, bh, rng)
    height = rng.uniform(0.1, 0.8)
    two_sided = rng.random() < 0.2
    d_pos, d_neg = (height / 2, height / 2) if two_sided else (height, 0.0)
    parts = [(base, (0.0, 0.0, 0.0), d_pos, d_neg, BooleanOp.NEW)]

    for _ in range(n_parts - 1):
        op = [BooleanOp.JOIN, BooleanOp.CUT, BooleanOp.INTERSECT, BooleanOp.NEW][
            rng.choice(4, p=[0.35, 0.35, 0.15, 0.15])
        ]
        kind = _SHAPES[rng.integers(len(_SHAPES))]
        if op is BooleanOp.INTERSECT:
            # a larger profile through the full base height, offset so it overlaps
            w, h = bw * rng.uniform(0.7, 1.2), bh * rng.uniform(0.7, 1.2)
            face = _shape_face(kind, w, h, rng)
            fw, fh = _extent(face)
            u0, v0 = bw / 2 - fw * rng.uniform(0.3, 0.7), bh / 2 - fh * rng.uniform(0.3, 0.7)
            parts.append((face, (u0, v0, -d_neg - 0.05), d_pos + d_neg + 0.1, 0.0, op))
            continue
        scale = rng.uniform(0.25, 0.6)
        face = _shape_face(kind, bw * scale * rng.uniform(0.7, 1.0), bh * scale * rng.uniform(0.7, 1.0), rng)
        fw, fh = _extent(face)
        u0 = rng.uniform(0.05, 0.95) * (bw - fw)
        v0 = rng.uniform(0.05, 0.95) * (bh - fh)
        if op is BooleanOp.CUT:
            depth = (d_pos + d_neg) * rng.uniform(0.3, 1.0)
            parts.append((face, (u0, v0, d_pos), 0.0, depth, op))
        else:
            parts.append((face, (u0, v0, d_pos), rng.uniform(0.1, 0.5), 0.0, op))

    out = []
    for face, local, dp, dn, op in parts:
        tau = rot @ np.asarray(local)
        out.append(Part(Sketch((face,)), Extrusion(*orient, tuple(tau), 1.0, dp, dn, op)))
    return CadModel(tuple(out))


def _acceptable(model: CadModel) -> bool:
    if not validate_model(model).valid:
        return False
    try:
        encode(model)
        grid = voxelize(model, 24)
    except Text2CadError:
        return False
    # at least a few voxels thick somewhere, so surface sampling is meaningful
    return int(grid.occupancy.sum()) >= 64


def synthetic_model(seed: int, index: int) -> CadModel:
    """The ``index``-th synthetic model for ``seed``; normalized, quantized, valid."""
    rng = np.random.default_rng([seed, 0, index])
    for _ in range(100):
        try:
            model = quantize_model(normalize_model(_random_model(rng)))
        except DegenerateInput:
            continue
        if _acceptable(model):
            return model
    raise RuntimeError(f"could not draw a valid synthetic model for seed {seed}, index {index}")


def generate_synthetic_dataset(n: int, seed: int, out_dir: str | Path) -> DatasetManifest:
    if n < 1:
        raise ValueError("n must be at least 1")
    root = Path(out_dir)
    width = max(5, len(str(n - 1)))
    splits = assign_splits(n, seed)
    entries = []
    for i in range(n):
        model = synthetic_model(seed, i)
        sample_id = f"s{seed}_{i:0{width}d}"
        meta = describe(model)
        files = write_sample(root, sample_id, model, meta, generate_prompts(meta, model))
        entries.append(ManifestEntry(id=sample_id, source=f"synthetic:{seed}:{i}", split=splits[i], **files))
    manifest = DatasetManifest(entries)
    manifest.save(root)
    return manifest


# -- DeepCAD-style JSON -----------------------------------------------------


def _get(doc, key, path: str):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError(f"{path}.{key}", "required field missing")
    return doc[key]


def _num(doc, key, path: str) -> float:
    v = _get(doc, key, path)
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
        raise SchemaError(f"{path}.{key}", "expected a finite number")
    return float(v)


def _vec(doc, key, path: str, dims: int = 3) -> np.ndarray:
    v = _get(doc, key, path)
    p = f"{path}.{key}"
    return np.array([_num(v, axis, p) for axis in "xyz"[:dims]])


def _pt2(doc, key, path) -> Point2D:
    x, y = _vec(doc, key, path, 2)
    return Point2D(x, y)


def _read_curve(doc: dict, path: str):
    kind = _get(doc, "type", path)
    if kind == "Line3D":
        return Line(_pt2(doc, "start_point", path), _pt2(doc, "end_point", path))
    if kind == "Circle3D":
        c = _pt2(doc, "center_point", path)
        return Circle(c, Point2D(c.x, c.y + _num(doc, "radius", path)))
    if kind == "Arc3D":
        s, e = _pt2(doc, "start_point", path), _pt2(doc, "end_point", path)
        c = _pt2(doc, "center_point", path)
        normal = doc.get("normal", {"z": 1.0})
        a0, a1 = math.atan2(s.y - c.y, s.x - c.x), math.atan2(e.y - c.y, e.x - c.x)
        if normal.get("z", 1.0) >= 0:
            sweep = (a1 - a0) % (2 * math.pi)
        else:
            sweep = -((a0 - a1) % (2 * math.pi))
        r = math.hypot(s.x - c.x, s.y - c.y)
        mid = Point2D(c.x + r * math.cos(a0 + sweep / 2), c.y + r * math.sin(a0 + sweep / 2))
        return Arc(s, mid, e)
    raise UnsupportedCurve(f"{path}: curve type {kind!r} is not supported")


def _reverse(c):
    return Line(c.end, c.start) if isinstance(c, Line) else Arc(c.end, c.mid, c.start)


def _close(a: Point2D, b: Point2D, tol: float) -> bool:
    return abs(a.x - b.x) <= tol and abs(a.y - b.y) <= tol


def _with_start(c, p: Point2D):
    return Line(p, c.end) if isinstance(c, Line) else Arc(p, c.mid, c.end)


def _chain(curves: list, path: str) -> Loop:
    """Order and orient curves head to tail; shared endpoints are made identical."""
    if len(curves) == 1 and isinstance(curves[0], Circle):
        return Loop(tuple(curves))
    if any(isinstance(c, Circle) for c in curves):
        raise SchemaError(path, "circle mixed with other curves in one loop")
    scale = max(max(abs(v) for p in c.points for v in p) for c in curves) or 1.0
    tol = 1e-6 * scale
    rest = list(curves[1:])
    out = [curves[0]]
    while rest:
        end = out[-1].end
        for i, c in enumerate(rest):
            if _close(c.start, end, tol):
                nxt = c
            elif _close(c.end, end, tol):
                nxt = _reverse(c)
            else:
                continue
            out.append(_with_start(nxt, end))
            del rest[i]
            break
        else:
            raise SchemaError(path, "loop curves do not form a closed chain")
    if not _close(out[-1].end, out[0].start, tol):
        raise SchemaError(path, "loop is not closed")
    last = out[-1]
    out[-1] = Line(last.start, out[0].start) if isinstance(last, Line) else Arc(last.start, last.mid, out[0].start)
    return Loop(tuple(out))


def _read_profile(profile: dict, path: str) -> Face:
    loops_doc = _get(profile, "loops", path)
    outer, holes = None, []
    for i, lp in enumerate(loops_doc):
        lpath = f"{path}.loops[{i}]"
        curves_doc = _get(lp, "profile_curves", lpath)
        curves = [_read_curve(c, f"{lpath}.profile_curves[{j}]") for j, c in enumerate(curves_doc)]
        if not curves:
            raise SchemaError(f"{lpath}.profile_curves", "empty loop")
        loop = _chain(curves, lpath)
        if lp.get("is_outer", i == 0) and outer is None:
            outer = loop
        else:
            holes.append(loop)
    if outer is None:
        raise SchemaError(f"{path}.loops", "no outer loop")
    return Face(outer, tuple(holes))


def _extent_distance(ext, path: str) -> float:
    return _num(_get(ext, "distance", path), "value", f"{path}.distance")


def parse_deepcad_json(doc: bytes | str | dict) -> CadModel:
    """Parse one DeepCAD construction document into a normalized model.

    Sketch points are read in sketch-plane coordinates and placed with the
    sketch ``transform`` (origin and axes).  ``extent_one`` extrudes along
    the normal, ``extent_two`` against it; a symmetric extent applies
    ``extent_one`` to both sides.
    """
    if not isinstance(doc, dict):
        try:
            doc = json.loads(doc)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise SchemaError("$", f"not JSON: {exc}") from None
    entities = _get(doc, "entities", "$")
    sequence = _get(doc, "sequence", "$")
    parts = []
    for k, step in enumerate(sequence):
        if _get(step, "type", f"$.sequence[{k}]") != "ExtrudeFeature":
            continue
        eid = _get(step, "entity", f"$.sequence[{k}]")
        epath = f"$.entities.{eid}"
        ext = _get(entities, eid, "$.entities")
        faces, transform = [], None
        for j, ref in enumerate(_get(ext, "profiles", epath)):
            rpath = f"{epath}.profiles[{j}]"
            sid, pid = _get(ref, "sketch", rpath), _get(ref, "profile", rpath)
            spath = f"$.entities.{sid}"
            sketch = _get(entities, sid, "$.entities")
            profile = _get(_get(sketch, "profiles", spath), pid, f"{spath}.profiles")
            faces.append(_read_profile(profile, f"{spath}.profiles.{pid}"))
            transform = _get(sketch, "transform", spath), f"{spath}.transform"
        if not faces:
            raise SchemaError(f"{epath}.profiles", "extrusion without profiles")
        tdoc, tpath = transform
        rot = np.column_stack([_vec(tdoc, axis, tpath) for axis in ("x_axis", "y_axis", "z_axis")])
        origin = _vec(tdoc, "origin", tpath)
        one = _extent_distance(_get(ext, "extent_one", epath), f"{epath}.extent_one")
        kind = _get(ext, "extent_type", epath)
        if kind == "SymmetricFeatureExtentType":
            d_pos = d_neg = abs(one)
        elif kind == "TwoSidesFeatureExtentType":
            d_pos, d_neg = one, _extent_distance(_get(ext, "extent_two", epath), f"{epath}.extent_two")
        else:
            d_pos, d_neg = one, 0.0
        if d_pos < 0 and d_neg <= 0:
            d_pos, d_neg = -d_neg, -d_pos
        op_name = _get(ext, "operation", epath)
        if op_name not in OPERATION_FROM_NAME:
            raise SchemaError(f"{epath}.operation", f"unknown operation {op_name!r}")
        theta, phi, gamma = euler_from_rotation(rot)
        ex = Extrusion(theta, phi, gamma, tuple(origin), 1.0, d_pos, d_neg, OPERATION_FROM_NAME[op_name])
        parts.append(Part(Sketch(tuple(faces)), ex))
    if not parts:
        raise SchemaError("$.sequence", "no ExtrudeFeature entries")
    return normalize_model(CadModel(tuple(parts)))


def _xyz(v) -> dict:
    return {"x": float(v[0]), "y": float(v[1]), "z": float(v[2]) if len(v) > 2 else 0.0}


def _curve_doc(c, s: float) -> dict:
    if isinstance(c, Line):
        return {"type": "Line3D", "start_point": _xyz((c.start.x * s, c.start.y * s)),
                "end_point": _xyz((c.end.x * s, c.end.y * s))}
    if isinstance(c, Circle):
        return {"type": "Circle3D", "center_point": _xyz((c.center.x * s, c.center.y * s)),
                "radius": c.radius * s, "normal": _xyz((0, 0, 1))}
    center, r, a0, sweep = c.circle()
    return {
        "type": "Arc3D",
        "start_point": _xyz((c.start.x * s, c.start.y * s)),
        "end_point": _xyz((c.end.x * s, c.end.y * s)),
        "center_point": _xyz((center.x * s, center.y * s)),
        "radius": r * s,
        "normal": _xyz((0, 0, 1 if sweep > 0 else -1)),
    }


def write_deepcad_json(model: CadModel) -> dict:
    """Inverse of :func:`parse_deepcad_json`, used to build fixtures."""
    entities: dict[str, dict] = {}
    sequence = []
    for i, part in enumerate(model.parts):
        ex = part.extrusion
        rot = rotation_matrix(ex.theta, ex.phi, ex.gamma)
        profiles = {}
        for f, face in enumerate(part.sketch.faces):
            loops = [
                {"is_outer": k == 0, "profile_curves": [_curve_doc(c, ex.sigma) for c in lp.curves]}
                for k, lp in enumerate(face.loops)
            ]
            profiles[f"P{f}"] = {"loops": loops}
        sid, eid = f"sketch{i}", f"extrude{i}"
        entities[sid] = {
            "type": "Sketch",
            "profiles": profiles,
            "transform": {
                "origin": _xyz(ex.tau),
                "x_axis": _xyz(rot[:, 0]),
                "y_axis": _xyz(rot[:, 1]),
                "z_axis": _xyz(rot[:, 2]),
            },
        }
        entities[eid] = {
            "type": "ExtrudeFeature",
            "profiles": [{"sketch": sid, "profile": p} for p in profiles],
            "extent_type": "TwoSidesFeatureExtentType",
            "extent_one": {"distance": {"value": ex.d_pos}},
            "extent_two": {"distance": {"value": ex.d_neg}},
            "operation": OPERATION_NAMES[ex.boolean_op],
        }
        sequence += [{"index": 2 * i, "type": "Sketch", "entity": sid},
                     {"index": 2 * i + 1, "type": "ExtrudeFeature", "entity": eid}]
    return {"entities": entities, "sequence": sequence}


def ingest_directory(json_dir: str | Path, out_dir: str | Path, seed: int = 0) -> tuple[DatasetManifest, list[str]]:
    """Parse every ``*.json`` under ``json_dir``; returns the manifest and skip reports."""
    root = Path(out_dir)
    files = sorted(Path(json_dir).rglob("*.json"))
    accepted: list[tuple[str, CadModel, str]] = []
    skipped = []
    for path in files:
        try:
            model = quantize_model(parse_deepcad_json(path.read_bytes()))
            report = validate_model(model)
            if not report.valid:
                raise SchemaError(str(path), "invalid after quantization: " + ", ".join(r.value for r in report.reasons))
            encode(model)
        except Text2CadError as exc:
            skipped.append(f"{path}: {exc.kind}: {exc}")
            continue
        accepted.append((path.stem, model, str(path)))
    splits = assign_splits(len(accepted), seed)
    entries = []
    for (stem, model, src), split in zip(accepted, splits):
        meta = describe(model)
        files = write_sample(root, stem, model, meta, generate_prompts(meta, model))
        entries.append(ManifestEntry(id=stem, source=src, split=split, **files))
    manifest = DatasetManifest(entries)
    manifest.save(root)
    return manifest, skipped
