"""Four-level textual annotations for CAD models.

The default annotator is a deterministic template engine:

* ``L0`` an abstract shape phrase ("a ring-like structure"), no numbers;
* ``L1`` step-by-step narration of the construction, still no numbers;
* ``L2`` the same steps with rounded, approximate quantities;
* ``L3`` every parameter at full precision.  :func:`parse_expert_prompt`
  inverts it exactly.

Synonym slots ("draw"/"sketch"/"add", ...) are filled from a random stream
seeded by a hash of the metadata, so the same input always gives the same text.

An external text generator can replace the templates; it is reached with one
JSON POST per level (:class:`ExternalGenerator`).
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import time
from dataclasses import asdict, dataclass
from typing import Literal

import httpx
from pydantic import BaseModel, Field

from .cad import (
    ANGLE_RANGE,
    DEPTH_RANGE,
    SIGMA_RANGE,
    TAU_RANGE,
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
    dequantize,
    dequantize_param,
    quantize,
    quantize_param,
)
from .errors import GeneratorError, OutOfRange, TemplateMismatch
from .metadata import MinimalMetadata

TEMPLATE_VERSION = "1"
LEVELS = ("L0", "L1", "L2", "L3")


@dataclass(frozen=True)
class PromptSet:
    L0: str
    L1: str
    L2: str
    L3: str

    def level(self, name: str) -> str:
        return getattr(self, name)

    def to_dict(self) -> dict[str, str]:
        return asdict(self)


# -- shape phrases ----------------------------------------------------------

_KINDS = {
    # kind: (noun, noun when the part is cut away)
    "cylinder": ("cylindrical object", "cylindrical hole"),
    "ring": ("ring-like structure", "ring-shaped groove"),
    "box": ("rectangular prism", "rectangular cutout"),
    "rounded": ("rectangular block with a rounded corner", "rounded cutout"),
    "polygon": ("polygonal prism", "polygonal cutout"),
    "curved": ("curved profile body", "curved cutout"),
    "compound": ("multi-profile body", "complex cutout"),
}


def _profile_kind(sketch: Sketch) -> str:
    if len(sketch.faces) != 1:
        return "compound"
    face = sketch.faces[0]
    outer = face.outer
    if outer.is_circle:
        if face.holes and all(h.is_circle for h in face.holes):
            return "ring"
        return "cylinder" if not face.holes else "compound"
    lines = sum(isinstance(c, Line) for c in outer.curves)
    arcs = len(outer.curves) - lines
    if face.holes:
        return "compound"
    if arcs == 0:
        return "box" if lines == 4 else "polygon"
    if lines == 4 and arcs == 1:
        return "rounded"
    return "curved"


def _aspect_word(ex: Extrusion) -> str:
    ratio = (ex.d_pos + ex.d_neg) / ex.sigma if ex.sigma > 0 else 0.0
    if ratio > 3:
        return "elongated "
    if ratio < 0.15:
        return "thin "
    return ""


def _article(phrase: str) -> str:
    return ("an " if phrase[0] in "aeiou" else "a ") + phrase


def part_phrase(part: Part) -> str:
    noun = _KINDS[_profile_kind(part.sketch)][0]
    return _article(_aspect_word(part.extrusion) + noun)


def _join_words(items: list[str]) -> str:
    if len(items) <= 2:
        return " and ".join(items)
    return ", ".join(items[:-1]) + " and " + items[-1]


def shape_phrase(model: CadModel) -> str:
    """Abstract object-level description from a fixed rule table."""
    solids = [p for p in model.parts if p.extrusion.boolean_op in (BooleanOp.NEW, BooleanOp.JOIN)]
    if len(solids) > 1:
        text = "an assembly of " + _join_words([part_phrase(p) for p in solids])
    else:
        text = part_phrase(model.parts[0])
    for part in model.parts[1:]:
        op = part.extrusion.boolean_op
        if op is BooleanOp.CUT:
            text += " with " + _article(_KINDS[_profile_kind(part.sketch)][1])
        elif op is BooleanOp.INTERSECT:
            text = f"the intersection of {text} and {part_phrase(part)}"
    return text


# -- rendering helpers ------------------------------------------------------

_ORDINALS = ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth"]

_OP_L3 = {
    BooleanOp.NEW: "create a new solid body",
    BooleanOp.CUT: "cut material from the existing body",
    BooleanOp.JOIN: "join it with the existing body",
    BooleanOp.INTERSECT: "keep only the intersection with the existing body",
}
_OP_FROM_L3 = {v: k for k, v in _OP_L3.items()}

_CREATE = ("Create", "Establish", "Set up")
_DRAW = ("draw", "sketch", "add")
_SCALE = ("Scale", "Resize")
_INTRO = ("This model is", "The design is", "The target shape is")
_BEGIN = ("Start by", "Begin by", "First,")


def _ordinal(k: int) -> str:
    return _ORDINALS[k] if k < len(_ORDINALS) else "next"


def _num(v: float) -> str:
    s = f"{v:.4f}"
    return "0.0000" if s == "-0.0000" else s


def _coarse(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _pt(p: Point2D) -> str:
    return f"({_num(p.x)}, {_num(p.y)})"


def _seed(meta: MinimalMetadata) -> int:
    blob = json.dumps(meta.to_dict(), sort_keys=True) + TEMPLATE_VERSION
    return int.from_bytes(hashlib.sha256(blob.encode()).digest()[:8], "big")


def _profile_words(sketch: Sketch) -> str:
    kind = _profile_kind(sketch)
    if kind == "cylinder":
        return "a circle"
    if kind == "ring":
        n = len(sketch.faces[0].holes)
        return "a circle with a smaller concentric circle inside" if n == 1 else "a circle with several smaller circles inside"
    if kind == "box":
        return "a rectangle"
    if kind == "rounded":
        return "a rectangle with one rounded corner"
    loops = sketch.loops
    return f"a closed profile made of {_count_words(sketch)} across {_number_word(len(loops))} loop{'s' if len(loops) > 1 else ''}"


def _number_word(n: int) -> str:
    words = ["no", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve"]
    return words[n] if n < len(words) else "many"


def _count_words(sketch: Sketch) -> str:
    counts = {"line": 0, "arc": 0, "circle": 0}
    for c in sketch.curves:
        counts[c.kind] += 1
    parts = [f"{_number_word(n)} {k}{'s' if n > 1 else ''}" for k, n in counts.items() if n]
    return _join_words(parts)


def _direction_l1(ex: Extrusion) -> str:
    if ex.d_neg > 0 and ex.d_pos > 0:
        return "in both directions"
    return "along the normal" if ex.d_pos > 0 else "opposite to the normal"


# -- levels -----------------------------------------------------------------


def _l1(model: CadModel, shape: str, rng: random.Random) -> str:
    out = [f"{rng.choice(_INTRO)} {shape}."]
    for k, part in enumerate(model.parts):
        ex = part.extrusion
        verb = rng.choice(_DRAW)
        out.append(
            f"For the {_ordinal(k)} part, set up a sketch plane and {verb} {_profile_words(part.sketch)}, "
            f"giving {part_phrase(part)}. "
            f"Extrude it {_direction_l1(ex)} to {_OP_L3[ex.boolean_op]}."
        )
    return " ".join(out)


def _size_words(part: Part) -> str:
    sk, s = part.sketch, part.extrusion.sigma
    kind = _profile_kind(sk)
    face = sk.faces[0]
    if kind in ("cylinder", "ring"):
        text = f"with a radius of about {_coarse(face.outer.curves[0].radius * s)} units"
        if kind == "ring":
            inner = ", ".join(_coarse(h.curves[0].radius * s) for h in face.holes)
            text += f" and an inner radius of about {inner} units"
        return text
    from .cad import sketch_bbox

    x0, y0, x1, y1 = sketch_bbox(sk)
    return f"measuring about {_coarse((x1 - x0) * s)} by {_coarse((y1 - y0) * s)} units"


def _l2(model: CadModel, shape: str, rng: random.Random) -> str:
    out = [f"{rng.choice(_INTRO)} {shape}."]
    for k, part in enumerate(model.parts):
        ex = part.extrusion
        verb = rng.choice(_DRAW)
        tx, ty, tz = (_coarse(t) for t in ex.tau)
        sides = []
        if ex.d_pos > 0:
            sides.append(f"about {_coarse(ex.d_pos)} units along the normal")
        if ex.d_neg > 0:
            sides.append(f"about {_coarse(ex.d_neg)} units opposite to the normal")
        depth = " and ".join(sides)
        out.append(
            f"For the {_ordinal(k)} part, set up a sketch plane near ({tx}, {ty}, {tz}) and {verb} "
            f"{_profile_words(part.sketch)} {_size_words(part)}, giving {part_phrase(part)}. "
            f"Extrude it {depth} to {_OP_L3[ex.boolean_op]}."
        )
    return " ".join(out)


def _curve_l3(c, verb: str) -> str:
    if isinstance(c, Line):
        return f"{verb} a line from {_pt(c.start)} to {_pt(c.end)}"
    if isinstance(c, Arc):
        return f"{verb} an arc from {_pt(c.start)} through {_pt(c.mid)} to {_pt(c.end)}"
    return f"{verb} a circle centered at {_pt(c.center)} with its top point at {_pt(c.top)}"


def _l3(model: CadModel, shape: str, rng: random.Random) -> str:
    out = [f"{rng.choice(_INTRO)} {shape}."]
    for k, part in enumerate(model.parts, 1):
        ex = part.extrusion
        tx, ty, tz = (_num(t) for t in ex.tau)
        out.append(
            f"Part {k}: {rng.choice(_CREATE)} a new coordinate system with Euler angles of "
            f"{_num(ex.theta)}, {_num(ex.phi)} and {_num(ex.gamma)} radians and a translation vector of "
            f"({tx}, {ty}, {tz})."
        )
        for f, face in enumerate(part.sketch.faces, 1):
            for lnum, loop in enumerate(face.loops, 1):
                role = "the outer loop" if lnum == 1 else f"hole loop {lnum}"
                curves = "; ".join(_curve_l3(c, rng.choice(_DRAW)) for c in loop.curves)
                out.append(f"On face {f}, {role}: {curves}.")
        out.append(f"{rng.choice(_SCALE)} the sketch by {_num(ex.sigma)}.")
        out.append(
            f"Extrude the sketch {_num(ex.d_pos)} units towards the normal and {_num(ex.d_neg)} units "
            f"opposite the normal to {_OP_L3[ex.boolean_op]}."
        )
    return " ".join(out)


def generate_prompts(meta: MinimalMetadata, model: CadModel) -> PromptSet:
    rng = random.Random(_seed(meta))
    shape = meta.description or shape_phrase(model)
    return PromptSet(L0=shape, L1=_l1(model, shape, rng), L2=_l2(model, shape, rng), L3=_l3(model, shape, rng))


# -- expert prompt parser ---------------------------------------------------

_N = r"(-?\d+\.\d+)"
_P = rf"\({_N}, {_N}\)"
_RE_PART = re.compile(r"Part (\d+): ")
_RE_FRAME = re.compile(
    rf"^(?:{'|'.join(_CREATE)}) a new coordinate system with Euler angles of {_N}, {_N} and {_N} radians "
    rf"and a translation vector of \({_N}, {_N}, {_N}\)\.(?=\s|$)"
)
_RE_LOOP = re.compile(r"On face (\d+), (the outer loop|hole loop (\d+)): (.*?)\.(?=\s|$)")
_DRAW_RE = "|".join(_DRAW)
_RE_LINE = re.compile(rf"^(?:{_DRAW_RE}) a line from {_P} to {_P}$")
_RE_ARC = re.compile(rf"^(?:{_DRAW_RE}) an arc from {_P} through {_P} to {_P}$")
_RE_CIRCLE = re.compile(rf"^(?:{_DRAW_RE}) a circle centered at {_P} with its top point at {_P}$")
_RE_SCALE = re.compile(rf"(?:{'|'.join(_SCALE)}) the sketch by {_N}\.(?=\s|$)")
_RE_EXTRUDE = re.compile(
    rf"Extrude the sketch {_N} units towards the normal and {_N} units opposite the normal to "
    rf"({'|'.join(map(re.escape, _OP_FROM_L3))})\.(?=\s|$)"
)


def _coord(text: str) -> float:
    try:
        return dequantize(quantize(float(text)))
    except OutOfRange as exc:
        raise TemplateMismatch(str(exc)) from None


def _param(text: str, lo: float, hi: float) -> float:
    v = float(text)
    # 4-decimal rendering can step just past an end of the range (3.1416 > pi)
    if lo - 1e-4 <= v <= hi + 1e-4:
        v = min(max(v, lo), hi)
    try:
        return dequantize_param(quantize_param(v, lo, hi), lo, hi)
    except OutOfRange as exc:
        raise TemplateMismatch(str(exc)) from None


def _points(groups) -> list[Point2D]:
    vals = [_coord(g) for g in groups]
    return [Point2D(vals[i], vals[i + 1]) for i in range(0, len(vals), 2)]


def _parse_curve(text: str):
    text = text.strip()
    if m := _RE_LINE.match(text):
        return Line(*_points(m.groups()))
    if m := _RE_ARC.match(text):
        return Arc(*_points(m.groups()))
    if m := _RE_CIRCLE.match(text):
        return Circle(*_points(m.groups()))
    raise TemplateMismatch(f"unrecognised curve clause {text!r}")


def _parse_part(body: str) -> Part:
    m = _RE_FRAME.match(body)
    if not m:
        raise TemplateMismatch("missing coordinate system sentence")
    theta, phi, gamma = (_param(g, *ANGLE_RANGE) for g in m.groups()[:3])
    tau = tuple(_param(g, *TAU_RANGE) for g in m.groups()[3:])
    faces: list[list[Loop]] = []
    for lm in _RE_LOOP.finditer(body):
        face_no, role, hole_no, curves = lm.groups()
        loop = Loop(tuple(_parse_curve(c) for c in curves.split(";")))
        if role == "the outer loop":
            if int(face_no) != len(faces) + 1:
                raise TemplateMismatch("faces out of order")
            faces.append([loop])
        else:
            if not faces or int(face_no) != len(faces) or int(hole_no) != len(faces[-1]) + 1:
                raise TemplateMismatch("hole loop out of order")
            faces[-1].append(loop)
    sm = _RE_SCALE.search(body)
    em = _RE_EXTRUDE.search(body)
    if not faces or not sm or not em:
        raise TemplateMismatch("incomplete part description")
    ex = Extrusion(
        theta=theta,
        phi=phi,
        gamma=gamma,
        tau=tau,
        sigma=_param(sm.group(1), *SIGMA_RANGE),
        d_pos=_param(em.group(1), *DEPTH_RANGE),
        d_neg=_param(em.group(2), *DEPTH_RANGE),
        boolean_op=_OP_FROM_L3[em.group(3)],
    )
    return Part(Sketch(tuple(Face(f[0], tuple(f[1:])) for f in faces)), ex)


def parse_expert_prompt(text: str) -> CadModel:
    """Rebuild the model from an expert-level (``L3``) template prompt."""
    pieces = _RE_PART.split(text)
    if len(pieces) < 3:
        raise TemplateMismatch("no 'Part k:' sections found")
    parts = []
    for k in range(1, len(pieces), 2):
        if int(pieces[k]) != len(parts) + 1:
            raise TemplateMismatch("parts out of order")
        parts.append(_parse_part(pieces[k + 1].strip()))
    return CadModel(tuple(parts))


# -- external generators ----------------------------------------------------


class GeneratorRequest(BaseModel):
    metadata: dict
    level: Literal["L0", "L1", "L2", "L3"]
    k_shot_examples: list[str] = Field(default_factory=list)


class GeneratorResponse(BaseModel):
    text: str = Field(min_length=1)
    model_name: str
    latency_ms: float


class ExternalGenerator:
    """Client for a text generator behind ``POST <endpoint>``.

    The request body is a :class:`GeneratorRequest`, the reply a
    :class:`GeneratorResponse`.  Transport errors and 5xx replies are retried.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        retries: int = 2,
        client: httpx.Client | None = None,
        k_shot_examples: list[str] | None = None,
    ):
        self.endpoint = endpoint
        self.retries = retries
        self.k_shot_examples = list(k_shot_examples or [])
        self._client = client or httpx.Client(timeout=timeout)

    def request(self, req: GeneratorRequest) -> GeneratorResponse:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.endpoint, json=req.model_dump())
                if resp.status_code >= 500:
                    raise GeneratorError(f"server error {resp.status_code}")
                resp.raise_for_status()
                return GeneratorResponse.model_validate(resp.json())
            except (httpx.TransportError, GeneratorError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(min(0.1 * 2**attempt, 2.0))
            except (httpx.HTTPStatusError, ValueError) as exc:
                raise GeneratorError(f"bad reply from {self.endpoint}: {exc}") from None
        raise GeneratorError(f"{self.endpoint} failed after {self.retries + 1} attempts: {last}")

    def prompts(self, meta: MinimalMetadata) -> PromptSet:
        texts = {}
        for level in LEVELS:
            req = GeneratorRequest(metadata=meta.to_dict(), level=level, k_shot_examples=self.k_shot_examples)
            texts[level] = self.request(req).text
        return PromptSet(**texts)


def annotate(meta: MinimalMetadata, model: CadModel, generator: ExternalGenerator | None = None) -> PromptSet:
    """Templates by default, the external generator when one is given."""
    if generator is None:
        return generate_prompts(meta, model)
    return generator.prompts(meta)
