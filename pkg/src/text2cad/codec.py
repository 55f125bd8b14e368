"""Translation between :class:`CadModel` and 2-D token sequences.

Token values (the ``x`` component; ``y`` is 0 for everything except
coordinates)::

    0        pad
    1        start / end of sequence (first occurrence is start)
    2..6     end of sketch, face, loop, curve, extrude
    7..10    boolean New, Cut, Join, Intersect
    11..266  quantized values

A sequence reads ``start, part*, end``; a part is its sketch (faces, loops,
curves of coordinate pairs, each group closed by its end token) followed by
``d+ d- tx ty tz theta phi gamma sigma beta e_e``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cad import (
    Arc,
    BooleanOp,
    CadModel,
    Circle,
    Face,
    Line,
    Loop,
    Part,
    Point2D,
    Reason,
    Sketch,
    ValidityReport,
    dequantize,
    extrusion_from_tokens,
    extrusion_tokens,
    quantize,
    validate_model,
)
from .errors import InvalidityError, InvalidModel, TooLong

PAD = 0
SEQ = 1
END_SKETCH = 2
END_FACE = 3
END_LOOP = 4
END_CURVE = 5
END_EXTRUDE = 6
BOOL_BASE = 7
VALUE_MIN = 11
VALUE_MAX = 266
VOCAB_SIZE = 267
MAX_TOKENS = 272

SPECIAL_NAMES = {
    PAD: "pad",
    SEQ: "start/end",
    END_SKETCH: "e_s",
    END_FACE: "e_f",
    END_LOOP: "e_l",
    END_CURVE: "e_c",
    END_EXTRUDE: "e_e",
    7: "New",
    8: "Cut",
    9: "Join",
    10: "Intersect",
}


@dataclass(frozen=True, eq=False)
class CadSequence:
    """Token pairs, shape ``(n, 2)``; trailing pad is optional."""

    tokens: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.tokens, dtype=np.int64).reshape(-1, 2)
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, CadSequence) and np.array_equal(self.trimmed().tokens, other.trimmed().tokens)

    def __hash__(self):
        return hash(self.trimmed().tokens.tobytes())

    def trimmed(self) -> CadSequence:
        """Drop trailing pad tokens."""
        nonpad = np.flatnonzero(self.tokens.any(axis=1))
        n = nonpad[-1] + 1 if len(nonpad) else 0
        return CadSequence(self.tokens[:n])

    def padded(self, length: int = MAX_TOKENS) -> np.ndarray:
        out = np.zeros((length, 2), dtype=np.int64)
        n = min(length, len(self.tokens))
        out[:n] = self.tokens[:n]
        return out

    def to_text(self) -> str:
        return "".join(f"{x} {y}\n" for x, y in self.trimmed().tokens)

    @classmethod
    def from_text(cls, text: str) -> CadSequence:
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected two integers, got {line!r}")
            rows.append((int(parts[0]), int(parts[1])))
        return cls(np.array(rows, dtype=np.int64).reshape(-1, 2))


def read_cadseq(path: str | Path) -> CadSequence:
    return CadSequence.from_text(Path(path).read_text())


def _coord(p: Point2D) -> tuple[int, int]:
    return quantize(p.x), quantize(p.y)


def encode(model: CadModel) -> CadSequence:
    report = validate_model(model)
    if not report.valid:
        raise InvalidModel(report)
    toks: list[tuple[int, int]] = [(SEQ, 0)]
    for part in model.parts:
        for face in part.sketch.faces:
            for loop in face.loops:
                for curve in loop.curves:
                    toks.extend(_coord(p) for p in curve.points)
                    toks.append((END_CURVE, 0))
                toks.append((END_LOOP, 0))
            toks.append((END_FACE, 0))
        toks.append((END_SKETCH, 0))
        ex = part.extrusion
        toks.extend((v, 0) for v in extrusion_tokens(ex))
        toks.append((ex.boolean_op.token, 0))
        toks.append((END_EXTRUDE, 0))
    toks.append((SEQ, 0))
    if len(toks) > MAX_TOKENS:
        raise TooLong(f"sequence of {len(toks)} tokens exceeds {MAX_TOKENS}")
    return CadSequence(np.array(toks, dtype=np.int64))


class _Malformed(Exception):
    pass


def _point(tok) -> Point2D:
    return Point2D(dequantize(int(tok[0])), dequantize(int(tok[1])))


def _is_coord(tok) -> bool:
    return VALUE_MIN <= tok[0] <= VALUE_MAX and VALUE_MIN <= tok[1] <= VALUE_MAX


def _parse(tokens: np.ndarray) -> CadModel:
    n = len(tokens)
    if n == 0 or tokens[0][0] != SEQ or tokens[0][1] != 0:
        raise _Malformed("missing start token")
    pos = 1

    def peek():
        if pos >= n:
            raise _Malformed("sequence ended without end token")
        return tokens[pos]

    def special(tok) -> int:
        if tok[1] != 0:
            raise _Malformed(f"non-coordinate token ({int(tok[0])}, {int(tok[1])}) has y != 0")
        return int(tok[0])

    parts = []
    while True:
        tok = peek()
        if not _is_coord(tok):
            if special(tok) == SEQ:
                pos += 1
                break
            raise _Malformed(f"expected a sketch at position {pos}")
        faces = []
        while True:  # faces
            loops = []
            while True:  # loops
                curves = []
                while True:  # curves
                    pts = []
                    while _is_coord(peek()):
                        pts.append(_point(peek()))
                        pos += 1
                    if special(peek()) != END_CURVE:
                        raise _Malformed(f"expected end of curve at position {pos}")
                    pos += 1
                    if len(pts) == 2:
                        curves.append(Line(*pts))
                    elif len(pts) == 3:
                        curves.append(Arc(*pts))
                    else:
                        raise _Malformed(f"curve with {len(pts)} points")
                    if not _is_coord(peek()):
                        break
                if special(peek()) != END_LOOP:
                    raise _Malformed(f"expected end of loop at position {pos}")
                pos += 1
                if len(curves) == 1 and isinstance(curves[0], Line):
                    curves = [Circle(curves[0].start, curves[0].end)]
                loops.append(Loop(tuple(curves)))
                if not _is_coord(peek()):
                    break
            if special(peek()) != END_FACE:
                raise _Malformed(f"expected end of face at position {pos}")
            pos += 1
            faces.append(Face(loops[0], tuple(loops[1:])))
            if not _is_coord(peek()):
                break
        if special(peek()) != END_SKETCH:
            raise _Malformed(f"expected end of sketch at position {pos}")
        pos += 1
        values = []
        for _ in range(9):
            tok = peek()
            if tok[1] != 0 or not VALUE_MIN <= tok[0] <= VALUE_MAX:
                raise _Malformed(f"expected an extrusion value at position {pos}")
            values.append(int(tok[0]))
            pos += 1
        beta = special(peek())
        if not BOOL_BASE <= beta <= BOOL_BASE + 3:
            raise _Malformed(f"expected a boolean operation at position {pos}")
        pos += 1
        if special(peek()) != END_EXTRUDE:
            raise _Malformed(f"expected end of extrusion at position {pos}")
        pos += 1
        ex = extrusion_from_tokens(values, BooleanOp.from_token(beta))
        parts.append(Part(Sketch(tuple(faces)), ex))
    if not parts:
        raise _Malformed("sequence has no parts")
    if tokens[pos:].any():
        raise _Malformed("non-pad tokens after end token")
    return CadModel(tuple(parts))


def try_decode(seq: CadSequence) -> tuple[CadModel | None, ValidityReport, str]:
    """Decode without raising: ``(model or None, report, detail)``."""
    tokens = seq.tokens
    try:
        model = _parse(tokens)
    except _Malformed as exc:
        return None, ValidityReport((Reason.MalformedStructure,)), str(exc)
    report = validate_model(model)
    if not report.valid:
        return None, report, "decoded model fails validation"
    return model, report, ""


def decode(seq: CadSequence) -> CadModel:
    """Decode a token stream; raises :class:`InvalidityError` for anything invalid."""
    model, report, detail = try_decode(seq)
    if model is None:
        raise InvalidityError(report, detail)
    return model


def sequence_stats(seqs) -> dict:
    count = invalid = 0
    histogram: Counter[str] = Counter()
    for seq in seqs:
        count += 1
        model, report, _ = try_decode(seq)
        if model is None:
            invalid += 1
            histogram.update(r.value for r in report.reasons)
    return {"count": count, "invalid_count": invalid, "reason_histogram": dict(sorted(histogram.items()))}
