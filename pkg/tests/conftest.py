import math

import pytest

from text2cad.cad import Arc, BooleanOp, CadModel, Circle, Extrusion, Face, Line, Loop, Part, Point2D, Sketch


def P(x, y):
    return Point2D(float(x), float(y))


def rect_loop(x0, y0, x1, y1):
    c = [P(x0, y0), P(x1, y0), P(x1, y1), P(x0, y1)]
    return Loop(tuple(Line(c[i], c[(i + 1) % 4]) for i in range(4)))


def circle_loop(cx, cy, r):
    return Loop((Circle.from_radius(P(cx, cy), r),))


def flat_extrusion(d_pos=1.0, d_neg=0.0, op=BooleanOp.NEW, tau=(0.0, 0.0, 0.0), sigma=1.0):
    return Extrusion(0.0, 0.0, 0.0, tau, sigma, d_pos, d_neg, op)


def single(loop, ex=None, holes=()):
    return CadModel((Part(Sketch((Face(loop, tuple(holes)),)), ex or flat_extrusion()),))


@pytest.fixture
def cube():
    return single(rect_loop(0, 0, 1, 1))


@pytest.fixture
def cylinder():
    return single(circle_loop(0.5, 0.5, 0.5))


def rounded_loop():
    """Rectangle with its top-right corner replaced by a quarter arc."""
    r = 0.25
    c = P(0.75, 0.75)
    mid = P(c.x + r * math.cos(math.pi / 4), c.y + r * math.sin(math.pi / 4))
    return Loop((
        Line(P(0, 0), P(1, 0)),
        Line(P(1, 0), P(1, 0.75)),
        Arc(P(1, 0.75), mid, P(0.75, 1)),
        Line(P(0.75, 1), P(0, 1)),
        Line(P(0, 1), P(0, 0)),
    ))
