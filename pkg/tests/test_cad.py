import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from text2cad.cad import (
    Arc, BooleanOp, CadModel, Circle, Extrusion, Line, Loop, Part, Reason, Sketch, Face,
    dequantize, dequantize_param, euler_from_rotation, extrusion_from_tokens, extrusion_tokens,
    normalize_model, normalize_sketches, quantize, quantize_model, quantize_param, rotation_matrix,
    validate_model,
)
from text2cad.dataset import synthetic_model
from text2cad.errors import DegenerateInput, OutOfRange

from conftest import P, flat_extrusion, rect_loop, rounded_loop, single


def test_quantize_bounds_and_midpoint():
    assert quantize(0.0) == 11
    assert quantize(1.0) == 266
    assert quantize(0.5) == 139  # 127.5 rounds up


def test_quantize_matches_formula_on_grid():
    # independent oracle: decimal arithmetic avoids float rounding at .5 ties
    from decimal import ROUND_HALF_UP, Decimal

    for k in range(0, 10001):
        v = k / 10000
        expect = int((Decimal(k) * 255 / Decimal(10000)).quantize(Decimal(1), rounding=ROUND_HALF_UP)) + 11
        assert quantize(v) == expect, v


def test_dequantize_examples():
    assert dequantize(11) == 0.0
    assert dequantize(266) == 1.0
    assert dequantize(139) == pytest.approx(128 / 255)


@pytest.mark.parametrize("v", [-0.01, 1.01, float("nan")])
def test_quantize_out_of_range(v):
    with pytest.raises(OutOfRange):
        quantize(v)


def test_quantize_tolerance():
    assert quantize(-1e-10) == 11
    assert quantize(1 + 1e-10) == 266


@pytest.mark.parametrize("q", [10, 267, -1])
def test_dequantize_out_of_range(q):
    with pytest.raises(OutOfRange):
        dequantize(q)


def test_quantize_round_trip_all_tokens():
    assert all(quantize(dequantize(q)) == q for q in range(11, 267))


@given(st.floats(0.0, 1.0))
def test_dequantize_within_half_step(v):
    assert abs(dequantize(quantize(v)) - v) <= 0.5 / 255 + 1e-12


def test_param_ranges():
    assert quantize_param(-math.pi, -math.pi, math.pi) == 11
    assert quantize_param(math.pi, -math.pi, math.pi) == 266
    assert quantize_param(5.0, 0.0, 2.0, clamp=True) == 266
    assert dequantize_param(266, -1.0, 1.0) == 1.0


def test_angle_grid_has_no_exact_zero():
    # documented consequence of an even-sized grid on a symmetric range
    z = dequantize_param(quantize_param(0.0, -math.pi, math.pi), -math.pi, math.pi)
    assert z != 0.0 and abs(z) < math.pi / 255 + 1e-12


def test_extrusion_token_order():
    ex = Extrusion(theta=math.pi, phi=-math.pi, gamma=-math.pi, tau=(-1.0, 1.0, -1.0), sigma=2.0,
                   d_pos=1.0, d_neg=0.0, boolean_op=BooleanOp.CUT)
    toks = extrusion_tokens(ex)
    assert toks == [266, 11, 11, 266, 11, 266, 11, 11, 266]
    back = extrusion_from_tokens(toks, BooleanOp.CUT)
    assert back.boolean_op is BooleanOp.CUT
    assert back.params() == pytest.approx(ex.params())


def test_boolean_tokens():
    assert [op.token for op in BooleanOp] == [7, 8, 9, 10]
    assert BooleanOp.from_token(10) is BooleanOp.INTERSECT


def test_validate_unit_square_valid():
    assert validate_model(single(rect_loop(0, 0, 1, 1), flat_extrusion(0.5))).valid


def test_validate_degenerate_line():
    lp = Loop((Line(P(0, 0), P(0, 0)),))
    assert validate_model(single(lp)).reasons == (Reason.DegenerateLine,)


def test_validate_zero_extrusion():
    rep = validate_model(single(rect_loop(0, 0, 1, 1), flat_extrusion(0.0, 0.0)))
    assert rep.reasons == (Reason.ZeroExtrusion,)
    assert not rep.valid


def test_validate_zero_scale():
    rep = validate_model(single(rect_loop(0, 0, 1, 1), flat_extrusion(sigma=0.0)))
    assert Reason.ZeroScale in rep.reasons


def test_validate_open_loop():
    lp = Loop((Line(P(0, 0), P(1, 0)), Line(P(1, 0), P(1, 1)), Line(P(1, 1), P(0, 0.5))))
    assert validate_model(single(lp)).reasons == (Reason.OpenLoop,)


def test_validate_collinear_arc():
    lp = Loop((Arc(P(0, 0), P(0.5, 0), P(1, 0)), Line(P(1, 0), P(0, 0))))
    assert Reason.DegenerateArc in validate_model(single(lp)).reasons


def test_validate_circle_top_must_be_above_center():
    lp = Loop((Circle(P(0.5, 0.5), P(0.7, 0.5)),))
    assert Reason.DegenerateCircle in validate_model(single(lp)).reasons


def test_validate_first_part_must_be_new():
    m = single(rect_loop(0, 0, 1, 1), flat_extrusion(op=BooleanOp.CUT))
    assert Reason.MalformedStructure in validate_model(m).reasons


def test_validate_reports_every_violation_in_order():
    bad = Loop((Line(P(0, 0), P(0, 0)),))
    m = CadModel((
        Part(Sketch((Face(bad, ()),)), flat_extrusion()),
        Part(Sketch((Face(rect_loop(0, 0, 1, 1), ()),)), flat_extrusion(0.0, 0.0, BooleanOp.JOIN)),
    ))
    assert validate_model(m).reasons == (Reason.DegenerateLine, Reason.ZeroExtrusion)


def test_validate_empty_model():
    assert not validate_model(CadModel(())).valid


def test_rounded_loop_is_valid():
    assert validate_model(single(rounded_loop())).valid


def test_normalize_sketch_example():
    m = single(rect_loop(0, 0, 2, 2), flat_extrusion(sigma=1.0))
    out = normalize_sketches(m)
    lp = out.parts[0].sketch.faces[0].outer
    assert [c.start for c in lp.curves] == [P(0, 0), P(1, 0), P(1, 1), P(0, 1)]
    assert out.parts[0].extrusion.sigma == pytest.approx(2.0)


def test_normalize_unit_square_unchanged():
    m = single(rect_loop(0, 0, 1, 1), flat_extrusion(0.5, 0.5, tau=(0.0, 0.0, 0.5)))
    assert normalize_sketches(m) == m


def test_normalize_zero_extent():
    lp = Loop((Circle(P(0.5, 0.5), P(0.5, 0.5)),))
    with pytest.raises(DegenerateInput):
        normalize_model(single(lp))


def test_normalize_model_fits_unit_cube():
    from text2cad.cad import model_bbox

    m = single(rect_loop(0, 0, 3, 1), flat_extrusion(5.0))
    lo, hi = model_bbox(normalize_model(m))
    assert lo.min() >= -1e-9 and hi.max() <= 1 + 1e-9
    assert max(hi - lo) == pytest.approx(1.0)


def test_normalize_idempotent_on_synthetic_models():
    for i in range(20):
        m = normalize_model(synthetic_model(3, i))
        again = normalize_model(m)
        for a, b in zip(m.parts, again.parts):
            assert np.allclose(a.extrusion.params(), b.extrusion.params(), atol=1e-9)


def test_quantize_model_idempotent():
    m = synthetic_model(5, 0)
    assert quantize_model(m) == m


@given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_rotation_orthonormal(t, p, g):
    r = rotation_matrix(t, p, g)
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-9)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)


def test_rotation_examples():
    assert np.allclose(rotation_matrix(0, 0, 0), np.eye(3))
    assert np.allclose(rotation_matrix(0, math.pi / 2, 0)[:, 2], [1, 0, 0], atol=1e-12)


@given(st.floats(-3.1, 3.1), st.floats(0.05, 3.1), st.floats(-3.1, 3.1))
def test_euler_recovers_rotation(t, p, g):
    r = rotation_matrix(t, p, g)
    assert np.allclose(rotation_matrix(*euler_from_rotation(r)), r, atol=1e-9)


def test_synthetic_models_valid():
    for i in range(50):
        assert validate_model(synthetic_model(1, i)).valid
