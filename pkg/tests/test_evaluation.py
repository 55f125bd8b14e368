import itertools
import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from text2cad.cad import BooleanOp, CadModel, Face, Part, Sketch, quantize_model
from text2cad.codec import CadSequence, encode
from text2cad.dataset import generate_synthetic_dataset, synthetic_model
from text2cad.errors import EmptyCloud, ManifestMismatch, NonFiniteCost
from text2cad.evaluation import (
    REPORT_SCHEMA, chamfer, evaluate_corpus, evaluate_models, extrusion_f1, hungarian, match_loops,
    primitive_f1,
)

from conftest import circle_loop, flat_extrusion, rect_loop, single


def brute_force(cost):
    m, n = cost.shape
    if m <= n:
        return min(math.fsum(cost[i, p[i]] for i in range(m)) for p in itertools.permutations(range(n), m))
    return brute_force(cost.T)


def test_hungarian_two_by_two():
    pairs, total = hungarian([[1, 2], [2, 1]])
    assert pairs == [(0, 0), (1, 1)] and total == 2


def test_hungarian_diagonal():
    c = np.full((5, 5), 100.0)
    np.fill_diagonal(c, 0.0)
    assert hungarian(c) == ([(i, i) for i in range(5)], 0.0)


def test_hungarian_rectangular():
    pairs, total = hungarian([[5, 1, 9], [1, 5, 9]])
    assert pairs == [(0, 1), (1, 0)] and total == 2
    pairs, total = hungarian([[5, 1], [1, 5], [0, 0]])
    assert len(pairs) == 2 and total == 1 == brute_force(np.array([[5, 1], [1, 5], [0, 0]], float))


def test_hungarian_lexicographic_tie_break():
    assert hungarian(np.ones((3, 3)))[0] == [(0, 0), (1, 1), (2, 2)]
    assert hungarian([[0, 0], [0, 0], [0, 0]])[0] == [(0, 0), (1, 1)]


def test_hungarian_random_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        m, n = rng.integers(1, 7, size=2)
        c = rng.uniform(0, 10, size=(m, n))
        if rng.random() < 0.3:
            c = np.round(c)  # ties
        _, total = hungarian(c)
        assert total == brute_force(c)


def test_hungarian_rejects_nonfinite():
    with pytest.raises(NonFiniteCost):
        hungarian([[1, math.inf]])
    with pytest.raises(NonFiniteCost):
        hungarian([[math.nan]])


def test_chamfer_cases():
    p = np.random.default_rng(1).uniform(size=(50, 3))
    assert chamfer(p, p) == 0.0
    assert abs(chamfer([[0, 0, 0]], [[0.1, 0, 0]]) - 0.02) <= 1e-12
    with pytest.raises(EmptyCloud):
        chamfer(np.zeros((0, 3)), p)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 10**6))
def test_chamfer_symmetric_nonnegative(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert chamfer(a, b) >= 0
    assert abs(chamfer(a, b) - chamfer(b, a)) <= 1e-12


def _two_face_sketch(order=(0, 1)):
    loops = [rect_loop(0, 0, 0.4, 0.4), rect_loop(0.6, 0.6, 1, 1)]
    return Sketch(tuple(Face(loops[i], ()) for i in order))


def test_match_loops_identity_and_cardinality():
    s = _two_face_sketch()
    lm = match_loops(s, s)
    assert lm.pairs == [(0, 0), (1, 1)] and lm.cost == 0
    one = Sketch((Face(rect_loop(0, 0, 0.4, 0.4), ()),))
    lm = match_loops(s, one)
    assert lm.pairs == [(0, 0)] and lm.unmatched_gt == [1]


def test_match_loops_order_invariant():
    lm = match_loops(_two_face_sketch(), _two_face_sketch((1, 0)))
    assert sorted(lm.pairs) == [(0, 1), (1, 0)]


def _model(sketch, ex=None):
    return CadModel((Part(sketch, ex or flat_extrusion()),))


def test_primitive_f1_identity():
    m = synthetic_model(3, 4)
    for v in primitive_f1(m, m).values():
        assert v["f1"] == 1.0


def test_primitive_f1_missing_loop():
    gt = _model(_two_face_sketch())
    pred = _model(Sketch((Face(rect_loop(0, 0, 0.4, 0.4), ()),)))
    line = primitive_f1(gt, pred)["line"]
    assert line["precision"] == 1.0 and line["recall"] == 0.5


def test_primitive_f1_wrong_type():
    gt = single(rect_loop(0, 0, 1, 1))
    pred = single(circle_loop(0.5, 0.5, 0.5))
    f = primitive_f1(gt, pred)
    assert f["circle"]["f1"] == 0.0 and f["line"]["f1"] == 0.0


def test_primitive_f1_tolerance():
    gt = quantize_model(single(rect_loop(0, 0, 1, 1)))
    d = 3 / 255
    near = quantize_model(single(rect_loop(0, 0, 1 - d, 1)))
    far = quantize_model(single(rect_loop(0, 0, 1 - 4 / 255, 1)))
    assert primitive_f1(gt, near)["line"]["f1"] == 1.0
    assert primitive_f1(gt, far)["line"]["f1"] == 0.25  # only the left edge keeps both ends
    assert primitive_f1(gt, far, tolerance=4)["line"]["f1"] == 1.0


def test_primitive_f1_permutation_invariant():
    a = _model(_two_face_sketch())
    b = _model(_two_face_sketch((1, 0)))
    assert primitive_f1(a, b)["line"]["f1"] == 1.0


def test_extrusion_f1_cases(cube):
    assert extrusion_f1(cube, cube)["f1"] == 1.0
    second = single(rect_loop(0, 0, 0.5, 0.5), flat_extrusion(op=BooleanOp.JOIN)).parts[0]
    gt = CadModel((cube.parts[0], second))
    pred = CadModel((cube.parts[0], second, second))
    f = extrusion_f1(gt, pred)
    assert f["precision"] == pytest.approx(2 / 3) and f["recall"] == 1.0
    cut = CadModel((cube.parts[0], single(rect_loop(0, 0, 0.5, 0.5), flat_extrusion(op=BooleanOp.CUT)).parts[0]))
    assert extrusion_f1(gt, cut)["precision"] == 0.5


def test_evaluate_identity_and_schema():
    gt = {f"m{i}": synthetic_model(2, i) for i in range(8)}
    preds = {k: encode(m) for k, m in gt.items()}
    rep = evaluate_models(gt, preds, resolution=32, n_points=256)
    assert (rep.f1_line, rep.f1_arc, rep.f1_circle, rep.f1_extrusion) == (1.0, 1.0, 1.0, 1.0)
    assert rep.cd_mean == 0.0 and rep.cd_median == 0.0 and rep.invalidity_ratio == 0.0
    jsonschema.validate(json.loads(rep.to_json()), REPORT_SCHEMA)
    assert "Line F1" in rep.table()


def test_evaluate_invalidity_ratio():
    gt = {f"m{i}": synthetic_model(2, i) for i in range(10)}
    preds = {k: encode(m) for k, m in gt.items()}
    for k in ("m1", "m4", "m7"):
        preds[k] = CadSequence([[1, 0], [5, 0], [1, 0]])
    rep = evaluate_models(gt, preds, with_cd=False)
    assert rep.invalidity_ratio == 0.3
    assert rep.valid_count == 7
    assert "cd_mean" not in rep.to_dict()


def test_evaluate_all_invalid_omits_cd():
    gt = {"a": synthetic_model(2, 0)}
    rep = evaluate_models(gt, {"a": CadSequence([[0, 0]])})
    doc = rep.to_dict()
    assert "cd_mean" not in doc and rep.invalidity_ratio == 1.0
    jsonschema.validate(doc, REPORT_SCHEMA)


def test_evaluate_deterministic():
    gt = {f"m{i}": synthetic_model(6, i) for i in range(4)}
    preds = {k: encode(synthetic_model(6, i + 10)) for i, k in enumerate(gt)}
    a = evaluate_models(gt, preds, resolution=24, n_points=128)
    b = evaluate_models(gt, preds, resolution=24, n_points=128)
    assert a.to_json() == b.to_json()
    assert a.cd_mean > 0


def test_evaluate_corpus_unknown_ids(tmp_path):
    man = generate_synthetic_dataset(5, 0, tmp_path)
    with pytest.raises(ManifestMismatch):
        evaluate_corpus(man, {"nope": CadSequence([[1, 0]])})
