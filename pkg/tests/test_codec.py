import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from text2cad.cad import BooleanOp, CadModel, Reason, quantize
from text2cad.codec import (
    END_CURVE, END_EXTRUDE, END_FACE, END_LOOP, END_SKETCH, MAX_TOKENS, SEQ, VOCAB_SIZE,
    CadSequence, decode, encode, sequence_stats, try_decode,
)
from text2cad.dataset import synthetic_model
from text2cad.errors import InvalidModel, InvalidityError, TooLong

from conftest import circle_loop, flat_extrusion, rect_loop, single


def test_vocabulary_layout():
    assert (SEQ, END_SKETCH, END_FACE, END_LOOP, END_CURVE, END_EXTRUDE) == (1, 2, 3, 4, 5, 6)
    assert VOCAB_SIZE == 267 and MAX_TOKENS == 272


def test_unit_square_token_counts():
    toks = encode(single(rect_loop(0, 0, 1, 1), flat_extrusion(0.5))).tokens
    x = toks[:, 0]
    assert toks[0].tolist() == [1, 0] and toks[-1].tolist() == [1, 0]
    assert (x == END_CURVE).sum() == 4
    for t in (END_LOOP, END_FACE, END_SKETCH, END_EXTRUDE):
        assert (x == t).sum() == 1
    e_s = int(np.flatnonzero(x == END_SKETCH)[0])
    ext = toks[e_s + 1 : -2]
    assert len(ext) == 10  # nine values and the boolean
    assert ext[-1].tolist() == [BooleanOp.NEW.token, 0]
    # 4 lines x (2 points + e_c) + e_l + e_f + e_s + 10 + e_e + start + end
    assert len(toks) == 12 + 3 + 10 + 1 + 2


def test_circle_has_two_points():
    toks = encode(single(circle_loop(0.5, 0.5, 0.5))).tokens
    first_ec = int(np.flatnonzero(toks[:, 0] == END_CURVE)[0])
    assert first_ec == 3
    assert toks[1].tolist() == [quantize(0.5), quantize(0.5)]
    assert toks[2].tolist() == [quantize(0.5), quantize(1.0)]


def test_non_coordinate_tokens_have_zero_y():
    for i in range(30):
        toks = encode(synthetic_model(2, i)).tokens
        special = toks[:, 0] < 11
        assert (toks[special, 1] == 0).all()
        values = toks[~special]
        # sketch coordinates use both components, extrusion values only x
        assert ((values[:, 1] >= 11) | (values[:, 1] == 0)).all()


def test_empty_model_rejected():
    with pytest.raises(InvalidModel):
        encode(CadModel(()))


def test_too_long():
    part = single(rect_loop(0, 0, 1, 1)).parts[0]
    with pytest.raises(TooLong):
        encode(CadModel((part,) * 12))


def test_round_trip_synthetic():
    for i in range(100):
        m = synthetic_model(9, i)
        seq = encode(m)
        assert decode(seq) == m
        assert encode(decode(seq)) == seq


def test_round_trip_ignores_padding():
    m = synthetic_model(9, 0)
    seq = encode(m)
    assert decode(CadSequence(seq.padded())) == m


def test_text_serialization():
    seq = encode(synthetic_model(4, 1))
    text = seq.to_text()
    assert text.splitlines()[0] == "1 0"
    assert CadSequence.from_text(text) == seq


def _square_tokens():
    return [list(t) for t in encode(single(rect_loop(0, 0, 1, 1), flat_extrusion(0.5))).tokens]


def test_open_loop_detected():
    toks = _square_tokens()
    toks[4] = [quantize(0.9), quantize(0.9)]  # end of the second line no longer meets the third
    model, report, _ = try_decode(CadSequence(toks))
    assert model is None and report.reasons == (Reason.OpenLoop,)
    with pytest.raises(InvalidityError) as err:
        decode(CadSequence(toks))
    assert "OpenLoop" in str(err.value)


def test_missing_end_extrude():
    toks = _square_tokens()
    del toks[-2]
    _, report, _ = try_decode(CadSequence(toks))
    assert report.reasons == (Reason.MalformedStructure,)


def test_zero_extrusion_counted():
    toks = _square_tokens()
    e_s = next(i for i, t in enumerate(toks) if t[0] == END_SKETCH)
    toks[e_s + 1] = [quantize(0.0), 0]
    toks[e_s + 2] = [quantize(0.0), 0]
    stats = sequence_stats([CadSequence(toks)] + [encode(synthetic_model(0, i)) for i in range(3)])
    assert stats["count"] == 4 and stats["invalid_count"] == 1
    assert stats["reason_histogram"] == {"ZeroExtrusion": 1}


def test_stats_valid_and_malformed():
    good = [encode(synthetic_model(0, i)) for i in range(7)]
    bad = [CadSequence([[1, 0], [5, 0], [1, 0]]), CadSequence([[0, 0]]), CadSequence([[2, 3]])]
    stats = sequence_stats(good + bad)
    assert stats["invalid_count"] == 3
    assert sequence_stats(good[:10])["invalid_count"] == 0


@pytest.mark.parametrize("toks", [
    [],
    [[1, 0]],
    [[1, 0], [1, 0]],
    [[300, 5]],
    [[-4, 0]],
    [[1, 0], [11, 11], [11, 11], [5, 0], [4, 0], [3, 0], [2, 0]],
    [[1, 0]] + [[11, 11]] * 400,
])
def test_decoder_handles_garbage(toks):
    model, report, _ = try_decode(CadSequence(np.array(toks, dtype=np.int64).reshape(-1, 2)))
    assert model is None and not report.valid


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 266), st.integers(0, 266)), max_size=80))
def test_decoder_total(pairs):
    model, report, _ = try_decode(CadSequence(np.array(pairs, dtype=np.int64).reshape(-1, 2)))
    assert (model is None) == (not report.valid)
    if model is not None:
        assert encode(model) == CadSequence(np.array(pairs).reshape(-1, 2))
