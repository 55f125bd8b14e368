import re

import httpx
import pytest

from text2cad.cad import BooleanOp, CadModel, quantize_model
from text2cad.dataset import describe, synthetic_model
from text2cad.errors import GeneratorError, TemplateMismatch
from text2cad.metadata import minimal_metadata
from text2cad.prompts import (
    ExternalGenerator, GeneratorRequest, PromptSet, annotate, generate_prompts,
    parse_expert_prompt, shape_phrase,
)

from conftest import circle_loop, flat_extrusion, rect_loop, single


def _ring():
    from text2cad.cad import Face, Part, Sketch

    face = Face(circle_loop(0.5, 0.5, 0.5), (circle_loop(0.5, 0.5, 0.25),))
    return CadModel((Part(Sketch((face,)), flat_extrusion(0.5)),))


def test_shape_phrases(cube):
    assert shape_phrase(cube) == "a rectangular prism"
    assert shape_phrase(_ring()) == "a ring-like structure"
    assert "cylindrical object" in shape_phrase(single(circle_loop(0.5, 0.5, 0.5)))
    tall = single(rect_loop(0, 0, 1, 1), flat_extrusion(d_pos=1.0, sigma=0.25))
    assert shape_phrase(tall).startswith("an elongated")


def test_assembly_phrase(cube):
    other = single(rect_loop(0, 0, 0.5, 0.5), flat_extrusion(op=BooleanOp.JOIN)).parts[0]
    assert shape_phrase(CadModel((cube.parts[0], other))).startswith("an assembly of")


def test_cube_prompts(cube):
    m = quantize_model(cube)
    p = generate_prompts(minimal_metadata(m), m)
    assert not re.search(r"\d", p.L0)
    assert not re.search(r"\d", p.L1)
    for corner in ("(0.0000, 0.0000)", "(1.0000, 0.0000)", "(1.0000, 1.0000)", "(0.0000, 1.0000)"):
        assert corner in p.L3
    assert "1.0000 units towards the normal" in p.L3
    assert "about" in p.L2


def test_prompts_deterministic():
    m = synthetic_model(4, 2)
    assert generate_prompts(describe(m), m) == generate_prompts(describe(m), m)


def test_level_lengths_increase():
    ok = 0
    for i in range(100):
        m = synthetic_model(6, i)
        p = generate_prompts(describe(m), m)
        n = [len(p.level(lv).split()) for lv in ("L0", "L1", "L2", "L3")]
        ok += n[0] < n[1] < n[2] < n[3]
    assert ok >= 95


def test_l3_contains_every_coordinate():
    for i in range(20):
        m = synthetic_model(8, i)
        text = generate_prompts(describe(m), m).L3
        for part in m.parts:
            for c in part.sketch.curves:
                for pt in c.points:
                    assert f"({pt.x:.4f}, {pt.y:.4f})" in text


def test_l3_round_trip():
    for i in range(200):
        m = synthetic_model(12, i)
        assert parse_expert_prompt(generate_prompts(describe(m), m).L3) == m


def test_l3_perturbed_coordinate():
    m = synthetic_model(12, 0)
    text = generate_prompts(describe(m), m).L3
    first = re.search(r"\((\d\.\d{4}), (\d\.\d{4})\)", text)
    x = float(first.group(1))
    new_x = x + 2 / 255 if x < 0.5 else x - 2 / 255
    changed = text[: first.start(1)] + f"{new_x:.4f}" + text[first.end(1):]
    m2 = parse_expert_prompt(changed)
    a = [v for p in m.parts for c in p.sketch.curves for pt in c.points for v in pt]
    b = [v for p in m2.parts for c in p.sketch.curves for pt in c.points for v in pt]
    diff = [i for i, (u, v) in enumerate(zip(a, b)) if u != v]
    assert len(diff) >= 1
    assert all(b[i] == pytest.approx(new_x, abs=1e-4) for i in diff)
    assert [p.extrusion for p in m.parts] == [p.extrusion for p in m2.parts]


@pytest.mark.parametrize("text", ["a nice chair with four legs", "", "Part 1: draw something"])
def test_foreign_text(text):
    with pytest.raises(TemplateMismatch):
        parse_expert_prompt(text)


def _client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_external_generator_contract(cube):
    seen = []

    def handler(request):
        body = GeneratorRequest.model_validate_json(request.content)
        seen.append(body.level)
        return httpx.Response(200, json={"text": f"text for {body.level}", "model_name": "stub", "latency_ms": 1.0})

    gen = ExternalGenerator("http://gen.test/v1/prompt", client=_client(handler), k_shot_examples=["ex"])
    p = annotate(minimal_metadata(cube), cube, gen)
    assert seen == ["L0", "L1", "L2", "L3"]
    assert p == PromptSet("text for L0", "text for L1", "text for L2", "text for L3")


def test_external_generator_retries_5xx(cube):
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"text": "ok", "model_name": "stub", "latency_ms": 2.0})

    gen = ExternalGenerator("http://gen.test/", retries=2, client=_client(handler))
    req = GeneratorRequest(metadata=minimal_metadata(cube).to_dict(), level="L0")
    assert gen.request(req).text == "ok"
    assert calls["n"] == 3


def test_external_generator_gives_up(cube):
    gen = ExternalGenerator("http://gen.test/", retries=1, client=_client(lambda r: httpx.Response(500)))
    with pytest.raises(GeneratorError):
        gen.request(GeneratorRequest(metadata={}, level="L1"))


def test_external_generator_rejects_empty_text():
    reply = {"text": "", "model_name": "stub", "latency_ms": 1.0}
    gen = ExternalGenerator("http://gen.test/", client=_client(lambda r: httpx.Response(200, json=reply)))
    with pytest.raises(GeneratorError):
        gen.request(GeneratorRequest(metadata={}, level="L2"))


def test_annotate_defaults_to_templates(cube):
    meta = minimal_metadata(cube)
    assert annotate(meta, cube) == generate_prompts(meta, cube)
