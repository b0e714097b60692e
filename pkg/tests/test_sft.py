import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _gen import half_bin, random_instances
from spotkit import codec, sft, synth
from spotkit.metrics import MatchConfig, spotting_e2e
from spotkit.prompting import PromptRng
from spotkit.synth import SceneSpec

PAIRS = {"N-SPOT": 2, "S-SPOT": 1, "L-SPOT": 4}


def _scene(seed, n_bins=1000):
    rng = np.random.default_rng(seed)
    ext, insts = random_instances(rng, "spotting", n_bins)
    return SceneSpec(ext, insts, "spotting", None, n_bins)


def _pos_f1(scene, result):
    hx, hy = half_bin(scene.extent, scene.n_bins)
    # a box corner or center written in bins is within half a bin of the true value
    gt = []
    for i in scene.instances:
        x0, y0, x1, y1 = i.geometry.bounds()
        gt.append(((x0 - hx, y0 - hy, x1 + hx, y1 + hy), i.transcription))
    # optimal assignment: random boxes overlap and may repeat a text, which can trip greedy matching
    preds = sft.to_predictions(result, scene.extent, scene.n_bins)
    return spotting_e2e(gt, preds, MatchConfig(assignment="optimal"))["pos"]


@pytest.mark.parametrize("variant", sft.VARIANTS)
def test_round_trip_recovers_every_instance(variant):
    for seed in range(200):
        scene = _scene(seed)
        rec = sft.build_record(scene, variant, seed=seed, doc_id=str(seed), image="img.png")
        res = sft.parse_dialogue(rec.responses, variant)
        assert res.diagnostics == []
        truth = codec.reading_order(scene.instances)
        assert [e.text for e in res.entries] == [i.transcription for i in truth]
        pos = _pos_f1(scene, res)
        assert pos.f1 == 1.0 or (pos.n_gt == 0 and pos.n_pred == 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**9), st.sampled_from(sft.VARIANTS))
def test_turn_counts_and_roles_alternate(seed, variant):
    rec = sft.build_record(_scene(seed), variant, seed=seed)
    assert rec.n_pairs == PAIRS[variant]
    assert [r for r, _ in rec.turns] == ["instruction", "response"] * PAIRS[variant]


def test_json_round_trip():
    rec = sft.build_record(_scene(3), "L-SPOT", seed=1, doc_id="d3", image="a.png")
    d = json.loads(json.dumps(rec.to_json()))
    assert [c["from"] for c in d["conversations"][:2]] == ["human", "gpt"]
    assert sft.ConversationRecord.from_json(d) == rec
    assert "<img>a.png</img>" in rec.turns[0][1]


def test_text_with_quotes_and_spaces_survives():
    scene = synth.gen_scene(PromptRng(0))
    insts = [codec.make_instance(scene.instances[0].geometry, 'say "hi", ok', scene.extent, 1000)]
    s = SceneSpec(scene.extent, insts)
    for v in sft.VARIANTS:
        res = sft.parse_dialogue(sft.build_record(s, v).responses, v)
        assert [e.text for e in res.entries] == ['say "hi", ok']


def test_empty_annotation_uses_no_text_marker():
    s = SceneSpec(synth.gen_scene(PromptRng(0)).extent, [])
    for v in sft.VARIANTS:
        rec = sft.build_record(s, v)
        assert all(t == "no text" for t in rec.responses)
        res = sft.parse_dialogue(rec.responses, v)
        assert res.entries == [] and res.diagnostics == []


def test_phrasing_is_deterministic_in_seed():
    s = _scene(1)
    assert sft.build_record(s, "N-SPOT", seed=4) == sft.build_record(s, "N-SPOT", seed=4)
    prompts = {sft.build_record(s, "N-SPOT", seed=k).turns[0][1] for k in range(30)}
    assert len(prompts) > 1


def test_malformed_responses_give_diagnostics():
    scene = _scene(2)
    assert scene.instances
    good = sft.build_record(scene, "N-SPOT").responses
    lines = good[1].splitlines()
    broken = "\n".join(["(1,2) -> garbage"] + lines[1:])
    res = sft.parse_dialogue([good[0], broken], "N-SPOT")
    assert any("line 1" in d for d in res.diagnostics)
    assert any("turn 1" in d for d in res.diagnostics)
    res = sft.parse_dialogue(good[1:], "N-SPOT")
    assert any("expects 2 responses" in d for d in res.diagnostics)
    assert sft.parse_dialogue([], "S-SPOT").entries == []


def test_unknown_variant():
    with pytest.raises(ValueError):
        sft.build_record(_scene(0), "X-SPOT")


def test_custom_template_file(tmp_path):
    tpl = sft.load_templates()
    tpl["no_text"] = "nothing"
    tpl["short"] = ["read {image}"]
    p = tmp_path / "t.json"
    p.write_text(json.dumps(tpl))
    loaded = sft.load_templates(p)
    rec = sft.build_record(SceneSpec(synth.gen_scene(PromptRng(0)).extent, []), "S-SPOT", loaded, image="z")
    assert rec.turns == [("instruction", "read z"), ("response", "nothing")]
    del tpl["spot"]
    p.write_text(json.dumps(tpl))
    with pytest.raises(ValueError):
        sft.load_templates(p)


def test_import_ocr_jsonl(tmp_path):
    p = tmp_path / "ocr.jsonl"
    rows = [{"image": "a.jpg", "width": 100, "height": 50,
             "annotations": [{"text": "hi", "bbox": [10, 10, 30, 20]},
                             {"text": "yo", "polygon": [[50, 5], [90, 5], [90, 25], [50, 25]]}]},
            {"image": "b.jpg", "width": 10, "height": 10, "annotations": []}]
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    got = sft.import_ocr_jsonl(p)
    assert [g[0] for g in got] == ["a.jpg", "b.jpg"]
    scene = got[0][1]
    assert [i.transcription for i in scene.instances] == ["hi", "yo"]
    assert scene.instances[0].center.x_bin == 200
    res = sft.parse_dialogue(sft.build_record(scene, "L-SPOT").responses, "L-SPOT")
    assert _pos_f1(scene, res).f1 == 1.0
    p.write_text(json.dumps({"image": "c", "width": 5, "height": 5, "annotations": [{"text": "x"}]}))
    with pytest.raises(ValueError):
        sft.import_ocr_jsonl(p)
