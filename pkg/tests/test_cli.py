import json

import pytest

from spotkit import cli
from spotkit.synth import read_jsonl

TINY = """# tiny model for smoke tests
[model]
d_model = 16
n_heads = 2
n_layers = 1
mlp_factor = 2
grid = 16
[train]
batch_size = 4
log_every = 1
warmup = 1
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_config_parser(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text('top = 1\n[model]\nd_model = 32\nname = plain text\nsizes = [1, 2]\n# note\n[train]\nprompting = false\n')
    assert cli.parse_config_file(p) == {"top": 1, "model": {"d_model": 32, "name": "plain text", "sizes": [1, 2]},
                                       "train": {"prompting": False}}
    p.write_text("[model]\njunk\n")
    with pytest.raises(cli.ConfigError):
        cli.parse_config_file(p)


@pytest.mark.parametrize("task", ["spotting", "kie", "table", "layout"])
def test_gen_encode_decode_eval(tmp_path, capsys, task):
    corpus = tmp_path / "c.jsonl"
    code, out, _ = run(capsys, "gen-corpus", "--task", task, "--count", 4, "--seed", 3, "--out", corpus, "--json")
    assert code == 0 and json.loads(out)["count"] == 4
    enc = tmp_path / "e.jsonl"
    assert run(capsys, "encode", "--in", corpus, "--out", enc, "--full-prompt")[0] == 0
    dec = tmp_path / "d.jsonl"
    code, out, _ = run(capsys, "decode", "--in", enc, "--out", dec, "--json")
    assert code == 0 and json.loads(out)["diagnostics"] == 0
    rows = read_jsonl(dec)
    assert len(rows) == 4 and all(r["task"] == task for r in rows)
    code, out, _ = run(capsys, "eval", "--task", task, "--gt", corpus, "--pred", corpus, "--json",
                       "--out", tmp_path / "r.json", "--csv", tmp_path / "r.csv", "--report-dir", tmp_path / "fig")
    summary = json.loads(out)
    assert code == 0 and all(v == pytest.approx(1.0) for v in summary["aggregate"].values())
    assert all((tmp_path / "fig" / f.split("/")[-1]).exists() for f in summary["figures"])
    assert (tmp_path / "r.csv").read_text().startswith("metric,value")


def test_gen_corpus_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run(capsys, "gen-corpus", "--count", 5, "--seed", 1, "--out", a)
    run(capsys, "gen-corpus", "--count", 5, "--seed", 1, "--out", b)
    assert a.read_bytes() == b.read_bytes()


def test_build_table_gt(tmp_path, capsys):
    corpus = tmp_path / "t.jsonl"
    run(capsys, "gen-corpus", "--task", "table", "--count", 3, "--out", corpus)
    out = tmp_path / "gt.jsonl"
    assert run(capsys, "build-table-gt", "--in", corpus, "--out", out)[0] == 0
    rows = read_jsonl(out)
    assert all(r["html"].startswith("<table>") and r["length"] <= r["naive_length"] for r in rows)
    spot = tmp_path / "s.jsonl"
    run(capsys, "gen-corpus", "--count", 1, "--out", spot)
    assert run(capsys, "build-table-gt", "--in", spot, "--out", out)[0] == 1


def test_sample_prompt(capsys):
    code, out, _ = run(capsys, "sample-prompt", "--count", 3, "--seed", 2)
    rows = [json.loads(ln) for ln in out.splitlines()]
    assert code == 0 and len(rows) == 3
    assert all(len(r["spatial"]) == 4 and len(r["prefix"]) == 2 for r in rows)


def test_train_infer_eval(tmp_path, capsys):
    conf = tmp_path / "tiny.conf"
    conf.write_text(TINY)
    corpus = tmp_path / "c.jsonl"
    run(capsys, "gen-corpus", "--count", 6, "--out", corpus)
    ckpt = tmp_path / "m.spck"
    code, out, err = run(capsys, "train", "--corpus", corpus, "--out", ckpt, "--config", conf, "--steps", 3,
                         "--report-dir", tmp_path / "rep", "--json")
    assert code == 0, err
    summary = json.loads(out)
    assert ckpt.exists() and (tmp_path / "rep" / "train_trace.png").exists()
    assert len(open(summary["trace"]).read().splitlines()) == 4
    pred = tmp_path / "p.jsonl"
    assert run(capsys, "infer", "--ckpt", ckpt, "--corpus", corpus, "--out", pred, "--batch", 4)[0] == 0
    preds = read_jsonl(pred)
    assert [p["id"] for p in preds] == [r["id"] for r in read_jsonl(corpus)]
    code, out, _ = run(capsys, "eval", "--task", "spotting", "--gt", corpus, "--pred", pred, "--json")
    assert code == 0 and 0 <= json.loads(out)["aggregate"]["pos_f1"] <= 1


def test_gen_sft(tmp_path, capsys):
    corpus = tmp_path / "c.jsonl"
    run(capsys, "gen-corpus", "--count", 3, "--out", corpus)
    out = tmp_path / "sft.jsonl"
    code, js, _ = run(capsys, "gen-sft", "--corpus", corpus, "--variant", "all", "--out", out, "--json")
    assert code == 0 and json.loads(js)["count"] == 9
    rows = read_jsonl(out)
    assert {r["variant"] for r in rows} == {"N-SPOT", "S-SPOT", "L-SPOT"}
    ocr = tmp_path / "ocr.jsonl"
    ocr.write_text(json.dumps({"image": "x.png", "width": 40, "height": 40,
                               "annotations": [{"text": "a", "bbox": [1, 1, 9, 9]}]}) + "\n")
    assert run(capsys, "gen-sft", "--ocr-jsonl", ocr, "--variant", "S-SPOT", "--out", out)[0] == 0
    assert read_jsonl(out)[0]["conversations"][1]["value"].endswith('"a"')
    assert run(capsys, "gen-sft", "--out", out)[0] == 1


def test_grad_check_command(capsys):
    code, out, _ = run(capsys, "grad-check", "--d-model", 4, "--json")
    rep = json.loads(out)
    assert code == 0 and rep["passed"] and rep["max_rel_error"] < 1e-4
    code, out, _ = run(capsys, "grad-check", "--d-model", 4, "--corrupt", "--json")
    rep = json.loads(out)
    assert not rep["passed"] and rep["max_rel_error"] > 1e-2


@pytest.mark.parametrize("argv,code", [
    (["frobnicate"], 1),
    (["gen-corpus"], 1),
    (["gen-corpus", "--count", "-1", "--out", "x.jsonl"], 1),
    (["encode", "--in", "/nonexistent.jsonl", "--out", "x.jsonl"], 1),
    (["gen-corpus", "--n-bins", "1", "--out", "x.jsonl"], 1),
])
def test_invalid_input_exit_codes(capsys, argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == code


def test_unknown_config_key(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("[scene]\nwidht = 3\n")
    code, _, err = run(capsys, "gen-corpus", "--config", conf, "--out", tmp_path / "x.jsonl")
    assert code == 1 and "widht" in err


def test_runtime_failure_exit_code(tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text("[scene]\nmax_words = 6\nmin_words = 6\nwidth = 16\nheight = 16\n")
    code, _, err = run(capsys, "gen-corpus", "--config", conf, "--count", 2, "--out", tmp_path / "x.jsonl")
    assert code == 2 and "PlacementError" in err


def test_version(capsys):
    assert cli.main(["--version"]) == 0
    assert "spotkit" in capsys.readouterr().out
