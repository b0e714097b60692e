"""``spotkit`` command line.

Artifacts go to files, logs to stderr, and with ``--json`` a machine-readable
summary goes to stdout.  Exit status: 0 success, 1 invalid input or usage,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from typing import Optional, Sequence

from . import __version__
from .errors import ConfigError, SpotkitError

log = logging.getLogger("spotkit")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
TASKS = ("spotting", "kie", "table", "layout")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_config_file(path: str) -> dict:
    """``key = value`` lines grouped under optional ``[section]`` headers.

    Values are read as JSON when possible (numbers, booleans, quoted strings,
    lists), else kept as bare strings.  ``#`` starts a comment line.
    """
    out: dict = {}
    section = out
    with open(path, encoding="utf-8") as f:
        for n, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = out.setdefault(line[1:-1].strip(), {})
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                section[key] = json.loads(value)
            except json.JSONDecodeError:
                section[key] = value
    return out


def _apply(dc, overrides: dict, what: str):
    names = {f.name for f in fields(dc)}
    bad = set(overrides) - names
    if bad:
        raise ConfigError(f"unknown {what} keys: {sorted(bad)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
    return replace(dc, **vals)


def _emit(args, payload: dict) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))


def _threads() -> int:
    try:
        n = int(os.environ.get("SPOTKIT_THREADS", "1") or 1)
    except ValueError:
        raise ConfigError("SPOTKIT_THREADS must be an integer")
    if n < 1:
        raise ConfigError("SPOTKIT_THREADS must be >= 1")
    return n


def _config(args) -> dict:
    return parse_config_file(args.config) if args.config else {}


def _vocab(args, entities=None):
    from .vocab import DEFAULT_ENTITIES, default_vocabulary

    return default_vocabulary(args.n_bins, entities or DEFAULT_ENTITIES)


def _read(path: str) -> list[dict]:
    from .synth import read_jsonl

    if not os.path.exists(path):
        raise ConfigError(f"no such file: {path}")
    return read_jsonl(path)


# --- subcommands -------------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    from .synth import CorpusSpec, SceneConfig, TableConfig, gen_corpus, write_jsonl

    cfg = _config(args)
    scene = _apply(SceneConfig(n_bins=args.n_bins), cfg.get("scene", {}), "scene").validate()
    tab = _apply(TableConfig(n_bins=args.n_bins), cfg.get("table", {}), "table").validate()
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    spec = CorpusSpec(args.task, args.count, args.seed, args.shard_size, scene, tab)
    recs = gen_corpus(spec, _vocab(args, scene.entities) if args.with_ids else None, workers=_threads())
    write_jsonl(args.out, recs)
    log.info("wrote %d %s records to %s", len(recs), args.task, args.out)
    _emit(args, {"count": len(recs), "task": args.task, "path": args.out})
    return EXIT_OK


def cmd_encode(args) -> int:
    from . import prompting
    from .synth import encode_scene, record_to_scene, write_jsonl

    vocab = _vocab(args)
    out = []
    for rec in _read(args.input):
        scene = record_to_scene(rec)
        if scene.n_bins != vocab.n_bins:
            raise ConfigError(f"record {rec['id']} uses n_bins={scene.n_bins}, --n-bins is {vocab.n_bins}")
        s1, s2 = encode_scene(scene, vocab)
        n_prompt = 0
        if args.full_prompt:
            p = prompting.full_prompt(vocab)
            s1 = [s1[0], *p, *s1[1:]]
            n_prompt = len(p)
        out.append({"id": rec["id"], "task": scene.task, "n_prompt": n_prompt, "stage1_ids": s1,
                    "stage1_tokens": vocab.render(s1), "stage2_ids": s2})
    write_jsonl(args.out, out)
    _emit(args, {"count": len(out), "path": args.out})
    return EXIT_OK


def cmd_decode(args) -> int:
    from . import codec, table
    from .synth import write_jsonl

    vocab = _vocab(args)
    out = []
    for rec in _read(args.input):
        task = args.task or rec.get("task")
        if task not in TASKS:
            raise ConfigError(f"record {rec.get('id')!r}: unknown task {task!r}")
        ids = rec["stage1_ids"] if "stage1_ids" in rec else vocab.parse(rec["stage1_tokens"])
        n_prompt = rec.get("n_prompt", 0)
        row: dict = {"id": rec.get("id"), "task": task}
        if task == "table":
            doc, diags = table.decode_table_structure(ids, vocab, n_prompt)
            row["structure"] = doc.to_json()
            row["diagnostics"] = diags
            if "stage2_ids" in rec:
                texts = [codec.decode_stage2(s, vocab).text for s in rec["stage2_ids"]]
                row["html"] = table.reconstruct_html(ids, texts, vocab, n_prompt)
        else:
            d = codec.decode_stage1(ids, vocab, task, n_prompt)
            row["points"] = [{"x_bin": p.point.x_bin, "y_bin": p.point.y_bin, "labels": p.labels} for p in d.points]
            row["diagnostics"] = list(d.diagnostics)
            if "stage2_ids" in rec:
                dec2 = [codec.decode_stage2(s, vocab) for s in rec["stage2_ids"]]
                row["texts"] = [x.text for x in dec2]
                row["polygons"] = [[[v.x_bin, v.y_bin] for v in x.polygon] for x in dec2]
        out.append(row)
    write_jsonl(args.out, out)
    n_diag = sum(len(r["diagnostics"]) for r in out)
    if n_diag:
        log.warning("%d decoding diagnostic(s)", n_diag)
    _emit(args, {"count": len(out), "diagnostics": n_diag, "path": args.out})
    return EXIT_OK


def cmd_build_table_gt(args) -> int:
    from . import table
    from .synth import record_to_scene, write_jsonl

    vocab = _vocab(args)
    out = []
    for rec in _read(args.input):
        scene = record_to_scene(rec)
        if scene.table is None:
            raise ConfigError(f"record {rec['id']} is not a table record")
        doc = scene.table
        s1 = table.encode_table_structure(doc, scene.extent, vocab)
        s2 = table.build_cell_stage2_gt(doc, vocab, scene.extent)
        cells = [{"row": c.row, "col": c.col, "rowspan": c.rowspan, "colspan": c.colspan, "text": c.content,
                  "stage2_ids": s.to_ids(vocab)} for c, s in zip([c for c in doc.ordered_cells() if c.has_text], s2)]
        out.append({"id": rec["id"], "stage1_ids": list(s1.tokens), "stage1_tokens": vocab.render(s1.tokens),
                    "cells": cells, "html": table.canonical_html(doc),
                    "length": len(s1.tokens), "naive_length": table.naive_token_length(doc)})
    write_jsonl(args.out, out)
    _emit(args, {"count": len(out), "path": args.out})
    return EXIT_OK


def cmd_sample_prompt(args) -> int:
    from . import prompting

    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    rng = prompting.PromptRng(args.seed)
    lines = []
    for _ in range(args.count):
        win = prompting.sample_spatial_window(rng, args.n_bins)
        pre = prompting.sample_prefix_window(rng)
        lines.append(json.dumps({"spatial": win.as_list(), "prefix": [pre.first_char, pre.last_char]}))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _model_and_train_cfg(cfg: dict, charset: str, args):
    from .model import ModelConfig
    from .training import TrainConfig

    mc = _apply(ModelConfig(channels=len(charset) + 1), cfg.get("model", {}), "model")
    tc = _apply(TrainConfig(seed=args.seed, charset=charset), cfg.get("train", {}), "train")
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    if tc.steps < 0:
        raise ConfigError("steps must be >= 0")
    if mc.channels != len(tc.charset) + 1:
        raise ConfigError(f"model.channels={mc.channels} must equal len(charset)+1={len(tc.charset) + 1}")
    return mc, tc


def cmd_train(args) -> int:
    import torch

    from . import report, training
    from .model import build_model
    from .synth import DEFAULT_SCENE_CHARSET

    torch.set_num_threads(_threads())
    cfg = _config(args)
    charset = cfg.get("train", {}).get("charset", DEFAULT_SCENE_CHARSET)
    mc, tc = _model_and_train_cfg(cfg, charset, args)
    vocab = _vocab(args)
    recs = _read(args.corpus)
    if not recs:
        raise ConfigError("corpus is empty")
    examples = training.examples_from_records(recs, mc.grid, tc.charset)
    model = build_model(mc, vocab, args.seed)
    trace = training.train(model, examples, tc, on_log=lambda r: log.info(
        "step %d loss %.4f acc %.4f lr %.3g", r.step, r.loss, r.token_accuracy, r.lr))
    extra = {"train": {k: v for k, v in tc.__dict__.items()}, "charset": tc.charset}
    training.save_checkpoint(args.out, model, extra)
    trace_path = args.trace or os.path.splitext(args.out)[0] + "_trace.csv"
    training.write_trace(trace_path, trace)
    figs = []
    if args.report_dir and trace:
        os.makedirs(args.report_dir, exist_ok=True)
        figs.append(report.plot_trace(trace, os.path.join(args.report_dir, "train_trace.png")))
    _emit(args, {"checkpoint": args.out, "trace": trace_path, "figures": figs,
                 "final_loss": trace[-1].loss if trace else None})
    return EXIT_OK


def cmd_infer(args) -> int:
    import numpy as np
    import torch

    from . import evaluate, prompting, training
    from .synth import record_to_scene, write_jsonl

    torch.set_num_threads(_threads())
    model, extra = training.load_checkpoint(args.ckpt)
    charset = extra.get("charset")
    if charset is None:
        raise ConfigError("checkpoint lacks the rasterizer charset")
    recs = _read(args.corpus)
    out = []
    for i in range(0, len(recs), args.batch):
        chunk = recs[i:i + args.batch]
        exs = training.examples_from_records(chunk, model.cfg.grid, charset)
        by_task: dict = {}
        for rec, ex in zip(chunk, exs):
            by_task.setdefault(ex.task, []).append((rec, ex))
        for task, items in by_task.items():
            feats = np.stack([ex.features for _, ex in items])
            res = training.infer_spot(model, feats, task, prompting.full_prompt(model.vocab),
                                      extents=[ex.extent for _, ex in items])
            for (rec, _), r in zip(items, res):
                out.append({"id": rec["id"], "task": task, "result": evaluate.result_to_json(task, r.result),
                            "diagnostics": r.diagnostics})
    order = {r["id"]: k for k, r in enumerate(recs)}
    out.sort(key=lambda r: order[r["id"]])
    write_jsonl(args.out, out)
    _emit(args, {"count": len(out), "path": args.out})
    return EXIT_OK


def cmd_eval(args) -> int:
    import csv

    from . import evaluate, report

    rep = evaluate.evaluate_records(args.task, _read(args.gt), _read(args.pred))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(rep, f, indent=1, sort_keys=True)
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            for k, v in rep["aggregate"].items():
                w.writerow([k, f"{v:.6f}"])
    figs = report.eval_figures(rep, args.report_dir) if args.report_dir else []
    for k, v in rep["aggregate"].items():
        log.info("%s = %.4f", k, v)
    _emit(args, {"task": args.task, "aggregate": rep["aggregate"], "figures": figs,
                 "missing_predictions": len(rep["missing_predictions"])})
    return EXIT_OK


def cmd_gen_sft(args) -> int:
    from . import sft
    from .synth import record_to_scene, write_jsonl

    tpl = sft.load_templates(args.templates)
    if args.ocr_jsonl:
        items = [(img, img, scene) for img, scene in sft.import_ocr_jsonl(args.ocr_jsonl, args.n_bins)]
    elif args.corpus:
        items = []
        for rec in _read(args.corpus):
            scene = record_to_scene(rec)
            if scene.task not in ("spotting", "layout", "kie"):
                raise ConfigError(f"record {rec['id']} has no word annotations")
            items.append((rec["id"], rec.get("image", f"{rec['id']}.png"), scene))
    else:
        raise ConfigError("one of --corpus or --ocr-jsonl is required")
    variants = sft.VARIANTS if args.variant == "all" else (args.variant,)
    out = []
    for k, (doc_id, image, scene) in enumerate(items):
        for v in variants:
            out.append(sft.build_record(scene, v, tpl, seed=args.seed + k, doc_id=f"{doc_id}:{v}",
                                        image=image).to_json())
    write_jsonl(args.out, out)
    _emit(args, {"count": len(out), "path": args.out})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from . import training

    model, loss_fn = training.tiny_setup(args.seed, d_model=args.d_model)
    hook = None
    if args.corrupt:
        target = "layers.0.router.experts.0.fc1.weight"

        def hook(name, g):
            return g * 1.5 if name == target else g
    rep = training.grad_check(list(model.named_parameters()), loss_fn, analytic_hook=hook)
    passed = rep.max_rel_error < 1e-4
    log.info("max relative error %.3e at %s over %d entries", rep.max_rel_error, rep.worst_parameter, rep.n_checked)
    _emit(args, {**rep.as_dict(), "passed": passed, "corrupted": bool(args.corrupt)})
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    common.add_argument("--n-bins", type=int, default=1000, help="coordinate bins per axis (default 1000)")
    common.add_argument("--config", help="key = value config file with [model]/[train]/[scene]/[table] sections")
    common.add_argument("--json", action="store_true", help="print a JSON summary on stdout")

    p = _Parser(prog="spotkit", description="Structured-points-of-thought toolkit.")
    p.add_argument("--version", action="version", version=f"spotkit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-corpus", parents=[common], help="generate a synthetic JSONL corpus")
    s.add_argument("--task", choices=TASKS, default="spotting")
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--shard-size", type=int, default=256)
    s.add_argument("--with-ids", action="store_true", help="embed stage-1/stage-2 token ids")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("encode", parents=[common], help="corpus records -> token id sequences")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--full-prompt", action="store_true", help="insert the full-range prompt after <S>")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", parents=[common], help="token id sequences -> points, labels, texts")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--task", choices=TASKS)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("build-table-gt", parents=[common], help="table records -> structure and cell targets")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_table_gt)

    s = sub.add_parser("sample-prompt", parents=[common], help="draw spatial/prefix prompt windows")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample_prompt)

    s = sub.add_parser("train", parents=[common], help="train the desk-scale model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--steps", type=int)
    s.add_argument("--trace", help="trace CSV path (default: next to the checkpoint)")
    s.add_argument("--report-dir", help="write figures here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="two-stage inference over a corpus")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--batch", type=int, default=64)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    s.add_argument("--task", choices=TASKS, required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out", help="JSON report path")
    s.add_argument("--csv", help="CSV summary path")
    s.add_argument("--report-dir", help="write figures here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gen-sft", parents=[common], help="build SPOT conversation records")
    s.add_argument("--corpus")
    s.add_argument("--ocr-jsonl", help="external OCR annotations (image, width, height, annotations)")
    s.add_argument("--variant", choices=("N-SPOT", "S-SPOT", "L-SPOT", "all"), default="N-SPOT")
    s.add_argument("--templates")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_sft)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    s.add_argument("--d-model", type=int, default=16)
    s.add_argument("--corrupt", action="store_true", help="scale one FFN gradient by 1.5 (negative control)")
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.n_bins < 2:
            raise ConfigError("--n-bins must be >= 2")
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        # ConfigError and the other grammar/geometry errors derive from ValueError
        print(f"spotkit: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (SpotkitError, OSError, RuntimeError) as e:
        print(f"spotkit: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
