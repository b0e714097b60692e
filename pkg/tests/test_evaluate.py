import copy

import pytest

from spotkit import evaluate, synth
from spotkit.errors import ConfigError

TASKS = ["spotting", "kie", "table", "layout"]


@pytest.fixture(scope="module", params=TASKS)
def corpus(request):
    return request.param, synth.gen_corpus(synth.CorpusSpec(task=request.param, count=25, seed=8))


def test_perfect_predictions_score_one(corpus):
    task, recs = corpus
    preds = [{"id": r["id"], "task": task, "result": evaluate.perfect_result(r)} for r in recs]
    rep = evaluate.evaluate_records(task, recs, preds)
    assert rep["n_documents"] == len(recs) and rep["missing_predictions"] == []
    assert rep["aggregate"] and all(v == pytest.approx(1.0) for v in rep["aggregate"].values())
    assert rep["headline"] in rep["aggregate"]


def test_corpus_records_are_accepted_as_predictions(corpus):
    task, recs = corpus
    rep = evaluate.evaluate_records(task, recs, recs)
    assert rep["aggregate"][rep["headline"]] == pytest.approx(1.0)


def test_missing_predictions_score_as_empty(corpus):
    task, recs = corpus
    rep = evaluate.evaluate_records(task, recs, recs[1:])
    assert rep["missing_predictions"] == [recs[0]["id"]]
    assert rep["aggregate"][rep["headline"]] < 1.0


def test_wrong_text_lowers_spotting_scores():
    recs = synth.gen_corpus(synth.CorpusSpec(task="spotting", count=10, seed=1))
    preds = []
    for r in recs:
        res = copy.deepcopy(evaluate.perfect_result(r))
        res[0]["text"] += "Z"
        preds.append({"id": r["id"], "result": res})
    agg = evaluate.evaluate_records("spotting", recs, preds)["aggregate"]
    n_gt = sum(len(evaluate.perfect_result(r)) for r in recs)
    assert agg["pos_recall"] == pytest.approx(1 - 10 / n_gt)
    assert agg["trans_f1"] == agg["pos_f1"]


def test_task_mismatch_is_rejected():
    recs = synth.gen_corpus(synth.CorpusSpec(task="kie", count=2, seed=1))
    with pytest.raises(ConfigError):
        evaluate.evaluate_records("spotting", recs, [])
