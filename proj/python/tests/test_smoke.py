import hashlib
import json
import math
import os
import subprocess
from pathlib import Path

import numpy as np
import pytest

import spanqa
from spanqa import exporter

DATA = Path(os.environ.get("SPANQA_TEST_DATA", Path(__file__).resolve().parents[2] / "tests" / "data"))
MINI = DATA / "mini_squad.json"

THREE = {
    "version": "v2.0",
    "data": [
        {
            "title": "Alpha",
            "paragraphs": [
                {
                    "context": "The river Alpha flows north into the cold sea.",
                    "qas": [
                        {"id": "e1", "question": "Where does Alpha flow?", "is_impossible": False,
                         "answers": [{"text": "north", "answer_start": 22}]},
                        {"id": "e2", "question": "Who built Alpha?", "is_impossible": True, "answers": []},
                    ],
                }
            ],
        },
        {
            "title": "Beta",
            "paragraphs": [
                {
                    "context": "Beta was founded in 1901 by traders.",
                    "qas": [
                        {"id": "e3", "question": "When was Beta founded?", "is_impossible": False,
                         "answers": [{"text": "1901", "answer_start": 20}]},
                    ],
                }
            ],
        },
    ],
}


@pytest.fixture
def three(tmp_path):
    path = tmp_path / "three.json"
    path.write_text(json.dumps(THREE))
    return path


def test_tokenize_offsets():
    toks = spanqa.tokenize("Hello, world!")
    assert [t[0] for t in toks] == ["hello", ",", "world", "!"]
    assert toks[0][1:] == (0, 5)


def test_featurize_and_shapes():
    ex = spanqa.load_squad_file(str(MINI))[0]
    f = spanqa.featurize(ex, 64, training=True)
    assert f.tokens[0] == "[CLS]" and len(f.tokens) == 64
    assert f.span_text(f.start_pos, f.end_pos) == ex.answers[0].text

    cfg = spanqa.HeadConfig()
    cfg.variant = spanqa.HeadVariant.FC
    cfg.hidden_size = 8
    head = spanqa.Head(cfg, seed=1)
    assert head.num_parameters == 2 * 8 + 2 == spanqa.expected_parameter_count(cfg)

    x = spanqa.synthetic_embed(f, 8, seed=3)
    start, end = head.forward(x, f.valid_len)
    assert start.shape == end.shape == (64,)
    loss, grads = head.loss_and_grads(x, f.valid_len, f.start_pos, f.end_pos)
    assert loss > 0 and set(grads) == set(head.parameters())


def test_span_loss_uniform():
    loss, ds, de = spanqa.span_loss(np.zeros(10), np.zeros(10), 2, 3)
    assert loss == pytest.approx(math.log(10))
    assert ds.sum() == pytest.approx(0.0, abs=1e-12)


def test_compute_steps():
    plan = spanqa.compute_steps(3656, 1, 1)
    assert (plan.train_steps, plan.eval_events) == (3656, 3)


def test_errors_carry_kind():
    with pytest.raises(spanqa.SpanqaError) as info:
        spanqa.parse_squad_json("{not json")
    assert info.value.kind == "parse"


def test_sweep_and_report_all_null():
    golds = [spanqa.GoldAnswer("a", ["x"]), spanqa.GoldAnswer("b", [])]
    preds = []
    for qid in ("a", "b"):
        p = spanqa.Prediction()
        p.qid, p.span_text, p.text = qid, "", ""
        p.score_diff = math.inf
        preds.append(p)
    tau, f1 = spanqa.sweep_null_threshold(preds, golds)
    assert f1 == pytest.approx(50.0)
    rep = spanqa.report(preds, golds, 0.0)
    assert rep["overall_f1"] == pytest.approx(50.0)
    assert rep["noans_f1"] == pytest.approx(100.0)
    assert rep["hasans_count"] == rep["noans_count"] == 1


def test_bemb_round_trip(tmp_path):
    path = tmp_path / "e.bemb"
    rows = np.arange(12, dtype=np.float32).reshape(3, 4)
    with spanqa.BembWriter(str(path), 4) as w:
        w.write("q", rows)
    hidden, records = spanqa.read_bemb(str(path))
    assert hidden == 4 and records[0][0] == "q"
    np.testing.assert_array_equal(records[0][1], rows)

    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(spanqa.SpanqaError) as info:
        spanqa.read_bemb(str(path))
    assert info.value.kind == "format"


def test_export_three_examples(three, tmp_path):
    out = tmp_path / "three.bemb"
    manifest = exporter.export(three, out, "hash:768", 64, exporter.HashEncoder(768))
    assert manifest.qids == ["e1", "e2", "e3"] and not manifest.errors

    hidden, records = spanqa.read_bemb(str(out))
    assert hidden == 768 and len(records) == 3
    assert all(np.isfinite(r[1]).all() for r in records)

    written = json.loads(exporter.manifest_path(out).read_text())
    assert written["hidden"] == hidden
    assert written["sha256"] == hashlib.sha256(out.read_bytes()).hexdigest()

    again = tmp_path / "again.bemb"
    exporter.export(three, again, "hash:768", 64, exporter.HashEncoder(768))
    assert again.read_bytes() == out.read_bytes()

    examples = spanqa.load_squad_file(str(three))
    features = [spanqa.featurize(e, 64, training=False) for e in examples]
    loaded = spanqa.load_embeddings(str(out), features, 768)
    assert len(loaded) == 3
    for feature, emb in loaded:
        assert emb.shape[0] >= feature.valid_len
        assert np.all(emb[feature.valid_len:] == 0)


def test_export_cli(three, tmp_path):
    out = tmp_path / "cli.bemb"
    assert exporter.main(["export", "--squad", str(three), "--out", str(out), "--model", "hash:32",
                          "--max-seq-len", "64"]) == 0
    assert spanqa.read_bemb(str(out))[0] == 32


def _small_run(tmp_path, embeddings="synthetic:16,1"):
    cfg = spanqa.RunConfig()
    cfg.head.variant = spanqa.HeadVariant.CTX_CNN
    cfg.head.hidden_size = 16
    cfg.head.context_channels = 4
    cfg.squad_path = str(MINI)
    cfg.eval_squad_path = str(MINI)
    cfg.embeddings = embeddings
    cfg.epochs = 2
    cfg.batch_size = 2
    cfg.max_seq_len = 64
    cfg.single_thread = True
    cfg.quiet = True
    cfg.out_dir = str(tmp_path / "run")
    return cfg


def test_train_predict_evaluate(tmp_path):
    cfg = _small_run(tmp_path)
    summary = spanqa.train(cfg)
    assert summary["steps_run"] == summary["train_steps"] > 0
    assert summary["metrics"][0]["step"] >= 1

    run = Path(cfg.out_dir)
    preds = spanqa.predict(str(run / "best.ckpt"), str(MINI), str(run / "run_config.json"))
    golds = spanqa.golds_from_examples(spanqa.load_squad_file(str(MINI)))
    assert {p.qid for p in preds} == {g.qid for g in golds}
    result = spanqa.evaluate(preds, golds)
    before, after = result["before_threshold"], result
    assert before["overall_count"] == len(golds)
    assert after["overall_f1"] >= before["overall_f1"] - 1e-9
    assert json.loads(spanqa.predictions_to_json(preds)).keys() == {g.qid for g in golds}


def test_exported_embeddings_feed_the_trainer(tmp_path):
    emb = tmp_path / "mini.bemb"
    exporter.export(MINI, emb, "hash:16", 64, exporter.HashEncoder(16))
    cfg = _small_run(tmp_path, embeddings=str(emb))
    summary = spanqa.train(cfg)
    assert summary["train_steps"] > 0


@pytest.mark.skipif("SPANQA_CLI" not in os.environ, reason="command line tool not built")
def test_cli_reads_exported_file(tmp_path):
    emb = tmp_path / "mini.bemb"
    exporter.export(MINI, emb, "hash:16", 64, exporter.HashEncoder(16))
    out = subprocess.run(
        [os.environ["SPANQA_CLI"], "train", "--squad", str(MINI), "--eval-squad", str(MINI), "--embeddings",
         str(emb), "--hidden-size", "16", "--head", "fc", "--epochs", "1", "--batch-size", "4",
         "--max-seq-len", "64", "--single-thread", "--quiet", "--out", str(tmp_path / "cli")],
        check=True, capture_output=True, text=True)
    assert json.loads(out.stdout)["train_steps"] > 0
