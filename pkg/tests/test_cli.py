import csv
import json
import subprocess
import sys

import pytest

from minigen.cli import DEFAULTS, main
from minigen.data import load_pairs
from minigen.decoding import read_predictions
from minigen.manifest import read_manifest, verify_manifest
from minigen.tokenizer import Tokenizer

TINY_MODEL = {"num_layers": 1, "d_model": 16, "num_heads": 2, "d_ff": 32, "context_length": 48}


def write_config(path, body):
    path.write_text(json.dumps({"schema_version": 1, **body}), encoding="utf-8")
    return str(path)


def run_ok(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv
    return code


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    synth_cfg = write_config(root / "synth.json", {"n_train": 40, "n_test": 5, "params": {"pretrain_tokens": 3000}})
    run_ok("synth", "--config", synth_cfg, "--out", root / "synth")
    run_ok("bpe-train", "--corpus", root / "synth" / "pretrain.txt", "--corpus", root / "synth" / "train.jsonl",
           "--merges", 60, "--out", root / "bpe")
    pre_cfg = write_config(root / "pre.json", {"model": TINY_MODEL, "train": {"epochs": 1, "batch_size": 16, "warmup_steps": 5}})
    run_ok("pretrain", "--config", pre_cfg, "--corpus", root / "synth" / "pretrain.txt",
           "--tokenizer", root / "bpe" / "tokenizer.bpe", "--out", root / "pre")
    ft_cfg = write_config(root / "ft.json", {"fraction": 0.5, "train": {"epochs": 1, "batch_size": 8}})
    run_ok("finetune", "--config", ft_cfg, "--pairs", root / "synth" / "train.jsonl", "--init", root / "pre" / "model.ckpt",
           "--tokenizer", root / "bpe" / "tokenizer.bpe", "--out", root / "ft")
    dec_cfg = write_config(root / "dec.json", {"max_len": 6})
    run_ok("decode", "--config", dec_cfg, "--checkpoint", root / "ft" / "model.ckpt", "--tokenizer", root / "bpe" / "tokenizer.bpe",
           "--input", root / "synth" / "test.jsonl", "--out", root / "dec")
    run_ok("evaluate", "--predictions", root / "dec" / "predictions.jsonl", "--gold", root / "synth" / "test.jsonl",
           "--out", root / "eval")
    run_ok("analyze-overlap", "--predictions", root / "dec" / "predictions.jsonl", "--gold", root / "synth" / "test.jsonl",
           "--out", root / "overlap")
    return root


def test_pipeline_outputs(pipeline):
    assert len(load_pairs(pipeline / "synth" / "train.jsonl")) == 40
    assert len(load_pairs(pipeline / "synth" / "test.jsonl")) == 5
    assert (pipeline / "pre" / "model.ckpt").is_file() and (pipeline / "pre" / "train_log.csv").is_file()
    ppl = list(csv.reader((pipeline / "pre" / "perplexity.csv").open()))
    assert ppl[0] == ["epoch", "heldout_perplexity"] and len(ppl) == 3
    report = json.loads((pipeline / "ft" / "transfer.json").read_text())
    assert report["random_rows"]
    preds = read_predictions(pipeline / "dec" / "predictions.jsonl")
    assert [p["id"] for p in preds] == list(range(5))


def test_every_run_has_a_verifiable_manifest(pipeline):
    for name in ("synth", "bpe", "pre", "ft", "dec", "eval", "overlap"):
        assert verify_manifest(pipeline / name) == []
        m = read_manifest(pipeline / name)
        assert m["schema_version"] == 1 and m["deterministic"] is True and m["outputs"]
    m = read_manifest(pipeline / "pre")
    assert m["config"]["model"]["num_layers"] == 1
    assert m["config"]["train"]["mode"] == "PRETRAIN" and m["seeds"]["init"] == 0


def test_manifest_detects_tampering(tmp_path, pipeline):
    out = tmp_path / "ev"
    gold = tmp_path / "gold.jsonl"
    gold.write_bytes((pipeline / "synth" / "test.jsonl").read_bytes())
    run_ok("evaluate", "--predictions", pipeline / "dec" / "predictions.jsonl", "--gold", gold, "--out", out)
    (out / "report.csv").write_text("changed\n")
    gold.write_text("")
    assert sorted(verify_manifest(out)) == ["gold", "report.csv"]


def test_evaluate_report_rows(pipeline):
    rows = list(csv.reader((pipeline / "eval" / "report.csv").open()))
    assert rows[0] == ["id", "r1_f", "r2_f", "rl_f"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "4", "aggregate"]
    for r in rows[1:]:
        assert all(0.0 <= float(x) <= 100.0 and len(x.split(".")[1]) == 2 for x in r[1:])


def test_overlap_series(pipeline):
    rows = list(csv.DictReader((pipeline / "overlap" / "overlap.csv").open()))
    assert {r["system"] for r in rows} == {"gold", "predicted"}
    gold = {int(r["n"]): float(r["fraction"]) for r in rows if r["system"] == "gold"}
    # synthetic summaries are copied entity words, so every unigram occurs in the article
    assert gold[1] == 1.0 and set(gold) <= set(range(1, 11))


def test_decode_is_deterministic(tmp_path, pipeline):
    run_ok("decode", "--config", write_config(tmp_path / "d.json", {"max_len": 6}), "--checkpoint", pipeline / "ft" / "model.ckpt",
           "--tokenizer", pipeline / "bpe" / "tokenizer.bpe", "--input", pipeline / "synth" / "test.jsonl", "--out", tmp_path / "d")
    assert (tmp_path / "d" / "predictions.jsonl").read_bytes() == (pipeline / "dec" / "predictions.jsonl").read_bytes()


def test_zero_merges_gives_character_vocab(tmp_path):
    corpus = tmp_path / "c.txt"
    corpus.write_text("abc cab\nbca\n", encoding="utf-8")
    run_ok("bpe-train", "--corpus", corpus, "--merges", 0, "--out", tmp_path / "b")
    tok = Tokenizer.load(tmp_path / "b" / "tokenizer.bpe")
    assert not tok.merges
    assert set("abc") <= set(tok.vocab.tokens)
    assert all(len(t) == 1 or t.startswith("<") for t in tok.vocab.tokens)


# --- errors and exit codes ------------------------------------------------------------


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")
    return err[0]


def test_usage_errors_exit_two(tmp_path, capsys):
    assert main([]) == 2
    assert error_line(capsys).startswith("error: usage: ")
    assert main(["frobnicate", "--out", str(tmp_path)]) == 2
    assert error_line(capsys).startswith("error: usage: ")
    assert main(["evaluate", "--out", str(tmp_path / "x")]) == 2
    assert "--predictions is required" in error_line(capsys)


def test_missing_input_file(tmp_path, capsys):
    code = main(["evaluate", "--predictions", str(tmp_path / "nope.jsonl"), "--gold", str(tmp_path / "g"), "--out", str(tmp_path / "o")])
    assert code == 2
    line = error_line(capsys)
    assert line.startswith("error: precondition: ") and "nope.jsonl" in line
    assert not (tmp_path / "o").exists()


def test_config_errors(tmp_path, capsys):
    bad_key = write_config(tmp_path / "a.json", {"n_trian": 3})
    assert main(["synth", "--config", bad_key, "--out", str(tmp_path / "o")]) == 2
    assert "n_trian" in error_line(capsys)
    nested = write_config(tmp_path / "b.json", {"params": {"artcle_len": 3}})
    assert main(["synth", "--config", nested, "--out", str(tmp_path / "o")]) == 2
    assert "artcle_len" in error_line(capsys)
    (tmp_path / "c.json").write_text(json.dumps({"schema_version": 2}))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert error_line(capsys).startswith("error: config: ")
    (tmp_path / "d.json").write_text("{not json")
    assert main(["synth", "--config", str(tmp_path / "d.json"), "--out", str(tmp_path / "o")]) == 2
    assert error_line(capsys).startswith("error: config: ")
    assert not (tmp_path / "o").exists()


def test_refuses_to_overwrite_without_force(tmp_path, capsys):
    cfg = write_config(tmp_path / "s.json", {"n_train": 3, "n_test": 1, "params": {"pretrain_tokens": 50}})
    out = tmp_path / "run"
    run_ok("synth", "--config", cfg, "--out", out)
    before = (out / "train.jsonl").read_bytes()
    assert main(["synth", "--config", cfg, "--seed", "5", "--out", str(out)]) == 2
    assert error_line(capsys).startswith("error: run_exists: ")
    assert (out / "train.jsonl").read_bytes() == before
    run_ok("synth", "--config", cfg, "--seed", "5", "--out", out, "--force")
    assert read_manifest(out)["config"]["seed"] == 5
    assert (out / "train.jsonl").read_bytes() != before


def test_tokenizer_mismatch_is_rejected(tmp_path, pipeline, capsys):
    corpus = tmp_path / "c.txt"
    corpus.write_text("zz yy\n", encoding="utf-8")
    run_ok("bpe-train", "--corpus", corpus, "--merges", 1, "--out", tmp_path / "b")
    code = main(["decode", "--checkpoint", str(pipeline / "ft" / "model.ckpt"), "--tokenizer", str(tmp_path / "b" / "tokenizer.bpe"),
                 "--input", str(pipeline / "synth" / "test.jsonl"), "--out", str(tmp_path / "d")])
    assert code == 2
    assert "tokenizer" in error_line(capsys)


def test_bad_checkpoint(tmp_path, pipeline, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"\x00" * 5)
    code = main(["decode", "--checkpoint", str(bad), "--tokenizer", str(pipeline / "bpe" / "tokenizer.bpe"),
                 "--input", str(pipeline / "synth" / "test.jsonl"), "--out", str(tmp_path / "d")])
    assert code == 2
    assert error_line(capsys).startswith("error: precondition: ")


def test_defaults_cover_every_command():
    assert set(DEFAULTS) == {"synth", "bpe-train", "pretrain", "finetune", "decode", "evaluate", "analyze-overlap", "sweep"}


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "minigen.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("minigen ")
    res = subprocess.run([sys.executable, "-m", "minigen.cli", "evaluate", "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 2 and res.stderr.startswith("error: usage: ")


def test_train_overrides_accept_any_train_field(tmp_path, pipeline, capsys):
    corpus, tok = pipeline / "synth" / "pretrain.txt", pipeline / "bpe" / "tokenizer.bpe"
    cfg = write_config(tmp_path / "p.json", {"model": TINY_MODEL, "train": {"epochs": 0, "grad_clip_norm": 0.5}})
    run_ok("pretrain", "--config", cfg, "--corpus", corpus, "--tokenizer", tok, "--out", tmp_path / "p")
    assert read_manifest(tmp_path / "p")["config"]["train"]["grad_clip_norm"] == 0.5
    cfg = write_config(tmp_path / "q.json", {"train": {"grad_clip_nrm": 0.5}})
    assert main(["pretrain", "--config", cfg, "--corpus", str(corpus), "--tokenizer", str(tok), "--out", str(tmp_path / "q")]) == 2
    assert "grad_clip_nrm" in error_line(capsys)


def test_pair_files_feed_their_text_to_bpe(pipeline):
    tok = Tokenizer.load(pipeline / "bpe" / "tokenizer.bpe")
    assert "@" in tok.vocab.tokens
    assert not {'"', "{", ":"} & set(tok.vocab.tokens)
    pair = load_pairs(pipeline / "synth" / "test.jsonl")[0]
    assert tok.unk_id not in tok.encode(pair.article)
