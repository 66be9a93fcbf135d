"""Acceptance criteria 1-10, one test each.

Each test records a PASS/FAIL line that is printed in the terminal summary
(see conftest.py). Several criteria re-run the oracle checks from the unit
test modules under one banner; the rest are end-to-end runs.

Run just these with ``pytest tests/test_acceptance.py -v``. Criterion 8 is
the desk-scale experiment and takes the bulk of the time.
"""

from __future__ import annotations

import contextlib
import csv
import json
import time

import numpy as np
import pytest

import param_oracle as oracle
import test_decoding
import test_metrics
import test_model
import test_numcore
import test_sweep
import test_tokenizer
import test_training
import test_transfer
from helpers import FD_TOL, gradcheck, tiny_config
from minigen import numcore as nc
from minigen.cli import main
from minigen.data import SynthParams, load_pairs, pack_seq2seq_ids, save_pairs, synth_task
from minigen.manifest import read_manifest
from minigen.model import ENCDEC, LM, ModelConfig, init_weights, is_cross_attention
from minigen.sweep import DEFAULT_VARIANTS, median_r2, read_sweep_csv
from minigen.tokenizer import train_bpe
from minigen.training import Checkpoint, LMTask, Seq2SeqTask, TrainConfig, pretrain, save_checkpoint
from minigen.transfer import RANDOM, TransferStrategy, apply_transfer, count_breakdown, count_params

LINES: dict[int, str] = {}

TITLES = {
    1: "gradient fidelity",
    2: "target-only loss",
    3: "causality and bidirectionality",
    4: "parameter accounting",
    5: "transfer correctness",
    6: "oracle equivalence",
    7: "memorization sanity",
    8: "desk-scale sample-efficiency ordering",
    9: "pre-training sanity",
    10: "determinism and checkpointing",
}


@contextlib.contextmanager
def criterion(n: int):
    notes: list[str] = []
    t0 = time.perf_counter()
    try:
        yield notes
    except BaseException as e:
        notes.append(f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}")
        LINES[n] = _line(n, "FAIL", notes, t0)
        raise
    LINES[n] = _line(n, "PASS", notes, t0)


def _line(n, status, notes, t0):
    extra = "; ".join(notes)
    return f"criterion {n:>2} {status}  {TITLES[n]} ({time.perf_counter() - t0:.0f}s){': ' + extra if extra else ''}"


# --- 1 ---------------------------------------------------------------------------------


def _fd_model(variant, pre_norm):
    cfg = tiny_config(num_layers=2, d_model=8, num_heads=2, d_ff=12, vocab_size=9, context_length=10, pre_norm=pre_norm)
    w = init_weights(cfg, 3, variant, dtype=np.float64)
    rng = np.random.default_rng(5)
    for t in w.parameters():
        t.data += rng.standard_normal(t.shape) * 0.1  # move gains and biases off their init values
    if variant == LM:
        task = LMTask(test_training.random_packed(rng, 3, vocab=9, ctx=10), 0)
    else:
        exs = [pack_seq2seq_ids(rng.integers(3, 9, n).tolist(), rng.integers(3, 9, 2).tolist(), 1, 2, 10) for n in (3, 6, 4)]
        task = Seq2SeqTask(exs, 0)
    params = dict(w.items())
    return gradcheck(lambda: task.loss(w, range(3)), params)


def test_criterion_1_gradient_fidelity():
    with criterion(1) as notes:
        for name in dir(test_numcore):
            if name.startswith("test_fd_"):
                getattr(test_numcore, name)()
        worst = 0.0
        for variant in (LM, ENCDEC):
            for pre_norm in (False, True):
                errs = _fd_model(variant, pre_norm)
                assert max(errs.values()) < FD_TOL, (variant, pre_norm, max(errs, key=errs.get))
                worst = max(worst, max(errs.values()))
        notes.append(f"worst full-model relative error {worst:.1e}")


# --- 2 ---------------------------------------------------------------------------------


def test_criterion_2_target_only_loss():
    with criterion(2):
        test_training.test_source_positions_get_zero_logit_gradient()
        test_numcore.test_masked_rows_get_exactly_zero_grad()
        rng = np.random.default_rng(11)
        for seed in range(20):
            task = LMTask(test_training.random_packed(rng, 4), 0)
            w = init_weights(tiny_config(), seed, dtype=np.float64)
            logits, targets, weights = task.logits(w, range(4))
            leaf = nc.Tensor(logits.data, requires_grad=True)
            loss = nc.masked_cross_entropy(leaf, targets, weights)
            nc.backward(loss)
            off = weights == 0
            assert np.all(leaf.grad[off] == 0.0)
            noisy = logits.data.copy()
            noisy[off] = rng.standard_normal(noisy[off].shape) * 100
            assert nc.masked_cross_entropy(nc.Tensor(noisy), targets, weights).item() == loss.item()


# --- 3 ---------------------------------------------------------------------------------


def test_criterion_3_causality():
    with criterion(3) as notes:
        for layers, heads in test_model.MATRIX:
            for pre_norm in (False, True):
                test_model.test_lm_is_causal(layers, heads, pre_norm)
            test_model.test_decoder_is_causal(layers, heads)
            test_model.test_bidirectional_encoder_influence(layers, heads)
            test_model.test_unidirectional_encoder_is_causal(layers, heads)
        notes.append(f"configs {test_model.MATRIX}")


# --- 4 ---------------------------------------------------------------------------------


def test_criterion_4_parameter_accounting():
    with criterion(4) as notes:
        for cfg, lm_count, ed_count in ((ModelConfig.desk(), oracle.DESK_LM, oracle.DESK_ENCDEC),
                                        (ModelConfig.full(), oracle.FULL_LM, oracle.FULL_ENCDEC)):
            lm, ed = count_params(cfg, LM), count_params(cfg, ENCDEC)
            assert (lm, ed) == (lm_count, ed_count)
            assert lm / ed < 0.6
            b = count_breakdown(cfg, ENCDEC)
            assert ed - lm == b["cross_attention"] + oracle.stack(cfg.num_layers, cfg.d_model, cfg.d_ff, False, cfg.pre_norm)
            assert b["cross_attention"] == oracle.cross_attention_count(cfg.num_layers, cfg.d_model)
            notes.append(f"{cfg.d_model}d: {lm}/{ed} = {lm / ed:.3f}")
        test_transfer.test_counts_match_closed_form()


# --- 5 ---------------------------------------------------------------------------------


def test_criterion_5_transfer():
    with criterion(5):
        test_transfer.test_both_copies_everything_but_cross_attention()
        test_transfer.test_lm_direct_only_delim_row_is_random()
        for strategy, copied in ((TransferStrategy.ENCODER_ONLY, "encoder"), (TransferStrategy.DECODER_ONLY, "decoder")):
            test_transfer.test_single_stack_strategies(strategy, copied)
        test_transfer.test_none_is_all_random_and_matches_fresh_init()
        test_transfer.test_random_tensors_equal_init_weights_values()
        test_transfer.test_transfer_is_reproducible_per_seed()
        test_transfer.test_every_target_tensor_has_provenance()
        # the random set under BOTH is exactly cross-attention, by name
        lm = test_transfer.pretrained()
        _, rep = apply_transfer(TransferStrategy.BOTH, lm, lm.config, seed=0, delim_id=test_transfer.DELIM)
        assert {k for k, v in rep.provenance.items() if v == RANDOM} == {k for k in rep.provenance if is_cross_attention(k)}


# --- 6 ---------------------------------------------------------------------------------


def test_criterion_6_oracles():
    with criterion(6) as notes:
        test_metrics.test_rouge_matches_oracles_on_200_pairs()
        test_metrics.test_overlap_matches_oracle_on_200_pairs()
        for seed in range(6):
            test_tokenizer.test_merges_match_recounting_oracle(seed)
        test_tokenizer.test_merges_match_oracle_on_1e5_chars()
        for variant in (LM, ENCDEC):
            test_decoding.test_unpruned_beam_equals_exhaustive(variant)
            test_decoding.test_beam_one_is_greedy(variant)
        notes.append("full width = never-pruning beam (vocab**len); width = vocab alone can prune the optimum")


# --- 7 ---------------------------------------------------------------------------------


def test_criterion_7_memorization():
    with criterion(7):
        for variant in (LM, ENCDEC):
            test_training.test_memorizes_one_example(variant)


# --- 8 ---------------------------------------------------------------------------------

R2_GAP = 5.0


def _cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"minigen {argv[0]} exited {code}"


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The documented desk pipeline, default configs throughout."""
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    _cli("synth", "--out", root / "synth")
    _cli("bpe-train", "--corpus", root / "synth" / "pretrain.txt", "--corpus", root / "synth" / "train.jsonl", "--out", root / "bpe")
    _cli("pretrain", "--corpus", root / "synth" / "pretrain.txt", "--tokenizer", root / "bpe" / "tokenizer.bpe", "--out", root / "pre")
    cfg = root / "sweep.json"
    cfg.write_text('{"schema_version": 1, "fractions": [0.01, 0.5], "test_limit": 200}\n')
    _cli("sweep", "--config", cfg, "--pairs", root / "synth" / "train.jsonl", "--test", root / "synth" / "test.jsonl",
         "--tokenizer", root / "bpe" / "tokenizer.bpe", "--init", root / "pre" / "model.ckpt", "--out", root / "sweep")
    return root, time.perf_counter() - t0


def test_criterion_8_sample_efficiency(desk_run):
    with criterion(8) as notes:
        root, seconds = desk_run
        notes.append(f"pipeline {seconds / 60:.1f} min")
        assert seconds < 60 * 60
        corpus_words = sum(len(line.split()) for line in (root / "synth" / "pretrain.txt").open(encoding="utf-8"))
        assert len(load_pairs(root / "synth" / "train.jsonl")) + len(load_pairs(root / "synth" / "test.jsonl")) >= 5000
        assert corpus_words >= 1_000_000
        rows = read_sweep_csv(root / "sweep" / "sweep.csv")
        assert all(r["status"] == "ok" for r in rows), [r["error"] for r in rows if r["status"] != "ok"]
        med = {(v.name, f): median_r2(rows, v.name, f) for v in DEFAULT_VARIANTS for f in (0.01, 0.5)}
        notes.append(", ".join(f"{v.name} {med[v.name, 0.01]:.2f}->{med[v.name, 0.5]:.2f}" for v in DEFAULT_VARIANTS))
        gap = med["transformer_lm", 0.01] - med["encdec_scratch", 0.01]
        notes.append(f"R2 gap at 1% {gap:.2f}")
        assert gap >= R2_GAP
        for v in DEFAULT_VARIANTS:
            assert med[v.name, 0.5] >= med[v.name, 0.01], v.name


# --- 9 ---------------------------------------------------------------------------------


def test_criterion_9_pretraining(desk_run):
    with criterion(9) as notes:
        rows = list(csv.DictReader((desk_run[0] / "pre" / "perplexity.csv").open()))
        curves = [[float(r["heldout_perplexity"]) for r in rows]]
        # two more seeds on a shorter stream of the same task, desk preset
        corp = synth_task(0, 0, SynthParams(pretrain_tokens=200_000))
        tok = train_bpe(corp.pretrain_text, 2000)
        mcfg = ModelConfig.desk(context_length=64, pre_norm=True, vocab_size=len(tok))
        for seed in (1, 2):
            tc = TrainConfig.for_mode("PRETRAIN", seed=seed, learning_rate=2e-3, epochs=4, batch_size=32, warmup_steps=100,
                                      dropout_rate=0.0)
            curves.append(pretrain(corp.pretrain_documents, tok, mcfg, tc).heldout_perplexity)
        monotone = sum(all(b <= a for a, b in zip(c, c[1:])) for c in curves)
        for c in curves:
            notes.append(f"{c[0]:.1f}->{c[-1]:.2f}")
            assert c[-1] < 0.5 * c[0]
        notes.append(f"monotone in {monotone}/3")
        assert monotone >= 2


# --- 10 --------------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    with criterion(10):
        test_training.test_resume_is_bit_exact(tmp_path)

        corp = synth_task(33, 0, SynthParams(pretrain_tokens=2000))
        tok = train_bpe(corp.pretrain_text, 40)
        cfg = ModelConfig(num_layers=1, d_model=16, num_heads=2, d_ff=32, context_length=40, vocab_size=len(tok))
        w = pretrain([corp.pretrain_text], tok, cfg, TrainConfig.for_mode("PRETRAIN", epochs=1, batch_size=8)).checkpoint.weights
        save_pairs(corp.pairs[:30], tmp_path / "train.jsonl")
        save_pairs(corp.pairs[30:], tmp_path / "test.jsonl")
        tok.save(tmp_path / "tok.bpe")
        save_checkpoint(Checkpoint(w, tokenizer_hash=tok.fingerprint()), tmp_path / "pre.ckpt")
        grid = {**test_sweep.GRID, "finetune": {"epochs": 1, "batch_size": 8, "dropout_rate": 0.1}}
        (tmp_path / "s.json").write_text(json.dumps({"schema_version": 1, **grid}))
        args = ["sweep", "--config", tmp_path / "s.json", "--pairs", tmp_path / "train.jsonl", "--test", tmp_path / "test.jsonl",
                "--tokenizer", tmp_path / "tok.bpe", "--init", tmp_path / "pre.ckpt"]
        _cli(*args, "--out", tmp_path / "a")
        _cli(*args, "--out", tmp_path / "b")
        ma, mb = read_manifest(tmp_path / "a"), read_manifest(tmp_path / "b")
        ma.pop("outputs"), mb.pop("outputs")  # timing file differs run to run
        assert ma == mb
        assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
