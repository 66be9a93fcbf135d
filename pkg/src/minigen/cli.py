"""``minigen`` command-line entry point.

Every subcommand validates its config and inputs before any compute, writes
its outputs plus ``manifest.json`` into ``--out``, and on failure prints a
single ``error: <code>: <message>`` line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Callable

from . import __version__
from .data import SubsetSpec, SynthParams, load_documents, load_pairs, make_subsets, save_pairs, synth_task
from .decoding import decode_corpus, read_predictions, strip_eos, write_predictions
from .errors import ConfigError, MinigenError, PreconditionError
from .manifest import RunExistsError, RunManifest, check_run_dir, load_config, numerics_mode, prepare_run_dir
from .metrics import mean_profile, metric_tokens, overlap_profile, rouge_all, write_profiles, write_report
from .model import ENCDEC, LM, ModelConfig
from .sweep import SweepConfig, run_sweep
from .tokenizer import Tokenizer, train_bpe
from .training import (
    Checkpoint,
    TrainConfig,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    write_log,
)
from .transfer import TransferStrategy, apply_transfer

EXIT_USAGE = 2
EXIT_RUNTIME = 1


class UsageError(MinigenError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# defaults echoed into every manifest; a config file may override any of them
DEFAULTS: dict[str, dict] = {
    "synth": {"seed": 0, "n_train": 5000, "n_test": 200, "params": SynthParams().to_dict()},
    "bpe-train": {"num_merges": 2000, "lowercase": False},
    "pretrain": {
        "seed": 0,
        "model": ModelConfig.desk(context_length=64, pre_norm=True).to_dict(),
        "train": {"learning_rate": 2e-3, "epochs": 6, "batch_size": 32, "warmup_steps": 100, "dropout_rate": 0.0},
    },
    "finetune": {
        "seed": 0,
        "variant": LM,
        "strategy": "LM_DIRECT",
        "encoder_bidirectional": False,
        "fraction": 1.0,
        "model": ModelConfig.desk(context_length=64, pre_norm=True).to_dict(),
        "train": {},
    },
    "decode": {"beam_size": 2, "max_len": 120, "max_article_tokens": 400},
    "evaluate": {},
    "analyze-overlap": {"n_max": 10},
    "sweep": SweepConfig(
        finetune={"learning_rate": 1e-3, "epochs": 4, "warmup_steps": 20},
        min_steps=160,
    ).to_dict(),
}

# TrainConfig override sections; their keys are checked against TrainConfig later
OPEN_SECTIONS = frozenset({"train", "finetune"})


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise PreconditionError(f"{what} file not found: {p}")
    return p


def _load_tokenizer(path: Path) -> Tokenizer:
    try:
        return Tokenizer.load(path)
    except MinigenError:
        raise
    except Exception as e:
        raise PreconditionError(f"{path}: not a tokenizer file ({e})") from None


def _check_tokenizer(ckpt: Checkpoint, tok: Tokenizer) -> None:
    if ckpt.tokenizer_hash and ckpt.tokenizer_hash != tok.fingerprint():
        raise PreconditionError("checkpoint was trained with a different tokenizer")
    if ckpt.config.vocab_size != len(tok):
        raise PreconditionError(f"checkpoint vocab {ckpt.config.vocab_size} != tokenizer vocab {len(tok)}")


def _model_config(d: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(f"model: {e}") from None


def _train_config(mode: str, overrides: dict, seed: int) -> TrainConfig:
    unknown = set(overrides) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"train: unknown key {sorted(unknown)[0]!r}")
    return TrainConfig.for_mode(mode, **{**overrides, "seed": seed})


# ---------------------------------------------------------------------------
# subcommands: validate config and inputs, then return the work to run
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg, m: RunManifest) -> Callable[[Path], None]:
    try:
        params = SynthParams(**cfg["params"])
    except TypeError as e:
        raise ConfigError(f"params: {e}") from None
    m.seeds["synth"] = cfg["seed"]
    return lambda out: _synth(cfg, params, out)


def _synth(cfg, params, out: Path) -> None:
    corp = synth_task(cfg["n_train"] + cfg["n_test"], cfg["seed"], params)
    save_pairs(corp.pairs[: cfg["n_train"]], out / "train.jsonl")
    save_pairs(corp.pairs[cfg["n_train"] :], out / "test.jsonl")
    (out / "pretrain.txt").write_text(corp.pretrain_text, encoding="utf-8")


def _corpus_text(path: Path) -> str:
    # pair files contribute their article and summary text, not the JSON syntax
    if path.suffix == ".jsonl":
        return "\n".join(f"{p.article}\n{p.summary}" for p in load_pairs(path))
    return path.read_text(encoding="utf-8")


def cmd_bpe_train(args, cfg, m: RunManifest) -> Callable[[Path], None]:
    if not args.corpus:
        raise UsageError("--corpus is required")
    paths = [_require_file(c, "corpus") for c in args.corpus]
    merges = cfg["num_merges"] if args.merges is None else args.merges
    if not isinstance(merges, int) or merges < 0:
        raise ConfigError("num_merges must be a non-negative integer")
    cfg["num_merges"] = merges
    for i, p in enumerate(paths):
        m.add_input(f"corpus{i}", p)

    def work(out: Path) -> None:
        text = "\n".join(_corpus_text(p) for p in paths)
        tok = train_bpe(text, merges, lowercase=bool(cfg["lowercase"]))
        tok.save(out / "tokenizer.bpe")
        (out / "vocab.txt").write_text("".join(t + "\n" for t in tok.vocab.tokens), encoding="utf-8")

    return work


def cmd_pretrain(args, cfg, m: RunManifest) -> Callable[[Path], None]:
    corpus = _require_file(args.corpus, "corpus")
    tok_path = _require_file(args.tokenizer, "tokenizer")
    tok = _load_tokenizer(tok_path)
    mcfg = _model_config({**cfg["model"], "vocab_size": len(tok)})
    cfg["model"] = mcfg.to_dict()
    tc = _train_config("PRETRAIN", cfg["train"], cfg["seed"])
    cfg["train"] = tc.to_dict()
    m.add_input("corpus", corpus)
    m.add_input("tokenizer", tok_path)
    m.seeds["init"] = m.seeds["train"] = cfg["seed"]

    def work(out: Path) -> None:
        res = pretrain(load_documents(corpus), tok, mcfg, tc, init_seed=cfg["seed"])
        res.checkpoint.manifest_hash = m.digest()
        save_checkpoint(res.checkpoint, out / "model.ckpt")
        write_log(res.log, out / "train_log.csv")
        with open(out / "perplexity.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "heldout_perplexity"])
            for e, ppl in enumerate(res.heldout_perplexity):
                w.writerow([e, repr(ppl)])

    return work


def cmd_finetune(args, cfg, m: RunManifest) -> Callable[[Path], None]:
    pairs_path = _require_file(args.pairs, "pairs")
    tok_path = _require_file(args.tokenizer, "tokenizer")
    tok = _load_tokenizer(tok_path)
    strategy = TransferStrategy(cfg["strategy"]) if cfg["strategy"] in TransferStrategy.__members__ else None
    if strategy is None:
        raise ConfigError(f"unknown strategy {cfg['strategy']!r}")
    if cfg["variant"] not in (LM, ENCDEC):
        raise ConfigError(f"unknown variant {cfg['variant']!r}")
    pretrained = None
    if strategy != TransferStrategy.NONE:
        init = _require_file(args.init, "init")
        ckpt = load_checkpoint(init)
        _check_tokenizer(ckpt, tok)
        pretrained = ckpt.weights
        m.add_input("init", init)
        base = pretrained.config
    else:
        base = _model_config({**cfg["model"], "vocab_size": len(tok)})
    target = base.with_(encoder_bidirectional=bool(cfg["encoder_bidirectional"])) if cfg["variant"] == ENCDEC else base
    cfg["model"] = target.to_dict()
    mode = "FINETUNE_SCRATCH" if strategy == TransferStrategy.NONE else "FINETUNE_PRETRAINED"
    tc = _train_config(mode, cfg["train"], cfg["seed"])
    cfg["train"] = tc.to_dict()
    m.add_input("pairs", pairs_path)
    m.add_input("tokenizer", tok_path)
    m.seeds.update(transfer=cfg["seed"], train=cfg["seed"], subset=cfg["seed"])
    pairs = load_pairs(pairs_path)
    frac = float(cfg["fraction"])
    indices = make_subsets(SubsetSpec(len(pairs), cfg["seed"], (frac,)))[frac]
    weights, report = apply_transfer(strategy, pretrained, target, cfg["seed"], tok.delim_id, variant=cfg["variant"])

    def work(out: Path) -> None:
        res = finetune(pairs, indices, tc, weights, tok)
        res.checkpoint.manifest_hash = m.digest()
        save_checkpoint(res.checkpoint, out / "model.ckpt")
        write_log(res.log, out / "train_log.csv")
        text = json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
        (out / "transfer.json").write_text(text, encoding="utf-8")

    return work


def cmd_decode(args, cfg, m: RunManifest) -> Callable[[Path], None]:
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    tok_path = _require_file(args.tokenizer, "tokenizer")
    inp = _require_file(args.input, "input")
    tok = _load_tokenizer(tok_path)
    ckpt = load_checkpoint(ckpt_path)
    _check_tokenizer(ckpt, tok)
    for label, p in (("checkpoint", ckpt_path), ("tokenizer", tok_path), ("input", inp)):
        m.add_input(label, p)
    pairs = load_pairs(inp)

    def work(out: Path) -> None:
        hyps = decode_corpus(
            ckpt.weights,
            [tok.encode(p.article) for p in pairs],
            tok.eos_id,
            tok.delim_id,
            beam_size=cfg["beam_size"],
            max_len=cfg["max_len"],
            banned=(tok.pad_id, tok.delim_id),
            max_article_tokens=cfg["max_article_tokens"],
        )
        records = (
            {"id": i, "prediction": tok.decode(strip_eos(h.ids, tok.eos_id)), "score": h.score} for i, h in enumerate(hyps)
        )
        write_predictions(records, out / "predictions.jsonl")

    return work


def _paired(preds: list[dict], gold: list) -> list:
    by_id = {}
    for r in preds:
        by_id[r["id"]] = r["prediction"]
    missing = [i for i in range(len(gold)) if i not in by_id]
    if missing:
        raise PreconditionError(f"no prediction for gold id {missing[0]}")
    return [by_id[i] for i in range(len(gold))]


def cmd_evaluate(args, cfg, m: RunManifest) -> Callable[[Path], None]:
    pred_path = _require_file(args.predictions, "predictions")
    gold_path = _require_file(args.gold, "gold")
    m.add_input("predictions", pred_path)
    m.add_input("gold", gold_path)
    gold = load_pairs(gold_path)
    preds = _paired(read_predictions(pred_path), gold)
    return lambda out: write_report(
        list(range(len(gold))), [rouge_all(p, g.summary) for p, g in zip(preds, gold)], out / "report.csv"
    )


def cmd_analyze_overlap(args, cfg, m: RunManifest) -> Callable[[Path], None]:
    gold_path = _require_file(args.gold, "gold")
    m.add_input("gold", gold_path)
    n_max = cfg["n_max"]
    if not isinstance(n_max, int) or n_max < 1:
        raise ConfigError("n_max must be a positive integer")
    gold = load_pairs(gold_path)
    arts = [metric_tokens(g.article) for g in gold]
    series = {"gold": mean_profile(overlap_profile(metric_tokens(g.summary), a, n_max) for g, a in zip(gold, arts))}
    if args.predictions:
        pred_path = _require_file(args.predictions, "predictions")
        m.add_input("predictions", pred_path)
        preds = _paired(read_predictions(pred_path), gold)
        series["predicted"] = mean_profile(overlap_profile(metric_tokens(p), a, n_max) for p, a in zip(preds, arts))
    return lambda out: write_profiles(series, out / "overlap.csv")


def cmd_sweep(args, cfg, m: RunManifest) -> Callable[[Path], None]:
    train_path = _require_file(args.pairs, "pairs")
    test_path = _require_file(args.test, "test")
    tok_path = _require_file(args.tokenizer, "tokenizer")
    init = _require_file(args.init, "init")
    body = {k: v for k, v in cfg.items() if k not in ("schema_version", "paths")}
    if args.seed is not None:
        body["seeds"] = [args.seed]
    try:
        scfg = SweepConfig.from_dict(body)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    cfg.update(scfg.to_dict())
    tok = _load_tokenizer(tok_path)
    ckpt = load_checkpoint(init)
    _check_tokenizer(ckpt, tok)
    for label, p in (("pairs", train_path), ("test", test_path), ("tokenizer", tok_path), ("init", init)):
        m.add_input(label, p)
    for s in scfg.seeds:
        m.seeds[f"cell{s}"] = s

    def progress(r):
        status = "ok" if r.ok else r.error
        print(f"{r.variant.name} fraction={r.fraction:g} seed={r.seed}: {status}", file=sys.stderr, flush=True)

    train, test = load_pairs(train_path), load_pairs(test_path)
    return lambda out: run_sweep(scfg, train, test, tok, ckpt.weights, out, on_cell=progress)


COMMANDS: dict[str, tuple[Callable, str]] = {
    "synth": (cmd_synth, "generate the synthetic salient-token task and its pre-training text"),
    "bpe-train": (cmd_bpe_train, "learn a BPE merge table"),
    "pretrain": (cmd_pretrain, "pre-train the Transformer LM"),
    "finetune": (cmd_finetune, "transfer weights and fine-tune on a subset"),
    "decode": (cmd_decode, "beam-search summaries for a JSONL file of pairs"),
    "evaluate": (cmd_evaluate, "ROUGE report for predictions against gold pairs"),
    "analyze-overlap": (cmd_analyze_overlap, "n-gram overlap profiles against the source articles"),
    "sweep": (cmd_sweep, "sample-efficiency sweep over variants, fractions and seeds"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="minigen", description="Summarization as language modeling, at desk scale.")
    parser.add_argument("--version", action="version", version=f"minigen {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config with schema_version")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        p.add_argument("--fast", action="store_true", help="allow multi-threaded numerics (not bit-reproducible)")
        if name == "bpe-train":
            p.add_argument("--corpus", action="append", help="text file; repeatable")
            p.add_argument("--merges", type=int)
        if name == "pretrain":
            p.add_argument("--corpus")
        if name in ("pretrain", "finetune", "decode", "sweep"):
            p.add_argument("--tokenizer")
        if name in ("finetune", "sweep"):
            p.add_argument("--pairs")
            p.add_argument("--init", help="pre-trained checkpoint")
        if name == "sweep":
            p.add_argument("--test")
        if name == "decode":
            p.add_argument("--checkpoint")
            p.add_argument("--input")
        if name in ("evaluate", "analyze-overlap"):
            p.add_argument("--gold")
            p.add_argument("--predictions")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required")
    fn, _ = COMMANDS[args.command]
    cfg = load_config(args.config, DEFAULTS[args.command], OPEN_SECTIONS)
    if args.seed is not None and "seed" in cfg:
        cfg["seed"] = args.seed
    manifest = RunManifest(args.command, cfg, deterministic=not args.fast)
    check_run_dir(args.out, args.force)
    work = fn(args, cfg, manifest)
    out = prepare_run_dir(args.out, args.force)
    with numerics_mode(not args.fast):
        work(out)
    manifest.finalize(out)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except MinigenError as e:
        print(f"error: {e.code}: {str(e).splitlines()[0] if str(e) else type(e).__name__}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, (UsageError, ConfigError, PreconditionError, RunExistsError)) else EXIT_RUNTIME
    except (OSError, ValueError) as e:
        print(f"error: io: {e}".splitlines()[0], file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
