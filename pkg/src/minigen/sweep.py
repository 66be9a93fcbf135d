"""Sample-efficiency sweep: transfer, fine-tune, decode and score every grid cell."""

from __future__ import annotations

import csv
import math
import statistics
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .data import ExamplePair, SubsetSpec, make_subsets
from .decoding import decode_corpus, strip_eos, write_predictions
from .errors import ConfigError, MinigenError
from .metrics import aggregate, rouge_all, x100
from .model import ENCDEC, LM, WeightSet
from .tokenizer import Tokenizer
from .training import Mode, TrainConfig, finetune
from .transfer import TransferStrategy, apply_transfer

SWEEP_COLUMNS = ["variant", "model", "strategy", "fraction", "seed", "n_train", "r1", "r2", "rl", "status", "error"]
TIMING_COLUMNS = ["variant", "fraction", "seed", "train_time_s", "decode_time_s"]


@dataclass(frozen=True)
class VariantSpec:
    name: str
    model: str
    strategy: str
    encoder_bidirectional: bool = False

    def __post_init__(self):
        if self.model not in (LM, ENCDEC):
            raise ConfigError(f"variant {self.name}: model must be LM or ENCDEC")
        TransferStrategy(self.strategy)


DEFAULT_VARIANTS = (
    VariantSpec("transformer_lm", LM, "LM_DIRECT"),
    VariantSpec("transformer_lm_scratch", LM, "NONE"),
    VariantSpec("encdec_pretrained_both", ENCDEC, "BOTH"),
    VariantSpec("encdec_scratch", ENCDEC, "NONE", encoder_bidirectional=True),
)


@dataclass
class SweepConfig:
    variants: list[VariantSpec] = field(default_factory=lambda: list(DEFAULT_VARIANTS))
    fractions: list[float] = field(default_factory=lambda: [0.01, 0.02, 0.05, 0.10, 0.20, 0.50])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    # TrainConfig overrides shared by every cell; the mode follows the strategy
    finetune: dict = field(default_factory=dict)
    # small subsets get extra epochs so every cell sees at least this many updates
    min_steps: int = 0
    beam_size: int = 2
    max_len: int = 120
    test_limit: int | None = None

    def __post_init__(self):
        self.variants = [v if isinstance(v, VariantSpec) else VariantSpec(**v) for v in self.variants]
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError("variant names must be unique")
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("fractions must lie in (0, 1]")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        bad = (set(self.finetune) - set(TrainConfig.__dataclass_fields__)) | ({"mode", "seed"} & set(self.finetune))
        if bad:
            raise ConfigError(f"finetune overrides not allowed: {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = [asdict(v) for v in self.variants]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        return cls(**d)

    def cells(self) -> list[tuple[VariantSpec, float, int]]:
        return [(v, f, s) for s in self.seeds for f in self.fractions for v in self.variants]


@dataclass
class CellResult:
    variant: VariantSpec
    fraction: float
    seed: int
    n_train: int = 0
    scores: dict | None = None
    error: str = ""
    train_time_s: float = 0.0
    decode_time_s: float = 0.0
    predictions: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.scores is not None

    def row(self) -> list[str]:
        v = self.variant
        base = [v.name, v.model, v.strategy, f"{self.fraction:g}", str(self.seed), str(self.n_train)]
        if self.ok:
            return base + [x100(self.scores[k].f1) for k in ("rouge1", "rouge2", "rougeL")] + ["ok", ""]
        return base + ["", "", "", "error", self.error]


def train_config_for(cfg: SweepConfig, v: VariantSpec, seed: int, n_train: int) -> TrainConfig:
    mode = Mode.FINETUNE_SCRATCH if v.strategy == "NONE" else Mode.FINETUNE_PRETRAINED
    tc = TrainConfig.for_mode(mode, seed=seed, **cfg.finetune)
    steps = math.ceil(n_train / tc.batch_size)
    if cfg.min_steps > 0 and steps * tc.epochs < cfg.min_steps:
        tc.epochs = math.ceil(cfg.min_steps / steps)
    return tc


def run_cell(
    v: VariantSpec,
    fraction: float,
    seed: int,
    indices: Sequence[int],
    train: Sequence[ExamplePair],
    test: Sequence[ExamplePair],
    test_ids: Sequence[Sequence[int]],
    tokenizer: Tokenizer,
    pretrained: WeightSet | None,
    cfg: SweepConfig,
) -> CellResult:
    res = CellResult(v, fraction, seed, n_train=len(indices))
    try:
        base = pretrained.config if pretrained is not None else None
        if base is None:
            raise ConfigError("sweep needs a pre-trained checkpoint for its model config")
        target = base.with_(encoder_bidirectional=v.encoder_bidirectional) if v.model == ENCDEC else base
        weights, _ = apply_transfer(v.strategy, pretrained, target, seed, tokenizer.delim_id, variant=v.model)
        tc = train_config_for(cfg, v, seed, len(indices))
        ft = finetune(train, indices, tc, weights, tokenizer)
        res.train_time_s = ft.train_time_s
        t0 = time.perf_counter()
        hyps = decode_corpus(
            ft.checkpoint.weights,
            test_ids,
            tokenizer.eos_id,
            tokenizer.delim_id,
            beam_size=cfg.beam_size,
            max_len=cfg.max_len,
            banned=(tokenizer.pad_id, tokenizer.delim_id),
            max_article_tokens=tc.max_article_tokens,
        )
        res.predictions = [tokenizer.decode(strip_eos(h.ids, tokenizer.eos_id)) for h in hyps]
        res.decode_time_s = time.perf_counter() - t0
        res.scores = aggregate([rouge_all(p, g.summary) for p, g in zip(res.predictions, test)])
    except MinigenError as e:
        res.error = f"{e.code}: {e}"
    except Exception as e:  # a failed cell must not stop the sweep
        res.error = f"internal: {type(e).__name__}: {e}"
        res.error += " | " + traceback.format_exc(limit=1).strip().splitlines()[-1]
    res.error = res.error.replace("\n", " ")
    return res


def run_sweep(
    cfg: SweepConfig,
    train: Sequence[ExamplePair],
    test: Sequence[ExamplePair],
    tokenizer: Tokenizer,
    pretrained: WeightSet | None,
    out_dir: str | Path | None = None,
    on_cell: Callable[[CellResult], None] | None = None,
) -> list[CellResult]:
    """Run every (seed, fraction, variant) cell; subsets depend only on the seed."""
    if cfg.test_limit is not None:
        test = list(test)[: cfg.test_limit]
    test_ids = [tokenizer.encode(p.article) for p in test]
    subsets = {s: make_subsets(SubsetSpec(len(train), s, tuple(cfg.fractions))) for s in cfg.seeds}
    results = []
    for v, f, s in cfg.cells():
        r = run_cell(v, f, s, subsets[s][f], train, test, test_ids, tokenizer, pretrained, cfg)
        results.append(r)
        if out_dir is not None and r.ok:
            pred_dir = Path(out_dir) / "predictions"
            pred_dir.mkdir(parents=True, exist_ok=True)
            write_predictions(
                ({"id": i, "prediction": p, "score": None} for i, p in enumerate(r.predictions)),
                pred_dir / f"{v.name}_{f:g}_{s}.jsonl",
            )
        if on_cell is not None:
            on_cell(r)
    if out_dir is not None:
        write_sweep_csv(results, Path(out_dir) / "sweep.csv")
        write_timing_csv(results, Path(out_dir) / "sweep_timing.csv")
    return results


def write_sweep_csv(results: Sequence[CellResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in results:
            w.writerow(r.row())


def write_timing_csv(results: Sequence[CellResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for r in results:
            w.writerow([r.variant.name, f"{r.fraction:g}", r.seed, f"{r.train_time_s:.3f}", f"{r.decode_time_s:.3f}"])


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def median_r2(rows: Sequence[dict], variant: str, fraction: float) -> float | None:
    vals = [float(r["r2"]) for r in rows if r["variant"] == variant and float(r["fraction"]) == fraction and r["status"] == "ok"]
    return statistics.median(vals) if vals else None
