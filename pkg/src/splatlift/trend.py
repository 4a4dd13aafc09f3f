"""Masked versus unmasked lifter training on the synthetic occlusion corpus."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .corpus import BUCKETS, Corpus, CorpusConfig, build_corpus
from .evaluation import EvalReport, evaluate
from .lifter import LifterConfig, LifterParams
from .training import LossConfig, train_lifter

log = logging.getLogger(__name__)

HELD_OUT = "held-out"  # pooled novel-view bucket


@dataclass
class TrendConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    steps: int = 5000
    batch: int = 4
    lr_head: float = 1e-3
    seed: int = 0


@dataclass
class TrendRun:
    params: LifterParams
    report: EvalReport
    seconds: float


@dataclass
class TrendResult:
    masked: TrendRun
    unmasked: TrendRun

    @property
    def heldout_gap(self) -> float:
        """Masked-region PSNR of the masked model minus that of the unmasked model."""
        return self.masked.report.buckets[HELD_OUT].masked_psnr - self.unmasked.report.buckets[HELD_OUT].masked_psnr

    @property
    def input_gap(self) -> float:
        return self.masked.report.buckets["input"].psnr - self.unmasked.report.buckets["input"].psnr


def eval_buckets(corpus: Corpus) -> dict:
    return {**{b: corpus.buckets[b] for b in BUCKETS}, HELD_OUT: corpus.holdout}


def train_variant(corpus: Corpus, cfg: TrendConfig, masking: bool) -> TrendRun:
    t0 = time.perf_counter()
    params = LifterParams.create(LifterConfig(height=cfg.corpus.resolution, width=cfg.corpus.resolution,
                                              scene_extent=corpus.scenes[0].extent), seed=cfg.seed)
    train_lifter(corpus.train, params, LossConfig(masking=masking), steps=cfg.steps, batch=cfg.batch,
                 lr_head=cfg.lr_head, seed=cfg.seed)
    seconds = time.perf_counter() - t0
    report = evaluate(params, eval_buckets(corpus))
    log.info("masking=%s trained in %.0f s\n%s", masking, seconds, report.to_table())
    return TrendRun(params, report, seconds)


def run_trend(cfg: TrendConfig | None = None, corpus: Corpus | None = None) -> TrendResult:
    """Train one lifter with and one without visibility masking from the same seed."""
    cfg = cfg or TrendConfig()
    corpus = corpus or build_corpus(cfg.corpus)
    return TrendResult(train_variant(corpus, cfg, True), train_variant(corpus, cfg, False))
