"""Bucketed evaluation of novel-view predictions with optional visibility masks."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .metrics import border_crop, psnr, ssim

log = logging.getLogger(__name__)

METRICS = ("psnr", "ssim", "masked_psnr", "masked_ssim")


@dataclass
class BucketMetrics:
    psnr: float
    ssim: float
    masked_psnr: float | None
    masked_ssim: float | None
    count: int


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    if any(math.isinf(v) for v in vals):
        return float("inf") if all(v > 0 for v in vals if math.isinf(v)) else float("nan")
    return float(np.mean(vals))


def _enc(v):
    if v is None:
        return "n/a"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _dec(v):
    if v == "n/a":
        return None
    if isinstance(v, str):
        return float(v)
    return v


@dataclass
class EvalReport:
    buckets: dict[str, BucketMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            name: {**{k: _enc(getattr(b, k)) for k in METRICS}, "count": b.count}
            for name, b in self.buckets.items()
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls({n: BucketMetrics(**{k: _dec(d[k]) for k in METRICS}, count=d["count"]) for n, d in raw.items()})

    def to_table(self) -> str:
        head = ["bucket", "PSNR", "SSIM", "mPSNR", "mSSIM", "n"]
        rows = []
        for name, b in self.buckets.items():
            cells = [name]
            for k in METRICS:
                v = getattr(b, k)
                cells.append("n/a" if v is None else ("inf" if math.isinf(v) else f"{v:.{2 if 'psnr' in k else 4}f}"))
            cells.append(str(b.count))
            rows.append(cells)
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
        return "\n".join([fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]) + "\n"


def score_pair(pred, target, mask, crop: float = 0.05) -> dict[str, float | None]:
    """All four metrics for one prediction after the border crop."""
    p = border_crop(np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0), crop)
    t = border_crop(np.asarray(target, dtype=np.float64), crop)
    m = border_crop(np.asarray(mask, dtype=np.float64), crop)
    return {"psnr": psnr(p, t), "ssim": ssim(p, t), "masked_psnr": psnr(p, t, m), "masked_ssim": ssim(p, t, m)}


def evaluate(predictor, buckets: dict, crop: float = 0.05) -> EvalReport:
    """Score ``predictor`` on every bucket of samples.

    ``predictor`` is a ``LifterParams`` or any callable mapping a sample to a
    predicted (H, W, 3) target image. Empty buckets are omitted with a warning.
    """
    predict: Callable = predictor if callable(predictor) else _lifter_predictor(predictor)
    report = EvalReport()
    for name, samples in buckets.items():
        samples = list(samples)
        if not samples:
            log.warning("bucket %r is empty; omitted from the report", name)
            continue
        scores = [score_pair(predict(s), s.x_target.data[:, :, :3], s.metric_mask(), crop) for s in samples]
        report.buckets[name] = BucketMetrics(
            *(_mean(sc[k] for sc in scores) for k in METRICS), count=len(samples)
        )
    return report


def _lifter_predictor(params):
    from .training import predict_view

    return lambda s: predict_view(params, s)
