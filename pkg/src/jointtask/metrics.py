"""Pixel accuracy ("precision"), Jaccard index and the top-K union protocol."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def precision(pred, gt) -> float:
    """Fraction of all pixels labelled correctly (foreground or background)."""
    pred, gt = _pair(pred, gt)
    return float(np.count_nonzero(pred == gt)) / pred.size


def jaccard(pred, gt) -> float:
    """|S & G| / |S | G|; 1.0 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


@dataclass
class EvalResult:
    precision: float
    jaccard: float
    rows: list = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "EvalResult":
        if not rows:
            return cls(float("nan"), float("nan"), [])
        return cls(float(np.mean([r["precision"] for r in rows])),
                   float(np.mean([r["jaccard"] for r in rows])), rows)

    @property
    def mean_time_ms(self) -> float:
        times = [r["time_ms"] for r in self.rows if "time_ms" in r]
        return float(np.mean(times)) if times else float("nan")


def topk_union_eval(segment_lists, gts, k_max: int = 100) -> EvalResult:
    """Best-over-K score of the union of the top-K ranked segments, per sample.

    Precision and Jaccard are each maximised over K independently; the chosen
    K for Jaccard is recorded in the per-sample rows.
    """
    rows = []
    for i, (segs, gt) in enumerate(zip(segment_lists, gts)):
        if len(segs) == 0:
            raise ValueError(f"sample {i} has no ranked segments")
        union = np.zeros_like(np.asarray(gt, dtype=bool))
        best_p, best_j, best_k = -1.0, -1.0, 0
        for k, seg in enumerate(segs[:k_max], start=1):
            union = union | np.asarray(seg, dtype=bool)
            p, j = precision(union, gt), jaccard(union, gt)
            best_p = max(best_p, p)
            if j > best_j:
                best_j, best_k = j, k
        rows.append({"index": i, "precision": best_p, "jaccard": best_j, "best_k": best_k})
    return EvalResult.from_rows(rows)


def evaluate(samples, model, threshold: float = 0.5) -> EvalResult:
    """Run the full extraction chain on each sample and score the painted mask."""
    from .networks import extract

    rows = []
    for s in samples:
        t0 = time.perf_counter()
        ex = extract(s.image, model, threshold)
        dt = (time.perf_counter() - t0) * 1000.0
        rows.append({"id": s.id, "precision": precision(ex.full_mask, s.mask),
                     "jaccard": jaccard(ex.full_mask, s.mask), "time_ms": dt,
                     "box": ex.box})
    return EvalResult.from_rows(rows)


def write_results(result: EvalResult, out_dir, reference_seconds: float | None = 0.014):
    """Write ``results.csv`` and ``summary.txt``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "precision", "jaccard", "time_ms"])
        for r in result.rows:
            w.writerow([r["id"], f"{r['precision']:.6f}", f"{r['jaccard']:.6f}",
                        f"{r['time_ms']:.3f}"])
    lines = [f"samples: {len(result.rows)}",
             f"precision: {result.precision:.6f}",
             f"jaccard: {result.jaccard:.6f}",
             f"mean_time_ms: {result.mean_time_ms:.3f}"]
    if reference_seconds is not None:
        lines.append(f"reference_time_ms: {reference_seconds * 1000:.1f} (GPU, 224/55 profile)")
    summary = out / "summary.txt"
    summary.write_text("\n".join(lines) + "\n")
    return csv_path, summary
