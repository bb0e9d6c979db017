"""Segmentation quality metrics and whole-benchmark evaluation.

J is intersection-over-union of boolean masks; F is the boundary F-measure
at a tolerance of max(1, round(0.008 * image diagonal)) pixels. Both use the
convention that two empty masks agree perfectly (1.0) and an empty/non-empty
pair scores 0.0 on F. Aggregation is an unweighted mean at every level:
frames within an instruction, instructions within a sequence, sequences
within the benchmark.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .core import INSTRUCTION_KINDS, AnnotatedSequence
from .model import TrackModel
from .tracker import Tracker


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.ndim != 2 or pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def region_similarity(pred, gt) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    pred, gt = _check_pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with any 4-neighbor background (borders count)."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def boundary_measure(pred, gt) -> float:
    """Boundary F-measure with a diagonal-scaled pixel tolerance."""
    pred, gt = _check_pair(pred, gt)
    if not pred.any() and not gt.any():
        return 1.0
    if not pred.any() or not gt.any():
        return 0.0
    h, w = pred.shape
    tol = max(1.0, round(0.008 * float(np.hypot(h, w))))
    pb = mask_boundary(pred)
    gb = mask_boundary(gt)
    precision = float((distance_transform_edt(~gb)[pb] <= tol).mean())
    recall = float((distance_transform_edt(~pb)[gb] <= tol).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def recall_over_threshold(values, threshold: float = 0.5) -> float:
    """Fraction of scores strictly above the threshold."""
    values = list(values)
    if not values:
        raise ValueError("recall needs at least one score")
    return sum(1 for v in values if v > threshold) / len(values)


@dataclass(frozen=True)
class EvalReport:
    """Benchmark-level metric summary plus per-sequence detail."""

    j_mean: float
    f_mean: float
    jf_mean: float
    recall: float
    rethink_frequency: float
    fallback_rate: float
    n_sequences: int
    n_instructions: int
    ablate: str
    per_sequence: dict
    failures: tuple

    def to_json(self) -> str:
        payload = {
            "j_mean": self.j_mean,
            "f_mean": self.f_mean,
            "jf_mean": self.jf_mean,
            "recall": self.recall,
            "rethink_frequency": self.rethink_frequency,
            "fallback_rate": self.fallback_rate,
            "n_sequences": self.n_sequences,
            "n_instructions": self.n_instructions,
            "ablate": self.ablate,
            "per_sequence": self.per_sequence,
            "failures": [list(f) for f in self.failures],
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def table(self) -> str:
        lines = [f"{'sequence':<16}{'J':>8}{'F':>8}{'J&F':>8}"]
        for sid in sorted(self.per_sequence):
            row = self.per_sequence[sid]
            lines.append(f"{sid:<16}{row['j']:>8.3f}{row['f']:>8.3f}{row['jf']:>8.3f}")
        lines.append(f"{'overall':<16}{self.j_mean:>8.3f}{self.f_mean:>8.3f}"
                     f"{self.jf_mean:>8.3f}")
        lines.append(f"recall@0.5 {self.recall:.3f}  rethink freq "
                     f"{self.rethink_frequency:.3f}  fallbacks {self.fallback_rate:.3f}")
        if self.failures:
            lines.append(f"failures: {len(self.failures)}")
        return "\n".join(lines)


def evaluate_benchmark(model: TrackModel, sequences, *, ablate: str = "none",
                       subset=None, kinds=INSTRUCTION_KINDS) -> EvalReport:
    """Run the tracker over every instruction and aggregate J/F.

    `subset` restricts to the named sequence ids; `kinds` filters instruction
    kinds. A sequence whose every instruction fails still appears in the
    failure list but not in the aggregates.
    """
    tracker = Tracker(model, ablate=ablate)
    per_sequence: dict = {}
    failures: list = []
    instr_j: list = []
    seq_rows: list = []
    freqs: list = []
    fallbacks: list = []
    n_instructions = 0

    for seq in sequences:
        if not isinstance(seq, AnnotatedSequence):
            raise TypeError(f"expected AnnotatedSequence, got {type(seq).__name__}")
        if subset is not None and seq.sequence_id not in subset:
            continue
        records = [r for r in seq.instructions if r.kind in kinds]
        rows = []
        for record in records:
            try:
                result = tracker.run(seq.frames, record.seed_text)
            except Exception as e:  # noqa: BLE001 - one bad run must not sink the report
                failures.append((seq.sequence_id, record.seed_text,
                                 f"{type(e).__name__}: {e}"))
                continue
            gt = seq.gt_masks[record.target_object_id]
            js = [region_similarity(m, g.grid) for m, g in zip(result.masks, gt)]
            fs = [boundary_measure(m, g.grid) for m, g in zip(result.masks, gt)]
            rows.append((float(np.mean(js)), float(np.mean(fs))))
            instr_j.append(float(np.mean(js)))
            freqs.append(result.stats.rethink_frequency)
            fallbacks.append(result.stats.fallback)
            n_instructions += 1
        if rows:
            j = float(np.mean([r[0] for r in rows]))
            f = float(np.mean([r[1] for r in rows]))
            per_sequence[seq.sequence_id] = {"j": j, "f": f, "jf": (j + f) / 2.0}
            seq_rows.append((j, f))

    if not seq_rows:
        raise ValueError("nothing to evaluate: no instruction produced a result")
    j_mean = float(np.mean([r[0] for r in seq_rows]))
    f_mean = float(np.mean([r[1] for r in seq_rows]))
    return EvalReport(
        j_mean=j_mean,
        f_mean=f_mean,
        jf_mean=(j_mean + f_mean) / 2.0,
        recall=recall_over_threshold(instr_j),
        rethink_frequency=float(np.mean(freqs)),
        fallback_rate=float(np.mean(fallbacks)),
        n_sequences=len(seq_rows),
        n_instructions=n_instructions,
        ablate=ablate,
        per_sequence=per_sequence,
        failures=tuple(failures),
    )
