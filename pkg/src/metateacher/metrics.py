"""Scoring and binary-classification error metrics with exact tie handling.

A face's score is the mean of its predicted map; higher means more likely
spoof. Classification is strict: spoof iff score > threshold, so a score
exactly at the threshold is live. All rates are computed in double
precision from explicit counts, which keeps them exactly comparable to
brute-force enumeration on small score sets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class ScoreSet:
    """Per-class detector scores for one evaluation set."""

    live_scores: tuple[float, ...]
    spoof_scores: tuple[float, ...]

    def __post_init__(self) -> None:
        for name, values in (("live", self.live_scores), ("spoof", self.spoof_scores)):
            if any(not np.isfinite(v) for v in values):
                raise MetricsError(f"{name} scores contain non-finite values")

    def require_both(self) -> None:
        if not self.live_scores or not self.spoof_scores:
            raise MetricsError("rate computation needs both classes non-empty")


@dataclass(frozen=True)
class MetricsReport:
    apcer: float
    bpcer: float
    acer: float
    auc: float
    eer: float
    hter: float
    threshold: float

    def __post_init__(self) -> None:
        if self.acer != (self.apcer + self.bpcer) / 2.0:
            raise MetricsError("acer must equal the mean of apcer and bpcer")
        for name in ("apcer", "bpcer", "acer", "auc", "eer", "hter"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricsError(f"{name}={v} outside [0, 1]")

    @staticmethod
    def csv_header() -> str:
        return "apcer,bpcer,acer,auc,eer,hter,threshold"

    def csv_row(self) -> str:
        return ",".join(repr(v) for v in
                        (self.apcer, self.bpcer, self.acer, self.auc,
                         self.eer, self.hter, self.threshold))

    def text_block(self) -> str:
        return "\n".join([
            f"threshold : {self.threshold:.6f}",
            f"APCER     : {self.apcer:.4f}",
            f"BPCER     : {self.bpcer:.4f}",
            f"ACER      : {self.acer:.4f}",
            f"AUC       : {self.auc:.4f}",
            f"EER       : {self.eer:.4f}",
            f"HTER      : {self.hter:.4f}",
        ])


def score(map_tensor: Tensor) -> float:
    """Mean of all map pixels, the per-face spoofness score."""
    data = map_tensor.data if isinstance(map_tensor, Tensor) else np.asarray(map_tensor)
    if data.size == 0:
        raise MetricsError("cannot score an empty map")
    return float(np.mean(data, dtype=np.float64))


def classify(score_value: float, threshold: float) -> str:
    return "spoof" if score_value > threshold else "live"


def error_rates(scores: ScoreSet, threshold: float) -> tuple[float, float, float]:
    """(apcer, bpcer, acer) at a threshold: apcer is the fraction of spoof
    faces classified live (score <= threshold), bpcer the fraction of live
    faces classified spoof (score > threshold)."""
    scores.require_both()
    spoof = np.asarray(scores.spoof_scores, dtype=np.float64)
    live = np.asarray(scores.live_scores, dtype=np.float64)
    apcer = float(np.count_nonzero(spoof <= threshold)) / spoof.size
    bpcer = float(np.count_nonzero(live > threshold)) / live.size
    return apcer, bpcer, (apcer + bpcer) / 2.0


def auc(scores: ScoreSet) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic: the fraction
    of (spoof, live) pairs ranked correctly, ties counted one half."""
    scores.require_both()
    spoof = np.asarray(scores.spoof_scores, dtype=np.float64)[:, None]
    live = np.asarray(scores.live_scores, dtype=np.float64)[None, :]
    wins = np.count_nonzero(spoof > live)
    ties = np.count_nonzero(spoof == live)
    return (wins + 0.5 * ties) / (spoof.size * live.size)


def _candidate_thresholds(scores: ScoreSet) -> np.ndarray:
    pooled = np.unique(np.concatenate([
        np.asarray(scores.live_scores, dtype=np.float64),
        np.asarray(scores.spoof_scores, dtype=np.float64)]))
    mids = (pooled[:-1] + pooled[1:]) / 2.0
    return np.concatenate([[pooled[0] - 1.0], mids, [pooled[-1] + 1.0]])


def eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate: sweep all distinct-score midpoints (plus outer
    sentinels), pick the threshold minimizing |FAR - FRR| with ties broken
    toward the lower threshold, and report (FAR + FRR) / 2 there."""
    scores.require_both()
    best_gap, best_val, best_thr = None, None, None
    for thr in _candidate_thresholds(scores):
        far, frr, _ = error_rates(scores, float(thr))
        gap = abs(far - frr)
        if best_gap is None or gap < best_gap:
            best_gap, best_val, best_thr = gap, (far + frr) / 2.0, float(thr)
    return best_val, best_thr


def hter(dev: ScoreSet, test: ScoreSet) -> float:
    """Half total error rate on the test set at the dev-set EER threshold."""
    _, threshold = eer(dev)
    far, frr, _ = error_rates(test, threshold)
    return (far + frr) / 2.0


def build_report(dev: ScoreSet, test: ScoreSet,
                 threshold_policy: str = "eer") -> MetricsReport:
    """Full metric suite on ``test``. The APCER/BPCER/ACER threshold comes
    from the dev-set EER point or is fixed at 0.5 per ``threshold_policy``."""
    if threshold_policy == "eer":
        _, threshold = eer(dev)
    elif threshold_policy == "fixed_0.5":
        threshold = 0.5
    else:
        raise MetricsError(f"unknown threshold policy {threshold_policy!r}")
    apcer, bpcer, acer = error_rates(test, threshold)
    test_eer, _ = eer(test)
    return MetricsReport(apcer, bpcer, acer, auc(test), test_eer,
                         hter(dev, test), threshold)


def side_by_side_csv(entries: list[tuple[str, str, MetricsReport]]) -> str:
    """Comparison table: one row per (split, supervision label) pair."""
    lines = ["split,supervision," + MetricsReport.csv_header()]
    for split, label, report in entries:
        lines.append(f"{split},{label},{report.csv_row()}")
    return "\n".join(lines) + "\n"
