"""Frame-level EER, DET points and the per-forgery-level breakdown.

Spoof scores are oriented so that higher means more likely spoofed. Frames
are pooled across utterances before thresholding.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from nepadd.errors import ContractError

log = logging.getLogger(__name__)


@dataclass
class ScoreSet:
    scores: np.ndarray
    is_spoof: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.is_spoof = np.asarray(self.is_spoof, dtype=bool).reshape(-1)
        if self.scores.shape != self.is_spoof.shape:
            raise ContractError(f"{self.scores.size} scores vs {self.is_spoof.size} labels")

    @classmethod
    def from_utterances(cls, spoof_scores, frame_labels):
        """Pool per-utterance spoof scores; ``frame_labels`` use 1=authentic, 0=spoof."""
        scores = np.concatenate([np.asarray(s, float) for s in spoof_scores])
        labels = np.concatenate([np.asarray(y) for y in frame_labels])
        return cls(scores, labels == 0)

    def __len__(self):
        return self.scores.size


def det_points(scores: ScoreSet):
    """(thresholds, FPR, FNR) at every distinct score and at +inf.

    FPR(t) = P(score >= t | bona fide), FNR(t) = P(score < t | spoof).
    """
    s, y = scores.scores, scores.is_spoof
    n_spoof = int(y.sum())
    n_bona = y.size - n_spoof
    if n_spoof == 0 or n_bona == 0:
        raise ContractError(
            f"EER undefined: need both classes, got {n_spoof} spoof / {n_bona} bona fide frames"
        )
    order = np.argsort(s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    thresholds, first = np.unique(s_sorted, return_index=True)
    spoof_below = np.concatenate([[0], np.cumsum(y_sorted)])[first]
    bona_below = first - spoof_below
    fnr = np.append(spoof_below / n_spoof, 1.0)
    fpr = np.append(1.0 - bona_below / n_bona, 0.0)
    return np.append(thresholds, np.inf), fpr, fnr


def compute_eer(scores: ScoreSet):
    """Return (eer, threshold) at the FPR/FNR crossing, linearly interpolated."""
    thr, fpr, fnr = det_points(scores)
    d = fnr - fpr  # non-decreasing, from <= 0 to 1
    i = int(np.argmax(d >= 0.0))
    if d[i] == 0.0 or i == 0:
        return float(fpr[i]), float(thr[i])
    w = d[i - 1] / (d[i - 1] - d[i])
    eer = fpr[i - 1] + w * (fpr[i] - fpr[i - 1])
    t_hi = thr[i] if np.isfinite(thr[i]) else thr[i - 1]
    return float(eer), float(thr[i - 1] + w * (t_hi - thr[i - 1]))


def format_eer(eer: float) -> str:
    """EER as a percentage with two decimals, e.g. 0.0789 -> '7.89'."""
    return f"{100.0 * eer:.2f}"


def eer_by_forgery_level(utterance_scores, levels, bona_fide_ids=None):
    """EER per forgery level over that level's frames plus all bona fide utterances.

    ``utterance_scores`` maps utterance id -> (spoof_scores, frame_labels);
    ``levels`` maps level -> list of records (or ids). Levels with no
    scored utterances are omitted with a warning.
    """
    if bona_fide_ids is None:
        bona_fide_ids = [uid for uid, (_, y) in utterance_scores.items() if np.all(np.asarray(y) == 1)]
    bona = [utterance_scores[u] for u in bona_fide_ids if u in utterance_scores]
    table = {}
    for level in sorted(levels):
        ids = [getattr(r, "id", r) for r in levels[level]]
        fake = [utterance_scores[u] for u in ids if u in utterance_scores]
        if not fake:
            log.warning("forgery level %d has no scored utterances; omitted", level)
            continue
        pool = fake + bona
        try:
            eer, _ = compute_eer(ScoreSet.from_utterances([p[0] for p in pool], [p[1] for p in pool]))
        except ContractError as exc:
            log.warning("forgery level %d skipped: %s", level, exc)
            continue
        table[level] = eer
    return table


def score_dump_rows(utterance_scores):
    """Rows {utt_id, frame, spoof_score, label} (label: 1 authentic, 0 spoof)."""
    for uid, (scores, labels) in utterance_scores.items():
        for t, (s, y) in enumerate(zip(scores, labels)):
            yield {"utt_id": uid, "frame": t, "spoof_score": float(s), "label": int(y)}
