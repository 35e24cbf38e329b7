"""Synthetic entity-annotated, partially spoofed corpus of frame features.

Bona fide frames follow a stationary AR(1) process with standard deviation
``noise_std``. Spoofed segments switch to a weaker AR coefficient and add a
positive mean shift on a random subset of the non-entity dimensions. Entity
spans add a type-specific signature on the last ``entity_dims`` dimensions,
and spoof segments are preferentially placed so they intersect an entity span.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from nepadd import _accel
from nepadd.errors import ConfigError, DataError
from nepadd.formats import (read_features, read_jsonl, rle_decode, rle_encode, write_features,
                            write_jsonl)
from nepadd.ner import ENTITY_TYPES, tags_from_spans

SPLITS = ("train", "dev", "eval")
FORGERY_LEVELS = tuple(range(1, 11))

# orthogonal sign patterns, one per entity type (first 4 entity dims)
_SIGNATURES = {
    "ORG": np.array([1.0, 1.0, -1.0, -1.0]),
    "PER": np.array([1.0, -1.0, 1.0, -1.0]),
    "LOC": np.array([1.0, -1.0, -1.0, 1.0]),
}
_MAX_LAYOUT_ATTEMPTS = 200


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    n_train: int = 400
    n_dev: int = 60
    n_eval: int = 60
    t_min: int = 80
    t_max: int = 200
    d_in: int = 16
    noise_std: float = 0.5
    spoof_shift: float = 0.6
    spoof_subspace_dims: int = 4
    ar_coeff_real: float = 0.9
    ar_coeff_spoof: float = 0.6
    entity_dims: int = 4
    entity_magnitude: float = 0.8
    extra_entity_rate: float = 0.3
    entity_len_min: int = 8
    entity_len_max: int = 20
    p_overlap: float = 0.8
    min_segments: int = 1
    max_segments: int = 10
    segment_count_decay: float = 0.7
    segment_len_min: int = 2
    segment_len_max: int = 8
    fake_utt_fraction: float = 0.9

    def __post_init__(self):
        probs = {"p_overlap": self.p_overlap, "fake_utt_fraction": self.fake_utt_fraction,
                 "ar_coeff_real": self.ar_coeff_real, "ar_coeff_spoof": self.ar_coeff_spoof}
        for name, val in probs.items():
            if not 0.0 <= val <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {val}")
        if max(self.ar_coeff_real, self.ar_coeff_spoof) >= 1.0:
            raise ConfigError("AR coefficients must be < 1")
        if self.noise_std <= 0:
            raise ConfigError(f"noise_std must be > 0, got {self.noise_std}")
        if self.spoof_shift <= 0:
            raise ConfigError(f"spoof_shift must be > 0, got {self.spoof_shift}")
        if min(self.n_train, self.n_dev, self.n_eval) < 1:
            raise ConfigError("every split needs at least one utterance")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError(f"bad T range [{self.t_min}, {self.t_max}]")
        if self.entity_dims != 4:
            raise ConfigError("entity signatures are defined on exactly 4 dims")
        if not 0 < self.spoof_subspace_dims <= self.d_in - self.entity_dims:
            raise ConfigError("spoof_subspace_dims must fit in the non-entity dims")
        if not 1 <= self.min_segments <= self.max_segments:
            raise ConfigError("need 1 <= min_segments <= max_segments")
        if not 1 <= self.segment_len_min <= self.segment_len_max:
            raise ConfigError("bad spoof segment length range")
        if not 1 <= self.entity_len_min <= self.entity_len_max:
            raise ConfigError("bad entity span length range")
        if self.segment_count_decay <= 0 or self.extra_entity_rate < 0:
            raise ConfigError("segment_count_decay must be > 0 and extra_entity_rate >= 0")

    def split_sizes(self):
        return {"train": self.n_train, "dev": self.n_dev, "eval": self.n_eval}


@dataclass
class UtteranceRecord:
    id: str
    path: str
    T: int
    labels: np.ndarray
    entities: list = field(default_factory=list)
    segments: list = field(default_factory=list)
    split: str = "train"
    features: np.ndarray | None = None

    @property
    def is_fake(self):
        return bool(self.segments)

    @property
    def tags(self):
        return tags_from_spans(self.T, self.entities)

    def to_json(self):
        return {
            "id": self.id,
            "path": self.path,
            "T": int(self.T),
            "labels": rle_encode(self.labels),
            "entities": [[int(s), int(e), t] for s, e, t in self.entities],
            "segments": [[int(s), int(e)] for s, e in self.segments],
            "split": self.split,
        }

    @classmethod
    def from_json(cls, row):
        try:
            rec = cls(
                id=row["id"], path=row["path"], T=int(row["T"]),
                labels=rle_decode(row["labels"]),
                entities=[(int(s), int(e), str(t)) for s, e, t in row["entities"]],
                segments=[(int(s), int(e)) for s, e in row["segments"]],
                split=row["split"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest row: {exc}") from exc
        check_record(rec)
        return rec


def labels_from_segments(T, segments):
    labels = np.ones(T, dtype=np.int8)
    for s, e in segments:
        labels[s:e] = 0
    return labels


def check_record(rec: UtteranceRecord):
    """Raise DataError unless labels, segments and spans are mutually consistent."""
    if rec.labels.shape != (rec.T,):
        raise DataError(f"{rec.id}: {rec.labels.size} labels for T={rec.T}")
    prev_end = -1
    for s, e in rec.segments:
        if not (0 <= s < e <= rec.T) or s <= prev_end:
            raise DataError(f"{rec.id}: spoof segments not sorted/disjoint within [0, T)")
        prev_end = e
    if not np.array_equal(rec.labels, labels_from_segments(rec.T, rec.segments)):
        raise DataError(f"{rec.id}: frame labels disagree with spoof segments")
    prev_end = -1
    for s, e, t in sorted(rec.entities):
        if t not in ENTITY_TYPES or not (0 <= s < e <= rec.T) or s < prev_end:
            raise DataError(f"{rec.id}: bad or overlapping entity span ({s}, {e}, {t})")
        prev_end = e


# ---------------------------------------------------------------- sampling


def _segment_count(cfg, rng):
    ks = np.arange(cfg.min_segments, cfg.max_segments + 1)
    w = cfg.segment_count_decay ** (ks - cfg.min_segments)
    return int(rng.choice(ks, p=w / w.sum()))


def _free(occupied, s, e, gap):
    lo, hi = max(0, s - gap), min(occupied.size, e + gap)
    return not occupied[lo:hi].any()


def _place(rng, T, length, occupied, gap, must_hit=None):
    """Uniformly pick a start among positions free of ``occupied`` (with gap).

    With ``must_hit`` (bool mask) the interval must also intersect it.
    """
    starts = [s for s in range(0, T - length + 1) if _free(occupied, s, s + length, gap)]
    if must_hit is not None:
        starts = [s for s in starts if must_hit[s:s + length].any()]
    if not starts:
        return None
    return int(starts[rng.integers(len(starts))])


def _layout(cfg, rng, T, n_segments, n_entities):
    """Entity spans and spoof segments for one utterance, or None when they do not fit."""
    occ = np.zeros(T, dtype=bool)
    entities = []
    for _ in range(n_entities):
        length = int(rng.integers(cfg.entity_len_min, cfg.entity_len_max + 1))
        s = _place(rng, T, min(length, T), occ, gap=1)
        if s is None:
            return None
        e = s + min(length, T)
        occ[s:e] = True
        entities.append((s, e, ENTITY_TYPES[int(rng.integers(len(ENTITY_TYPES)))]))
    entity_mask = occ
    seg_occ = np.zeros(T, dtype=bool)
    segments = []
    for _ in range(n_segments):
        length = int(rng.integers(cfg.segment_len_min, cfg.segment_len_max + 1))
        overlap = bool(entities) and rng.random() < cfg.p_overlap
        s = _place(rng, T, length, seg_occ, gap=1, must_hit=entity_mask if overlap else None)
        if s is None:
            return None
        seg_occ[s:s + length] = True
        segments.append((s, s + length))
    return sorted(entities), sorted(segments)


def _synthesize_features(cfg, rng, T, labels, entities, segments):
    innov = rng.standard_normal((T, cfg.d_in))
    coeff = np.where(labels == 1, cfg.ar_coeff_real, cfg.ar_coeff_spoof).astype(np.float64)
    x = cfg.noise_std * _accel.ar1_filter(innov, coeff)
    plain = cfg.d_in - cfg.entity_dims
    for s, e in segments:
        dims = rng.choice(plain, size=cfg.spoof_subspace_dims, replace=False)
        x[s:e, dims] += cfg.spoof_shift
    for s, e, t in entities:
        x[s:e, plain:] += cfg.entity_magnitude * _SIGNATURES[t]
    # round through f32 so in-memory features equal what the NEPD file stores
    return x.astype(np.float32).astype(np.float64)


def _make_utterance(cfg, rng, uid, split, fake):
    T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    k = _segment_count(cfg, rng) if fake else 0
    n_ent = 1 + int(rng.poisson(cfg.extra_entity_rate))
    if fake and cfg.p_overlap > 0:
        n_ent = max(n_ent, math.ceil(k / 3))
    for _ in range(_MAX_LAYOUT_ATTEMPTS):
        layout = _layout(cfg, rng, T, k, n_ent)
        if layout is not None:
            break
    else:
        raise DataError(
            f"{uid}: could not place {k} spoof segments and {n_ent} entity spans in T={T} frames "
            f"after {_MAX_LAYOUT_ATTEMPTS} attempts"
        )
    entities, segments = layout
    labels = labels_from_segments(T, segments)
    feats = _synthesize_features(cfg, rng, T, labels, entities, segments)
    rec = UtteranceRecord(uid, f"feats/{uid}.nepd", T, labels, entities, segments, split, feats)
    check_record(rec)
    return rec


def synthesize(cfg: CorpusConfig) -> list[UtteranceRecord]:
    """Build the whole corpus in memory (deterministic in ``cfg.seed``)."""
    root = np.random.SeedSequence(cfg.seed)
    split_seeds = root.spawn(len(SPLITS))
    records = []
    for split, ss in zip(SPLITS, split_seeds):
        n = cfg.split_sizes()[split]
        n_fake = int(round(cfg.fake_utt_fraction * n))
        layout_ss, *utt_ss = ss.spawn(n + 1)
        fake = np.zeros(n, dtype=bool)
        fake[np.random.default_rng(layout_ss).permutation(n)[:n_fake]] = True
        for i in range(n):
            rng = np.random.default_rng(utt_ss[i])
            records.append(_make_utterance(cfg, rng, f"{split}_{i:05d}", split, bool(fake[i])))
    return records


# ---------------------------------------------------------------- corpus I/O


def corpus_stats(records):
    """Per-split counts in the schema: bona fide / fake / all / named entities count."""
    rows = []
    for split in SPLITS:
        recs = [r for r in records if r.split == split]
        fake = sum(r.is_fake for r in recs)
        rows.append({"name": split, "bona_fide": len(recs) - fake, "fake": fake,
                     "all": len(recs), "named_entities_count": sum(len(r.entities) for r in recs)})
    return rows


def write_corpus(records, out_dir, cfg: CorpusConfig | None = None):
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_features(out / rec.path, rec.features)
    write_jsonl(out / "manifest.jsonl", [r.to_json() for r in records])
    stats = corpus_stats(records)
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    lines = ["name,bona_fide,fake,all,named_entities_count"]
    lines += [f"{r['name']},{r['bona_fide']},{r['fake']},{r['all']},{r['named_entities_count']}"
              for r in stats]
    (out / "stats.csv").write_text("\n".join(lines) + "\n")
    if cfg is not None:
        (out / "corpus_config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")
    return stats


def generate_corpus(cfg: CorpusConfig, out_dir):
    """Synthesize the corpus and write manifest, NEPD feature files and stats."""
    records = synthesize(cfg)
    write_corpus(records, out_dir, cfg)
    return records


def load_corpus(data_dir, splits=None, with_features=True) -> list[UtteranceRecord]:
    root = Path(data_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"no manifest.jsonl under {root}")
    records = [UtteranceRecord.from_json(row) for row in read_jsonl(manifest)]
    if splits is not None:
        records = [r for r in records if r.split in splits]
    if with_features:
        for rec in records:
            rec.features = read_features(root / rec.path)
            if rec.features.shape[0] != rec.T:
                raise DataError(f"{rec.id}: feature file has {rec.features.shape[0]} frames, T={rec.T}")
    return records


def split_by_forgery_level(records):
    """Map level k (1..10) to the fake records with exactly k spoof segments."""
    levels = {k: [] for k in FORGERY_LEVELS}
    for rec in records:
        k = len(rec.segments)
        if k in levels:
            levels[k].append(rec)
    return levels


def spoofed_frame_fraction(records):
    total = sum(r.T for r in records)
    return sum(int((r.labels == 0).sum()) for r in records) / total


def entity_type_counts(records):
    return Counter(t for r in records for _, _, t in r.entities)
