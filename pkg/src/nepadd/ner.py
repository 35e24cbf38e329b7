"""Teacher branch (speech NER) and the entity tag scheme.

Frame tags use BIO over three entity types. In text form entities are
wrapped in start symbols ``{`` (ORG), ``|`` (PER), ``$`` (LOC) and the shared
end symbol ``]``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from nepadd import tensor as nt
from nepadd.errors import ConfigError, ContractError, ShapeError
from nepadd.layers import (BiLSTM, BiLstmSpec, Conv1d, Conv1dSpec, LayerNorm, Linear, Module,
                           SelfAttention, SelfAttentionSpec)

ENTITY_TYPES = ("ORG", "PER", "LOC")
TAGS = ("O", "B-ORG", "I-ORG", "B-PER", "I-PER", "B-LOC", "I-LOC")
TAG_INDEX = {t: i for i, t in enumerate(TAGS)}
START_SYMBOLS = {"ORG": "{", "PER": "|", "LOC": "$"}
END_SYMBOL = "]"
_SYMBOL_TYPES = {v: k for k, v in START_SYMBOLS.items()}
_RESERVED = set(START_SYMBOLS.values()) | {END_SYMBOL}


def begin_tag(etype):
    return TAG_INDEX["B-" + etype]


def inside_tag(etype):
    return TAG_INDEX["I-" + etype]


def tag_type(tag):
    """Entity type of a tag index or name, None for O."""
    name = TAGS[tag] if isinstance(tag, (int, np.integer)) else tag
    return None if name == "O" else name[2:]


def tags_from_spans(T, spans):
    """Frame tag indices from half-open spans [(start, end, type)]."""
    tags = np.zeros(T, dtype=np.int64)
    for start, end, etype in sorted(spans):
        if not 0 <= start < end <= T:
            raise ContractError(f"entity span ({start}, {end}) outside [0, {T})")
        if np.any(tags[start:end]):
            raise ContractError(f"entity span ({start}, {end}, {etype}) overlaps another span")
        tags[start] = begin_tag(etype)
        tags[start + 1:end] = inside_tag(etype)
    return tags


def spans_from_tags(tags):
    """Inverse of :func:`tags_from_spans` for well-formed tag sequences."""
    spans = []
    start = etype = None
    for t, tag in enumerate(list(tags) + [0]):
        name = TAGS[int(tag)]
        if etype is not None and name != "I-" + etype:
            spans.append((start, t, etype))
            etype = None
        if name.startswith("B-"):
            start, etype = t, name[2:]
        elif name.startswith("I-") and etype is None:
            raise ContractError(f"ill-formed tag sequence: {name} at frame {t} opens no span")
    return spans


def is_well_formed(tags):
    prev = "O"
    for tag in tags:
        name = TAGS[int(tag)]
        if name.startswith("I-") and prev[2:] != name[2:]:
            return False
        prev = name
    return True


def repair_tags(tags):
    """Turn every orphan I-X (after O or another type) into B-X."""
    out = np.array(tags, dtype=np.int64, copy=True)
    prev = "O"
    for t, tag in enumerate(out):
        name = TAGS[int(tag)]
        if name.startswith("I-") and prev[2:] != name[2:]:
            out[t] = begin_tag(name[2:])
            name = TAGS[int(out[t])]
        prev = name
    return out


def render_annotated_text(tokens):
    """Insert entity symbols into a token sequence.

    ``tokens`` is a list of ``(word, label)`` where label is None/"O", an
    entity type ("ORG"), or a BIO tag ("B-ORG", "I-ORG"). Consecutive tokens
    with the same bare type form one span; use B-/I- tags to separate
    adjacent spans of the same type.
    """
    words = []
    open_type = None
    for word, label in tokens:
        if any(ch in _RESERVED for ch in word):
            raise ContractError(f"word {word!r} contains a reserved entity symbol")
        label = None if label in (None, "O") else label
        if label is None:
            etype, begins = None, False
        elif label[:2] in ("B-", "I-"):
            etype, begins = label[2:], label.startswith("B-")
            if not begins and open_type != etype:
                raise ContractError(f"span for {word!r}: {label} does not continue an open span")
        else:
            etype, begins = label, label != open_type
        if etype is not None and etype not in START_SYMBOLS:
            raise ContractError(f"unknown entity type {etype!r}")
        if open_type is not None and (begins or etype != open_type):
            words[-1] += END_SYMBOL
            open_type = None
        if etype is not None and open_type is None:
            word = START_SYMBOLS[etype] + word
            open_type = etype
        words.append(word)
    if open_type is not None:
        words[-1] += END_SYMBOL
    return " ".join(words)


def parse_annotated_text(text):
    """Inverse of :func:`render_annotated_text`: returns [(word, BIO tag)]."""
    out = []
    open_type = None
    for raw in text.split():
        word = raw
        begins = False
        if word[0] in _SYMBOL_TYPES:
            if open_type is not None:
                raise ContractError(f"nested entity start in {raw!r}")
            open_type, begins, word = _SYMBOL_TYPES[word[0]], True, word[1:]
        closes = word.endswith(END_SYMBOL)
        if closes:
            if open_type is None:
                raise ContractError(f"entity end without start in {raw!r}")
            word = word[:-1]
        if not word or any(ch in _RESERVED for ch in word):
            raise ContractError(f"malformed annotated token {raw!r}")
        tag = "O" if open_type is None else ("B-" if begins else "I-") + open_type
        out.append((word, tag))
        if closes:
            open_type = None
    if open_type is not None:
        raise ContractError("unterminated entity span")
    return out


@dataclass(frozen=True)
class NerBranchConfig:
    d_in: int = 16
    conv_channels: int = 32
    conv_kernel: int = 5
    conv_padding: int = 2
    lstm_layers: int = 2
    lstm_hidden: int = 8
    head_count: int = 1
    tag_count: int = len(TAGS)

    def __post_init__(self):
        if min(self.d_in, self.conv_channels, self.lstm_layers, self.lstm_hidden) <= 0:
            raise ConfigError(f"NerBranchConfig needs positive dims, got {asdict(self)}")
        if self.tag_count != len(TAGS):
            raise ConfigError(f"tag_count must be {len(TAGS)}, got {self.tag_count}")
        if self.conv_kernel != 2 * self.conv_padding + 1:
            raise ConfigError("teacher conv must preserve length (kernel = 2*padding + 1)")
        if self.model_dim % self.head_count:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by {self.head_count}")

    @property
    def model_dim(self):
        return 2 * self.lstm_hidden


class NerBranch(Module):
    """Returns (H_NER, alpha_NER, H_NER_attended, tag_logits) for (T, d_in) input."""

    def __init__(self, cfg: NerBranchConfig, rng):
        self.cfg = cfg
        self.conv = Conv1d(Conv1dSpec(cfg.conv_kernel, cfg.conv_padding, 1, cfg.d_in,
                                      cfg.conv_channels), rng)
        self.norm = LayerNorm(cfg.conv_channels, axis=0)
        self.lstm = BiLSTM(BiLstmSpec(cfg.conv_channels, cfg.lstm_hidden, cfg.lstm_layers), rng)
        self.attention = SelfAttention(SelfAttentionSpec(cfg.model_dim, cfg.head_count), rng)
        self.tagger = Linear(cfg.model_dim, cfg.tag_count, rng)

    def forward(self, x):
        x = nt.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.cfg.d_in:
            raise ShapeError(f"NER branch expects (T, {self.cfg.d_in}) features, got {x.shape}")
        h = nt.relu(self.norm(self.conv(nt.transpose(x))))
        h_ner = self.lstm(nt.transpose(h))
        attended, alpha = self.attention(h_ner)
        return h_ner, alpha, attended, self.tagger(attended)


def pretrain_ner_loss(tag_logits, tags):
    """Mean per-frame cross-entropy over the 7 tag classes."""
    tags = np.asarray(tags, dtype=np.int64)
    if tag_logits.ndim != 2 or tag_logits.shape[0] != tags.shape[0]:
        raise ShapeError(f"tag logits {tag_logits.shape} vs {tags.shape[0]} frame tags")
    logp = nt.log_softmax_rows(tag_logits)
    picked = nt.index(logp, (np.arange(tags.shape[0]), tags))
    return nt.mean(picked) * -1.0


def predict_tags(tag_logits):
    """Argmax decoding followed by span repair (always well-formed)."""
    data = tag_logits.data if isinstance(tag_logits, nt.Tensor) else np.asarray(tag_logits)
    return repair_tags(data.argmax(axis=1))
