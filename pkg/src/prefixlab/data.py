"""Corpora: synthetic discourse-structured tasks, JSONL ingestion, subsampling.

The synthetic "salient extraction" task builds sources out of contiguous
segments separated by a marker token; each segment hides exactly one token
drawn from a salient id range among distractors from a disjoint range, and
the target lists the salient tokens in order. A companion copy task (same
layout, target = all content tokens) serves as a pretraining stand-in for
a generic sequence-to-sequence backbone.

Reserved ids 0-4 are PAD, UNK, BOS, EOS, SEG.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ParseError

PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEG_ID = range(5)
RESERVED_TOKENS = ("<pad>", "<unk>", "<s>", "</s>", "<seg>")
_WS_TOKEN = re.compile(r"\S+")
MAX_VOCAB = 100_000


class Vocab:
    """Bijective token<->id map with the five reserved ids in front."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:5]) != list(RESERVED_TOKENS):
            raise ConfigError("vocab must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("duplicate token in vocab")
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, text: str) -> list[int]:
        return [self.id_of(tok) for tok in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self._tokens[i] for i in ids)

    @classmethod
    def from_texts(cls, texts) -> "Vocab":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in text.split():
                counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        ordered = [t for t in ordered if t not in RESERVED_TOKENS]
        return cls(list(RESERVED_TOKENS) + ordered)

    @classmethod
    def of_size(cls, size: int) -> "Vocab":
        """Synthetic vocab where content token i is named w{i}."""
        if size <= len(RESERVED_TOKENS):
            raise ConfigError("vocab size too small for the reserved tokens")
        return cls(list(RESERVED_TOKENS) +
                   [f"w{i}" for i in range(len(RESERVED_TOKENS), size)])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self._tokens):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    tok, idx = line.split("\t")
                except ValueError as exc:
                    raise ParseError("expected token<TAB>id", line_no) from exc
                if int(idx) != len(tokens):
                    raise ParseError(f"non-contiguous id {idx}", line_no)
                tokens.append(tok)
        return cls(tokens)


@dataclass(frozen=True)
class Example:
    """One sequence pair plus the segment span lengths of the source."""

    source: tuple[int, ...]
    spans: tuple[int, ...]
    target: tuple[int, ...]
    salient_positions: tuple[int, ...] = ()

    def __post_init__(self):
        if sum(self.spans) != len(self.source):
            raise ConfigError("segment spans must partition the source exactly")


@dataclass(frozen=True)
class Corpus:
    examples: tuple[Example, ...]
    vocab: Vocab
    name: str = "corpus"

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def max_source_len(self) -> int:
        return max((len(e.source) for e in self.examples), default=0)

    def max_target_len(self) -> int:
        return max((len(e.target) for e in self.examples), default=0)


TARGET_RULES = ("salient", "contrast", "mixed")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Layout of the salient-extraction task.

    Content ids follow the reserved block: salient ids, then (optionally)
    contrast ids, then distractor ids. With ``contrast_vocab`` > 0 every
    segment carries exactly one salient-range token AND one contrast-range
    token among the distractors; the ``target_rule`` picks which range the
    target lists ("mixed" flips a per-example coin, which makes a corpus
    whose two candidate readings are equally likely, useful as an
    ambiguous pretraining stand-in).
    """

    n_segments: int = 2
    segment_length: int = 5
    distractor_vocab: int = 28
    salient_vocab: int = 16
    seed: int = 0
    contrast_vocab: int = 0
    target_rule: str = "salient"

    def __post_init__(self):
        if self.n_segments not in (1, 2, 3):
            raise ConfigError("n_segments must be in {1,2,3}")
        if self.segment_length < 1:
            raise ConfigError("segment_length must be >= 1")
        if self.salient_vocab < 1 or self.distractor_vocab < 1:
            raise ConfigError("vocab ranges must be non-empty")
        if self.contrast_vocab < 0:
            raise ConfigError("contrast_vocab must be >= 0")
        if self.contrast_vocab and self.segment_length < 2:
            raise ConfigError("contrast tokens need segment_length >= 2")
        if self.target_rule not in TARGET_RULES:
            raise ConfigError(f"target_rule must be one of {TARGET_RULES}")
        if self.target_rule != "salient" and not self.contrast_vocab:
            raise ConfigError(f"target_rule {self.target_rule!r} needs a "
                              f"contrast range")
        if self.vocab_size > MAX_VOCAB:
            raise ConfigError(f"vocab overflow: {self.vocab_size} > {MAX_VOCAB}")

    @property
    def vocab_size(self) -> int:
        return (len(RESERVED_TOKENS) + self.salient_vocab
                + self.contrast_vocab + self.distractor_vocab)

    @property
    def salient_range(self) -> range:
        lo = len(RESERVED_TOKENS)
        return range(lo, lo + self.salient_vocab)

    @property
    def contrast_range(self) -> range:
        lo = len(RESERVED_TOKENS) + self.salient_vocab
        return range(lo, lo + self.contrast_vocab)

    @property
    def distractor_range(self) -> range:
        lo = len(RESERVED_TOKENS) + self.salient_vocab + self.contrast_vocab
        return range(lo, lo + self.distractor_vocab)

    def source_length(self) -> int:
        # BOS + segments with SEG markers between + EOS
        return 2 + self.n_segments * self.segment_length + (self.n_segments - 1)


def _build_example(spec: SyntheticTaskSpec, rng: np.random.Generator) -> Example:
    source: list[int] = [BOS_ID]
    spans: list[int] = []
    salients: list[int] = []
    contrasts: list[int] = []
    positions: list[int] = []
    sal = spec.salient_range
    con = spec.contrast_range
    dis = spec.distractor_range
    for seg in range(spec.n_segments):
        span_start = len(source)
        lead = 1 if seg == 0 else 0  # BOS counts into the first span
        if seg > 0:
            source.append(SEG_ID)
        salient = int(rng.integers(sal.start, sal.stop))
        toks = [salient]
        if spec.contrast_vocab:
            contrast = int(rng.integers(con.start, con.stop))
            toks.append(contrast)
            contrasts.append(contrast)
        toks += [int(rng.integers(dis.start, dis.stop))
                 for _ in range(spec.segment_length - len(toks))]
        order = rng.permutation(len(toks))
        positions.append(len(source) + int(np.where(order == 0)[0][0]))
        source.extend(toks[i] for i in order)
        salients.append(salient)
        spans.append(len(source) - span_start + lead)
    source.append(EOS_ID)
    spans[-1] += 1
    rule = spec.target_rule
    if rule == "mixed":
        rule = "salient" if rng.random() < 0.5 else "contrast"
    targets = salients if rule == "salient" else contrasts
    return Example(tuple(source), tuple(spans), tuple(targets), tuple(positions))


def generate_synthetic(spec: SyntheticTaskSpec, n_examples: int,
                       name: str = "synthetic") -> Corpus:
    """Deterministic salient-extraction corpus for the spec's seed."""
    if n_examples < 1:
        raise ConfigError("n_examples must be >= 1")
    rng = np.random.default_rng(spec.seed)
    examples = tuple(_build_example(spec, rng) for _ in range(n_examples))
    return Corpus(examples, Vocab.of_size(spec.vocab_size), name)


def generate_copy_corpus(spec: SyntheticTaskSpec, n_examples: int,
                         seed: int | None = None,
                         name: str = "copy") -> Corpus:
    """Same source layout, but the target reproduces all content tokens."""
    if n_examples < 1:
        raise ConfigError("n_examples must be >= 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    lo = len(RESERVED_TOKENS)
    hi = spec.vocab_size
    examples = []
    for _ in range(n_examples):
        source: list[int] = [BOS_ID]
        spans: list[int] = []
        targets: list[int] = []
        for seg in range(spec.n_segments):
            span_start = len(source)
            lead = 1 if seg == 0 else 0
            if seg > 0:
                source.append(SEG_ID)
            for _pos in range(spec.segment_length):
                tok = int(rng.integers(lo, hi))
                source.append(tok)
                targets.append(tok)
            spans.append(len(source) - span_start + lead)
        source.append(EOS_ID)
        spans[-1] += 1
        examples.append(Example(tuple(source), tuple(spans), tuple(targets)))
    return Corpus(tuple(examples), Vocab.of_size(spec.vocab_size), name)


def subsample(corpus: Corpus, k_percent: float, seed: int) -> Corpus:
    """Uniform sample without replacement of floor(k% * N) examples."""
    if not 0.0 < k_percent <= 100.0:
        raise ConfigError(f"k_percent must be in (0, 100], got {k_percent}")
    n = len(corpus)
    keep = int(np.floor(k_percent / 100.0 * n))
    if keep < 1:
        raise ConfigError(f"subsampling {k_percent}% of {n} examples "
                          f"leaves nothing")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return Corpus(tuple(corpus.examples[i] for i in idx), corpus.vocab,
                  f"{corpus.name}@{k_percent:g}%")


def _spans_from_offsets(text: str, offsets: list[int],
                        n_tokens: int) -> tuple[int, ...]:
    if offsets[0] != 0:
        raise ParseError("segment offsets must start at 0")
    starts = [m.start() for m in _WS_TOKEN.finditer(text)]
    if len(starts) != n_tokens:
        raise ParseError("tokenization drifted from offsets")
    bounds = offsets[1:] + [len(text) + 1]
    spans = []
    tok = 0
    for bound in bounds:
        count = 0
        while tok < len(starts) and starts[tok] < bound:
            count += 1
            tok += 1
        spans.append(count)
    if sum(spans) != n_tokens:
        raise ParseError("segment offsets do not cover the source")
    return tuple(spans)


def load_jsonl(path, vocab: Vocab | None = None, name: str | None = None) -> Corpus:
    """Read a JSONL corpus of {source, target, segments?} records.

    Text is whitespace-tokenized and mapped through ``vocab`` (built from
    the file when omitted); unknown tokens map to the reserved UNK id.
    ``segments`` holds character start offsets of each source segment.
    """
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line_no) from exc
            if not isinstance(obj, dict) or "source" not in obj or "target" not in obj:
                raise ParseError("record needs 'source' and 'target' fields", line_no)
            records.append((line_no, obj))
    if vocab is None:
        vocab = Vocab.from_texts([o["source"] for _, o in records] +
                                 [o["target"] for _, o in records])
    examples = []
    for line_no, obj in records:
        source_ids = vocab.encode(obj["source"])
        target_ids = vocab.encode(obj["target"])
        if "segments" in obj:
            try:
                spans = _spans_from_offsets(obj["source"], list(obj["segments"]),
                                            len(source_ids))
            except ParseError as exc:
                raise ParseError(str(exc), line_no) from exc
        else:
            spans = (len(source_ids),)
        examples.append(Example(tuple(source_ids), spans, tuple(target_ids)))
    return Corpus(tuple(examples), vocab, name or path.stem)


def save_jsonl(corpus: Corpus, path) -> Path:
    """Write a corpus as JSONL; loading it back reproduces the token ids."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            tokens = [corpus.vocab.token_of(i) for i in ex.source]
            offsets = []
            pos = 0
            cursor = 0
            text = " ".join(tokens)
            for span in ex.spans:
                offsets.append(cursor)
                for tok in tokens[pos:pos + span]:
                    cursor += len(tok) + 1
                pos += span
            record = {
                "source": text,
                "target": corpus.vocab.decode(ex.target),
                "segments": offsets,
            }
            fh.write(json.dumps(record) + "\n")
    return path


def split_counts(n_train: int, n_val: int, n_test: int) -> tuple[int, int, int]:
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError("every split needs at least one example")
    return n_train, n_val, n_test


def make_task_splits(spec: SyntheticTaskSpec, n_train: int, n_val: int,
                     n_test: int) -> dict[str, Corpus]:
    """Disjoint train/val/test corpora drawn from per-split seed offsets."""
    split_counts(n_train, n_val, n_test)
    out = {}
    for offset, (split, count) in enumerate(
            [("train", n_train), ("val", n_val), ("test", n_test)]):
        split_spec = replace(spec, seed=spec.seed + offset)
        out[split] = generate_synthetic(split_spec, count, name=split)
    return out


def oracle_salient_decoder(example: Example) -> list[int]:
    """Read the gold salient positions straight out of the source."""
    if not example.salient_positions:
        raise InputError("example carries no salient positions")
    return [example.source[p] for p in example.salient_positions]
