"""Corpus ingestion, serialization and the planted-signal synthetic task."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import PAD, UNK, EmbeddedText, EmbeddingTable

log = logging.getLogger(__name__)

MIN_LENGTH = 5
SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    pass


@dataclass
class Corpus:
    instances: list[tuple[list[int], int]]
    split: str = "train"
    n_dropped: int = 0

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        for ids, label in self.instances:
            if not ids:
                raise DataError("instance with no tokens")
            if label < 0:
                raise DataError(f"negative label {label}")

    def __len__(self) -> int:
        return len(self.instances)

    def __eq__(self, other) -> bool:
        return isinstance(other, Corpus) and self.split == other.split and \
            [(list(i), int(y)) for i, y in self.instances] == \
            [(list(i), int(y)) for i, y in other.instances]

    @property
    def labels(self) -> list[int]:
        return [y for _, y in self.instances]

    @property
    def num_classes(self) -> int:
        return max(self.labels) + 1

    def embedded(self, table: EmbeddingTable) -> list[EmbeddedText]:
        return [table.embed(ids) for ids, _ in self.instances]

    def subset(self, idx, split: str | None = None) -> "Corpus":
        return Corpus([self.instances[i] for i in idx], split or self.split)


# -- wire formats ---------------------------------------------------------------

def write_corpus(path, corpus: Corpus, table: EmbeddingTable) -> None:
    tokens = table.tokens
    with open(path, "w") as fh:
        for ids, label in corpus.instances:
            fh.write(json.dumps({"text": [tokens[i] for i in ids], "label": int(label)}) + "\n")


def write_embeddings(path, table: EmbeddingTable) -> None:
    with open(path, "w") as fh:
        for tok, row in zip(table.tokens, table.matrix):
            fh.write(" ".join([tok, *(repr(float(v)) for v in row)]) + "\n")


def read_embeddings(path) -> EmbeddingTable:
    rows: dict[str, np.ndarray] = {}
    dim = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        tok, *vals = line.split()
        try:
            vec = np.array([float(v) for v in vals])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric embedding value") from None
        if dim is None:
            dim = len(vec)
        if len(vec) != dim or dim == 0:
            raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(vec)}")
        rows[tok] = vec
    if dim is None:
        raise DataError(f"{path}: no embeddings")
    if PAD in rows and np.any(rows[PAD] != 0.0):
        raise DataError(f"{path}: {PAD} row must be all zeros")
    rows.pop(PAD, None)
    if UNK not in rows:
        rows = {UNK: np.zeros(dim), **rows}
    vocab = {PAD: 0}
    mats = [np.zeros(dim)]
    for tok, vec in rows.items():
        vocab[tok] = len(vocab)
        mats.append(vec)
    return EmbeddingTable(vocab, np.vstack(mats))


def ingest(corpus_path, embedding_path, split: str = "train",
           min_length: int = MIN_LENGTH) -> tuple[Corpus, EmbeddingTable]:
    """Read a JSON-lines corpus and a whitespace embedding file.

    Texts shorter than ``min_length`` tokens are dropped and counted in
    ``Corpus.n_dropped``.
    """
    table = read_embeddings(embedding_path)
    instances = []
    dropped = 0
    for lineno, line in enumerate(Path(corpus_path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            text, label = rec["text"], rec["label"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise DataError(f"{corpus_path}:{lineno}: malformed instance") from None
        if not isinstance(text, list) or not isinstance(label, int) or label < 0:
            raise DataError(f"{corpus_path}:{lineno}: malformed instance")
        if len(text) < min_length:
            dropped += 1
            continue
        instances.append((table.ids(text), label))
    if not instances and not dropped:
        raise DataError(f"{corpus_path}: empty corpus")
    if dropped:
        log.info("dropped %d texts shorter than %d tokens", dropped, min_length)
    corpus = Corpus(instances, split)
    corpus.n_dropped = dropped
    return corpus, table


# -- synthetic task -------------------------------------------------------------

@dataclass
class SynthConfig:
    # pad, polar and neutral tokens; the unk row is reserved on top
    vocab_size: int = 59
    dim: int = 8
    min_len: int = 6
    max_len: int = 12
    n_instances: int = 600
    seed: int = 0
    n_sentiment: int = 9  # tokens per polarity
    separation: float = 1.5
    cluster_noise: float = 0.25
    max_major: int = 3
    # opposite-polarity tokens per text are drawn from [0, min(major - 1, this)]
    max_minority: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise DataError("vocab_size must be >= 4 (pad, one token per polarity, one neutral)")


@dataclass
class SyntheticTask:
    corpus: Corpus
    table: EmbeddingTable
    positive: list[str] = field(default_factory=list)
    negative: list[str] = field(default_factory=list)

    @property
    def sentiment_tokens(self) -> list[str]:
        return self.positive + self.negative


def synthesize(config: SynthConfig = SynthConfig()) -> SyntheticTask:
    """Binary task whose label is decided by counting polar tokens.

    Every text holds at least one token of its label's polarity and strictly
    fewer of the opposite one; the rest are neutral.  Neutral embeddings and
    the within-cluster noise are orthogonal to a fixed sentiment direction
    ``u``, so the mean-pooled embedding projected on ``u`` equals
    ``separation * (n_pos - n_neg) / N`` and the task is linearly separable.
    """
    rng = np.random.default_rng(config.seed)
    d = config.dim
    n_pol = max(1, min(config.n_sentiment, (config.vocab_size - 2) // 2))
    n_neutral = config.vocab_size - 1 - 2 * n_pol
    if n_neutral < 1:
        raise DataError("vocab_size too small for the requested number of sentiment tokens")

    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)

    def orth(v):
        return v - np.outer(v @ u, u)

    pos = config.separation * u + config.cluster_noise * orth(rng.standard_normal((n_pol, d))) / np.sqrt(d)
    neg = -config.separation * u + config.cluster_noise * orth(rng.standard_normal((n_pol, d))) / np.sqrt(d)
    neu = orth(rng.standard_normal((n_neutral, d)))

    positive = [f"pos{i}" for i in range(n_pol)]
    negative = [f"neg{i}" for i in range(n_pol)]
    neutral = [f"w{i}" for i in range(n_neutral)]
    tokens = [PAD, UNK, *positive, *negative, *neutral]
    matrix = np.vstack([np.zeros((2, d)), pos, neg, neu])
    table = EmbeddingTable({t: i for i, t in enumerate(tokens)}, matrix)

    pos_ids = np.arange(2, 2 + n_pol)
    neg_ids = pos_ids + n_pol
    neu_ids = np.arange(2 + 2 * n_pol, len(tokens))

    instances = []
    for _ in range(config.n_instances):
        n = int(rng.integers(config.min_len, config.max_len + 1))
        label = int(rng.integers(0, 2))
        major = int(rng.integers(1, min(config.max_major, n) + 1))
        minor = int(rng.integers(0, min(major - 1, config.max_minority, n - major) + 1))
        own, other = (pos_ids, neg_ids) if label == 1 else (neg_ids, pos_ids)
        ids = np.concatenate([rng.choice(own, major), rng.choice(other, minor),
                              rng.choice(neu_ids, n - major - minor)])
        rng.shuffle(ids)
        instances.append(([int(i) for i in ids], label))
    return SyntheticTask(Corpus(instances), table, positive, negative)


def count_label(ids, table: EmbeddingTable) -> int:
    """Counting oracle: 1 when positive tokens outnumber negative ones."""
    toks = table.tokens
    n_pos = sum(toks[i].startswith("pos") for i in ids)
    n_neg = sum(toks[i].startswith("neg") for i in ids)
    return int(n_pos > n_neg)


def split_corpus(corpus: Corpus, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> dict[str, Corpus]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    n_train = int(round(fractions[0] * len(corpus)))
    n_valid = int(round(fractions[1] * len(corpus)))
    parts = {"train": order[:n_train], "valid": order[n_train:n_train + n_valid],
             "test": order[n_train + n_valid:]}
    return {k: corpus.subset(sorted(int(i) for i in v), k) for k, v in parts.items()}
