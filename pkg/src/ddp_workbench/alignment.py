"""Aligning CSA interpretations with human rationales by soft-label retraining.

Each round perturbs the non-rationale words of every annotated text with the
CSA adversary, keeps the rationale words clean, and trains the model to
reproduce its own pre-round prediction on the mixed input.  The model thus
loses sensitivity outside the rationale.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .interpreters import itergrad
from .metrics import Unrealizable, mean_std, predicted_class
from .models import ClassifierModel, EmbeddedText, EmbeddingTable, PAD, TrainConfig, accuracy, train

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("round", "similarity_mean", "similarity_std", "heldout_accuracy")


class RationaleError(ValueError):
    pass


def expand_rationale(seed: Iterable[str], table: EmbeddingTable, k: int = 8) -> set[int]:
    """Vocabulary ids of the seed words and each seed's ``k`` nearest neighbours.

    Distances are L2 between embedding rows.  The pad row and the seed
    itself are never neighbours; ties go to the lower vocabulary index.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    ids = []
    for tok in seed:
        if tok not in table.vocab:
            raise RationaleError(f"rationale token {tok!r} is not in the vocabulary")
        ids.append(table.vocab[tok])
    out = set(ids)
    if k == 0:
        return out
    M = table.matrix
    pad = table.vocab[PAD]
    for i in ids:
        dist = np.linalg.norm(M - M[i], axis=1)
        dist[[i, pad]] = np.inf
        order = np.argsort(dist, kind="stable")
        out.update(int(j) for j in order[:k] if np.isfinite(dist[j]))
    return out


@dataclass
class RationaleSet:
    """Rationale given either by word type or by per-instance positions."""

    seed: list[str] = field(default_factory=list)
    vocab_ids: set[int] = field(default_factory=set)
    k: int = 8
    instance_positions: dict[int, list[int]] | None = None

    @classmethod
    def from_seed(cls, seed: Sequence[str], table: EmbeddingTable, k: int = 8) -> "RationaleSet":
        return cls(list(seed), expand_rationale(seed, table, k), k)

    def positions(self, x: EmbeddedText, instance: int | None = None) -> list[int]:
        if self.instance_positions is not None:
            pos = self.instance_positions.get(instance, [])
            bad = [p for p in pos if not 0 <= p < len(x)]
            if bad:
                raise RationaleError(f"instance {instance}: positions {bad} out of range")
            return sorted(pos)
        return [n for n, t in enumerate(x.token_ids) if int(t) in self.vocab_ids]


def load_rationale(path, table: EmbeddingTable, k: int = 8) -> RationaleSet:
    """JSON object mapping token -> true, or instance id -> list of positions."""
    path = Path(path)
    if not path.exists():
        raise RationaleError(f"rationale file not found: {path}")
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict) or not doc:
        raise RationaleError(f"{path}: expected a non-empty JSON object")
    if all(v is True for v in doc.values()):
        return RationaleSet.from_seed(list(doc), table, k)
    if all(isinstance(v, list) for v in doc.values()):
        return RationaleSet(k=k, instance_positions={int(i): [int(p) for p in v] for i, v in doc.items()})
    raise RationaleError(f"{path}: values must be all true or all position lists")


@dataclass
class AlignedAdversary:
    original: np.ndarray
    adversary: np.ndarray
    mixed: np.ndarray


def craft_aligned(x: np.ndarray, x_star: np.ndarray, positions: Iterable[int]) -> AlignedAdversary:
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x.shape != x_star.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_star.shape}")
    mixed = x_star.copy()
    idx = list(positions)
    mixed[idx] = x[idx]
    return AlignedAdversary(x, x_star, mixed)


def similarity_ratio(scores: np.ndarray, positions: Iterable[int]) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    total = math.fsum(scores)
    if total <= 0:
        raise Unrealizable("all per-word perturbation norms are zero")
    return math.fsum(scores[list(positions)]) / total


def similarity(model: ClassifierModel, x: EmbeddedText, positions: Iterable[int],
               eps: float = 0.5, t_max: int = 25) -> float:
    if not eps > 0:
        raise ValueError("eps must be positive")
    attr = itergrad(model, x, predicted_class(model, x), eps, t_max)
    return similarity_ratio(attr.scores, positions)


@dataclass
class AlignConfig:
    rounds: int = 5
    eps: float = 0.5
    lr: float = 0.3
    epochs: int = 5
    batch: int = 8
    seed: int = 0
    itergrad_steps: int = 25


@dataclass
class AlignmentReport:
    rounds: list[int] = field(default_factory=list)
    similarity_mean: list[float] = field(default_factory=list)
    similarity_std: list[float] = field(default_factory=list)
    heldout_accuracy: list[float] = field(default_factory=list)
    n_excluded: list[int] = field(default_factory=list)
    # soft-label loss on the crafted inputs, before each round's updates
    round_loss: list[float] = field(default_factory=list)

    def rows(self):
        return zip(self.rounds, self.similarity_mean, self.similarity_std, self.heldout_accuracy)


def write_report_csv(path, report: AlignmentReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r, m, s, a in report.rows():
            w.writerow([r, repr(m), repr(s), repr(a)])


def read_report_csv(path) -> AlignmentReport:
    rep = AlignmentReport()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rep.rounds.append(int(row["round"]))
            rep.similarity_mean.append(float(row["similarity_mean"]))
            rep.similarity_std.append(float(row["similarity_std"]))
            rep.heldout_accuracy.append(float(row["heldout_accuracy"]))
    return rep


def _similarities(model, texts, positions, cfg):
    values, excluded = [], 0
    for x, pos in zip(texts, positions):
        if not pos:
            excluded += 1
            continue
        try:
            values.append(similarity(model, x, pos, cfg.eps, cfg.itergrad_steps))
        except Unrealizable:
            excluded += 1
    return values, excluded


def alignment_retrain(model: ClassifierModel, texts: Sequence[EmbeddedText], rationale: RationaleSet,
                      heldout: Sequence[EmbeddedText], heldout_labels: Sequence[int],
                      config: AlignConfig = AlignConfig()) -> tuple[ClassifierModel, AlignmentReport]:
    """Retrain on rationale-preserving adversaries; report similarity per round.

    Row 0 of the report describes the input model.  Soft labels and
    adversaries are recomputed from the current model at the start of every
    round and held fixed while that round trains.
    """
    positions = [rationale.positions(x, i) for i, x in enumerate(texts)]
    empty = sum(1 for p in positions if not p)
    if empty:
        log.warning("%d of %d instances have no rationale words; their similarity is excluded",
                    empty, len(texts))
    report = AlignmentReport()

    def record(r, m):
        values, excluded = _similarities(m, texts, positions, config)
        mu, sd = mean_std(values)
        report.rounds.append(r)
        report.similarity_mean.append(mu)
        report.similarity_std.append(sd)
        report.heldout_accuracy.append(accuracy(m, list(heldout), list(heldout_labels)))
        report.n_excluded.append(excluded)

    current = model.copy()
    record(0, current)
    for r in range(1, config.rounds + 1):
        targets, mixed = [], []
        for x, pos in zip(texts, positions):
            probs = current.predict(x)
            attr = itergrad(current, x, int(np.argmax(probs)), config.eps, config.itergrad_steps)
            crafted = craft_aligned(x.embeddings, x.embeddings - attr.h, pos)
            targets.append(probs)
            mixed.append(x.with_embeddings(crafted.mixed))
        report.round_loss.append(math.fsum(
            current.loss_and_param_grads(m, t)[0] for m, t in zip(mixed, targets)) / len(mixed))
        current = train(current, mixed, targets,
                        TrainConfig(lr=config.lr, epochs=config.epochs, seed=config.seed + r,
                                    batch=config.batch)).model
        record(r, current)
    return current, report
