"""Faithfulness metrics matched to each definition, and budget sweeps.

Every metric returns a *drop* ``f_c(before) - f_c(after)``; larger means the
attribution located a more damaging perturbation.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .interpreters import (
    CSA, DEFINITIONS, EPS_DEPENDENT, ERA, MMA, NATIVE, ZERO_GRAD_TOL,
    Attribution, InterpreterConfig, ZeroGradient, interpret,
)
from .models import ClassifierModel, EmbeddedText, ModelError, erase

CURVE_COLUMNS = ("method", "metric", "budget", "mean_drop", "std_drop", "n", "n_excluded")


class Unrealizable(ValueError):
    """The attribution does not induce any admissible perturbation."""


def _is_attention(model) -> bool:
    return getattr(model, "arch", None) == "attention"


def realize_csa(x: EmbeddedText, attribution: Attribution, eps: float) -> np.ndarray:
    """Perturbation ``h`` (so that ``x* = x - h``) with ``||h||_2 = eps``.

    Raw perturbations are rescaled to the radius.  Score-only attributions
    move every word towards the zero vector by an amount proportional to its
    positive score, then the whole perturbation is rescaled likewise.
    """
    if attribution.h is not None:
        h = attribution.h
    else:
        w = np.clip(attribution.scores, 0.0, None)
        norms = np.linalg.norm(x.embeddings, axis=1)
        unit = np.divide(x.embeddings, norms[:, None], out=np.zeros_like(x.embeddings),
                         where=norms[:, None] > 0)
        h = w[:, None] * unit
    n = np.linalg.norm(h)
    if n < ZERO_GRAD_TOL:
        raise Unrealizable(f"{attribution.method}: no CSA perturbation can be realized")
    return h * (eps / n)


def csa_metric(model: ClassifierModel, x: EmbeddedText, c: int,
               attribution: Attribution, eps: float) -> float:
    if not eps > 0:
        raise ValueError("eps must be positive")
    h = realize_csa(x, attribution, eps)
    before = model.predict(x)[c]
    after = model.predict(x.with_embeddings(x.embeddings - h))[c]
    return float(before - after)


def era_metric(model: ClassifierModel, x: EmbeddedText, c: int,
               attribution: Attribution, s: int) -> float:
    if s < 1:
        raise ValueError("s must be >= 1")
    s = min(int(s), len(x))
    before = model.predict(x)[c]
    return float(before - model.predict(erase(x, attribution.top(s)))[c])


def era_word_importance(model: ClassifierModel, x: EmbeddedText, c: int, n: int) -> float:
    return float(model.predict(erase(x, [n]))[c] - model.predict(x)[c])


def era_oracle(model: ClassifierModel, x: EmbeddedText, c: int, s: int = 1) -> float:
    """Largest ERA drop over every erasure set of exactly ``min(s, N)`` words."""
    s = min(int(s), len(x))
    before = model.predict(x)[c]
    return max(float(before - model.predict(erase(x, S))[c])
               for S in itertools.combinations(range(len(x)), s))


def mma_drop_for_mask(model, x: EmbeddedText, c: int, mask) -> float:
    full, _ = model.predict_with_attention(x)
    masked, _ = model.predict_with_attention(x, mask)
    return float(full[c] - masked[c])


def mma_metric(model, x: EmbeddedText, c: int, attribution: Attribution, s: int) -> float:
    if not _is_attention(model):
        raise ModelError(f"MMA metric needs an attention model, got {getattr(model, 'arch', None)!r}")
    s = min(int(s), len(x))
    if s <= 0:
        return 0.0
    mask = np.ones(len(x))
    mask[attribution.top(s)] = 0.0
    return mma_drop_for_mask(model, x, c, mask)


def random_mask_drop(model, x: EmbeddedText, c: int, s: int, n_masks: int,
                     rng: np.random.Generator) -> float:
    """Mean MMA drop over ``n_masks`` uniformly random ``s``-position masks."""
    s = min(int(s), len(x))
    drops = []
    for _ in range(n_masks):
        mask = np.ones(len(x))
        mask[rng.choice(len(x), size=s, replace=False)] = 0.0
        drops.append(mma_drop_for_mask(model, x, c, mask))
    return math.fsum(drops) / n_masks


METRIC_FUNCS = {CSA: csa_metric, ERA: era_metric, MMA: mma_metric}


@dataclass
class MetricBudget:
    variant: str
    grid: list

    def __post_init__(self):
        if self.variant not in DEFINITIONS:
            raise ValueError(f"unknown metric {self.variant!r}")
        if not self.grid:
            raise ValueError("budget grid is empty")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("budget grid must be strictly increasing")
        if self.variant != CSA:
            self.grid = [int(s) for s in self.grid]

    @classmethod
    def default(cls, variant: str) -> "MetricBudget":
        if variant == CSA:
            return cls(CSA, [round(0.1 * k, 1) for k in range(1, 11)])
        return cls(variant, [1, 2, 3, 4, 5])


@dataclass
class EvaluationCurve:
    method: str
    metric: str
    budgets: list = field(default_factory=list)
    means: list = field(default_factory=list)
    stds: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def rows(self):
        for row in zip(self.budgets, self.means, self.stds, self.counts, self.excluded):
            yield (self.method, self.metric, *row)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Population mean and standard deviation with compensated summation."""
    n = len(values)
    if n == 0:
        return float("nan"), float("nan")
    m = math.fsum(values) / n
    return m, math.sqrt(math.fsum((v - m) ** 2 for v in values) / n)


def predicted_class(model: ClassifierModel, x: EmbeddedText) -> int:
    return int(np.argmax(model.predict(x)))


def sample_instances(n_total: int, size: int, seed: int) -> list[int]:
    """Indices of a fixed random sample, in ascending order."""
    if size >= n_total:
        return list(range(n_total))
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n_total, size=size, replace=False))


def cross_evaluate(model: ClassifierModel, texts: Sequence[EmbeddedText], methods: Sequence[str],
                   budgets: Sequence[MetricBudget], config: InterpreterConfig | None = None,
                   interpret_eps: float = 0.5) -> list[EvaluationCurve]:
    """Evaluate every method under every metric budget on the same instances.

    Attributions are computed once per instance and shared across metrics.
    CSA-native methods are re-run at each CSA radius; under ERA and MMA they
    use ``interpret_eps``.  Instances where an attribution cannot be produced
    or realized are excluded and counted per budget point.
    """
    if not texts:
        raise ValueError("empty instance sample")
    cfg = config or InterpreterConfig()
    if any(b.variant == MMA for b in budgets) and not _is_attention(model):
        raise ModelError("MMA metric requested on a non-attention model")
    if "rankmask" in methods and not _is_attention(model):
        raise ModelError("rankmask requested on a non-attention model")

    classes = [predicted_class(model, x) for x in texts]
    cache: dict = {}

    def attribution(method, i, eps):
        key = (method, i, eps if method in EPS_DEPENDENT else None)
        if key not in cache:
            try:
                cache[key] = interpret(method, model, texts[i], classes[i], eps, cfg,
                                       seed=cfg.seed + i)
            except ZeroGradient as exc:
                cache[key] = exc
        return cache[key]

    curves = []
    for budget in budgets:
        func = METRIC_FUNCS[budget.variant]
        for method in methods:
            curve = EvaluationCurve(method, budget.variant)
            for b in budget.grid:
                eps = b if budget.variant == CSA else interpret_eps
                drops, excluded = [], 0
                for i, x in enumerate(texts):
                    attr = attribution(method, i, eps)
                    if isinstance(attr, Exception):
                        excluded += 1
                        continue
                    try:
                        drops.append(func(model, x, classes[i], attr, b))
                    except Unrealizable:
                        excluded += 1
                m, sd = mean_std(drops)
                curve.budgets.append(b)
                curve.means.append(m)
                curve.stds.append(sd)
                curve.counts.append(len(drops))
                curve.excluded.append(excluded)
            curves.append(curve)
    return curves


def sweep(model: ClassifierModel, texts: Sequence[EmbeddedText], methods: Sequence[str],
          budget: MetricBudget, config: InterpreterConfig | None = None,
          interpret_eps: float = 0.5) -> list[EvaluationCurve]:
    return cross_evaluate(model, texts, methods, [budget], config, interpret_eps)


def write_curves_csv(path, curves: Sequence[EvaluationCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for curve in curves:
            for method, metric, b, m, sd, n, ex in curve.rows():
                w.writerow([method, metric, repr(b), repr(m), repr(sd), n, ex])


def read_curves_csv(path) -> list[EvaluationCurve]:
    curves: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["method"], row["metric"])
            curve = curves.setdefault(key, EvaluationCurve(*key))
            b = float(row["budget"])
            curve.budgets.append(b if row["metric"] == CSA else int(b))
            curve.means.append(float(row["mean_drop"]))
            curve.stds.append(float(row["std_drop"]))
            curve.counts.append(int(row["n"]))
            curve.excluded.append(int(row["n_excluded"]))
    return list(curves.values())


def native_definition(method: str) -> str:
    return NATIVE[method]
