"""Attribution methods, each an approximate solver of one adversarial definition.

==========  ==========  =====================================================
method      definition  adversary
==========  ==========  =====================================================
vagrad      CSA         one normalised gradient step onto the epsilon sphere
smoothgrad  CSA         as vagrad, with the gradient averaged under noise
itergrad    CSA         projected normalised gradient descent in the ball
inpgrad     ERA         first-order estimate of each word's erasure effect
integrad    ERA         left Riemann sum along the path to the zero text
rankmask    MMA         the attention distribution itself
==========  ==========  =====================================================

Scores are larger-is-more-important.  Erasure/masking metrics consume only
the ranking, with ties broken by the lower position.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .models import AttentionClassifier, ClassifierModel, EmbeddedText, ModelError, erase

log = logging.getLogger(__name__)

CSA, ERA, MMA = "CSA", "ERA", "MMA"
DEFINITIONS = (CSA, ERA, MMA)
ZERO_GRAD_TOL = 1e-12


class ZeroGradient(ArithmeticError):
    """The gradient is too small to define a perturbation direction."""


@dataclass(frozen=True)
class DefinitionSpec:
    """One adversarial definition of interpretation together with its budget.

    ``budget`` is the L2 radius for CSA and the maximum number of erased words
    (ERA) or blocked attention scores (MMA) otherwise.
    """

    variant: str
    budget: float

    def __post_init__(self):
        if self.variant not in DEFINITIONS:
            raise ValueError(f"unknown definition {self.variant!r}")
        if self.variant == CSA and not self.budget > 0:
            raise ValueError("CSA radius must be positive")
        if self.variant != CSA and (self.budget < 1 or int(self.budget) != self.budget):
            raise ValueError(f"{self.variant} budget must be a positive integer")

    def size_for(self, n_words: int) -> int:
        """Discrete budget clamped to the text length."""
        s = int(self.budget)
        if s > n_words:
            log.warning("%s budget %d exceeds text length %d; clamping", self.variant, s, n_words)
            s = n_words
        return s

    def admissible(self, x: EmbeddedText, candidate) -> bool:
        """Whether ``candidate`` lies in ``domain(x, budget)``.

        CSA candidates are perturbed embedding matrices, ERA candidates are
        sets of positions to erase and MMA candidates are binary masks.
        """
        if self.variant == CSA:
            delta = np.asarray(candidate) - x.embeddings
            return bool(np.linalg.norm(delta) <= self.budget + 1e-9)
        if self.variant == ERA:
            s = set(candidate)
            return len(s) <= self.budget and all(0 <= p < len(x) for p in s)
        m = np.asarray(candidate)
        return m.shape == (len(x),) and bool(np.all((m == 0) | (m == 1))) and \
            int(np.sum(m == 0)) <= self.budget

    def objective(self, model: ClassifierModel, x: EmbeddedText, candidate, c: int) -> float:
        """Adversarial objective ``f_c(after) - f_c(before)``; solvers minimise it."""
        before = model.predict(x)[c]
        if self.variant == CSA:
            after = model.predict(x.with_embeddings(np.asarray(candidate)))[c]
        elif self.variant == ERA:
            after = model.predict(erase(x, candidate))[c]
        else:
            if not isinstance(model, AttentionClassifier):
                raise ModelError("MMA needs an attention model")
            after = model.predict_with_attention(x, candidate)[0][c]
        return float(after - before)


@dataclass
class Attribution:
    method: str
    definition: str
    scores: np.ndarray
    h: np.ndarray | None = None
    token_ids: np.ndarray | None = None
    # radius the raw perturbation ``h`` was produced for
    eps: float | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("attribution scores must be finite")

    def __len__(self) -> int:
        return len(self.scores)

    def ranking(self) -> np.ndarray:
        """Positions ordered by descending score, lower index first on ties."""
        return np.argsort(-self.scores, kind="stable")

    def top(self, s: int) -> list[int]:
        return sorted(int(i) for i in self.ranking()[:s])

    def to_record(self, **extra) -> dict:
        rec = {"method": self.method, "definition": self.definition,
               "token_ids": None if self.token_ids is None else [int(t) for t in self.token_ids],
               "scores": self.scores.tolist()}
        rec.update(extra)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Attribution":
        ids = rec.get("token_ids")
        return cls(method=rec["method"], definition=rec["definition"], scores=rec["scores"],
                   token_ids=None if ids is None else np.asarray(ids, dtype=np.int64))


def write_jsonl(path, attributions: Iterable[Attribution], **extra) -> None:
    with open(path, "w") as fh:
        for i, a in enumerate(attributions):
            fh.write(json.dumps(a.to_record(instance=i, **extra)) + "\n")


def read_jsonl(path) -> list[Attribution]:
    return [Attribution.from_record(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]


@dataclass
class InterpreterConfig:
    smoothgrad_samples: int = 20
    smoothgrad_sigma: float | None = None
    itergrad_steps: int = 25
    # itergrad step length as a fraction of eps
    itergrad_step_fraction: float = 1 / 25
    integrad_points: int = 20
    seed: int = 0


def default_sigma(texts: Sequence[EmbeddedText]) -> float:
    """0.1 times the mean word-embedding norm over ``texts``."""
    norms = [np.linalg.norm(x.embeddings, axis=1) for x in texts]
    return 0.1 * float(np.mean(np.concatenate(norms)))


def _row_norms(h: np.ndarray) -> np.ndarray:
    return np.linalg.norm(h, axis=1)


def _from_gradient(method: str, x: EmbeddedText, g: np.ndarray, eps: float) -> Attribution:
    norm = np.linalg.norm(g)
    if norm < ZERO_GRAD_TOL:
        raise ZeroGradient(f"{method}: gradient norm {norm:.3g} below {ZERO_GRAD_TOL}")
    h = eps * g / norm
    return Attribution(method, CSA, _row_norms(h), h=h, token_ids=x.token_ids, eps=eps)


def vagrad(model: ClassifierModel, x: EmbeddedText, c: int, eps: float) -> Attribution:
    return _from_gradient("vagrad", x, model.input_gradient(x, c), eps)


def smoothgrad(model: ClassifierModel, x: EmbeddedText, c: int, eps: float,
               sigma: float, n_samples: int = 20, seed: int = 0) -> Attribution:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if sigma == 0:
        g = model.input_gradient(x, c)
    else:
        rng = np.random.default_rng(seed)
        g = np.zeros_like(x.embeddings)
        for _ in range(n_samples):
            noisy = x.embeddings + sigma * rng.standard_normal(x.embeddings.shape)
            g += model.input_gradient(x.with_embeddings(noisy), c)
        g /= n_samples
    return _from_gradient("smoothgrad", x, g, eps)


def itergrad(model: ClassifierModel, x: EmbeddedText, c: int, eps: float,
             t_max: int = 25, alpha: float | None = None) -> Attribution:
    """Projected descent on ``f_c`` inside the L2 ball of radius ``eps``.

    Each step moves a distance ``alpha`` (default ``eps / 25``) along the
    normalised negative gradient; the ball is over the flattened embedding
    matrix.
    """
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    alpha = eps / 25 if alpha is None else alpha
    x0 = x.embeddings
    xt = x0.copy()
    for _ in range(t_max):
        g = model.input_gradient(x.with_embeddings(xt), c)
        gn = np.linalg.norm(g)
        if gn < ZERO_GRAD_TOL:
            break
        delta = xt - alpha * g / gn - x0
        dn = np.linalg.norm(delta)
        if dn > eps:
            delta *= eps / dn
        xt = x0 + delta
    h = x0 - xt
    return Attribution("itergrad", CSA, _row_norms(h), h=h, token_ids=x.token_ids, eps=eps)


def inpgrad(model: ClassifierModel, x: EmbeddedText, c: int) -> Attribution:
    g = model.input_gradient(x, c)
    return Attribution("inpgrad", ERA, np.sum(g * x.embeddings, axis=1), token_ids=x.token_ids)


def integrad(model: ClassifierModel, x: EmbeddedText, c: int, T: int = 20) -> Attribution:
    """Per-word path contributions from ``x`` to the zero text (left endpoints)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    total = np.zeros_like(x.embeddings)
    for t in range(T):
        total += model.input_gradient(x.with_embeddings(x.embeddings * (1.0 - t / T)), c)
    return Attribution("integrad", ERA, np.sum(x.embeddings * total, axis=1) / T,
                       token_ids=x.token_ids)


def rankmask(model: ClassifierModel, x: EmbeddedText) -> Attribution:
    if not isinstance(model, AttentionClassifier):
        raise ModelError(f"rankmask needs an attention model, got {model.arch!r}")
    _, state = model.predict_with_attention(x)
    return Attribution("rankmask", MMA, state.attention.copy(), token_ids=x.token_ids)


METHODS = ("vagrad", "smoothgrad", "itergrad", "inpgrad", "integrad", "rankmask")
NATIVE = {"vagrad": CSA, "smoothgrad": CSA, "itergrad": CSA,
          "inpgrad": ERA, "integrad": ERA, "rankmask": MMA}
EPS_DEPENDENT = {m for m, d in NATIVE.items() if d == CSA}


def interpret(method: str, model: ClassifierModel, x: EmbeddedText, c: int,
              eps: float = 0.5, config: InterpreterConfig | None = None,
              seed: int | None = None) -> Attribution:
    """Run ``method`` with the defaults from ``config``."""
    cfg = config or InterpreterConfig()
    if method == "vagrad":
        return vagrad(model, x, c, eps)
    if method == "smoothgrad":
        if cfg.smoothgrad_sigma is None:
            raise ValueError("smoothgrad needs smoothgrad_sigma; see default_sigma()")
        return smoothgrad(model, x, c, eps, cfg.smoothgrad_sigma, cfg.smoothgrad_samples,
                          cfg.seed if seed is None else seed)
    if method == "itergrad":
        return itergrad(model, x, c, eps, cfg.itergrad_steps, cfg.itergrad_step_fraction * eps)
    if method == "inpgrad":
        return inpgrad(model, x, c)
    if method == "integrad":
        return integrad(model, x, c, cfg.integrad_points)
    if method == "rankmask":
        return rankmask(model, x)
    raise ValueError(f"unknown method {method!r}")
