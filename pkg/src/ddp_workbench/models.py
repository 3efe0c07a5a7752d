"""Toy text classifiers with access to input gradients.

Two architectures are provided:

``bag``
    Mean- (or sum-) pooled word embeddings followed by an optional tanh hidden
    layer and a linear softmax head.
``attention``
    Hidden states ``H[n] = tanh(x[n] W_h + sum_k (x[n-k] W_lk + x[n+k] W_rk)
    + mean(x) W_c + b_h)`` see a local window of neighbours and, optionally,
    the whole-text mean, so a word's evidence is spread over several
    positions.  They are pooled with additive
    attention ``a = softmax(tanh(H W_a + b_a) v)``.  The head sees
    ``sum_n a[n] m[n] H[n]`` so an external binary mask ``m`` can block
    individual messages without renormalising the remaining weights.

Every model output is the post-softmax probability vector.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

PAD = "<pad>"
UNK = "<unk>"
CHECKPOINT_FORMAT = "ddp-workbench-model"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class EmbeddedText:
    token_ids: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ModelError(f"embeddings must be an N x d matrix with N >= 1, got {self.embeddings.shape}")
        if self.token_ids.shape != (self.embeddings.shape[0],):
            raise ModelError("token_ids length must equal the number of embedding rows")
        if not np.all(np.isfinite(self.embeddings)):
            raise ModelError("embeddings contain non-finite entries")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def with_embeddings(self, embeddings: np.ndarray) -> "EmbeddedText":
        return EmbeddedText(self.token_ids.copy(), embeddings)


@dataclass
class EmbeddingTable:
    """Vocabulary plus a ``V x d`` matrix.  Row 0 is the all-zeros pad row."""

    vocab: dict[str, int]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ModelError("embedding matrix must be 2-D")
        if self.vocab.get(PAD) != 0:
            raise ModelError(f"{PAD!r} must map to row 0")
        if np.any(self.matrix[0] != 0.0):
            raise ModelError("row 0 (pad) must be the zero vector")
        if len(self.vocab) != self.matrix.shape[0]:
            raise ModelError("vocabulary size does not match matrix rows")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def tokens(self) -> list[str]:
        out = [""] * len(self.vocab)
        for tok, i in self.vocab.items():
            out[i] = tok
        return out

    def ids(self, tokens: Iterable[str]) -> list[int]:
        unk = self.vocab.get(UNK)
        out = []
        for tok in tokens:
            i = self.vocab.get(tok, unk)
            if i is None:
                raise ModelError(f"unknown token {tok!r} and no {UNK} row")
            out.append(i)
        return out

    def embed(self, token_ids: Sequence[int]) -> EmbeddedText:
        ids = np.asarray(token_ids, dtype=np.int64)
        return EmbeddedText(ids, self.matrix[ids].copy())


@dataclass
class AttentionState:
    attention: np.ndarray
    hidden: np.ndarray


def erase(x: EmbeddedText, positions: Iterable[int]) -> EmbeddedText:
    """Replace the rows at 0-based ``positions`` by zero vectors."""
    emb = x.embeddings.copy()
    n = len(x)
    for p in positions:
        if not 0 <= p < n:
            raise ModelError(f"erase position {p} out of range for length {n}")
        emb[p] = 0.0
    return x.with_embeddings(emb)


def _init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


class ClassifierModel:
    """Base class; subclasses implement :meth:`_forward` on a tape."""

    arch: str = ""

    def __init__(self, dim: int, num_classes: int, params: dict[str, np.ndarray]):
        self.dim = dim
        self.num_classes = num_classes
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    # -- configuration --------------------------------------------------------
    def config(self) -> dict:
        return {"dim": self.dim, "num_classes": self.num_classes}

    def copy(self) -> "ClassifierModel":
        return copy.deepcopy(self)

    # -- forward --------------------------------------------------------------
    def _check(self, x: EmbeddedText) -> None:
        if x.dim != self.dim:
            raise ModelError(f"embedding dimension {x.dim} does not match model dimension {self.dim}")

    def _forward(self, tape: ad.Tape, P: dict[str, ad.Tensor], X: ad.Tensor,
                 mask: np.ndarray | None):
        raise NotImplementedError

    def _tape(self, x: EmbeddedText, mask=None):
        self._check(x)
        tape = ad.Tape()
        P = {k: tape.leaf(v) for k, v in self.params.items()}
        X = tape.leaf(x.embeddings)
        probs, attn = self._forward(tape, P, X, mask)
        return tape, P, X, probs, attn

    def predict(self, x: EmbeddedText) -> np.ndarray:
        return self._tape(x)[3].value

    def predict_proba_batch(self, texts: Sequence[EmbeddedText]) -> np.ndarray:
        return np.stack([self.predict(x) for x in texts])

    def value_and_gradient(self, x: EmbeddedText, c: int) -> tuple[np.ndarray, np.ndarray]:
        """Probability vector at ``x`` and the gradient of ``f_c`` w.r.t. the embeddings."""
        if not 0 <= c < self.num_classes:
            raise ModelError(f"class {c} out of range for {self.num_classes} classes")
        tape, _, X, probs, _ = self._tape(x)
        out = ad.index(probs, c)
        return probs.value, tape.backward(out, X).gradient

    def input_gradient(self, x: EmbeddedText, c: int) -> np.ndarray:
        return self.value_and_gradient(x, c)[1]

    def loss_and_param_grads(self, x: EmbeddedText, target: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Cross-entropy against a (possibly soft) target distribution."""
        tape, P, _, probs, _ = self._tape(x)
        ll = ad.dot(ad.constant(tape, target), ad.log(probs))
        loss = ad.scale(ll, -1.0)
        names = list(P)
        grads = tape.gradients(loss, [P[k] for k in names])
        return float(loss.value), dict(zip(names, grads))


class BagClassifier(ClassifierModel):
    arch = "bag"

    def __init__(self, dim: int, num_classes: int, params: dict[str, np.ndarray],
                 hidden: int | None = None, pooling: str = "mean"):
        if pooling not in ("mean", "sum"):
            raise ModelError(f"unknown pooling {pooling!r}")
        super().__init__(dim, num_classes, params)
        self.hidden = hidden
        self.pooling = pooling

    @classmethod
    def init(cls, dim: int, num_classes: int, hidden: int | None = 16,
             pooling: str = "mean", seed: int = 0) -> "BagClassifier":
        rng = np.random.default_rng(seed)
        if hidden:
            params = {"W1": _init(rng, dim, (dim, hidden)), "b1": np.zeros(hidden),
                      "W2": _init(rng, hidden, (hidden, num_classes)), "b2": np.zeros(num_classes)}
        else:
            params = {"W": _init(rng, dim, (dim, num_classes)), "b": np.zeros(num_classes)}
        return cls(dim, num_classes, params, hidden=hidden or None, pooling=pooling)

    def config(self) -> dict:
        return {**super().config(), "hidden": self.hidden, "pooling": self.pooling}

    def _forward(self, tape, P, X, mask):
        if mask is not None:
            raise ModelError("masking requires the attention architecture")
        n = X.shape[0]
        w = 1.0 / n if self.pooling == "mean" else 1.0
        pooled = ad.matmul(ad.constant(tape, np.full((1, n), w)), X)
        if self.hidden:
            h = ad.tanh(ad.add(ad.matmul(pooled, P["W1"]), P["b1"]))
            logits = ad.add(ad.matmul(h, P["W2"]), P["b2"])
        else:
            logits = ad.add(ad.matmul(pooled, P["W"]), P["b"])
        return ad.softmax(ad.reshape(logits, (self.num_classes,))), None


class AttentionClassifier(ClassifierModel):
    arch = "attention"

    def __init__(self, dim: int, num_classes: int, params: dict[str, np.ndarray],
                 hidden: int = 16, attn_dim: int = 8, window: int = 1, context: bool = False):
        super().__init__(dim, num_classes, params)
        self.hidden = hidden
        self.attn_dim = attn_dim
        self.window = window
        self.context = context

    @classmethod
    def init(cls, dim: int, num_classes: int, hidden: int = 16, attn_dim: int = 8,
             window: int = 1, context: bool = False, seed: int = 0) -> "AttentionClassifier":
        rng = np.random.default_rng(seed)
        params = {"Wh": _init(rng, dim, (dim, hidden)), "bh": np.zeros(hidden)}
        for k in range(1, window + 1):
            params[f"Wl{k}"] = _init(rng, dim, (dim, hidden))
            params[f"Wr{k}"] = _init(rng, dim, (dim, hidden))
        if context:
            params["Wc"] = _init(rng, dim, (dim, hidden))
        params.update({
            "Wa": _init(rng, hidden, (hidden, attn_dim)), "ba": np.zeros(attn_dim),
            "v": _init(rng, attn_dim, (attn_dim, 1)),
            "Wo": _init(rng, hidden, (hidden, num_classes)), "bo": np.zeros(num_classes),
        })
        return cls(dim, num_classes, params, hidden=hidden, attn_dim=attn_dim,
                   window=window, context=context)

    def config(self) -> dict:
        return {**super().config(), "hidden": self.hidden, "attn_dim": self.attn_dim,
                "window": self.window, "context": self.context}

    def encode(self, tape, P, X):
        """``f1``: per-word hidden states and the attention distribution over them."""
        n = X.shape[0]
        pre = ad.matmul(X, P["Wh"])
        for k in range(1, self.window + 1):
            # rows of X shifted by k positions, zero-filled at the ends
            left = ad.matmul(ad.constant(tape, np.eye(n, k=-k)), X)
            right = ad.matmul(ad.constant(tape, np.eye(n, k=k)), X)
            pre = ad.add(pre, ad.matmul(left, P[f"Wl{k}"]))
            pre = ad.add(pre, ad.matmul(right, P[f"Wr{k}"]))
        if self.context:
            pooled = ad.matmul(ad.constant(tape, np.full((1, n), 1.0 / n)), X)
            pre = ad.add(pre, ad.reshape(ad.matmul(pooled, P["Wc"]), (self.hidden,)))
        H = ad.tanh(ad.add(pre, P["bh"]))
        e = ad.matmul(ad.tanh(ad.add(ad.matmul(H, P["Wa"]), P["ba"])), P["v"])
        return H, ad.softmax(ad.reshape(e, (n,)))

    def head(self, tape, P, H, weights):
        """``f2``: class probabilities from hidden states and (masked) attention."""
        n = H.shape[0]
        pooled = ad.matmul(ad.reshape(weights, (1, n)), H)
        logits = ad.add(ad.matmul(pooled, P["Wo"]), P["bo"])
        return ad.softmax(ad.reshape(logits, (self.num_classes,)))

    def _forward(self, tape, P, X, mask):
        H, a = self.encode(tape, P, X)
        weights = a
        if mask is not None:
            weights = ad.mul(a, ad.constant(tape, mask))
        return self.head(tape, P, H, weights), (a, H)

    def predict_with_attention(self, x: EmbeddedText, mask=None) -> tuple[np.ndarray, AttentionState]:
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)
            if mask.shape != (len(x),) or not np.all((mask == 0.0) | (mask == 1.0)):
                raise ModelError("mask must be a binary vector with one entry per word")
        _, _, _, probs, (a, H) = self._tape(x, mask)
        return probs.value, AttentionState(attention=a.value, hidden=H.value)


ARCHITECTURES = {"bag": BagClassifier, "attention": AttentionClassifier}


def build_model(arch: str, dim: int, num_classes: int, seed: int = 0, **kwargs) -> ClassifierModel:
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise ModelError(f"unknown architecture {arch!r}") from None
    return cls.init(dim, num_classes, seed=seed, **kwargs)


def predict_with_attention(model: ClassifierModel, x: EmbeddedText, mask=None):
    if not isinstance(model, AttentionClassifier):
        raise ModelError(f"predict_with_attention needs an attention model, got {model.arch!r}")
    return model.predict_with_attention(x, mask)


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.5
    epochs: int = 5
    seed: int = 0
    batch: int = 8


@dataclass
class TrainResult:
    model: ClassifierModel
    losses: list[float] = field(default_factory=list)


def train(model: ClassifierModel, texts: Sequence[EmbeddedText], targets: Sequence,
          config: TrainConfig = TrainConfig()) -> TrainResult:
    """Minibatch SGD on cross-entropy.

    ``targets`` are integer labels or probability vectors (soft labels).  The
    input model is left untouched; a trained copy is returned with the mean
    loss of every epoch.
    """
    if len(texts) == 0:
        raise ModelError("cannot train on an empty corpus")
    if len(texts) != len(targets):
        raise ModelError("texts and targets differ in length")
    dist = []
    for t in targets:
        if np.ndim(t) == 0:
            if not 0 <= int(t) < model.num_classes:
                raise ModelError(f"label {t} out of range for {model.num_classes} classes")
            v = np.zeros(model.num_classes)
            v[int(t)] = 1.0
        else:
            v = np.asarray(t, dtype=np.float64)
        dist.append(v)

    out = model.copy()
    rng = np.random.default_rng(config.seed)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(texts))
        total = 0.0
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            acc = {k: np.zeros_like(v) for k, v in out.params.items()}
            for i in idx:
                loss, grads = out.loss_and_param_grads(texts[i], dist[i])
                total += loss
                for k, g in grads.items():
                    acc[k] += g
            step = config.lr / len(idx)
            for k in out.params:
                out.params[k] = out.params[k] - step * acc[k]
        losses.append(total / len(texts))
    return TrainResult(out, losses)


def accuracy(model: ClassifierModel, texts: Sequence[EmbeddedText], labels: Sequence[int]) -> float:
    if not texts:
        return float("nan")
    hits = sum(int(np.argmax(model.predict(x)) == y) for x, y in zip(texts, labels))
    return hits / len(texts)


# -- checkpoints ----------------------------------------------------------------

def save_model(model: ClassifierModel, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "config": model.config(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in model.params.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> ClassifierModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"{path}: not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    cfg = dict(doc["config"])
    cls = ARCHITECTURES[doc["arch"]]
    return cls(params=params, **cfg)
