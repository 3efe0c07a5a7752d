"""Stub models with closed-form outputs, used as oracles."""

import numpy as np

from ddp_workbench.models import EmbeddedText


def text(rows, ids=None):
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    return EmbeddedText(np.arange(2, 2 + len(rows)) if ids is None else ids, rows)


class LinearStub:
    """``f_0 = sum(W * X)`` and ``f_1 = -f_0``; not a probability model."""

    arch = "linear-stub"
    num_classes = 2

    def __init__(self, W):
        self.W = np.asarray(W, dtype=np.float64)

    def predict(self, x):
        f = float(np.sum(self.W[:len(x)] * x.embeddings))
        return np.array([f, -f])

    def input_gradient(self, x, c):
        g = self.W[:len(x)].copy()
        return g if c == 0 else -g


class QuadraticStub:
    """``f_0 = ||X - M||^2`` with minimiser ``M``."""

    arch = "quadratic-stub"
    num_classes = 1

    def __init__(self, M):
        self.M = np.asarray(M, dtype=np.float64)

    def predict(self, x):
        return np.array([float(np.sum((x.embeddings - self.M) ** 2))])

    def input_gradient(self, x, c):
        return 2.0 * (x.embeddings - self.M)


class AttentionStub:
    """Per-word values, fixed attention and an identity head: ``f_0 = sum a m v``."""

    arch = "attention"
    num_classes = 1

    def __init__(self, values, attention):
        self.values = np.asarray(values, dtype=np.float64)
        self.attention = np.asarray(attention, dtype=np.float64)

    def predict_with_attention(self, x, mask=None):
        m = np.ones(len(self.values)) if mask is None else np.asarray(mask, dtype=np.float64)
        return np.array([float(np.sum(self.attention * m * self.values))]), None

    def predict(self, x):
        return self.predict_with_attention(x)[0]
