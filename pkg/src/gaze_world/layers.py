"""Parameter containers and transformer building blocks on top of :mod:`numcore`."""

import logging
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from gaze_world import numcore as nc
from gaze_world.numcore import Tensor

_logger = logging.getLogger(__name__)


class Module:
    """Anything holding parameters as attributes (tensors, modules, lists of modules).

    Examples:
        >>> rng = np.random.default_rng(0)
        >>> sorted(Linear(2, 3, rng).parameters())
        ['bias', 'weight']
        >>> [name for name, _ in MLP(2, 4, rng).named_parameters()]
        ['fc1.weight', 'fc1.bias', 'fc2.weight', 'fc2.bias']
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())


def parameter(array: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(array, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64, bias=True):
        self.weight = parameter(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)), dtype)
        if bias:
            self.bias = parameter(np.zeros(n_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = nc.matmul(x, self.weight)
        return y + self.bias if hasattr(self, "bias") else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim), dtype)
        self.bias = parameter(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.eps, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        self.table = parameter(rng.normal(0.0, 0.1, size=(count, dim)), dtype)

    def __call__(self, indices) -> Tensor:
        return nc.take(self.table, indices)


class MLP(Module):
    """Two-layer feed-forward network with GELU."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64, out: Optional[int] = None):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, out or dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nc.gelu(self.fc1(x)))


def causal_mask(length: int) -> np.ndarray:
    """True where attention is blocked (strictly above the diagonal).

    Examples:
        >>> causal_mask(3).astype(int).tolist()
        [[0, 1, 1], [0, 0, 1], [0, 0, 0]]
    """
    return np.triu(np.ones((length, length), dtype=bool), k=1)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        assert dim % heads == 0, f"embedding dimension {dim} is not divisible by {heads} heads"
        self.heads = heads
        self.query = Linear(dim, dim, rng, dtype)
        self.key = Linear(dim, dim, rng, dtype)
        self.value = Linear(dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)

    def _split(self, x: Tensor) -> Tensor:
        length, dim = x.shape
        return x.reshape(length, self.heads, dim // self.heads).transpose(1, 0, 2)

    def __call__(self, queries: Tensor, context: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """``queries`` (Lq, d) attend over ``context`` (Lk, d); ``mask`` (Lq, Lk) blocks where True."""
        length, dim = queries.shape
        q = self._split(self.query(queries))
        k = self._split(self.key(context)).transpose(0, 2, 1)
        v = self._split(self.value(context))
        scores = nc.matmul(q, k) * (1.0 / np.sqrt(dim // self.heads))
        if mask is not None:
            scores = nc.masked_fill(scores, mask, -np.inf)
        weights = nc.softmax(scores, axis=-1)
        mixed = nc.matmul(weights, v).transpose(1, 0, 2).reshape(length, dim)
        return self.out(mixed)


class TransformerBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64, mlp_ratio: int = 2):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, mlp_ratio * dim, rng, dtype)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, mask)
        return x + self.mlp(self.norm2(x))


class CrossAttentionBlock(Module):
    """Pre-norm block whose queries attend only to a fixed context, never to each other."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64, mlp_ratio: int = 2):
        self.norm_q = LayerNorm(dim, dtype)
        self.norm_kv = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, mlp_ratio * dim, rng, dtype)

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        x = queries + self.attn(self.norm_q(queries), self.norm_kv(context))
        return x + self.mlp(self.norm2(x))
