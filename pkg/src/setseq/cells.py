"""Parameterized building blocks: LSTM cell, MLP embedder, attention scorers,
and the affine+softmax output head.

Everything here is a pure function of (params, state, input) built from
autodiff primitives, so it works both on single vectors (rank 1) and on
batches with a leading batch axis (rank 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, param


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Uniform in [-r, r] with r = 1/sqrt(fan_in)."""
    r = 1.0 / np.sqrt(max(fan_in, 1))
    return param(rng.uniform(-r, r, size=shape))


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor


def zero_state(hidden_dim: int, batch: int | None = None) -> LstmState:
    shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
    return LstmState(ad.tensor(np.zeros(shape)), ad.tensor(np.zeros(shape)))


@dataclass
class LstmParams:
    """Gate weights/biases for input, forget, output, and candidate gates.

    Each gate maps the concatenation [input; hidden] (or just hidden when
    input_dim == 0) to hidden_dim. input_dim == 0 is the externally-driven
    recurrence used by blocks whose step consumes no fresh input.
    """

    input_dim: int
    hidden_dim: int
    w_in: Tensor
    w_forget: Tensor
    w_out: Tensor
    w_cand: Tensor
    b_in: Tensor
    b_forget: Tensor
    b_out: Tensor
    b_cand: Tensor

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator,
             forget_bias: float = 1.0) -> "LstmParams":
        rows = input_dim + hidden_dim
        ws = [uniform_init(rng, (rows, hidden_dim), rows) for _ in range(4)]
        bs = [param(np.zeros(hidden_dim)) for _ in range(4)]
        # A positive forget bias keeps early cell memory alive.
        bs[1] = param(np.full(hidden_dim, forget_bias))
        return cls(input_dim, hidden_dim, ws[0], ws[1], ws[2], ws[3],
                   bs[0], bs[1], bs[2], bs[3])

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmParams":
        rows = input_dim + hidden_dim
        return cls(input_dim, hidden_dim,
                   *(param(np.zeros((rows, hidden_dim))) for _ in range(4)),
                   *(param(np.zeros(hidden_dim)) for _ in range(4)))

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_in": self.w_in, f"{prefix}.w_forget": self.w_forget,
            f"{prefix}.w_out": self.w_out, f"{prefix}.w_cand": self.w_cand,
            f"{prefix}.b_in": self.b_in, f"{prefix}.b_forget": self.b_forget,
            f"{prefix}.b_out": self.b_out, f"{prefix}.b_cand": self.b_cand,
        }


def lstm_step(params: LstmParams, state: LstmState, inp: Tensor | None = None) -> LstmState:
    """One LSTM recurrence. inp must be present iff params.input_dim > 0."""
    if params.input_dim > 0:
        if inp is None:
            raise ShapeError("lstm_step: params expect an input vector")
        if inp.shape[-1] != params.input_dim:
            raise ShapeError(f"lstm_step: input dim {inp.shape[-1]} != {params.input_dim}")
        z = ad.concat(inp, state.hidden)
    else:
        if inp is not None:
            raise ShapeError("lstm_step: params take no input")
        z = state.hidden
    gate_in = ad.sigmoid(ad.add(ad.matmul(z, params.w_in), params.b_in))
    gate_forget = ad.sigmoid(ad.add(ad.matmul(z, params.w_forget), params.b_forget))
    gate_out = ad.sigmoid(ad.add(ad.matmul(z, params.w_out), params.b_out))
    cand = ad.tanh(ad.add(ad.matmul(z, params.w_cand), params.b_cand))
    new_cell = ad.add(ad.mul(gate_forget, state.cell), ad.mul(gate_in, cand))
    new_hidden = ad.mul(gate_out, ad.tanh(new_cell))
    return LstmState(new_hidden, new_cell)


# ---------------------------------------------------------------------------
# MLP reader


@dataclass
class MlpParams:
    """Stack of affine layers with tanh after every layer."""

    sizes: tuple[int, ...]
    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> "MlpParams":
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2:
            raise ShapeError("mlp needs at least input and output sizes")
        p = cls(sizes)
        for a, b in zip(sizes[:-1], sizes[1:]):
            p.weights.append(uniform_init(rng, (a, b), a))
            p.biases.append(param(np.zeros(b)))
        return p

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def mlp_embed(params: MlpParams, x: Tensor) -> Tensor:
    """Apply the shared embedder to x (last axis = feature axis)."""
    if x.shape[-1] != params.sizes[0]:
        raise ShapeError(f"mlp_embed: input dim {x.shape[-1]} != {params.sizes[0]}")
    h = x
    for w, b in zip(params.weights, params.biases):
        h = ad.tanh(ad.add(ad.matmul(h, w), b))
    return h


# ---------------------------------------------------------------------------
# attention scorers


class DotScorer:
    """Plain inner product between memory and query; dims must match."""

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {}

    def score(self, memory: Tensor, query: Tensor) -> Tensor:
        if memory.shape != query.shape:
            raise ShapeError(f"dot score: {memory.shape} vs {query.shape}")
        return ad.sum_reduce(ad.mul(memory, query))

    def score_batch(self, memories: Tensor, query: Tensor) -> Tensor:
        """memories (B, N, d) x query (B, d) -> scores (B, N)."""
        bsz, n, d = memories.shape
        if query.shape != (bsz, d):
            raise ShapeError(f"dot score_batch: {memories.shape} vs {query.shape}")
        col = ad.reshape(query, (bsz, d, 1))
        return ad.reshape(ad.matmul(memories, col), (bsz, n))


@dataclass
class AdditiveScorer:
    """v . tanh(W_mem m + W_query q); handles mismatched memory/query dims."""

    w_mem: Tensor
    w_query: Tensor
    v: Tensor

    @classmethod
    def init(cls, mem_dim: int, query_dim: int, attn_dim: int,
             rng: np.random.Generator) -> "AdditiveScorer":
        return cls(uniform_init(rng, (mem_dim, attn_dim), mem_dim),
                   uniform_init(rng, (query_dim, attn_dim), query_dim),
                   uniform_init(rng, (attn_dim,), attn_dim))

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_mem": self.w_mem, f"{prefix}.w_query": self.w_query,
                f"{prefix}.v": self.v}

    def score(self, memory: Tensor, query: Tensor) -> Tensor:
        h = ad.tanh(ad.add(ad.matmul(memory, self.w_mem), ad.matmul(query, self.w_query)))
        return ad.matmul(h, self.v)

    def score_batch(self, memories: Tensor, query: Tensor) -> Tensor:
        bsz, n, _ = memories.shape
        attn = self.v.shape[0]
        proj_q = ad.reshape(ad.matmul(query, self.w_query), (bsz, 1, attn))
        h = ad.tanh(ad.add(ad.matmul(memories, self.w_mem), proj_q))
        return ad.matmul(h, self.v)


def make_scorer(mode: str, mem_dim: int, query_dim: int, rng: np.random.Generator,
                attn_dim: int | None = None):
    if mode == "dot":
        if mem_dim != query_dim:
            raise ShapeError(f"dot scorer needs equal dims, got {mem_dim} vs {query_dim}")
        return DotScorer()
    if mode == "additive":
        return AdditiveScorer.init(mem_dim, query_dim, attn_dim or mem_dim, rng)
    raise ValueError(f"unknown scorer mode {mode!r}")


def attention_score(memory: Tensor, query: Tensor, scorer=None) -> Tensor:
    """Score a single memory vector against a query (dot product by default)."""
    return (scorer or DotScorer()).score(memory, query)


# ---------------------------------------------------------------------------
# affine + softmax head


@dataclass
class AffineParams:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "AffineParams":
        return cls(uniform_init(rng, (in_dim, out_dim), in_dim), param(np.zeros(out_dim)))

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def affine(params: AffineParams, x: Tensor) -> Tensor:
    if x.shape[-1] != params.w.shape[0]:
        raise ShapeError(f"affine: input dim {x.shape[-1]} != {params.w.shape[0]}")
    return ad.add(ad.matmul(x, params.w), params.b)


def affine_softmax(params: AffineParams, x: Tensor) -> Tensor:
    """Probability vector over the head's vocabulary."""
    return ad.softmax(affine(params, x))


def affine_log_softmax(params: AffineParams, x: Tensor) -> Tensor:
    return ad.log_softmax(affine(params, x))
