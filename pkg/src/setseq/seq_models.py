"""Chain-rule joint models over symbol sequences and positioned-token sets.

A sequence is modeled autoregressively with an LSTM: NLL = -sum_t log
p(y_t | y_1..y_{t-1}). A sequence can also be recast as a *set* of (symbol,
original-position) tokens, which may then be serialized in any ordering
without losing the original structure; the positioned model predicts each
token as p(symbol) * p(position | symbol) with two softmax heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, tensor
from .cells import (
    AffineParams,
    LstmParams,
    affine,
    affine_log_softmax,
    lstm_step,
    uniform_init,
    zero_state,
)


@dataclass(frozen=True)
class PositionedToken:
    symbol: int
    position: int  # original 1-based index


def sequence_to_positioned_set(seq, capacity: int = 8) -> list[PositionedToken]:
    """Pair each symbol with its 1-based index so the result can be shuffled
    freely and still reconstruct the sequence."""
    seq = list(seq)
    if len(seq) > capacity:
        raise ValueError(f"sequence length {len(seq)} exceeds position capacity {capacity}")
    return [PositionedToken(int(s), i + 1) for i, s in enumerate(seq)]


def positioned_set_to_sequence(tokens) -> list[int]:
    return [t.symbol for t in sorted(tokens, key=lambda t: t.position)]


def is_permutation(ordering, n: int) -> bool:
    return sorted(ordering) == list(range(1, n + 1))


def apply_ordering(tokens, ordering) -> list[PositionedToken]:
    """Serialize the token set so the token with original position ordering[k]
    is emitted k-th. ordering is a permutation of 1..n."""
    n = len(tokens)
    if not is_permutation(ordering, n):
        raise ValueError(f"{tuple(ordering)} is not a permutation of 1..{n}")
    by_pos = {t.position: t for t in tokens}
    if len(by_pos) != n:
        raise ValueError("token positions must be unique")
    return [by_pos[p] for p in ordering]


def blockwise_reverse(seq, block: int = 3, pad_id: int | None = None) -> list[int]:
    """Reverse each fixed-size block in place, padding the final partial block
    at the end before reversal. A scrambling transform for order-sensitivity
    experiments; destroys most local n-gram structure."""
    seq = list(seq)
    if pad_id is None:
        raise ValueError("pad_id is required")
    while len(seq) % block:
        seq.append(pad_id)
    out = []
    for i in range(0, len(seq), block):
        out.extend(reversed(seq[i:i + block]))
    return out


def validate_symbols(seqs: np.ndarray, vocab: int) -> np.ndarray:
    seqs = np.asarray(seqs, dtype=np.int64)
    if seqs.size and (seqs.min() < 0 or seqs.max() >= vocab):
        raise ValueError(f"symbol ids must lie in [0, {vocab})")
    return seqs


# ---------------------------------------------------------------------------
# plain symbol-sequence model


class SequenceModel:
    """Autoregressive LSTM over symbol ids with an affine+softmax head.

    An internal start-of-sequence row (id = vocab) begins every example. An
    optional fixed-size context vector can seed the initial hidden state.
    """

    def __init__(self, vocab: int, rng: np.random.Generator, embed_dim: int = 32,
                 hidden_dim: int = 64, context_dim: int = 0):
        self.vocab = vocab
        self.start_id = vocab
        self.embed = uniform_init(rng, (vocab + 1, embed_dim), embed_dim)
        self.lstm = LstmParams.init(embed_dim, hidden_dim, rng)
        self.head = AffineParams.init(hidden_dim, vocab, rng)
        self.context_dim = context_dim
        self.context_bridge = AffineParams.init(context_dim, hidden_dim, rng) \
            if context_dim > 0 else None

    def parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        out.update(self.lstm.tensors("lstm"))
        out.update(self.head.tensors("head"))
        if self.context_bridge is not None:
            out.update(self.context_bridge.tensors("context"))
        return out

    def _initial_state(self, batch: int, context: Tensor | None):
        state = zero_state(self.lstm.hidden_dim, batch)
        if context is not None:
            if self.context_bridge is None:
                raise ShapeError("model was built without a context bridge")
            state.hidden = ad.tanh(affine(self.context_bridge, context))
        return state

    def per_example_nll(self, seqs: np.ndarray, context: Tensor | None = None) -> Tensor:
        """NLL per example for a batch of equal-length sequences (B, T)."""
        seqs = validate_symbols(seqs, self.vocab)
        if seqs.ndim != 2 or seqs.shape[1] == 0:
            raise ShapeError("sequences must be a non-empty (batch, length) array")
        bsz, length = seqs.shape
        state = self._initial_state(bsz, context)
        prev = np.full(bsz, self.start_id, dtype=np.int64)
        total = None
        for t in range(length):
            state = lstm_step(self.lstm, state, ad.take_rows(self.embed, prev))
            logp = affine_log_softmax(self.head, state.hidden)
            step_nll = ad.scale(ad.pick(logp, seqs[:, t]), -1.0)
            total = step_nll if total is None else ad.add(total, step_nll)
            prev = seqs[:, t]
        return total

    def log_prob(self, seqs: np.ndarray) -> np.ndarray:
        """Per-example log-probability, evaluation mode (no tape needed)."""
        return -self.per_example_nll(np.atleast_2d(seqs)).data


def chain_rule_nll(model: SequenceModel, seq, context: Tensor | None = None) -> Tensor:
    """NLL of one sequence under the model's chain-rule factorization."""
    return ad.reshape(model.per_example_nll(np.asarray(seq, dtype=np.int64)[None, :],
                                            context), ())


# ---------------------------------------------------------------------------
# positioned-token set model


class _StepState:
    __slots__ = ("state", "prev_sym", "prev_pos")

    def __init__(self, state, prev_sym, prev_pos):
        self.state = state
        self.prev_sym = prev_sym      # (B,) int ids
        self.prev_pos = prev_pos      # (B,) int, 0 = none yet


class PositionedSetModel:
    """Joint model over (symbol, position) tokens in arbitrary serialization.

    Each step consumes the previous token (symbol embedding plus one-hot
    position) and predicts the next as p(symbol) * p(position | symbol);
    the position head sees the hidden state and the embedding of the symbol
    being placed. unroll_count tracks full decoder passes in units of
    examples, for search-cost accounting.
    """

    def __init__(self, vocab: int, rng: np.random.Generator, capacity: int = 8,
                 embed_dim: int = 32, hidden_dim: int = 64):
        self.vocab = vocab
        self.capacity = capacity
        self.start_id = vocab
        self.sym_embed = uniform_init(rng, (vocab + 1, embed_dim), embed_dim)
        self.lstm = LstmParams.init(embed_dim + capacity, hidden_dim, rng)
        self.sym_head = AffineParams.init(hidden_dim, vocab, rng)
        self.pos_head = AffineParams.init(hidden_dim + embed_dim, capacity, rng)
        self.unroll_count = 0

    def parameters(self) -> dict[str, Tensor]:
        out = {"sym_embed": self.sym_embed}
        out.update(self.lstm.tensors("lstm"))
        out.update(self.sym_head.tensors("sym_head"))
        out.update(self.pos_head.tensors("pos_head"))
        return out

    def _check(self, syms: np.ndarray, poss: np.ndarray):
        syms = validate_symbols(syms, self.vocab)
        poss = np.asarray(poss, dtype=np.int64)
        if syms.shape != poss.shape or syms.ndim != 2 or syms.shape[1] == 0:
            raise ShapeError("need matching non-empty (batch, n) symbol/position arrays")
        if poss.min() < 1 or poss.max() > self.capacity:
            raise ValueError(f"positions must lie in 1..{self.capacity}")
        return syms, poss

    def _input(self, prev_sym: np.ndarray, prev_pos: np.ndarray) -> Tensor:
        onehot = np.zeros((prev_sym.shape[0], self.capacity))
        placed = prev_pos > 0
        onehot[placed, prev_pos[placed] - 1] = 1.0
        return ad.concat(ad.take_rows(self.sym_embed, prev_sym), tensor(onehot))

    def per_example_nll(self, syms: np.ndarray, poss: np.ndarray) -> Tensor:
        """NLL of each serialized example (B, n): symbols with 1-based positions."""
        syms, poss = self._check(syms, poss)
        bsz, n = syms.shape
        self.unroll_count += bsz
        state = zero_state(self.lstm.hidden_dim, bsz)
        prev_sym = np.full(bsz, self.start_id, dtype=np.int64)
        prev_pos = np.zeros(bsz, dtype=np.int64)
        total = None
        for t in range(n):
            state = lstm_step(self.lstm, state, self._input(prev_sym, prev_pos))
            sym_logp = affine_log_softmax(self.sym_head, state.hidden)
            pos_in = ad.concat(state.hidden, ad.take_rows(self.sym_embed, syms[:, t]))
            pos_logp = affine_log_softmax(self.pos_head, pos_in)
            step_nll = ad.scale(ad.add(ad.pick(sym_logp, syms[:, t]),
                                       ad.pick(pos_logp, poss[:, t] - 1)), -1.0)
            total = step_nll if total is None else ad.add(total, step_nll)
            prev_sym, prev_pos = syms[:, t], poss[:, t]
        return total

    def log_prob(self, syms: np.ndarray, poss: np.ndarray) -> np.ndarray:
        return -self.per_example_nll(syms, poss).data

    # stepwise evaluation interface (used by ordering search / sampling)

    def begin(self, batch: int) -> _StepState:
        return _StepState(zero_state(self.lstm.hidden_dim, batch),
                          np.full(batch, self.start_id, dtype=np.int64),
                          np.zeros(batch, dtype=np.int64))

    def step(self, st: _StepState) -> tuple[_StepState, np.ndarray]:
        """Advance one step; returns the new state and log p(symbol) (B, V)."""
        state = lstm_step(self.lstm, st.state, self._input(st.prev_sym, st.prev_pos))
        new = _StepState(state, st.prev_sym, st.prev_pos)
        sym_logp = affine_log_softmax(self.sym_head, state.hidden).data
        return new, sym_logp

    def position_logp(self, st: _StepState, rows: np.ndarray,
                      sym_ids: np.ndarray) -> np.ndarray:
        """log p(position | symbol) for (example-row, symbol) query pairs."""
        hidden = st.state.hidden.data[rows]
        emb = self.sym_embed.data[sym_ids]
        pos_in = tensor(np.concatenate([hidden, emb], axis=-1))
        return affine_log_softmax(self.pos_head, pos_in).data

    def feed(self, st: _StepState, sym_ids: np.ndarray, pos_ids: np.ndarray) -> _StepState:
        return _StepState(st.state, np.asarray(sym_ids, dtype=np.int64),
                          np.asarray(pos_ids, dtype=np.int64))

    def finish_pass(self, batch: int):
        self.unroll_count += batch


# ---------------------------------------------------------------------------
# metrics and corpus files


def perplexity(log_probs: np.ndarray, total_events: int) -> float:
    """exp(total NLL / total predicted slots)."""
    if total_events <= 0:
        raise ValueError("perplexity needs a non-empty dataset")
    return float(np.exp(-np.sum(log_probs) / total_events))


def model_perplexity(model: SequenceModel, seqs: np.ndarray,
                     batch_size: int = 256) -> float:
    seqs = np.asarray(seqs, dtype=np.int64)
    if seqs.ndim != 2 or seqs.shape[0] == 0:
        raise ValueError("perplexity needs a non-empty (batch, length) dataset")
    total = 0.0
    for lo in range(0, seqs.shape[0], batch_size):
        total += float(np.sum(model.log_prob(seqs[lo:lo + batch_size])))
    return perplexity(np.array([total]), seqs.size)


def save_corpus(path, seqs: np.ndarray, header: dict | None = None):
    seqs = np.asarray(seqs, dtype=np.int64)
    with open(path, "w") as fh:
        if header:
            echo = " ".join(f"{k}={v}" for k, v in header.items())
            fh.write(f"# {echo}\n")
        for row in seqs:
            fh.write(" ".join(str(int(s)) for s in row) + "\n")


def load_corpus(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([int(tok) for tok in line.split()])
    if not rows:
        raise ValueError(f"no examples in corpus file {path}")
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ValueError("corpus rows must share one length")
    return np.array(rows, dtype=np.int64)
