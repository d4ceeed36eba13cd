"""Set encoder and pointer decoder.

The encoder embeds each raw element with a shared MLP into a bank of
memories, then runs a fixed number of attention steps with an LSTM that
takes no external input: each step queries the bank, blends a readout, and
recurs on [query; readout]. Because every interaction with the bank is a
softmax-weighted sum over elements, the final state is invariant to the
order of the bank (up to float summation noise).

The decoder is a pointer network: at each output step it emits a
distribution over memory positions via attention scores. Optional glimpse
reads refine the query before pointing: each glimpse attends over the bank
and concatenates its readout onto the query, and the final widened query
feeds the pointer softmax. Visited positions can be masked out so emitted
indices form a permutation. A vanilla left-to-right LSTM encoder is included
as the order-sensitive baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_MASK, ShapeError, Tensor, tensor
from .cells import (
    AffineParams,
    LstmParams,
    LstmState,
    MlpParams,
    affine,
    lstm_step,
    make_scorer,
    mlp_embed,
    uniform_init,
    zero_state,
)


class EmptySetError(ValueError):
    pass


@dataclass
class MemorySet:
    """Embedded set elements plus the raw payloads they came from.

    memories is (B, N, d); the list position is bookkeeping for pointing,
    not semantics: consumers must be order-invariant.
    """

    memories: Tensor
    payloads: np.ndarray

    @property
    def batch(self) -> int:
        return self.memories.shape[0]

    @property
    def size(self) -> int:
        return self.memories.shape[1]

    @property
    def dim(self) -> int:
        return self.memories.shape[2]


def read_block(elements: np.ndarray, reader: MlpParams) -> MemorySet:
    """Embed every element with the shared reader. elements is (B, N, x_dim)."""
    try:
        elements = np.asarray(elements, dtype=np.float64)
    except ValueError as e:
        raise ShapeError("elements must form a dense array (homogeneous dims)") from e
    if elements.ndim != 3:
        raise ShapeError(f"elements must be (batch, set, features), got {elements.shape}")
    bsz, n, xd = elements.shape
    if n == 0:
        raise EmptySetError("cannot read an empty set")
    flat = ad.reshape(tensor(elements), (bsz * n, xd))
    emb = mlp_embed(reader, flat)
    memories = ad.reshape(emb, (bsz, n, emb.shape[-1]))
    return MemorySet(memories, elements)


@dataclass
class ProcessState:
    """State of the attention recurrence: query, last readout, step count."""

    query: Tensor
    readout: Tensor
    step: int

    @property
    def combined(self) -> Tensor:
        return ad.concat(self.query, self.readout)


def attend(memories: Tensor, scores: Tensor) -> Tensor:
    """softmax the scores over positions and blend memories: (B, N, d) -> (B, d)."""
    bsz, n, d = memories.shape
    weights = ad.softmax(scores)
    blended = ad.matmul(ad.reshape(weights, (bsz, 1, n)), memories)
    return ad.reshape(blended, (bsz, d))


def process_block(mem: MemorySet, lstm: LstmParams, scorer, steps: int,
                  state_mode: str = "stateful") -> ProcessState:
    """Run `steps` attention steps over the memory bank.

    The LSTM consumes the previous [query; readout] as its input each step.
    state_mode "stateful" threads (hidden, cell) across steps; "stateless"
    resets them so the only recurrence is through [query; readout].
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if state_mode not in ("stateful", "stateless"):
        raise ValueError(f"unknown state_mode {state_mode!r}")
    bsz, _, mem_dim = mem.memories.shape
    hidden_dim = lstm.hidden_dim
    if lstm.input_dim != hidden_dim + mem_dim:
        raise ShapeError("process lstm input_dim must equal hidden_dim + memory_dim")
    query = tensor(np.zeros((bsz, hidden_dim)))
    readout = tensor(np.zeros((bsz, mem_dim)))
    state = zero_state(hidden_dim, bsz)
    for t in range(steps):
        combined = ad.concat(query, readout)
        if state_mode == "stateless":
            state = zero_state(hidden_dim, bsz)
        state = lstm_step(lstm, state, combined)
        query = state.hidden
        scores = scorer.score_batch(mem.memories, query)
        readout = attend(mem.memories, scores)
    return ProcessState(query, readout, steps)


def encode_sequence_baseline(elements: np.ndarray, reader: MlpParams,
                             encoder: LstmParams) -> tuple[LstmState, MemorySet]:
    """Left-to-right LSTM over the embedded elements (order-sensitive)."""
    mem = read_block(elements, reader)
    bsz, n, mem_dim = mem.memories.shape
    if encoder.input_dim != mem_dim:
        raise ShapeError("encoder input_dim must equal memory_dim")
    state = zero_state(encoder.hidden_dim, bsz)
    for s in range(n):
        element = ad.reshape(ad.slice_along(mem.memories, 1, s, s + 1), (bsz, mem_dim))
        state = lstm_step(encoder, state, element)
    return state, mem


@dataclass
class PointerTrace:
    """Emitted positions plus the per-step distributions that produced them."""

    indices: np.ndarray
    step_distributions: list
    glimpse_count: int
    per_example_nll: Tensor | None = None

    def nll(self) -> Tensor:
        if self.per_example_nll is None:
            raise ValueError("trace was decoded without targets; no loss available")
        return ad.scale(ad.sum_reduce(self.per_example_nll), 1.0 / self.indices.shape[0])


@dataclass
class WriteParams:
    """Pointer decoder: LSTM + context bridge + start input + scorers.

    Each glimpse reads the bank with the current query and concatenates the
    readout onto it, so after g glimpses the query is
    [hidden; readout_1; ...; readout_g]. The growing query dimension means
    glimpsed scorers are additive (the dot product stays the default for the
    glimpse-free pointer).
    """

    decoder: LstmParams
    bridge_hidden: AffineParams
    bridge_cell: AffineParams
    start: Tensor
    glimpse_scorers: list
    pointer_scorer: object

    @property
    def glimpses(self) -> int:
        return len(self.glimpse_scorers)

    @classmethod
    def init(cls, context_dim: int, mem_dim: int, decoder_hidden: int,
             glimpses: int, rng: np.random.Generator,
             scorer_mode: str = "dot") -> "WriteParams":
        if glimpses < 0:
            raise ValueError("glimpses must be >= 0")
        glimpse_scorers = [
            make_scorer("additive", mem_dim, decoder_hidden + g * mem_dim, rng)
            for g in range(glimpses)
        ]
        if glimpses > 0:
            pointer = make_scorer("additive", mem_dim,
                                  decoder_hidden + glimpses * mem_dim, rng)
        else:
            if scorer_mode == "dot" and decoder_hidden != mem_dim:
                raise ShapeError("dot pointer scorer needs decoder_hidden == memory_dim")
            pointer = make_scorer(scorer_mode, mem_dim, decoder_hidden, rng)
        return cls(
            decoder=LstmParams.init(mem_dim, decoder_hidden, rng),
            bridge_hidden=AffineParams.init(context_dim, decoder_hidden, rng),
            bridge_cell=AffineParams.init(context_dim, decoder_hidden, rng),
            start=uniform_init(rng, (mem_dim,), mem_dim),
            glimpse_scorers=glimpse_scorers,
            pointer_scorer=pointer,
        )

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.start": self.start}
        out.update(self.decoder.tensors(f"{prefix}.decoder"))
        out.update(self.bridge_hidden.tensors(f"{prefix}.bridge_h"))
        out.update(self.bridge_cell.tensors(f"{prefix}.bridge_c"))
        for g, scorer in enumerate(self.glimpse_scorers):
            out.update(scorer.tensors(f"{prefix}.glimpse{g}"))
        out.update(self.pointer_scorer.tensors(f"{prefix}.pointer"))
        return out


def decoder_input_feed(reader: MlpParams, start: Tensor, payloads: np.ndarray,
                       prev_indices: np.ndarray | None) -> Tensor:
    """Decoder input: learned start vector at step 1, then the embedding of
    the element pointed at in the previous step (target index under teacher
    forcing, argmax when free-running)."""
    bsz = payloads.shape[0]
    if prev_indices is None:
        return ad.add(tensor(np.zeros((bsz, start.shape[0]))), start)
    raw = payloads[np.arange(bsz), prev_indices]
    return mlp_embed(reader, tensor(raw))


def write_block(wp: WriteParams, reader: MlpParams, context: Tensor, mem: MemorySet,
                steps: int, mask_visited: bool = True,
                targets: np.ndarray | None = None) -> PointerTrace:
    """Decode `steps` pointer emissions conditioned on the context vector.

    With targets given, the decoder is teacher-forced along the target path
    and the trace carries per-example NLL; without targets it follows its own
    argmax. mask_visited pins already-emitted positions to (effectively)
    zero probability so the trace forms a partial permutation.
    """
    bsz, n, mem_dim = mem.memories.shape
    if n == 0:
        raise EmptySetError("cannot point into an empty set")
    if mask_visited and steps > n:
        raise ShapeError(f"cannot emit {steps} distinct indices from a set of {n}")
    if targets is not None:
        targets = np.asarray(targets)
        if targets.shape != (bsz, steps):
            raise ShapeError(f"targets shape {targets.shape} != {(bsz, steps)}")

    state = LstmState(ad.tanh(affine(wp.bridge_hidden, context)),
                      affine(wp.bridge_cell, context))
    inp = decoder_input_feed(reader, wp.start, mem.payloads, None)
    mask = np.zeros((bsz, n))
    indices = np.zeros((bsz, steps), dtype=np.int64)
    distributions = []
    per_example_nll = None

    for t in range(steps):
        state = lstm_step(wp.decoder, state, inp)
        query = state.hidden
        # glimpses read over the whole bank and widen the query; only the
        # pointer distribution is masked, so masked decoding follows the same
        # query trajectory the training objective saw
        for scorer in wp.glimpse_scorers:
            scores = scorer.score_batch(mem.memories, query)
            query = ad.concat(query, attend(mem.memories, scores))
        scores = wp.pointer_scorer.score_batch(mem.memories, query)
        if mask_visited:
            scores = ad.add(scores, tensor(mask))
        log_probs = ad.log_softmax(scores)
        distributions.append(ad.exp(log_probs))

        if targets is not None:
            chosen = targets[:, t]
        else:
            chosen = np.argmax(log_probs.data, axis=-1)
        indices[:, t] = chosen

        if targets is not None:
            step_nll = ad.scale(ad.pick(log_probs, chosen), -1.0)
            per_example_nll = step_nll if per_example_nll is None \
                else ad.add(per_example_nll, step_nll)

        if mask_visited:
            mask = mask.copy()
            mask[np.arange(bsz), chosen] = NEG_MASK
        if t + 1 < steps:
            inp = decoder_input_feed(reader, wp.start, mem.payloads, chosen)

    return PointerTrace(indices, distributions, wp.glimpses, per_example_nll)


# ---------------------------------------------------------------------------
# full models


class _SorterBase:
    """Shared surface for pointer-based sorters: loss(), decode(), parameters()."""

    reader: MlpParams
    write: WriteParams
    mask_visited: bool

    def context(self, values: np.ndarray) -> tuple[Tensor, MemorySet]:
        raise NotImplementedError

    def run(self, values: np.ndarray, targets: np.ndarray | None = None,
            mask_visited: bool | None = None) -> PointerTrace:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"values must be (batch, set_size), got {values.shape}")
        if mask_visited is None:
            mask_visited = self.mask_visited
        ctx, mem = self.context(values)
        return write_block(self.write, self.reader, ctx, mem,
                           steps=values.shape[1], mask_visited=mask_visited,
                           targets=targets)

    def loss(self, values: np.ndarray, targets: np.ndarray) -> Tensor:
        return self.run(values, targets).nll()

    def decode(self, values: np.ndarray) -> np.ndarray:
        """Greedy decoding; visited positions are always masked so the
        emitted indices form a permutation."""
        return self.run(values, mask_visited=True).indices

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError


class ReadProcessWriteModel(_SorterBase):
    """Permutation-invariant encoder + pointer decoder."""

    def __init__(self, rng: np.random.Generator, reader_sizes=(1, 32, 64),
                 hidden_dim: int = 64, process_steps: int = 5, glimpses: int = 1,
                 scorer_mode: str = "dot", state_mode: str = "stateful",
                 mask_visited: bool = False):
        mem_dim = reader_sizes[-1]
        self.reader = MlpParams.init(reader_sizes, rng)
        self.process_lstm = LstmParams.init(hidden_dim + mem_dim, hidden_dim, rng)
        self.process_scorer = make_scorer(scorer_mode, mem_dim, hidden_dim, rng)
        self.write = WriteParams.init(hidden_dim + mem_dim, mem_dim, mem_dim,
                                      glimpses, rng, scorer_mode)
        self.process_steps = process_steps
        self.glimpses = glimpses
        self.state_mode = state_mode
        self.mask_visited = mask_visited

    def context(self, values: np.ndarray):
        mem = read_block(values[:, :, None], self.reader)
        ps = process_block(mem, self.process_lstm, self.process_scorer,
                           self.process_steps, self.state_mode)
        return ps.combined, mem

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.reader.tensors("reader"))
        out.update(self.process_lstm.tensors("process.lstm"))
        out.update(self.process_scorer.tensors("process.scorer"))
        out.update(self.write.tensors("write"))
        return out


class PtrNetBaselineModel(_SorterBase):
    """Order-sensitive LSTM encoder + the same pointer decoder."""

    def __init__(self, rng: np.random.Generator, reader_sizes=(1, 32, 64),
                 hidden_dim: int = 64, glimpses: int = 1, scorer_mode: str = "dot",
                 mask_visited: bool = False):
        mem_dim = reader_sizes[-1]
        self.reader = MlpParams.init(reader_sizes, rng)
        self.encoder = LstmParams.init(mem_dim, hidden_dim, rng)
        self.write = WriteParams.init(2 * hidden_dim, mem_dim, mem_dim, glimpses,
                                      rng, scorer_mode)
        self.glimpses = glimpses
        self.mask_visited = mask_visited

    def context(self, values: np.ndarray):
        state, mem = encode_sequence_baseline(values[:, :, None], self.reader,
                                              self.encoder)
        return ad.concat(state.hidden, state.cell), mem

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.reader.tensors("reader"))
        out.update(self.encoder.tensors("encoder"))
        out.update(self.write.tensors("write"))
        return out


def build_sorter(model_id: str, rng: np.random.Generator, **kwargs) -> _SorterBase:
    if model_id == "read-process-write":
        return ReadProcessWriteModel(rng, **kwargs)
    if model_id == "ptr-net-baseline":
        kwargs.pop("process_steps", None)
        kwargs.pop("state_mode", None)
        return PtrNetBaselineModel(rng, **kwargs)
    raise ValueError(f"unknown model id {model_id!r}")
