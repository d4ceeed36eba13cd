"""Synthetic data generators and exact oracles.

Three desk-scale task families: sorting uniform floats, star-shaped joint
distributions (one head variable, conditionally independent children), and
first-order Markov gram corpora. Every generator is a pure function of
(spec, rng) so identical seeds reproduce identical datasets byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# sorting


@dataclass
class SortingInstance:
    values: np.ndarray   # N floats in [0, 1)
    target: np.ndarray   # stable argsort: values[target[k]] is the k-th smallest


def gen_sorting_instance(n: int, rng: np.random.Generator) -> SortingInstance:
    if n < 1:
        raise ValueError("need at least one value")
    values = rng.uniform(0.0, 1.0, size=n)
    return SortingInstance(values, np.argsort(values, kind="stable"))


def gen_sorting_batch(n: int, batch: int, rng: np.random.Generator,
                      ) -> tuple[np.ndarray, np.ndarray]:
    values = rng.uniform(0.0, 1.0, size=(batch, n))
    return values, np.argsort(values, axis=1, kind="stable")


def save_sorting_dataset(path, values: np.ndarray, header: dict | None = None):
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    with open(path, "w") as fh:
        if header:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
        for row in values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_sorting_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(tok) for tok in line.split()])
    if not rows:
        raise ValueError(f"no examples in {path}")
    values = np.array(rows)
    return values, np.argsort(values, axis=1, kind="stable")


# ---------------------------------------------------------------------------
# star-shaped joint distributions


@dataclass
class StarModel:
    """One head variable with a free marginal; every child is drawn from a
    per-child conditional table indexed by the head's value."""

    head_marginal: np.ndarray        # (V,)
    child_conditionals: np.ndarray   # (num_children, V, V): [child, head, value]

    @property
    def vocab(self) -> int:
        return self.head_marginal.shape[0]

    @property
    def num_children(self) -> int:
        return self.child_conditionals.shape[0]

    @property
    def num_variables(self) -> int:
        return self.num_children + 1

    def save(self, path):
        """Plain-text labeled tables; see README for the format."""
        with open(path, "w") as fh:
            fh.write("star-model v1\n")
            fh.write(f"vocab {self.vocab}\n")
            fh.write(f"children {self.num_children}\n")
            fh.write("head: " + " ".join(repr(float(p)) for p in self.head_marginal) + "\n")
            for c in range(self.num_children):
                for h in range(self.vocab):
                    row = " ".join(repr(float(p)) for p in self.child_conditionals[c, h])
                    fh.write(f"child {c} | head {h}: {row}\n")

    @classmethod
    def load(cls, path) -> "StarModel":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if not lines or lines[0] != "star-model v1":
            raise ValueError(f"{path} is not a star-model v1 file")
        vocab = int(lines[1].split()[1])
        children = int(lines[2].split()[1])
        head = np.array([float(x) for x in lines[3].split(": ")[1].split()])
        body = [ln for ln in lines[4:] if ln.strip()]
        if len(body) != children * vocab:
            raise ValueError(f"{path} is truncated or malformed")
        cond = np.zeros((children, vocab, vocab))
        for line in body:
            label, row = line.split(": ")
            parts = label.split()
            c, h = int(parts[1]), int(parts[4])
            cond[c, h] = [float(x) for x in row.split()]
        return cls(head, cond)


def gen_star_model(num_children: int, peakiness: float, rng: np.random.Generator,
                   vocab: int = 10) -> StarModel:
    """Draw every distribution from Dirichlet(peakiness * ones). Smaller
    peakiness means rows closer to one-hot."""
    if num_children < 1:
        raise ValueError("need at least one child variable")
    if peakiness <= 0:
        raise ValueError("peakiness must be positive")
    alpha = np.full(vocab, peakiness)
    head = rng.dirichlet(alpha)
    cond = rng.dirichlet(alpha, size=(num_children, vocab))
    return StarModel(head, cond)


def _draw_categorical(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of a (B, V) row-stochastic matrix."""
    cum = np.cumsum(rows, axis=1)
    u = rng.random((rows.shape[0], 1))
    return (cum < u).sum(axis=1).clip(max=rows.shape[1] - 1)


def sample_star_batch(model: StarModel, count: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Assignments as (count, 1 + num_children) int arrays: head first, then
    children in variable-id order."""
    heads = _draw_categorical(np.tile(model.head_marginal, (count, 1)), rng)
    out = np.zeros((count, model.num_variables), dtype=np.int64)
    out[:, 0] = heads
    for c in range(model.num_children):
        out[:, c + 1] = _draw_categorical(model.child_conditionals[c, heads], rng)
    return out


def sample_star(model: StarModel, rng: np.random.Generator) -> np.ndarray:
    return sample_star_batch(model, 1, rng)[0]


def star_exact_logprob(model: StarModel, assignment: np.ndarray) -> float:
    """Exact log-probability; -inf is reported explicitly for zero entries."""
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (model.num_variables,):
        raise ValueError(f"assignment must have {model.num_variables} variables")
    head, children = assignment[0], assignment[1:]
    with np.errstate(divide="ignore"):
        lp = np.log(model.head_marginal[head])
        lp += np.sum(np.log(model.child_conditionals[np.arange(model.num_children),
                                                     head, children]))
    return float(lp)


def star_exact_logprob_batch(model: StarModel, assignments: np.ndarray) -> np.ndarray:
    assignments = np.asarray(assignments, dtype=np.int64)
    heads = assignments[:, 0]
    with np.errstate(divide="ignore"):
        lp = np.log(model.head_marginal[heads])
        for c in range(model.num_children):
            lp = lp + np.log(model.child_conditionals[c, heads, assignments[:, c + 1]])
    return lp


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def star_entropy(model: StarModel) -> float:
    """Exact joint entropy in nats: the floor for any model's mean NLL."""
    h = _entropy(model.head_marginal)
    for c in range(model.num_children):
        for head, ph in enumerate(model.head_marginal):
            if ph > 0:
                h += ph * _entropy(model.child_conditionals[c, head])
    return h


def ordering_views(assignment: np.ndarray, mode: str,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Serialize an assignment (or batch) with the head shown first, last, or
    at a random position; children stay in variable-id order except in random
    mode."""
    assignment = np.asarray(assignment, dtype=np.int64)
    batch = np.atleast_2d(assignment)
    if mode == "head_first":
        out = batch
    elif mode == "head_last":
        out = np.concatenate([batch[:, 1:], batch[:, :1]], axis=1)
    elif mode == "random":
        if rng is None:
            raise ValueError("random mode needs an rng")
        perm = rng.permutation(batch.shape[1])
        out = batch[:, perm]
    else:
        raise ValueError(f"unknown ordering view {mode!r}")
    return out if assignment.ndim == 2 else out[0]


# ---------------------------------------------------------------------------
# Markov gram corpora


@dataclass
class MarkovCorpusSpec:
    vocab: int
    gram_len: int
    train_size: int
    valid_size: int
    init_probs: np.ndarray    # (V,)
    transitions: np.ndarray   # (V, V) row-stochastic

    def __post_init__(self):
        self.init_probs = np.asarray(self.init_probs, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        if self.init_probs.shape != (self.vocab,) or \
                self.transitions.shape != (self.vocab, self.vocab):
            raise ValueError("table shapes do not match vocab")
        if abs(self.init_probs.sum() - 1.0) > 1e-9 or \
                np.abs(self.transitions.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("probability tables must be row-stochastic")


def gen_markov_spec(vocab: int, gram_len: int, train_size: int, valid_size: int,
                    concentration: float, rng: np.random.Generator) -> MarkovCorpusSpec:
    alpha = np.full(vocab, concentration)
    return MarkovCorpusSpec(vocab, gram_len, train_size, valid_size,
                            rng.dirichlet(alpha), rng.dirichlet(alpha, size=vocab))


@dataclass
class MarkovCorpus:
    train: np.ndarray
    valid: np.ndarray
    conditional_entropy: float  # nats per symbol after the first
    gram_entropy: float         # nats per whole gram


def markov_entropies(spec: MarkovCorpusSpec) -> tuple[float, float]:
    marginal = spec.init_probs.copy()
    total = _entropy(marginal)
    cond_total = 0.0
    for _ in range(spec.gram_len - 1):
        step = sum(p * _entropy(row) for p, row in zip(marginal, spec.transitions) if p > 0)
        cond_total += step
        total += step
        marginal = marginal @ spec.transitions
    cond = cond_total / (spec.gram_len - 1) if spec.gram_len > 1 else 0.0
    return cond, total


def _sample_grams(spec: MarkovCorpusSpec, count: int,
                  rng: np.random.Generator) -> np.ndarray:
    out = np.zeros((count, spec.gram_len), dtype=np.int64)
    out[:, 0] = _draw_categorical(np.tile(spec.init_probs, (count, 1)), rng)
    for t in range(1, spec.gram_len):
        out[:, t] = _draw_categorical(spec.transitions[out[:, t - 1]], rng)
    return out


def gen_markov_corpus(spec: MarkovCorpusSpec, rng: np.random.Generator) -> MarkovCorpus:
    cond, total = markov_entropies(spec)
    return MarkovCorpus(_sample_grams(spec, spec.train_size, rng),
                        _sample_grams(spec, spec.valid_size, rng),
                        cond, total)
