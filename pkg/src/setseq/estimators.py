"""scikit-learn style estimators wrapping the training machinery.

These make the models compose with the wider ecosystem (clone, grid search,
pipelines): constructor args are stored verbatim, fit() learns from arrays,
and fitted state lives in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tape
from .optim import clip_gradients, make_optimizer
from .order_search import OrderSearchSchedule, order_search_train_step, serialize
from .seq_models import PositionedSetModel, SequenceModel
from .set_models import build_sorter


def check_2d(x, name: str, dtype=np.float64) -> np.ndarray:
    try:
        x = np.asarray(x, dtype=dtype)
    except (TypeError, ValueError) as e:
        raise ValueError(f"{name} must be a dense 2D array") from e
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise ValueError(f"{name} must be 2D and non-empty, got shape {x.shape}")
    return x


class PointerSorter(BaseEstimator):
    """Learns to emit the ascending-order index permutation of each input row.

    X is (n_samples, set_size) floats; y (optional) is (n_samples, set_size)
    index permutations, defaulting to the stable argsort of X.
    """

    def __init__(self, model="read-process-write", process_steps=5, glimpses=1,
                 hidden_dim=64, memory_dim=64, reader_hidden=32, learning_rate=0.01,
                 optimizer="sgd", clip_norm=5.0, batch_size=32, max_steps=2000,
                 mask_visited=True, seed=0):
        self.model = model
        self.mask_visited = mask_visited
        self.process_steps = process_steps
        self.glimpses = glimpses
        self.hidden_dim = hidden_dim
        self.memory_dim = memory_dim
        self.reader_hidden = reader_hidden
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.seed = seed

    def fit(self, X, y=None):
        X = check_2d(X, "X")
        if y is None:
            y = np.argsort(X, axis=1, kind="stable")
        y = check_2d(y, "y", dtype=np.int64)
        if y.shape != X.shape:
            raise ValueError(f"y shape {y.shape} must match X shape {X.shape}")
        kwargs = dict(reader_sizes=(1, self.reader_hidden, self.memory_dim),
                      hidden_dim=self.hidden_dim, glimpses=self.glimpses,
                      mask_visited=self.mask_visited)
        if self.model == "read-process-write":
            kwargs["process_steps"] = self.process_steps
        rng = np.random.default_rng([self.seed, 0])
        data_rng = np.random.default_rng([self.seed, 1])
        net = build_sorter(self.model, rng, **kwargs)
        opt = make_optimizer(self.optimizer, self.learning_rate)
        for _ in range(self.max_steps):
            rows = data_rng.integers(0, X.shape[0], size=self.batch_size)
            with Tape() as tape:
                loss = net.loss(X[rows], y[rows])
                tape.backward(loss)
            clip_gradients(net.parameters(), self.clip_norm)
            opt.step(net.parameters())
        self.net_ = net
        self.set_size_ = X.shape[1]
        return self

    def predict(self, X):
        if not hasattr(self, "net_"):
            raise RuntimeError("fit before predict")
        X = check_2d(X, "X")
        return self.net_.decode(X)

    def score(self, X, y=None):
        """Exact-match accuracy of the emitted permutations."""
        X = check_2d(X, "X")
        if y is None:
            y = np.argsort(X, axis=1, kind="stable")
        return float((self.predict(X) == np.asarray(y)).all(axis=1).mean())


class SequenceDensity(BaseEstimator):
    """Autoregressive density estimator over fixed-length symbol sequences."""

    def __init__(self, vocab_size=None, embed_dim=32, hidden_dim=64,
                 learning_rate=0.01, optimizer="sgd", clip_norm=5.0,
                 batch_size=32, max_steps=2000, seed=0):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.seed = seed

    def fit(self, X, y=None):
        X = check_2d(X, "X", dtype=np.int64)
        vocab = self.vocab_size if self.vocab_size is not None else int(X.max()) + 1
        net = SequenceModel(vocab, np.random.default_rng([self.seed, 0]),
                            embed_dim=self.embed_dim, hidden_dim=self.hidden_dim)
        opt = make_optimizer(self.optimizer, self.learning_rate)
        data_rng = np.random.default_rng([self.seed, 1])
        for _ in range(self.max_steps):
            rows = data_rng.integers(0, X.shape[0], size=self.batch_size)
            with Tape() as tape:
                loss = ad.scale(ad.sum_reduce(net.per_example_nll(X[rows])),
                                1.0 / self.batch_size)
                tape.backward(loss)
            clip_gradients(net.parameters(), self.clip_norm)
            opt.step(net.parameters())
        self.net_ = net
        self.vocab_ = vocab
        return self

    def score_samples(self, X):
        if not hasattr(self, "net_"):
            raise RuntimeError("fit before scoring")
        X = check_2d(X, "X", dtype=np.int64)
        return self.net_.log_prob(X)

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def perplexity(self, X):
        X = check_2d(X, "X", dtype=np.int64)
        return float(np.exp(-np.sum(self.score_samples(X)) / X.size))


class PositionedSequenceDensity(BaseEstimator):
    """Density estimator over sequences recast as positioned-token sets.

    ordering controls serialization during training: "natural", an explicit
    permutation tuple, or "search" (uniform-prior pretraining followed by
    ancestral-sampled ordering selection).
    """

    def __init__(self, vocab_size=None, ordering="natural", capacity=8,
                 embed_dim=32, hidden_dim=64, learning_rate=0.01, optimizer="sgd",
                 clip_norm=5.0, batch_size=32, max_steps=2000, pretrain_steps=1000,
                 seed=0):
        self.vocab_size = vocab_size
        self.ordering = ordering
        self.capacity = capacity
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.pretrain_steps = pretrain_steps
        self.seed = seed

    def _schedule(self, n: int) -> OrderSearchSchedule | None:
        if self.ordering == "search":
            return OrderSearchSchedule(pretrain_steps=self.pretrain_steps)
        return None

    def fit(self, X, y=None):
        X = check_2d(X, "X", dtype=np.int64)
        n = X.shape[1]
        if n > self.capacity:
            raise ValueError(f"sequence length {n} exceeds capacity {self.capacity}")
        vocab = self.vocab_size if self.vocab_size is not None else int(X.max()) + 1
        net = PositionedSetModel(vocab, np.random.default_rng([self.seed, 0]),
                                 capacity=self.capacity, embed_dim=self.embed_dim,
                                 hidden_dim=self.hidden_dim)
        opt = make_optimizer(self.optimizer, self.learning_rate)
        data_rng = np.random.default_rng([self.seed, 1])
        order_rng = np.random.default_rng([self.seed, 2])
        poss = np.tile(np.arange(1, n + 1), (self.batch_size, 1))
        if self.ordering == "natural":
            fixed = tuple(range(1, n + 1))
        elif self.ordering == "search":
            fixed = None
        else:
            fixed = tuple(self.ordering)
            if sorted(fixed) != list(range(1, n + 1)):
                raise ValueError(f"ordering {fixed} is not a permutation of 1..{n}")
        schedule = self._schedule(n)
        for step in range(self.max_steps):
            rows = data_rng.integers(0, X.shape[0], size=self.batch_size)
            batch = X[rows]
            if fixed is None:
                order_search_train_step(net, batch, poss, step, schedule, order_rng,
                                        opt, self.clip_norm)
            else:
                s, p = serialize(batch, poss, np.tile(fixed, (self.batch_size, 1)))
                with Tape() as tape:
                    loss = ad.scale(ad.sum_reduce(net.per_example_nll(s, p)),
                                    1.0 / self.batch_size)
                    tape.backward(loss)
                clip_gradients(net.parameters(), self.clip_norm)
                opt.step(net.parameters())
        self.net_ = net
        self.fixed_ordering_ = fixed
        self.n_ = n
        return self

    def score_samples(self, X):
        """Log-probability per example under the training-time serialization
        rule (the model's own greedy ordering when searching)."""
        if not hasattr(self, "net_"):
            raise RuntimeError("fit before scoring")
        from .order_search import greedy_ordering_ancestral

        X = check_2d(X, "X", dtype=np.int64)
        poss = np.tile(np.arange(1, self.n_ + 1), (X.shape[0], 1))
        if self.fixed_ordering_ is not None:
            orderings = np.tile(self.fixed_ordering_, (X.shape[0], 1))
        else:
            orderings, _ = greedy_ordering_ancestral(self.net_, X, poss)
        s, p = serialize(X, poss, orderings)
        return self.net_.log_prob(s, p)

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def perplexity(self, X):
        X = check_2d(X, "X", dtype=np.int64)
        return float(np.exp(-np.sum(self.score_samples(X)) / X.size))
