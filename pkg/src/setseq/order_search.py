"""Search over output orderings while training.

A serialized set can be emitted under any of n! orderings. Training
maximizes, per example, the log-probability of the best (or a sampled)
ordering. Naive greedy maximization collapses onto whatever ordering the
initial parameters happen to prefer, so two escape hatches are provided:
a uniform-ordering pretraining phase, and ancestral sampling that draws an
ordering proportionally to the model's own step-wise preferences in a
single decoder pass (instead of scoring all n! serializations).
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .optim import clip_gradients

log = logging.getLogger(__name__)

MAX_EXHAUSTIVE = 6  # 6! = 720 serializations per example is the ceiling


@dataclass
class OrderSearchSchedule:
    """How orderings are chosen over the course of training.

    For the first pretrain_steps steps the loss averages over orderings drawn
    uniformly (pretrain_orderings per example, or the whole candidate list
    when it is no larger). Afterwards one ordering per example is chosen by
    `selection`: "sampled" (ancestral) or "exhaustive" (greedy max).
    candidates=None admits all n! orderings.
    """

    pretrain_steps: int = 1000
    pretrain_orderings: int = 1
    selection: str = "sampled"
    candidates: tuple[tuple[int, ...], ...] | None = None
    pretrain_mode: str = "mean-nll"  # | "logsumexp"

    def __post_init__(self):
        if self.pretrain_steps < 0:
            raise ValueError("pretrain_steps must be >= 0")
        if self.pretrain_orderings < 1:
            raise ValueError("pretrain_orderings must be >= 1")
        if self.selection not in ("sampled", "exhaustive"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.pretrain_mode not in ("mean-nll", "logsumexp"):
            raise ValueError(f"unknown pretrain_mode {self.pretrain_mode!r}")
        if self.candidates is not None:
            self.candidates = tuple(tuple(int(p) for p in c) for c in self.candidates)


def candidate_list(n: int, schedule: OrderSearchSchedule | None) -> list[tuple[int, ...]]:
    """Explicit candidate orderings, lexicographically sorted."""
    if schedule is not None and schedule.candidates is not None:
        cands = sorted(set(schedule.candidates))
        for c in cands:
            if sorted(c) != list(range(1, n + 1)):
                raise ValueError(f"candidate {c} is not a permutation of 1..{n}")
        return cands
    if n > MAX_EXHAUSTIVE:
        raise ValueError(f"cannot enumerate {n}! orderings; restrict candidates")
    return [tuple(p) for p in itertools.permutations(range(1, n + 1))]


def serialize(syms_nat: np.ndarray, poss_nat: np.ndarray,
              orderings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reorder (B, n) natural-order token arrays so that example b emits the
    token with original position orderings[b, k] at step k."""
    bsz, n = syms_nat.shape
    orderings = np.asarray(orderings, dtype=np.int64)
    if orderings.shape != (bsz, n):
        raise ValueError(f"orderings shape {orderings.shape} != {(bsz, n)}")
    # natural-order rows hold positions 1..n, so position p lives at column p-1
    if not np.array_equal(poss_nat, np.tile(np.arange(1, n + 1), (bsz, 1))):
        raise ValueError("serialize expects natural-order token arrays")
    cols = orderings - 1
    rows = np.arange(bsz)[:, None]
    return syms_nat[rows, cols], poss_nat[rows, cols]


def exhaustive_best_ordering(model, syms: np.ndarray, poss: np.ndarray,
                             schedule: OrderSearchSchedule | None = None,
                             ) -> tuple[tuple[int, ...], float]:
    """Score every candidate serialization of one example; return the argmax
    log-probability ordering, ties resolved to the lexicographically smallest."""
    syms = np.asarray(syms, dtype=np.int64).reshape(1, -1)
    poss = np.asarray(poss, dtype=np.int64).reshape(1, -1)
    n = syms.shape[1]
    best_pi, best_lp = None, -math.inf
    for pi in candidate_list(n, schedule):
        s, p = serialize(syms, poss, np.array([pi]))
        lp = float(model.log_prob(s, p)[0])
        if lp > best_lp:
            best_pi, best_lp = pi, lp
    return best_pi, best_lp


def _greedy_or_sampled_orderings(model, syms: np.ndarray, poss: np.ndarray,
                                 rng: np.random.Generator | None,
                                 ) -> tuple[np.ndarray, dict]:
    """One incremental decoder pass per example, choosing the next token among
    the remaining ones either by sampling proportionally to the model's current
    predictive probability (rng given) or greedily (rng None)."""
    bsz, n = syms.shape
    st = model.begin(bsz)
    remaining = np.ones((bsz, n), dtype=bool)
    orderings = np.zeros((bsz, n), dtype=np.int64)
    sample_logq = np.zeros(bsz)
    chosen_logp = np.zeros(bsz)
    for t in range(n):
        st, sym_logp = model.step(st)
        rows, cols = np.nonzero(remaining)
        cand_sym = syms[rows, cols]
        cand_pos = poss[rows, cols]
        pos_lp = model.position_logp(st, rows, cand_sym)
        weights = sym_logp[rows, cand_sym] + pos_lp[np.arange(rows.size), cand_pos - 1]
        wmat = np.full((bsz, n), -np.inf)
        wmat[rows, cols] = weights
        shifted = wmat - wmat.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        totals = probs.sum(axis=1, keepdims=True)
        bad = ~np.isfinite(totals[:, 0]) | (totals[:, 0] <= 0.0)
        if bad.any():
            log.warning("ancestral sampling underflow in %d example(s); "
                        "falling back to uniform over remaining tokens", int(bad.sum()))
            probs[bad] = remaining[bad].astype(float)
            totals = probs.sum(axis=1, keepdims=True)
        probs /= totals
        if rng is None:
            pickcol = np.argmax(probs, axis=1)
        else:
            cum = np.cumsum(probs, axis=1)
            draws = rng.random((bsz, 1))
            pickcol = (cum < draws).sum(axis=1).clip(max=n - 1)
        orderings[:, t] = poss[np.arange(bsz), pickcol]
        sample_logq += np.log(probs[np.arange(bsz), pickcol])
        chosen_logp += wmat[np.arange(bsz), pickcol]
        remaining[np.arange(bsz), pickcol] = False
        st = model.feed(st, syms[np.arange(bsz), pickcol], poss[np.arange(bsz), pickcol])
    model.finish_pass(bsz)
    return orderings, {"sample_logq": sample_logq, "chosen_logp": chosen_logp}


def sample_ordering_ancestral(model, syms: np.ndarray, poss: np.ndarray,
                              rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Draw one ordering per example in a single decoder pass.

    The returned diagnostics carry both the sampling log-probability and the
    realized token log-probability so the gap between "sampled proportionally
    to p" and the actual sequence probability stays measurable.
    """
    syms = np.atleast_2d(np.asarray(syms, dtype=np.int64))
    poss = np.atleast_2d(np.asarray(poss, dtype=np.int64))
    return _greedy_or_sampled_orderings(model, syms, poss, rng)


def greedy_ordering_ancestral(model, syms: np.ndarray, poss: np.ndarray,
                              ) -> tuple[np.ndarray, dict]:
    """Deterministic variant: always take the locally most likely next token."""
    syms = np.atleast_2d(np.asarray(syms, dtype=np.int64))
    poss = np.atleast_2d(np.asarray(poss, dtype=np.int64))
    return _greedy_or_sampled_orderings(model, syms, poss, None)


def draw_uniform_orderings(n: int, batch: int, rng: np.random.Generator,
                           schedule: OrderSearchSchedule | None) -> np.ndarray:
    if schedule is not None and schedule.candidates is not None:
        cands = candidate_list(n, schedule)
        idx = rng.integers(0, len(cands), size=batch)
        return np.array([cands[i] for i in idx], dtype=np.int64)
    return np.array([rng.permutation(n) + 1 for _ in range(batch)], dtype=np.int64)


def pretrain_loss(model, syms: np.ndarray, poss: np.ndarray,
                  schedule: OrderSearchSchedule, rng: np.random.Generator,
                  ) -> tuple[Tensor, np.ndarray]:
    """Loss under a uniform prior over orderings.

    Averages per-ordering NLL over pretrain_orderings uniform draws, or over
    the whole candidate list when it is no larger than that. "logsumexp" mode
    instead scores the uniform *mixture*: -log mean_k p(Y_pi_k).
    Returns (loss, the orderings used, stacked (K*B, n)).
    """
    bsz, n = syms.shape
    k = schedule.pretrain_orderings
    full = None
    if schedule.candidates is not None or n <= MAX_EXHAUSTIVE:
        maybe = candidate_list(n, schedule)
        if len(maybe) <= k:
            full = maybe
    if full is not None:
        batches = [np.tile(np.array(c, dtype=np.int64), (bsz, 1)) for c in full]
    else:
        batches = [draw_uniform_orderings(n, bsz, rng, schedule) for _ in range(k)]

    per_ordering = []
    for orderings in batches:
        s, p = serialize(syms, poss, orderings)
        per_ordering.append(model.per_example_nll(s, p))

    if schedule.pretrain_mode == "mean-nll":
        total = per_ordering[0]
        for nll in per_ordering[1:]:
            total = ad.add(total, nll)
        loss = ad.scale(ad.sum_reduce(total), 1.0 / (len(per_ordering) * bsz))
    else:
        # -log mean_k p_k; shift by the per-example best NLL (a constant) so the
        # exponentials stay in [0, 1]
        base = np.stack([nll.data for nll in per_ordering]).min(axis=0)
        mix = None
        for nll in per_ordering:
            term = ad.exp(ad.scale(ad.add(nll, ad.tensor(-base)), -1.0))
            mix = term if mix is None else ad.add(mix, term)
        log_mix = ad.log(ad.scale(mix, 1.0 / len(per_ordering)))
        loss = ad.scale(ad.sum_reduce(ad.add(ad.tensor(base), ad.scale(log_mix, -1.0))),
                        1.0 / bsz)
    return loss, np.vstack(batches)


def _candidate_logprobs(model, syms, poss, cands) -> np.ndarray:
    """(num_candidates, B) log-probabilities of each whole-batch serialization."""
    out = np.zeros((len(cands), syms.shape[0]))
    for i, pi in enumerate(cands):
        s, p = serialize(syms, poss, np.tile(pi, (syms.shape[0], 1)))
        out[i] = model.log_prob(s, p)
    return out


def select_orderings(model, syms: np.ndarray, poss: np.ndarray,
                     schedule: OrderSearchSchedule, rng: np.random.Generator,
                     ) -> tuple[np.ndarray, dict]:
    """Post-pretraining per-example ordering choice (evaluation mode).

    With an explicit candidate list the candidates are scored outright (one
    pass each) and sampled proportionally to p(Y_pi) or arg-maxed; without a
    restriction, sampling is ancestral (one pass total) and maximization is
    exhaustive over all n!.
    """
    if schedule.candidates is not None:
        cands = candidate_list(syms.shape[1], schedule)
        lps = _candidate_logprobs(model, syms, poss, cands)
        if schedule.selection == "exhaustive":
            picks = np.argmax(lps, axis=0)  # ties: lexicographically smallest
        else:
            shifted = np.exp(lps - lps.max(axis=0, keepdims=True))
            probs = shifted / shifted.sum(axis=0, keepdims=True)
            cum = np.cumsum(probs, axis=0)
            picks = (cum < rng.random((1, syms.shape[0]))).sum(axis=0)
            picks = picks.clip(max=len(cands) - 1)
        orderings = np.array([cands[i] for i in picks], dtype=np.int64)
        return orderings, {"chosen_logp": lps[picks, np.arange(syms.shape[0])]}
    if schedule.selection == "sampled":
        return sample_ordering_ancestral(model, syms, poss, rng)
    orderings = np.zeros_like(syms)
    for b in range(syms.shape[0]):
        pi, _ = exhaustive_best_ordering(model, syms[b], poss[b], schedule)
        orderings[b] = pi
    return orderings, {}


def order_search_train_step(model, syms: np.ndarray, poss: np.ndarray,
                            step_index: int, schedule: OrderSearchSchedule,
                            rng: np.random.Generator, optimizer, clip_norm: float = 0.0,
                            ) -> tuple[float, np.ndarray, np.ndarray]:
    """One training step: uniform-prior loss while pretraining, otherwise pick
    an ordering per example and descend on its NLL.

    Returns (loss value, orderings used (B, n) or (K*B, n) during pretraining,
    per-example NLL under the chosen orderings, and selection diagnostics --
    for ancestral sampling these carry both the sampling log-probability and
    the realized token log-probability, so any gap between "sampled
    proportionally to p" and the true sequence probability stays measurable).
    """
    params = model.parameters()
    if step_index < schedule.pretrain_steps:
        with Tape() as tape:
            loss, used = pretrain_loss(model, syms, poss, schedule, rng)
            tape.backward(loss)
        clip_gradients(params, clip_norm)
        optimizer.step(params)
        return loss.item(), used, np.array([]), {}

    chosen, info = select_orderings(model, syms, poss, schedule, rng)
    s, p = serialize(syms, poss, chosen)
    with Tape() as tape:
        per_example = model.per_example_nll(s, p)
        loss = ad.scale(ad.sum_reduce(per_example), 1.0 / syms.shape[0])
        tape.backward(loss)
    clip_gradients(params, clip_norm)
    optimizer.step(params)
    return loss.item(), chosen, per_example.data, info


class OrderingLog:
    """Append-only record of chosen orderings: one tab-separated line per
    example with the ordering itself comma-separated."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a")

    def record(self, step: int, example_id: int, ordering, nll: float):
        pi = ",".join(str(int(p)) for p in ordering)
        self._fh.write(f"{step}\t{example_id}\t{pi}\t{nll:.6f}\n")

    def flush(self):
        self._fh.flush()

    def close(self):
        self._fh.close()
