"""Training loop, evaluation, metrics, and experiment orchestration.

One run = one TrainConfig: build the task's data and model from the seed,
descend with SGD (gradient-norm clipping, learning rate halved on validation
plateau), log metrics as comma-separated (step, split, metric, value) rows,
and write a binary checkpoint at the end. Identical configs produce
identical metric logs byte for byte.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape
from .checkpoint import load_into, save_checkpoint
from .optim import clip_gradients, make_optimizer
from .order_search import (
    OrderSearchSchedule,
    OrderingLog,
    exhaustive_best_ordering,
    greedy_ordering_ancestral,
    order_search_train_step,
    serialize,
)
from .seq_models import PositionedSetModel, SequenceModel
from .set_models import build_sorter
from .tasks import (
    gen_markov_corpus,
    gen_markov_spec,
    gen_sorting_batch,
    gen_star_model,
    ordering_views,
    sample_star_batch,
    star_exact_logprob_batch,
)


class ConfigError(Exception):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    task: str = "sort"                    # sort | star | ngram
    model: str = "read-process-write"     # | ptr-net-baseline (sort only)
    n: int = 5
    process_steps: int = 5
    glimpses: int = 1
    reader_hidden: int = 32
    memory_dim: int = 64
    lstm_hidden: int = 64
    embed_dim: int = 32
    scorer: str = "dot"
    state_mode: str = "stateful"
    mask_visited: bool = False  # training loss; greedy eval decoding always masks
    learning_rate: float = 0.01
    clip_norm: float = 5.0
    batch_size: int = 32
    max_steps: int = 10000
    seed: int = 1
    optimizer: str = "sgd"
    val_every: int = 200
    val_size: int = 1000
    test_size: int = 10000
    plateau_steps: int = 4000  # halve lr after this many steps without improvement
    lr_floor: float = 1e-4
    # star task
    star_children: int = 9
    star_vocab: int = 10
    star_peakiness: float = 0.3
    star_train_samples: int = 500
    star_order: str = "head_first"        # | head_last
    # ngram task
    ngram_vocab: int = 10
    gram_len: int = 5
    position_capacity: int = 8
    corpus_train: int = 10000
    corpus_valid: int = 1000
    markov_concentration: float = 0.5
    fixed_ordering: tuple | None = None   # fixed serialization for train-ngram
    # ordering search (ngram task)
    search: bool = False
    pretrain_steps: int = 1000
    pretrain_orderings: int = 1
    selection: str = "sampled"
    candidates: tuple | None = None
    pretrain_mode: str = "mean-nll"

    def validate(self):
        if self.task not in ("sort", "star", "ngram"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.model not in ("read-process-write", "ptr-net-baseline"):
            raise ConfigError(f"unknown model {self.model!r}")
        positive = ["n", "batch_size", "val_every", "val_size", "test_size",
                    "reader_hidden", "memory_dim", "lstm_hidden", "embed_dim",
                    "star_children", "star_vocab", "star_train_samples",
                    "ngram_vocab", "gram_len", "position_capacity",
                    "corpus_train", "corpus_valid"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.process_steps < 0 or self.glimpses < 0 or self.max_steps < 0:
            raise ConfigError("process_steps, glimpses and max_steps must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.star_order not in ("head_first", "head_last"):
            raise ConfigError(f"unknown star_order {self.star_order!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.scorer not in ("dot", "additive"):
            raise ConfigError(f"unknown scorer {self.scorer!r}")
        if self.gram_len > self.position_capacity:
            raise ConfigError("gram_len exceeds position_capacity")
        if self.task == "sort" and self.scorer == "dot" \
                and self.memory_dim != self.lstm_hidden:
            raise ConfigError("dot scorer needs memory_dim == lstm_hidden "
                              "(use --scorer additive for unequal dims)")
        if self.star_peakiness <= 0 or self.markov_concentration <= 0:
            raise ConfigError("concentration parameters must be positive")
        if self.task == "sort" and self.mask_visited and self.n < 1:
            raise ConfigError("n must be >= 1")
        return self


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if value is None:
            continue
        if f.name in ("fixed_ordering",):
            value = ",".join(str(int(x)) for x in value)
        elif f.name == "candidates":
            value = ";".join(",".join(str(int(x)) for x in c) for c in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


class MetricsLog:
    """Append-only (step, split, metric, value) records, serialized as CSV."""

    def __init__(self):
        self.rows: list[tuple[int, str, str, float]] = []

    def add(self, step: int, split: str, metric: str, value: float):
        self.rows.append((int(step), split, metric, float(value)))

    def to_csv(self) -> str:
        return "".join(f"{s},{sp},{m},{v!r}\n" for s, sp, m, v in self.rows)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    def last(self, split: str, metric: str) -> float:
        for s, sp, m, v in reversed(self.rows):
            if sp == split and m == metric:
                return v
        raise KeyError(f"no {split}/{metric} rows")

    def best(self, split: str, metric: str, mode: str = "min") -> float:
        values = [v for _, sp, m, v in self.rows if sp == split and m == metric]
        if not values:
            raise KeyError(f"no {split}/{metric} rows")
        return min(values) if mode == "min" else max(values)


def read_metrics(path) -> list[tuple[int, str, str, float]]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            step, split, metric, value = line.split(",")
            rows.append((int(step), split, metric, float(value)))
    return rows


def summarize_metrics(rows) -> str:
    seen: dict[tuple[str, str], list[float]] = {}
    order = []
    for _, split, metric, value in rows:
        key = (split, metric)
        if key not in seen:
            seen[key] = []
            order.append(key)
        seen[key].append(value)
    lines = [f"{'split':8s} {'metric':24s} {'last':>14s} {'min':>14s} {'max':>14s} {'count':>6s}"]
    for split, metric in order:
        vals = seen[(split, metric)]
        lines.append(f"{split:8s} {metric:24s} {vals[-1]:14.6g} {min(vals):14.6g} "
                     f"{max(vals):14.6g} {len(vals):6d}")
    return "\n".join(lines)


class PlateauLr:
    """Halve the learning rate when the watched value stops improving for a
    span of training steps (cadence-independent)."""

    def __init__(self, optimizer, patience_steps: int, floor: float):
        self.optimizer = optimizer
        self.patience_steps = patience_steps
        self.floor = floor
        self.best = float("inf")
        self.anchor = 0

    def update(self, value: float, step: int) -> float:
        if value < self.best - 1e-9:
            self.best = value
            self.anchor = step
        elif self.patience_steps > 0 and step - self.anchor >= self.patience_steps:
            self.optimizer.lr = max(self.optimizer.lr * 0.5, self.floor)
            self.anchor = step
        return self.optimizer.lr


@dataclass
class TrainResult:
    config: TrainConfig
    metrics: MetricsLog
    final: dict
    checkpoint_path: str | None
    out_dir: str | None


def _param_norms(params) -> dict[str, float]:
    return {name: float(np.linalg.norm(p.data)) for name, p in sorted(params.items())}


def _grad_step(model, loss_fn, optimizer, clip_norm, step, batch_seed):
    """One forward/backward/update; aborts the run on non-finite loss."""
    params = model.parameters()
    try:
        with Tape() as tape:
            loss = loss_fn()
            tape.backward(loss)
    except NonFiniteError as e:
        raise TrainingAborted(
            f"non-finite loss at step {step}: {e}",
            {"step": step, "batch_seed": batch_seed,
             "parameter_norms": _param_norms(params)}) from e
    clip_gradients(params, clip_norm)
    optimizer.step(params)
    return loss.item()


# ---------------------------------------------------------------------------
# evaluation


def eval_sort_accuracy(model, values: np.ndarray, targets: np.ndarray,
                       chunk: int = 512) -> dict:
    """Exact-match fraction under greedy masked decoding, plus per-position
    accuracy as an auxiliary diagnostic."""
    exact = 0
    positions = 0
    total = values.shape[0]
    for lo in range(0, total, chunk):
        got = model.decode(values[lo:lo + chunk])
        want = targets[lo:lo + chunk]
        exact += int((got == want).all(axis=1).sum())
        positions += int((got == want).sum())
    return {"exact_acc": exact / total,
            "position_acc": positions / (total * values.shape[1])}


def eval_sequence_nll(model: SequenceModel, seqs: np.ndarray,
                      chunk: int = 512) -> float:
    total = 0.0
    for lo in range(0, seqs.shape[0], chunk):
        total += float(np.sum(-model.log_prob(seqs[lo:lo + chunk])))
    return total / seqs.shape[0]


def eval_ngram_fixed(model: PositionedSetModel, grams: np.ndarray,
                     ordering, chunk: int = 512) -> dict:
    bsz, n = grams.shape
    poss = np.tile(np.arange(1, n + 1), (bsz, 1))
    orderings = np.tile(np.asarray(ordering, dtype=np.int64), (bsz, 1))
    s, p = serialize(grams, poss, orderings)
    total = 0.0
    for lo in range(0, bsz, chunk):
        total += float(np.sum(-model.log_prob(s[lo:lo + chunk], p[lo:lo + chunk])))
    return {"nll": total / bsz, "perplexity": float(np.exp(total / (bsz * n)))}


def eval_ngram_search(model: PositionedSetModel, grams: np.ndarray,
                      schedule: OrderSearchSchedule, chunk: int = 512) -> dict:
    """Score each example under the model's preferred ordering: exhaustive max
    over an explicit candidate list, greedy ancestral otherwise."""
    bsz, n = grams.shape
    poss = np.tile(np.arange(1, n + 1), (bsz, 1))
    total = 0.0
    if schedule.candidates is not None:
        for b in range(bsz):
            _, lp = exhaustive_best_ordering(model, grams[b], poss[b], schedule)
            total -= lp
    else:
        for lo in range(0, bsz, chunk):
            orderings, _ = greedy_ordering_ancestral(model, grams[lo:lo + chunk],
                                                     poss[lo:lo + chunk])
            s, p = serialize(grams[lo:lo + chunk], poss[lo:lo + chunk], orderings)
            total += float(np.sum(-model.log_prob(s, p)))
    return {"nll": total / bsz, "perplexity": float(np.exp(total / (bsz * n)))}


# ---------------------------------------------------------------------------
# task runners


def _run_dir_files(out_dir, config):
    if out_dir is None:
        return None, None, None
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(config_to_text(config))
    return (os.path.join(out_dir, "metrics.csv"),
            os.path.join(out_dir, "model.ckpt"),
            os.path.join(out_dir, "orderings.tsv"))


def _train_sort(config: TrainConfig, out_dir) -> TrainResult:
    metrics_path, ckpt_path, _ = _run_dir_files(out_dir, config)
    init_rng = np.random.default_rng([config.seed, 0])
    data_rng = np.random.default_rng([config.seed, 1])
    val_values, val_targets = gen_sorting_batch(config.n, config.val_size,
                                                np.random.default_rng([config.seed, 2]))
    test_values, test_targets = gen_sorting_batch(config.n, config.test_size,
                                                  np.random.default_rng([config.seed, 3]))
    kwargs = dict(reader_sizes=(1, config.reader_hidden, config.memory_dim),
                  hidden_dim=config.lstm_hidden, glimpses=config.glimpses,
                  scorer_mode=config.scorer, mask_visited=config.mask_visited)
    if config.model == "read-process-write":
        kwargs.update(process_steps=config.process_steps, state_mode=config.state_mode)
    model = build_sorter(config.model, init_rng, **kwargs)

    optimizer = make_optimizer(config.optimizer, config.learning_rate)
    plateau = PlateauLr(optimizer, config.plateau_steps, config.lr_floor)
    log = MetricsLog()

    for step in range(1, config.max_steps + 1):
        values, targets = gen_sorting_batch(config.n, config.batch_size, data_rng)
        loss = _grad_step(model, lambda: model.loss(values, targets),
                          optimizer, config.clip_norm, step, config.seed)
        if step % config.val_every == 0 or step == config.max_steps:
            log.add(step, "train", "loss", loss)
            acc = eval_sort_accuracy(model, val_values, val_targets)
            log.add(step, "valid", "exact_acc", acc["exact_acc"])
            log.add(step, "valid", "position_acc", acc["position_acc"])
            log.add(step, "valid", "lr", plateau.update(-acc["exact_acc"], step))

    final = eval_sort_accuracy(model, test_values, test_targets)
    log.add(config.max_steps, "test", "exact_acc", final["exact_acc"])
    log.add(config.max_steps, "test", "position_acc", final["position_acc"])
    if out_dir is not None:
        log.save(metrics_path)
        save_checkpoint(ckpt_path, model.parameters())
    return TrainResult(config, log, final, ckpt_path, out_dir)


def _train_star(config: TrainConfig, out_dir) -> TrainResult:
    metrics_path, ckpt_path, _ = _run_dir_files(out_dir, config)
    star = gen_star_model(config.star_children, config.star_peakiness,
                          np.random.default_rng([config.seed, 10]),
                          vocab=config.star_vocab)
    train_asg = sample_star_batch(star, config.star_train_samples,
                                  np.random.default_rng([config.seed, 11]))
    valid_asg = sample_star_batch(star, config.val_size,
                                  np.random.default_rng([config.seed, 12]))
    train_seqs = ordering_views(train_asg, config.star_order)
    valid_seqs = ordering_views(valid_asg, config.star_order)
    oracle_lp = star_exact_logprob_batch(star, valid_asg)
    oracle_nll = float(-oracle_lp.mean())
    gap_sigma = float(np.std(oracle_lp) / np.sqrt(len(oracle_lp)))

    model = SequenceModel(config.star_vocab, np.random.default_rng([config.seed, 13]),
                          embed_dim=config.embed_dim, hidden_dim=config.lstm_hidden)
    optimizer = make_optimizer(config.optimizer, config.learning_rate)
    plateau = PlateauLr(optimizer, config.plateau_steps, config.lr_floor)
    data_rng = np.random.default_rng([config.seed, 14])
    log = MetricsLog()
    log.add(0, "valid", "oracle_nll", oracle_nll)
    log.add(0, "valid", "oracle_sigma", gap_sigma)

    for step in range(1, config.max_steps + 1):
        rows = data_rng.integers(0, len(train_seqs), size=config.batch_size)
        batch = train_seqs[rows]
        loss = _grad_step(model,
                          lambda: ad.scale(ad.sum_reduce(model.per_example_nll(batch)),
                                           1.0 / config.batch_size),
                          optimizer, config.clip_norm, step, config.seed)
        if step % config.val_every == 0 or step == config.max_steps:
            log.add(step, "train", "loss", loss)
            nll = eval_sequence_nll(model, valid_seqs)
            log.add(step, "valid", "nll", nll)
            log.add(step, "valid", "oracle_gap", nll - oracle_nll)
            log.add(step, "valid", "lr", plateau.update(nll, step))

    final = {"nll": log.last("valid", "nll"),
             "best_nll": log.best("valid", "nll", "min"),
             "oracle_nll": oracle_nll,
             "oracle_sigma": gap_sigma,
             "gap": log.best("valid", "nll", "min") - oracle_nll}
    if out_dir is not None:
        log.save(metrics_path)
        save_checkpoint(ckpt_path, model.parameters())
    return TrainResult(config, log, final, ckpt_path, out_dir)


def _train_ngram(config: TrainConfig, out_dir) -> TrainResult:
    metrics_path, ckpt_path, orderings_path = _run_dir_files(out_dir, config)
    spec = gen_markov_spec(config.ngram_vocab, config.gram_len, config.corpus_train,
                           config.corpus_valid, config.markov_concentration,
                           np.random.default_rng([config.seed, 20]))
    corpus = gen_markov_corpus(spec, np.random.default_rng([config.seed, 21]))
    model = PositionedSetModel(config.ngram_vocab,
                               np.random.default_rng([config.seed, 22]),
                               capacity=config.position_capacity,
                               embed_dim=config.embed_dim,
                               hidden_dim=config.lstm_hidden)
    optimizer = make_optimizer(config.optimizer, config.learning_rate)
    plateau = PlateauLr(optimizer, config.plateau_steps, config.lr_floor)
    data_rng = np.random.default_rng([config.seed, 23])
    order_rng = np.random.default_rng([config.seed, 24])
    log = MetricsLog()
    log.add(0, "valid", "entropy_floor_perplexity",
            float(np.exp(corpus.gram_entropy / config.gram_len)))

    schedule = None
    fixed = None
    if config.search:
        schedule = OrderSearchSchedule(
            pretrain_steps=config.pretrain_steps,
            pretrain_orderings=config.pretrain_orderings,
            selection=config.selection,
            candidates=config.candidates,
            pretrain_mode=config.pretrain_mode)
    else:
        fixed = tuple(config.fixed_ordering or range(1, config.gram_len + 1))
        if sorted(fixed) != list(range(1, config.gram_len + 1)):
            raise ConfigError(f"fixed_ordering {fixed} is not a permutation")

    nat_poss = np.tile(np.arange(1, config.gram_len + 1), (config.batch_size, 1))
    ordering_log = OrderingLog(orderings_path) if (out_dir and config.search) else None
    recent: list[tuple] = []

    for step in range(1, config.max_steps + 1):
        rows = data_rng.integers(0, len(corpus.train), size=config.batch_size)
        batch = corpus.train[rows]
        if config.search:
            try:
                loss, chosen, per_ex, sel_info = order_search_train_step(
                    model, batch, nat_poss, step - 1, schedule, order_rng,
                    optimizer, config.clip_norm)
            except NonFiniteError as e:
                raise TrainingAborted(
                    f"non-finite loss at step {step}: {e}",
                    {"step": step, "batch_seed": config.seed,
                     "parameter_norms": _param_norms(model.parameters())}) from e
            if per_ex.size:
                recent.extend(tuple(r) for r in chosen)
                recent = recent[-2000:]
                if ordering_log is not None:
                    for b in range(len(rows)):
                        ordering_log.record(step, int(rows[b]), chosen[b],
                                            float(per_ex[b]))
        else:
            orderings = np.tile(np.array(fixed, dtype=np.int64),
                                (config.batch_size, 1))
            s, p = serialize(batch, nat_poss, orderings)
            loss = _grad_step(model,
                              lambda: ad.scale(ad.sum_reduce(model.per_example_nll(s, p)),
                                               1.0 / config.batch_size),
                              optimizer, config.clip_norm, step, config.seed)
        if step % config.val_every == 0 or step == config.max_steps:
            log.add(step, "train", "loss", loss)
            if config.search:
                stats = eval_ngram_search(model, corpus.valid, schedule)
                if recent:
                    top = max(set(recent), key=recent.count)
                    log.add(step, "train", "top_order_share",
                            recent.count(top) / len(recent))
                if "sample_logq" in sel_info:
                    log.add(step, "train", "order_sample_logq",
                            float(np.mean(sel_info["sample_logq"])))
                    log.add(step, "train", "order_chosen_logp",
                            float(np.mean(sel_info["chosen_logp"])))
            else:
                stats = eval_ngram_fixed(model, corpus.valid, fixed)
            log.add(step, "valid", "nll", stats["nll"])
            log.add(step, "valid", "perplexity", stats["perplexity"])
            log.add(step, "valid", "lr", plateau.update(stats["nll"], step))

    final = {"nll": log.last("valid", "nll"),
             "perplexity": log.last("valid", "perplexity"),
             "best_perplexity": log.best("valid", "perplexity", "min"),
             "entropy_floor_perplexity": float(np.exp(corpus.gram_entropy /
                                                      config.gram_len))}
    if config.search and recent:
        top = max(set(recent), key=recent.count)
        final["top_order"] = top
        final["top_order_share"] = recent.count(top) / len(recent)
    if ordering_log is not None:
        ordering_log.close()
    if out_dir is not None:
        log.save(metrics_path)
        save_checkpoint(ckpt_path, model.parameters())
    return TrainResult(config, log, final, ckpt_path, out_dir)


def train(config: TrainConfig, out_dir: str | None = None) -> TrainResult:
    config.validate()
    if config.task == "sort":
        return _train_sort(config, out_dir)
    if config.task == "star":
        return _train_star(config, out_dir)
    return _train_ngram(config, out_dir)


def build_model_for_config(config: TrainConfig):
    """Fresh model with the same architecture/seed a run would use; the
    checkpoint loader then restores trained values."""
    if config.task == "sort":
        kwargs = dict(reader_sizes=(1, config.reader_hidden, config.memory_dim),
                      hidden_dim=config.lstm_hidden, glimpses=config.glimpses,
                      scorer_mode=config.scorer, mask_visited=config.mask_visited)
        if config.model == "read-process-write":
            kwargs.update(process_steps=config.process_steps,
                          state_mode=config.state_mode)
        return build_sorter(config.model, np.random.default_rng([config.seed, 0]),
                            **kwargs)
    if config.task == "star":
        return SequenceModel(config.star_vocab,
                             np.random.default_rng([config.seed, 13]),
                             embed_dim=config.embed_dim,
                             hidden_dim=config.lstm_hidden)
    return PositionedSetModel(config.ngram_vocab,
                              np.random.default_rng([config.seed, 22]),
                              capacity=config.position_capacity,
                              embed_dim=config.embed_dim,
                              hidden_dim=config.lstm_hidden)


def evaluate_checkpoint(config: TrainConfig, checkpoint_path: str) -> dict:
    """Rebuild the model, restore parameters, and rerun the task's evaluation
    on freshly generated seed-determined data."""
    config.validate()
    model = build_model_for_config(config)
    load_into(checkpoint_path, model.parameters())
    if config.task == "sort":
        values, targets = gen_sorting_batch(config.n, config.test_size,
                                            np.random.default_rng([config.seed, 3]))
        return eval_sort_accuracy(model, values, targets)
    if config.task == "star":
        star = gen_star_model(config.star_children, config.star_peakiness,
                              np.random.default_rng([config.seed, 10]),
                              vocab=config.star_vocab)
        valid = sample_star_batch(star, config.val_size,
                                  np.random.default_rng([config.seed, 12]))
        seqs = ordering_views(valid, config.star_order)
        nll = eval_sequence_nll(model, seqs)
        oracle = float(-star_exact_logprob_batch(star, valid).mean())
        return {"nll": nll, "oracle_nll": oracle, "gap": nll - oracle}
    spec = gen_markov_spec(config.ngram_vocab, config.gram_len, config.corpus_train,
                           config.corpus_valid, config.markov_concentration,
                           np.random.default_rng([config.seed, 20]))
    corpus = gen_markov_corpus(spec, np.random.default_rng([config.seed, 21]))
    if config.search:
        schedule = OrderSearchSchedule(pretrain_steps=config.pretrain_steps,
                                       pretrain_orderings=config.pretrain_orderings,
                                       selection=config.selection,
                                       candidates=config.candidates,
                                       pretrain_mode=config.pretrain_mode)
        return eval_ngram_search(model, corpus.valid, schedule)
    fixed = tuple(config.fixed_ordering or range(1, config.gram_len + 1))
    return eval_ngram_fixed(model, corpus.valid, fixed)
