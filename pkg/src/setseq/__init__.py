"""Set encoders, pointer decoders, and output-order search for small sequence models."""

from .autodiff import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    finite_diff_check,
    finite_diff_check_params,
    param,
    tensor,
)
from .estimators import PointerSorter, PositionedSequenceDensity, SequenceDensity
from .harness import TrainConfig, TrainResult, train
from .order_search import (
    OrderSearchSchedule,
    exhaustive_best_ordering,
    pretrain_loss,
    sample_ordering_ancestral,
)
from .seq_models import (
    PositionedSetModel,
    PositionedToken,
    SequenceModel,
    apply_ordering,
    chain_rule_nll,
    sequence_to_positioned_set,
)
from .set_models import (
    MemorySet,
    PointerTrace,
    ProcessState,
    PtrNetBaselineModel,
    ReadProcessWriteModel,
    process_block,
    read_block,
    write_block,
)
from .tasks import (
    StarModel,
    gen_markov_corpus,
    gen_sorting_instance,
    gen_star_model,
    sample_star,
    star_exact_logprob,
)

__version__ = "0.1.0"

__all__ = [
    "MemorySet", "NonFiniteError", "OrderSearchSchedule", "PointerSorter",
    "PointerTrace", "PositionedSequenceDensity", "PositionedSetModel",
    "PositionedToken", "ProcessState", "PtrNetBaselineModel",
    "ReadProcessWriteModel", "SequenceDensity", "SequenceModel", "ShapeError",
    "StarModel", "Tape", "TapeError", "Tensor", "TrainConfig", "TrainResult",
    "apply_ordering", "chain_rule_nll", "exhaustive_best_ordering",
    "finite_diff_check", "finite_diff_check_params", "gen_markov_corpus",
    "gen_sorting_instance", "gen_star_model", "param", "pretrain_loss",
    "process_block", "read_block", "sample_ordering_ancestral", "sample_star",
    "sequence_to_positioned_set", "star_exact_logprob", "tensor", "train",
    "write_block",
]
