"""Parameter-efficient transfer learning for sequential recommendation.

A self-contained laboratory: a dilated-convolution sequence model
pre-trained on interaction sequences, small bottleneck patches grafted
into the frozen network for downstream tasks, and an experiment bench
that reproduces the method's comparative claims on synthetic data.
"""

from .adapters import (
    FinetuneModel,
    HeadMode,
    InsertionMode,
    ParameterPartition,
    ParameterReport,
    count_parameters,
    patch_core,
    patch_forward,
)
from .backbone import BackboneConfig, ReservedIds, SequenceModel, pretrain_logits, receptive_field
from .checkpoint import LoadedCheckpoint, ModelConfig, load_checkpoint, partition_digest, save_checkpoint
from .config import RunConfig, load_config, parse_config_file
from .corpus import (
    SourceDataset,
    SyntheticSpec,
    TargetDataset,
    build_finetune_input,
    build_finetune_inputs,
    generate_synthetic,
    load_source,
    load_target,
    majority_vote_accuracy,
    save_source,
    save_target,
    split_target,
    take_fraction,
)
from .errors import (
    ConfigError,
    ContractViolation,
    DataError,
    ParseError,
    PeterRecError,
    ShapeError,
    VocabularyError,
)
from .evalbench import (
    AblationMode,
    ExperimentPlan,
    PretrainPlan,
    RunReport,
    accuracy,
    evaluate_accuracy,
    evaluate_ranking,
    hr_at_k,
    labelcs_baseline,
    mrr_at_k,
    pretrain,
    pretrain_validation_mrr,
    rank_in_candidates,
    run_experiment,
    sample_candidates,
)
from .objectives import (
    FinetuneBatch,
    LossKind,
    PretrainBatch,
    ar_batch,
    ar_loss,
    bpr_loss,
    finetune_loss,
    mask_sequence,
    masked_batch,
    masked_loss,
    sample_negatives,
)
from .optim import Adam, ParameterStore
from .rng import split, truncated_normal
from .tensor import Tape, Tensor

__version__ = "0.1.0"
