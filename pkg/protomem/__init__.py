# flake8: noqa

__title__ = 'protomem'
__author__ = 'protomem contributors'
__license__ = 'MIT'
__copyright__ = 'Copyright 2024-present protomem contributors'
__version__ = '1.0.0'


from .analysis import (AblationReport, BoundTrialReport, OracleCheck, bench_attention, memory_usage_profile,
                       run_ablation_grid, run_oracle_suite, verify_lipschitz_bound)
from .attention import (AttentionConfig, AttentionTrace, MultiHeadParams, SegmentEmbeddings, attention_mask,
                        augment_kv, memory_attention_score, multi_head_attention, scaled_dot_attention)
from .captioner import BOS_ID, EOS_ID, PAD_ID, Captioner, MemoryMode, ModelConfig, parameter_count
from .checkpoint import checkpoint_summary, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, write_config
from .dataio import DataReader, DataWriter
from .dataset import ToyDataset, ToySample, Vocabulary, collate, make_toy_dataset
from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, DistinctKeysError, NonFiniteError,
                     OrderingError, ProtoMemError, SizeError, TrainingAborted, VerificationError, VocabularyError)
from .events import (Event, EventDispatcher, PrototypesRefreshed, StepCompleted, TrainingAbortedEvent,
                     listener)
from .membank import BankEntry, MemoryBank, MemoryBankGrid
from .numerics import Tensor, backward, grad_check, no_grad
from .prototypes import (ClusterScope, PrototypeMemory, build_value_prototypes, compute_prototype_grid,
                         compute_prototypes, kmeans, knn_topk)
from .schedule import DecayMode, ScheduleConfig, lr_at
from .stats import EvalMetrics, MetricsWriter
from .trainkit import Adam, Trainer, TrainResult, TrainState, evaluate, train
