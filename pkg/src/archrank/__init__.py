"""Task-aware architecture ranking.

A performance/ranking predictor trained on a database of (architecture,
task, performance) records with pairwise ranking losses, plus gradient-
ascent architecture search for unseen tasks and a leave-one-out evaluation
harness.
"""

from .child import (
    AnalyticBackend,
    ArchEncoding,
    ArchSpace,
    FeatureModules,
    MixWeights,
    RealTrainBackend,
    build_and_train_child,
    mix_weights,
    surrogate_perf,
)
from .config import RunConfig, config_from_dict, load_config
from .evaluation import (
    EvalReport,
    leave_one_out,
    meta_feature_stability,
    pca_meta_features,
    pearson,
    spearman,
)
from .expdb import ExperimentDB, ExperimentRecord, batch_for_task, populate
from .losses import (
    LossConfig,
    ScoredPair,
    TrainConfig,
    closed_form_grads,
    filter_pairs,
    l2_loss,
    linear_rank_loss,
    quadratic_rank_loss,
    train_ranker,
)
from .numerics import (
    MomentumState,
    Tape,
    Var,
    forward_fc,
    sgd_momentum_step,
    softmax,
)
from .ranker import (
    RankerConfig,
    RankerWeights,
    meta_features,
    score,
    score_batch,
    task_embedding,
    task_embedding_distance,
)
from .search import SearchConfig, SearchResult, gradient_ascent, search, warm_starts
from .tasks import (
    TaskDataset,
    TaskFamilyConfig,
    generate_tasks,
    load_tasks,
    sample_batch,
    save_tasks,
)

__version__ = "0.1.0"
