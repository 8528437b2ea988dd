"""Posterior sampling, sparse substructure selection, and CSR inference for
feed-forward networks."""

from .errors import (
    ConfigError,
    ConsistencyError,
    FormatError,
    IntegrityError,
    NumericError,
    ShapeError,
    SparsePostError,
    UnsupportedVersionError,
    UsageError,
)
from .masking import (
    MaskProvenance,
    PruneSchedule,
    SparsityMask,
    apply_mask,
    iterative_prune,
    iterative_prune_rewind,
    layerwise_rates_of,
    prune_lowest_magnitude,
    random_global_mask,
    random_layerwise_mask,
)
from .metrics import (
    ChainTrace,
    MetricsReport,
    PredictiveMatrix,
    accuracy,
    acf,
    cumsum_diag,
    ece,
    ensemble_inll_series,
    ess,
    inll,
    nll,
    posterior_predictive,
)
from .network import (
    LayerSpec,
    Minibatch,
    NetworkSpec,
    ParamVector,
    PriorConfig,
    backward,
    forward,
    init_params,
    nll_loss,
    stochastic_grad_U,
)
from .sampling import (
    ChainGroup,
    PosteriorEnsemble,
    SGHMCConfig,
    init_chain,
    parallel_chains,
    run_sghmc,
    sghmc_chain,
)
from .sparse_infer import (
    BenchReport,
    CSRMatrix,
    SparseModel,
    bench,
    ensemble_predict_sparse,
    spmv_forward,
    spmv_logits,
    to_csr,
)
from .store import (
    Dataset,
    load_ensemble,
    load_fmnist,
    load_idx,
    save_ensemble,
    synth_blobs,
    total_stored_params,
)
from .training import SchedulerSpec, SGDConfig, lr_at, sgd_train

__version__ = "0.1.0"
