"""Transport-based attention: entropic couplings against learned references.

Instead of comparing every token pair, each token distribution is coupled
to a small reference set by entropic optimal transport; attention weights
factor through the coupling, so cost scales with the reference count, not
the sequence length squared.
"""

from .attention import (
    AttentionLayer,
    PositionalPenalty,
    dpsa_baseline,
    ky_gram,
    ky_gram_direct,
    positional_matrix,
    set_attention_tokenwise,
    set_pool,
)
from .autodiff import MacCounter, Var, backward, count_macs, val
from .data import Dataset, load_idx, save_idx, synth_needle, synth_shapes
from .kernels import (
    COST_INDUCED,
    COST_MODES,
    COST_NEGATIVE,
    KernelSpec,
    cost_matrix,
    induced_sq_distance,
    kernel_matrix,
    median_bandwidth,
)
from .model import (
    Model,
    ModelConfig,
    build,
    fit_features,
    flops_estimate,
    forward,
    load_into,
    save_checkpoint,
)
from .nystrom import NystromMap, ReferenceSet, fit_nystrom, fit_references, kmeans
from .sinkhorn import (
    Measure,
    SinkhornSettings,
    TransportPlan,
    entropic_objective,
    exact_ot_uniform,
    ot_cost,
    transport_factored,
    wasserstein,
    wasserstein_y,
)
from .train import TrainSettings, cross_entropy, fd_gradcheck, train_loop
from .verify import run_verify

# Keep submodules reachable as attributes; the solver itself lives at
# sinkhorn.sinkhorn so the module name stays usable.
from . import (  # noqa: E402
    attention,
    autodiff,
    bench,
    config,
    data,
    kernels,
    model,
    numerics,
    nystrom,
    sinkhorn,
    train,
    verify,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionLayer",
    "COST_INDUCED",
    "COST_MODES",
    "COST_NEGATIVE",
    "Dataset",
    "KernelSpec",
    "MacCounter",
    "Measure",
    "Model",
    "ModelConfig",
    "NystromMap",
    "PositionalPenalty",
    "ReferenceSet",
    "SinkhornSettings",
    "TrainSettings",
    "TransportPlan",
    "Var",
    "backward",
    "build",
    "cost_matrix",
    "count_macs",
    "cross_entropy",
    "dpsa_baseline",
    "entropic_objective",
    "exact_ot_uniform",
    "fd_gradcheck",
    "fit_features",
    "fit_nystrom",
    "fit_references",
    "flops_estimate",
    "forward",
    "induced_sq_distance",
    "kernel_matrix",
    "kmeans",
    "ky_gram",
    "ky_gram_direct",
    "load_idx",
    "load_into",
    "median_bandwidth",
    "ot_cost",
    "positional_matrix",
    "run_verify",
    "save_checkpoint",
    "save_idx",
    "set_attention_tokenwise",
    "set_pool",
    "synth_needle",
    "synth_shapes",
    "train_loop",
    "transport_factored",
    "val",
    "wasserstein",
    "wasserstein_y",
    "__version__",
]
