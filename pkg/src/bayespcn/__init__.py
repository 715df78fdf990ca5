"""Continual-learning associative memory built on hierarchical
predictive-coding networks with Bayesian weight posteriors, plus Hopfield
and point-weight baselines and a recall benchmark harness."""

from .baselines import (
    GpcnModel,
    MhnMemory,
    gpcn_energy,
    gpcn_read,
    gpcn_write_offline,
    gpcn_write_online,
    init_gpcn,
    mhn_recall,
    mhn_store,
)
from .bench import (
    CorruptionSpec,
    Dataset,
    ExperimentConfig,
    ExperimentResult,
    corrupt,
    load_cifar10,
    load_raw_tensor,
    mse,
    recall_accuracy,
    run_experiment,
    save_raw_tensor,
    synthetic_dataset,
)
from .engine import (
    DivergenceError,
    OptimizerConfig,
    Query,
    ReadConfig,
    fit_activations,
    forget,
    read_auto,
    read_hetero,
    write,
)
from .gaussian import (
    HiddenLayerPosterior,
    LayerPrior,
    TopLayerPosterior,
    diffuse_layer,
    layer_predictive_log_density,
    log_sum_exp,
    top_predictive_log_density,
    update_layer_posterior,
    update_top_posterior,
)
from .network import (
    MemoryState,
    NetworkShape,
    Particle,
    activation_apply,
    activation_grad,
    ancestral_sample,
    build_memory,
    grad_mixture_log_joint,
    init_particle,
    mixture_log_joint,
    particle_log_joint,
)
from .persistence import ModelFormatError, load_memory, read_header, save_memory

__version__ = "0.1.0"
