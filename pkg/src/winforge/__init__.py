"""Wide-then-narrow training for mean-field networks, with the metrics
needed to check the layerwise-imitation error bound at desk scale."""

__version__ = "0.1.0"

from .data import Dataset, GeneratorSpec, gen_dataset, load_dataset, save_dataset
from .merge import MergePlan, absorb_post, absorb_pre, fuse_linear, merge_pass
from .metrics import (
    BoundReport,
    HybridScan,
    LipschitzReport,
    ProbeConfig,
    PowerIterConfig,
    bound_report,
    build_hybrid,
    discrepancy,
    hybrid_scan,
    layer_lipschitz_gap,
    lipschitz_jacobian,
    lipschitz_pairs,
    q_param_ratio,
    q_ratio,
    rmse,
    suffix_lipschitz_report,
)
from .net import (
    LinearMap,
    MeanFieldLayer,
    Network,
    NeuronParams,
    layer_backward,
    layer_forward,
    linear_backward,
    linear_forward,
    network_backward,
    network_forward,
    network_forward_batch,
)
from .pipeline import (
    WinArtifacts,
    WinConfig,
    finetune,
    imitation_stage,
    insert_linear_pairs,
    subsample_init,
    widen_spec,
    win_run,
)
from .persist import load_model, save_model, verify_manifest, write_manifest, write_report
from .train import (
    ArchSpec,
    ImitationTarget,
    InitSpec,
    LayerSpec,
    TrainConfig,
    TrainTrace,
    TruncatedNormal,
    Uniform,
    chain_arch,
    imitation_loss,
    init_network,
    mse_loss,
    sgd_train,
)
