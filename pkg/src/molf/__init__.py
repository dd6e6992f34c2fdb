"""molf: superposed FFT+LoRA expert modules with optimizer-level update routing.

Linear modules superpose a dense base pathway and LoRA experts in every
forward pass; a three-phase sparse AdamW tracks moments for all experts,
scores them (EPD or PFN), and physically updates only the Top-K per module.
After training, the experts fuse exactly into the base weight.  A synthetic
spectral-task harness exercises the capacity/regularization trade-off with
analytic Eckart-Young oracles.
"""

from .backend import available_backends, backend_name, set_backend
from .checkpoint import (
    LoadedCheckpoint,
    load_checkpoint,
    restore_optimizer,
    save_checkpoint,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    MolfError,
    NumericError,
)
from .fusion import FusionReport, fuse, verify_fusion
from .harness import (
    RunConfig,
    RunSummary,
    export_traces,
    format_config,
    load_config_file,
    parse_config,
    resolve_seed,
    train_run,
)
from .model import (
    FFT,
    LORA,
    LoRAExpert,
    MLPNetwork,
    MoLFModule,
    PathwayRef,
    build_mlp,
    init_experts,
)
from .numerics import Node, Tape, as_matrix, finite_diff_grad, matmul
from .optimizer import (
    DENSE,
    EPD,
    PFN,
    ExpertState,
    MoLFOptimizer,
    OptimizerConfig,
    RoutingDecision,
    apply_topk_update,
    track_moments,
)
from .rng import Rng
from .schedule import ScheduleSpec, lr_at
from .scoring import (
    ScoreRecord,
    epd_score,
    pfn_score,
    predicted_loss_drop,
    select_winners,
)
from .synthtasks import (
    CONCENTRATED,
    CUSTOM,
    HEAVY_TAIL,
    SpectralTask,
    gen_spectral_target,
    population_loss,
    sample_batch,
    tail_energy,
)

__version__ = "0.1.0"
