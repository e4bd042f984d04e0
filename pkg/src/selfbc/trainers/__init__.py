"""The TD3+BC policy-constraint family: BC, EBC, SelfBC and ESBC."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, states_equal
from .config import BETA_GRID, SCALE_REF_GRID, TrainerConfig, desk_config
from .core import (
    TrainerState,
    behavior_cloning_update,
    bc_objective,
    critic_objective,
    critic_target,
    critic_update,
    ema_reference_update,
    esbc_policy_update,
    esbc_shared_action,
    init_trainer_state,
    lambda_from_q,
    policy_objective,
    policy_update_bc,
    policy_update_ebc,
    policy_update_selfbc,
    q_normalizer,
    update_targets,
)
from .procedures import (
    normalized_copy,
    prepare_selfbc,
    run_esbc,
    run_pretrain,
    run_selfbc,
    train_phase,
)
