"""semdrive: a desk-scale 2D driving stack.

Deterministic track-band simulator with grayscale semantic-layout
observations, a from-scratch asynchronous actor-critic trainer, and an
offline steering-class evaluation harness.
"""

from .sim import (
    Action,
    RewardParams,
    SimConfig,
    TrackSpec,
    VehicleState,
    compute_reward,
    load_track,
    oval_track,
    project_to_track,
    reset,
    save_track,
    step,
)
from .render import (
    FrameStack,
    RenderConfig,
    SemanticClass,
    SemanticFrame,
    class_to_gray,
    push_frame,
    read_pgm,
    render,
    write_pgm,
)
from .network import (
    Architecture,
    NetworkParams,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
)
from .trainer import (
    DrivingEnv,
    OptimizerConfig,
    TrainerConfig,
    TrainingReport,
    advantages,
    collect_rollout,
    n_step_returns,
    rmsprop_apply,
    rmsprop_step,
    train,
)
from .evaluate import (
    EvalRecord,
    EvalReport,
    SteeringClass,
    angle_to_class,
    collapse_action,
    evaluate,
    generate_eval_manifest,
    predict,
)

__version__ = "0.1.0"
