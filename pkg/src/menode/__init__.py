"""Mixed-effects neural ODEs for panel data.

Subjects share one latent vector field; each subject gets its own
effect vector that scales it. Training draws candidate (initial state,
effect) pairs, keeps the closest-reproducing ones, and maximizes a
weighted evidence lower bound through the unrolled ODE solver. At test
time a subject is personalized from its observed window alone and the
chosen effect is rolled forward to forecast.

Everything numerical is built on a small reverse-mode tape
(:mod:`menode.autodiff`) over float64 numpy arrays; artifacts written
by the command-line tool are byte-reproducible given a seed.
"""

from .autodiff import Tape, Tensor, backward, numeric_gradient
from .calibration import (
    CalibrationResult,
    EnsemblePrediction,
    calibrate,
    calibrate_batch,
    ensemble_predict,
    predict,
)
from .checkpoint import FORMAT_VERSION, LoadedCheckpoint, load_checkpoint, save_checkpoint
from .data import (
    GROUPED_2D_GROUP_COUNTS,
    PanelDataset,
    ToySpec,
    generate_grouped_2d,
    generate_toy,
    read_csv,
    rotation_states,
    write_csv,
)
from .errors import (
    ContractError,
    DataError,
    DivergenceError,
    DomainError,
    IntegrityError,
    MenodeError,
    UnsupportedVersionError,
    UsageError,
)
from .estimator import MixedEffectsNeuralODE
from .metrics import (
    EvalReport,
    PermutationResult,
    PerStepMse,
    param_mse,
    per_step_mse,
    permutation_test,
    recovered_params,
)
from .model import (
    MeNodeModel,
    MixedEffectPosterior,
    ModelConfig,
    decode,
    encode,
    log_likelihood,
    sample_subject,
)
from .networks import Mlp
from .ode import (
    EnsembleMoments,
    TimeGrid,
    Trajectory,
    integrate,
    integrate_stratonovich,
    wong_zakai_ensemble,
)
from .training import (
    Adam,
    NoiseBank,
    TrainConfig,
    TrainReport,
    elbo_gradient_check,
    loss_batch,
    loss_subject,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CalibrationResult",
    "ContractError",
    "DataError",
    "DivergenceError",
    "DomainError",
    "EnsembleMoments",
    "EnsemblePrediction",
    "EvalReport",
    "FORMAT_VERSION",
    "GROUPED_2D_GROUP_COUNTS",
    "IntegrityError",
    "LoadedCheckpoint",
    "MeNodeModel",
    "MenodeError",
    "MixedEffectPosterior",
    "MixedEffectsNeuralODE",
    "Mlp",
    "ModelConfig",
    "NoiseBank",
    "PanelDataset",
    "PermutationResult",
    "PerStepMse",
    "Tape",
    "Tensor",
    "TimeGrid",
    "ToySpec",
    "TrainConfig",
    "TrainReport",
    "Trajectory",
    "UnsupportedVersionError",
    "UsageError",
    "backward",
    "calibrate",
    "calibrate_batch",
    "decode",
    "elbo_gradient_check",
    "encode",
    "ensemble_predict",
    "generate_grouped_2d",
    "generate_toy",
    "integrate",
    "integrate_stratonovich",
    "load_checkpoint",
    "log_likelihood",
    "loss_batch",
    "loss_subject",
    "numeric_gradient",
    "param_mse",
    "per_step_mse",
    "permutation_test",
    "predict",
    "read_csv",
    "recovered_params",
    "rotation_states",
    "sample_subject",
    "save_checkpoint",
    "train",
    "wong_zakai_ensemble",
    "write_csv",
]
