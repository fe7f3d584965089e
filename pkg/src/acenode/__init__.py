"""Neural ODEs with a co-evolving attention ODE, built on a small numpy autodiff core."""
from .adjoint import LossSpec, adjoint_gradients, grad_theta_f, grad_theta_g
from .attention import AceState, AttentionKind, StateLayout, apply_elementwise, apply_pairwise, correlation
from .config import RunConfig
from .data import Dataset, load_idx_images, synth_crossing, synth_var_series
from .metrics import MetricReport, accuracy, mse_over_time
from .model import AceModel, build_model
from .solvers import SolverConfig, SolverStats, Trajectory, integrate
from .tensor import Tape, Tensor
from .train import Adam, TrainRun, evaluate, train

__version__ = "0.1.0"
