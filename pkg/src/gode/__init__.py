"""Neural generalized ODE classifiers with B-spline layer-varying kernels.

Pure numpy: a small reverse-mode autodiff engine, B-spline bases, Euler and
Dormand-Prince solvers, the ResNet / Neural-ODE / Neural-GODE model family,
data readers and an SGD trainer.
"""

from . import autodiff
from .autodiff import Tensor, backward, finite_difference_grad, no_grad, precision, set_precision
from .bspline import BSplineBasis, eval_basis, eval_spline, make_clamped_uniform
from .models import ModelSpec, build, count_params, export_weight_trajectory, forward, load_checkpoint, save_checkpoint
from .odeint import SolverConfig, dopri5_solve, euler_solve, solve
from .train import TrainConfig, cross_entropy, evaluate, lr_at, train

__version__ = "0.1.0"
