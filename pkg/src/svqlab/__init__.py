"""Sparse vector quantization laboratory.

Exact and differentiable sparse-regression quantizers, lookup-based VQ
baselines, a small reverse-mode autodiff engine, and an experiment harness
over synthetic spatio-temporal data.
"""
from .errors import (ConfigError, DataError, DegenerateInputError, DivergenceError, FormatError,
                     NumericError, ParameterError, ShapeError, SvqLabError, UsageError)
from .solvers import SparseRegressionProblem, fista_solve, ista_solve, one_step_weights
from .svq import SvqConfig, SvqModule, svq_forward
from .quantizers import QuantizerConfig, build_quantizer
from .forecaster import ForecastModel, ModelConfig, TrainConfig, evaluate, train

__version__ = "0.1.0"
