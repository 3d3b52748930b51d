"""Bayesian geoadditive disaggregation of area-level counts onto a grid.

Modules
-------
geometry
    Cells, areas, memberships and the stacked weight matrices.
basis
    Correlation families, knot selection and P-spline bases.
model
    Model specification and assembly of the design pieces.
inference
    Laplace approximation and the hyperparameter search.
predict
    Posterior draws and grid or area summaries.
sim
    Simulation study: Matern fields, datasets and scoring.
cli
    The ``geodisagg`` command.
"""

from .errors import FitError, GeodisaggError, InputError, NumericalError, StructuralError
from .geometry import DisaggregationProblem
from .inference import FittedModel, Hyperparameters, fit, refit_at
from .model import ModelSpec, PriorSpec, assemble
from .predict import aggregate_areas, predict_grid, sample_posterior

__all__ = [
    "DisaggregationProblem", "FitError", "FittedModel", "GeodisaggError", "Hyperparameters",
    "InputError", "ModelSpec", "NumericalError", "PriorSpec", "StructuralError",
    "aggregate_areas", "assemble", "fit", "predict_grid", "refit_at", "sample_posterior",
]
__version__ = "0.1.0"
