"""Direction-robust NODDI estimation from spherical-harmonic patch features."""
from .estimator import NoddiPatchRegressor
from .model import METHODS, RobNODDI, predict_volume
from .pipeline import ShFeaturizer

__version__ = "0.1.0"

__all__ = ["METHODS", "NoddiPatchRegressor", "RobNODDI", "ShFeaturizer", "predict_volume"]
