"""Flow simulation on implicit neural geometry with the shifted boundary method."""

from .errors import InputError, NumericalError
from .inr import Mlp, NeuralField
from .sdf import Box, Circle, Cone, Cylinder, Gyroid, ImplicitField, Ring, Sphere

__version__ = "0.1.0"
