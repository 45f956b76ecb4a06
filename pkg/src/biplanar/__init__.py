"""biplanar: electrode-geometry optimization for 2-D RF ion-trap lattices
between one or two patterned electrode planes."""

__version__ = "0.1.0"

from .geometry import (BilayerGeometry, ElectrodePattern, Lattice, Mode,
                       Plane, UnitCell)
from .field import FieldEval, SpectralModel, evaluate_field
from .units import BERYLLIUM_9, DriveParams, IonSpecies

__all__ = [
    "BilayerGeometry", "ElectrodePattern", "Lattice", "Mode", "Plane",
    "UnitCell", "FieldEval", "SpectralModel", "evaluate_field",
    "BERYLLIUM_9", "DriveParams", "IonSpecies", "__version__",
]
