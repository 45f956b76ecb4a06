"""Physical constants and conversions between geometric and SI trap parameters.

All geometry-level results in this package are dimensionless (per unit drive
voltage, lengths in units of the trap spacing).  This module is the single
place where ion mass, drive voltage and frequencies enter.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

# CODATA 2018
ELEMENTARY_CHARGE = 1.602176634e-19  # C
EPSILON_0 = 8.8541878128e-12  # F/m
ATOMIC_MASS = 1.66053906660e-27  # kg

# 9Be+ mass; electron-mass correction ignored (< 1e-4 relative).
BERYLLIUM_9_MASS = 9.0122 * ATOMIC_MASS


class UnitsError(ValueError):
    """Invalid physical parameter (non-positive mass, zero charge, ...)."""


@dataclass(frozen=True)
class IonSpecies:
    """An ion: mass in kg, charge in C (integer multiple of e)."""

    mass: float
    charge: float = ELEMENTARY_CHARGE

    def __post_init__(self):
        if self.mass <= 0:
            raise UnitsError(f"ion mass must be positive, got {self.mass}")
        if self.charge == 0:
            raise UnitsError("ion charge must be nonzero")


BERYLLIUM_9 = IonSpecies(mass=BERYLLIUM_9_MASS)


@dataclass(frozen=True)
class DriveParams:
    """RF drive: voltage amplitude, angular drive frequency, target secular frequency."""

    u_rf: float  # V
    omega_rf: float  # rad/s
    target_omega_tilde: float  # rad/s (geometric-mean secular frequency)

    def __post_init__(self):
        for name in ("u_rf", "omega_rf", "target_omega_tilde"):
            if getattr(self, name) <= 0:
                raise UnitsError(f"{name} must be positive")
        if self.omega_rf <= self.target_omega_tilde:
            raise UnitsError(
                "drive frequency must exceed the target secular frequency "
                f"({self.omega_rf} <= {self.target_omega_tilde})"
            )
        if self.omega_rf < 5.0 * self.target_omega_tilde:
            warnings.warn(
                "omega_rf / omega_tilde < 5: pseudopotential approximation "
                "is questionable this close to the stability boundary",
                stacklevel=2,
            )


def kappa_from_physical(mass, omega_tilde, omega_rf, h, u_rf, charge=ELEMENTARY_CHARGE):
    """Dimensionless curvature sqrt(2)*M*omega_tilde*omega_rf*h^2 / (e*U_rf)."""
    for name, v in (("mass", mass), ("omega_tilde", omega_tilde),
                    ("omega_rf", omega_rf), ("h", h), ("u_rf", u_rf),
                    ("charge", charge)):
        if v <= 0:
            raise UnitsError(f"{name} must be positive, got {v}")
    return math.sqrt(2.0) * mass * omega_tilde * omega_rf * h**2 / (charge * u_rf)


def urf_from_kappa(kappa, mass, omega_tilde, omega_rf, h, charge=ELEMENTARY_CHARGE):
    """Drive voltage needed to reach omega_tilde for a geometry of curvature kappa."""
    if kappa <= 0:
        raise UnitsError(f"kappa must be positive, got {kappa}")
    return math.sqrt(2.0) * mass * omega_tilde * omega_rf * h**2 / (charge * kappa)


def eta_from_physical(mass, omega_rf, h, depth_psi, u_rf, charge=ELEMENTARY_CHARGE):
    """Dimensionless depth 4*M*omega_rf^2*h^2*Psi / (e^2*U_rf^2)."""
    for name, v in (("mass", mass), ("omega_rf", omega_rf), ("h", h),
                    ("u_rf", u_rf), ("charge", charge)):
        if v <= 0:
            raise UnitsError(f"{name} must be positive, got {v}")
    if depth_psi < 0:
        raise UnitsError(f"trap depth must be nonnegative, got {depth_psi}")
    return 4.0 * mass * omega_rf**2 * h**2 * depth_psi / (charge * u_rf) ** 2


def eta_from_kappa(kappa, mass, omega_tilde, h, depth_psi):
    """Equivalent form 2*kappa^2*Psi / (M*omega_tilde^2*h^2)."""
    if depth_psi < 0:
        raise UnitsError(f"trap depth must be nonnegative, got {depth_psi}")
    return 2.0 * kappa**2 * depth_psi / (mass * omega_tilde**2 * h**2)


def depth_joules(eta, mass, omega_rf, h, u_rf, charge=ELEMENTARY_CHARGE):
    """Invert the eta definition: Psi = eta * e^2 U^2 / (4 M omega_rf^2 h^2)."""
    return eta * (charge * u_rf) ** 2 / (4.0 * mass * omega_rf**2 * h**2)


def joules_to_mev(energy):
    return energy / ELEMENTARY_CHARGE * 1e3
