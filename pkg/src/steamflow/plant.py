"""Electro-mechanical steam valve plant.

The valve is a series connection of three linear blocks: the relay coil
(voltage to current), the spring-loaded plunger (current to displacement)
and the steam-flow sensor (displacement to flow).  This module builds the
overall transfer function from the physical constants, realizes it in
controllable canonical form and discretizes it with an exact zero-order
hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from fractions import Fraction

import numpy as np
from scipy.linalg import expm


class ParameterError(ValueError):
    """A physical parameter violates its constraint."""


class RepresentationError(ValueError):
    """A transfer function cannot be realized as requested."""


class PlantInputError(ValueError):
    """Non-finite input applied to the plant."""


@dataclass(frozen=True)
class ActuatorParams:
    """Physical constants of the valve actuator (defaults are the nominal plant)."""

    inductance_L: float = 1.0
    resistance_R: float = 5.0
    mass_m: float = 1.0
    damper_D: float = 1.0
    spring_k: float = 2.0
    relay_km: float = 0.25
    sensor_p: float = 3.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ParameterError(f"{f.name} must be a finite number, got {value!r}")
            # relay_km = 0 is a valid (zero-gain) relay; the rest set model order
            if f.name == "relay_km":
                if value < 0:
                    raise ParameterError(f"{f.name} must be >= 0, got {value!r}")
            elif value <= 0:
                raise ParameterError(f"{f.name} must be > 0, got {value!r}")


def _poly_mul(a, b):
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


@dataclass(frozen=True)
class TransferFunction:
    """Rational transfer function, coefficients in descending powers of s."""

    numerator: tuple
    denominator: tuple

    def __post_init__(self):
        num = tuple(float(c) for c in self.numerator)
        den = tuple(float(c) for c in self.denominator)
        if not den or den[0] == 0.0:
            raise RepresentationError("leading denominator coefficient must be nonzero")
        if not num:
            raise RepresentationError("numerator must have at least one coefficient")
        object.__setattr__(self, "numerator", num)
        object.__setattr__(self, "denominator", den)

    @property
    def order(self):
        return len(self.denominator) - 1

    def __call__(self, s):
        """Evaluate at a (complex) frequency ``s``."""
        return np.polyval(self.numerator, s) / np.polyval(self.denominator, s)

    def poles(self):
        return np.roots(self.denominator)

    def dc_gain(self):
        return self(0.0).real


def build_transfer_function(params: ActuatorParams) -> TransferFunction:
    """Overall voltage-to-steam-flow transfer function.

    ``Q(s)/V(s) = p*k_m / ((L s + R)(s + p)(m s^2 + D s + k))``.  The
    expansion runs in rational arithmetic, so every coefficient is the
    correctly rounded value of the exact product.
    """
    if not isinstance(params, ActuatorParams):
        raise ParameterError("params must be an ActuatorParams instance")
    q = {f.name: Fraction(getattr(params, f.name)) for f in fields(params)}
    coil = [q["inductance_L"], q["resistance_R"]]
    sensor = [Fraction(1), q["sensor_p"]]
    plunger = [q["mass_m"], q["damper_D"], q["spring_k"]]
    den = _poly_mul(_poly_mul(coil, sensor), plunger)
    num = [q["sensor_p"] * q["relay_km"]]
    return TransferFunction(tuple(float(c) for c in num), tuple(float(c) for c in den))


@dataclass(frozen=True)
class StateSpace:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D_term: float = 0.0

    @property
    def n_states(self):
        return self.A.shape[0]

    def frequency_response(self, s):
        n = self.n_states
        return (self.C @ np.linalg.solve(s * np.eye(n) - self.A, self.B)).item() + self.D_term

    def dc_gain(self):
        return (self.C @ np.linalg.solve(-self.A, self.B)).item() + self.D_term


def tf_to_state_space(tf: TransferFunction) -> StateSpace:
    """Controllable canonical realization of a strictly proper transfer function.

    States are ordered by ascending derivative, so the companion row of
    ``A`` holds ``-a_0 .. -a_{n-1}`` and ``C`` holds the numerator
    coefficients in ascending powers of s.
    """
    num = np.trim_zeros(np.asarray(tf.numerator, dtype=float), "f")
    den = np.asarray(tf.denominator, dtype=float)
    n = len(den) - 1
    if n < 1:
        raise RepresentationError("denominator must have degree >= 1")
    if len(num) > n:
        raise RepresentationError(
            f"transfer function is not strictly proper (num degree {len(num) - 1}, den degree {n})"
        )
    lead = den[0]
    a = den[1:] / lead
    b = np.zeros(n)
    if len(num):
        b[n - len(num):] = num / lead

    A = np.zeros((n, n))
    A[:-1, 1:] = np.eye(n - 1)
    A[-1, :] = -a[::-1]
    B = np.zeros((n, 1))
    B[-1, 0] = 1.0
    C = b[::-1].reshape(1, n).copy()
    return StateSpace(A, B, C, 0.0)


@dataclass
class DiscretePlant:
    """Zero-order-hold discretized plant with its own internal state."""

    Ad: np.ndarray
    Bd: np.ndarray
    C: np.ndarray
    sample_time: float
    state: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.sample_time > 0:
            raise ValueError("sample_time must be > 0")
        if self.state is None:
            self.state = np.zeros(self.Ad.shape[0])

    def reset(self):
        self.state = np.zeros(self.Ad.shape[0])
        return self

    def output(self):
        return float(self.C[0] @ self.state)

    def step(self, u):
        return plant_step(self, u)

    def simulate(self, u):
        """Step through a whole input sequence, returning the output after each step."""
        return np.array([plant_step(self, v) for v in np.asarray(u, dtype=float)])

    def copy(self):
        return DiscretePlant(self.Ad, self.Bd, self.C, self.sample_time, self.state.copy())


def discretize(ss: StateSpace, sample_time: float = 0.1) -> DiscretePlant:
    """Exact ZOH discretization via the exponential of the augmented matrix ``[[A, B], [0, 0]]``."""
    if not (isinstance(sample_time, (int, float)) and sample_time > 0):
        raise ValueError(f"sample_time must be > 0, got {sample_time!r}")
    n = ss.n_states
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = ss.A
    M[:n, n:] = ss.B
    E = expm(M * sample_time)
    return DiscretePlant(E[:n, :n].copy(), E[:n, n].copy(), ss.C.copy(), float(sample_time))


def plant_step(plant: DiscretePlant, u: float) -> float:
    u = float(u)
    if not math.isfinite(u):
        raise PlantInputError(f"plant input must be finite, got {u!r}")
    plant.state = plant.Ad @ plant.state + plant.Bd * u
    return float(plant.C[0] @ plant.state)


def make_plant(params: ActuatorParams | None = None, sample_time: float = 0.1) -> DiscretePlant:
    """Nominal plant at the given sample time, zero initial state."""
    tf = build_transfer_function(params or ActuatorParams())
    return discretize(tf_to_state_space(tf), sample_time)
