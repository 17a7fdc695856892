"""Polarization states and variable-wave-plate rotation algebra on the Poincare sphere.

Fully polarized light is represented by a unit Stokes vector s = (s1, s2, s3)
with s1 = H - V, s2 = D - A, s3 = R - L (power-normalized). A variable
wave-plate (VWP) with its fast axis at physical angle theta rotates the Stokes
vector about the equatorial axis (cos 2*theta, sin 2*theta, 0) by its
retardance, following the right-hand rule.

Handedness convention (the single source of truth for the whole package):
an H/V-basis element driven through increasing retardance carries diagonal
input through the cycle D -> R -> A -> L. Equivalently, right circular is
the Jones vector (1, +1j)/sqrt(2) and s3 = 2*Im(eH* . eV). The matching
Jones matrix of a VWP is R(-theta) @ diag(exp(-i*phi/2), exp(+i*phi/2)) @ R(theta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNIT_NORM_TOL = 1e-9
ROTATION_TOL = 1e-9

# Stokes vectors of the six basis states.
H = np.array([1.0, 0.0, 0.0])
V = np.array([-1.0, 0.0, 0.0])
D = np.array([0.0, 1.0, 0.0])
A = np.array([0.0, -1.0, 0.0])
R = np.array([0.0, 0.0, 1.0])
L = np.array([0.0, 0.0, -1.0])

BASIS_STATES = {"H": H, "V": V, "D": D, "A": A, "R": R, "L": L}

# Jones column vectors of the same six states (global phase fixed: first
# nonzero component real positive).
JONES_BASIS = {
    "H": np.array([1.0, 0.0], dtype=complex),
    "V": np.array([0.0, 1.0], dtype=complex),
    "D": np.array([1.0, 1.0], dtype=complex) / math.sqrt(2),
    "A": np.array([1.0, -1.0], dtype=complex) / math.sqrt(2),
    "R": np.array([1.0, 1.0j], dtype=complex) / math.sqrt(2),
    "L": np.array([1.0, -1.0j], dtype=complex) / math.sqrt(2),
}

# Which MUB each basis state belongs to.
BASIS_OF_STATE = {"H": "H/V", "V": "H/V", "D": "D/A", "A": "D/A", "R": "R/L", "L": "R/L"}


def _as_stokes_vector(s) -> np.ndarray:
    """Accept a StokesState or any 3-vector and return a float ndarray."""
    if isinstance(s, StokesState):
        return s.vector
    return np.asarray(s, dtype=float)


@dataclass(frozen=True)
class StokesState:
    """A fully polarized state: unit Stokes vector plus total power in dBm."""

    s1: float
    s2: float
    s3: float
    power_dbm: float = 0.0

    def __post_init__(self):
        norm = math.sqrt(self.s1 ** 2 + self.s2 ** 2 + self.s3 ** 2)
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"Stokes vector norm {norm} departs from 1 beyond tolerance")
        if not math.isfinite(self.power_dbm):
            raise ValueError("power must be finite")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.s1, self.s2, self.s3])

    @classmethod
    def from_vector(cls, v, power_dbm: float = 0.0) -> "StokesState":
        v = np.asarray(v, dtype=float)
        v = v / np.linalg.norm(v)
        return cls(float(v[0]), float(v[1]), float(v[2]), power_dbm)

    @classmethod
    def named(cls, name: str, power_dbm: float = 0.0) -> "StokesState":
        v = BASIS_STATES[name.upper()]
        return cls(float(v[0]), float(v[1]), float(v[2]), power_dbm)


@dataclass(frozen=True)
class JonesState:
    """Normalized field amplitudes (e_h, e_v).

    The global phase is unrepresentable by construction: amplitudes are
    canonicalized so the larger component's phase is rotated away. Only the
    relative phase survives, which is all the Stokes picture can see.
    """

    e_h: complex
    e_v: complex

    def __post_init__(self):
        eh, ev = complex(self.e_h), complex(self.e_v)
        norm = math.sqrt(abs(eh) ** 2 + abs(ev) ** 2)
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"Jones norm {norm} departs from 1 beyond tolerance")
        anchor = eh if abs(eh) >= abs(ev) else ev
        phase = anchor / abs(anchor)
        object.__setattr__(self, "e_h", eh / phase)
        object.__setattr__(self, "e_v", ev / phase)

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.e_h, self.e_v], dtype=complex)

    @classmethod
    def from_vector(cls, v) -> "JonesState":
        v = np.asarray(v, dtype=complex)
        v = v / np.linalg.norm(v)
        return cls(complex(v[0]), complex(v[1]))

    def to_stokes(self, power_dbm: float = 0.0) -> StokesState:
        s = jones_to_stokes(self.vector)
        return StokesState(float(s[0]), float(s[1]), float(s[2]), power_dbm)

    @classmethod
    def from_stokes(cls, state) -> "JonesState":
        return cls.from_vector(stokes_to_jones(_as_stokes_vector(state)))


DEFAULT_RETARDANCE_LIMIT = 5 * math.pi  # piezo squeezer range


@dataclass(frozen=True)
class WaveplateElement:
    """A variable retarder: fast-axis angle, retardance, and actuator range.

    axis_angle is the physical fast-axis orientation in radians (0 puts the
    eigenstates in H/V, pi/4 in D/A); it is wrapped to [0, pi). Channel
    elements use an infinite retardance_limit; only actuators are bounded.
    """

    axis_angle: float
    retardance: float = 0.0
    retardance_limit: float = DEFAULT_RETARDANCE_LIMIT

    def __post_init__(self):
        object.__setattr__(self, "axis_angle", float(self.axis_angle) % math.pi)
        if abs(self.retardance) > self.retardance_limit:
            raise ValueError(
                f"retardance {self.retardance} exceeds limit {self.retardance_limit}"
            )

    @property
    def poincare_axis(self) -> np.ndarray:
        return np.array([math.cos(2 * self.axis_angle), math.sin(2 * self.axis_angle), 0.0])

    def with_retardance(self, retardance: float) -> "WaveplateElement":
        return WaveplateElement(self.axis_angle, retardance, self.retardance_limit)


@dataclass(frozen=True)
class PolRotation:
    """A proper rotation of Stokes space (3x3 orthogonal, det +1)."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        if np.max(np.abs(m @ m.T - np.eye(3))) > ROTATION_TOL:
            raise ValueError("matrix is not orthogonal within tolerance")
        if abs(np.linalg.det(m) - 1.0) > ROTATION_TOL:
            raise ValueError("matrix is not a proper rotation (det != +1)")
        object.__setattr__(self, "matrix", m)

    def apply(self, state):
        """Rotate a Stokes vector (or StokesState; power is carried through)."""
        if isinstance(state, StokesState):
            v = self.matrix @ state.vector
            return StokesState.from_vector(v, state.power_dbm)
        return self.matrix @ np.asarray(state, dtype=float)

    def inverse(self) -> "PolRotation":
        return PolRotation(self.matrix.T)

    def __matmul__(self, other: "PolRotation") -> "PolRotation":
        return PolRotation(self.matrix @ other.matrix)

    @classmethod
    def identity(cls) -> "PolRotation":
        return cls(np.eye(3))

    @classmethod
    def about_axis(cls, axis, angle: float) -> "PolRotation":
        return cls(rotation_about_axis(axis, angle))


def rotation_about_axis(axis, angle) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis, right-hand rule.

    Broadcasts: axis (..., 3) with angle (...) yields (..., 3, 3).
    """
    n = np.asarray(axis, dtype=float)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    ang = np.asarray(angle, dtype=float)
    c = np.cos(ang)[..., None, None]
    s = np.sin(ang)[..., None, None]
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    zeros = np.zeros_like(nx)
    cross = np.stack(
        [
            np.stack([zeros, -nz, ny], axis=-1),
            np.stack([nz, zeros, -nx], axis=-1),
            np.stack([-ny, nx, zeros], axis=-1),
        ],
        axis=-2,
    )
    outer = n[..., :, None] * n[..., None, :]
    eye = np.broadcast_to(np.eye(3), cross.shape)
    return c * eye + s * cross + (1.0 - c) * outer


def vwp_matrix(axis_angle, retardance) -> np.ndarray:
    """Stokes rotation of a VWP; broadcasts over leading dimensions.

    Axis (cos 2*theta, sin 2*theta, 0), rotation angle = retardance. With the
    right-hand rule this fixes the D -> R -> A -> L cycle for an H/V element.
    Closed form of the Rodrigues matrix for an equatorial axis (hot path).
    """
    theta = np.asarray(axis_angle, dtype=float)
    ret = np.asarray(retardance, dtype=float)
    c2, s2 = np.cos(2 * theta), np.sin(2 * theta)
    c, s = np.cos(ret), np.sin(ret)
    shape = np.broadcast(c2, c).shape
    out = np.empty(shape + (3, 3))
    one_c = 1.0 - c
    cross = one_c * c2 * s2
    out[..., 0, 0] = c + one_c * c2 * c2
    out[..., 0, 1] = cross
    out[..., 0, 2] = s * s2
    out[..., 1, 0] = cross
    out[..., 1, 1] = c + one_c * s2 * s2
    out[..., 1, 2] = -s * c2
    out[..., 2, 0] = -s * s2
    out[..., 2, 1] = s * c2
    out[..., 2, 2] = c
    return out


def vwp_rotation(element: WaveplateElement) -> PolRotation:
    """The Poincare-sphere rotation realized by one variable wave-plate."""
    return PolRotation(vwp_matrix(element.axis_angle, element.retardance))


def compose(rotations) -> PolRotation:
    """Compose rotations in propagation order (first element acts first)."""
    rotations = list(rotations)
    if not rotations:
        raise ValueError("cannot compose an empty rotation list")
    m = np.eye(3)
    for r in rotations:
        rm = r.matrix if isinstance(r, PolRotation) else np.asarray(r, dtype=float)
        m = rm @ m
    return PolRotation(m)


def project_power(state, analyzer) -> float:
    """Transmitted power fraction of `state` through an ideal analyzer.

    Malus law on the sphere: (1 + s.a)/2, in [0, 1].
    """
    s = _as_stokes_vector(state)
    a = _as_stokes_vector(analyzer)
    return float(np.clip((1.0 + s @ a) / 2.0, 0.0, 1.0))


def angular_error(a, b) -> float:
    """Great-circle angle between two states on the Poincare sphere, radians."""
    va = _as_stokes_vector(a)
    vb = _as_stokes_vector(b)
    return float(np.arccos(np.clip(va @ vb, -1.0, 1.0)))


def angular_errors(states, reference) -> np.ndarray:
    """Vectorized angular_error: states (..., 3) against one reference (3,)."""
    s = np.asarray(states, dtype=float)
    r = _as_stokes_vector(reference)
    return np.arccos(np.clip(s @ r, -1.0, 1.0))


# --- Jones <-> Stokes ---------------------------------------------------

def jones_to_stokes(jones) -> np.ndarray:
    """Normalized Stokes vector of a Jones vector (need not be unit norm)."""
    j = np.asarray(jones, dtype=complex)
    eh, ev = j[..., 0], j[..., 1]
    s0 = np.abs(eh) ** 2 + np.abs(ev) ** 2
    s1 = (np.abs(eh) ** 2 - np.abs(ev) ** 2) / s0
    s2 = 2 * np.real(np.conj(eh) * ev) / s0
    s3 = 2 * np.imag(np.conj(eh) * ev) / s0
    return np.stack([s1, s2, s3], axis=-1)


def stokes_to_jones(stokes) -> np.ndarray:
    """One Jones representative of a unit Stokes vector (phase canonical)."""
    s = _as_stokes_vector(stokes)
    s1, s2, s3 = s
    # |eh|^2 = (1+s1)/2; relative phase from s2 + i s3 = 2 eh* ev.
    ah = math.sqrt(max((1.0 + s1) / 2.0, 0.0))
    av = math.sqrt(max((1.0 - s1) / 2.0, 0.0))
    if ah < 1e-12:
        return np.array([0.0, 1.0], dtype=complex)
    if av < 1e-12:
        return np.array([1.0, 0.0], dtype=complex)
    phase = math.atan2(s3, s2)
    return np.array([ah, av * complex(math.cos(phase), math.sin(phase))])


def waveplate_jones(axis_angle: float, retardance: float) -> np.ndarray:
    """Jones matrix of a retarder, consistent with vwp_matrix.

    R(-theta) @ diag(exp(-i phi/2), exp(+i phi/2)) @ R(theta) with the frame
    rotation R(theta) = [[cos, sin], [-sin, cos]].
    """
    c, s = math.cos(axis_angle), math.sin(axis_angle)
    rot = np.array([[c, s], [-s, c]], dtype=complex)
    core = np.diag([np.exp(-0.5j * retardance), np.exp(0.5j * retardance)])
    return rot.T @ core @ rot


# Pauli operators ordered to match (s1, s2, s3) = (<sz>, <sx>, <sy>).
_PAULI_STOKES = np.array(
    [
        [[1, 0], [0, -1]],
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
    ],
    dtype=complex,
)


def su2_from_rotation(matrix) -> np.ndarray:
    """Lift a Stokes-space rotation to the 2x2 unitary acting on Jones vectors.

    The lift is two-valued (+/-U); either branch conjugates density matrices
    identically, so the sign is chosen arbitrarily.
    """
    from scipy.spatial.transform import Rotation as _R

    rotvec = _R.from_matrix(np.asarray(matrix, dtype=float)).as_rotvec()
    angle = np.linalg.norm(rotvec)
    if angle < 1e-15:
        return np.eye(2, dtype=complex)
    n = rotvec / angle
    gen = n[0] * _PAULI_STOKES[0] + n[1] * _PAULI_STOKES[1] + n[2] * _PAULI_STOKES[2]
    return math.cos(angle / 2) * np.eye(2) - 1j * math.sin(angle / 2) * gen
