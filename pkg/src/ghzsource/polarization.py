"""Polarization qubits: states, waveplate Jones matrices and fidelity.

Conventions used throughout the package:

* Basis ordering ``|H> -> 0``, ``|V> -> 1``; multi-qubit states are big-endian,
  so qubit 0 is the leftmost label (``|VHHH>`` is index 8).
* ``R(t) = [[cos t, -sin t], [sin t, cos t]]``.
* ``HWP(t) = R(t) diag(1, -1) R(-t) = [[cos 2t, sin 2t], [sin 2t, -cos 2t]]``.
* ``QWP(t) = R(t) diag(1, i) R(-t)``.

``t`` is the angle of the slow axis from horizontal, in radians. Both plates are
pi-periodic in ``t``. Global phases are fixed by the matrices above; every angle
the package reports is relative to this convention.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

UNITARY_TOL = 1e-12


def _rotation(t: float) -> np.ndarray:
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]], dtype=complex)


def normalize_angle(t: float) -> float:
    """Map an axis angle into [-pi/2, pi/2)."""
    return float((t + np.pi / 2) % np.pi - np.pi / 2)


@dataclass(frozen=True)
class PureState:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (2**self.n_qubits,):
            raise ValueError(f"expected {2**self.n_qubits} amplitudes, got {amps.shape}")
        if abs(np.linalg.norm(amps) - 1.0) > 1e-12:
            raise ValueError("state is not normalized")
        object.__setattr__(self, "amplitudes", amps)

    def density_matrix(self) -> "DensityMatrix":
        return DensityMatrix(self.n_qubits, np.outer(self.amplitudes, self.amplitudes.conj()))


@dataclass(frozen=True)
class DensityMatrix:
    n_qubits: int
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        d = 2**self.n_qubits
        if m.shape != (d, d):
            raise ValueError(f"expected {d}x{d} matrix, got {m.shape}")
        if np.max(np.abs(m - m.conj().T)) > 1e-10:
            raise ValueError("matrix is not Hermitian")
        if abs(np.trace(m).real - 1.0) > 1e-10:
            raise ValueError(f"trace is {np.trace(m).real}, expected 1")
        if np.linalg.eigvalsh(m).min() < -1e-9:
            raise ValueError("matrix is not positive semidefinite")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def maximally_mixed(cls, n_qubits: int) -> "DensityMatrix":
        d = 2**n_qubits
        return cls(n_qubits, np.eye(d, dtype=complex) / d)


@dataclass(frozen=True)
class LocalUnitary:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (2, 2):
            raise ValueError("local unitary must be 2x2")
        if np.max(np.abs(m.conj().T @ m - np.eye(2))) > UNITARY_TOL * 100:
            raise ValueError("matrix is not unitary")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "LocalUnitary":
        return cls(np.eye(2, dtype=complex))

    def dagger(self) -> "LocalUnitary":
        return LocalUnitary(self.matrix.conj().T)


@dataclass(frozen=True)
class WaveplateSetting:
    """Angles of a QWP(x0) HWP(x1) QWP(x2) stack, radians."""

    x0: float
    x1: float
    x2: float

    def __post_init__(self):
        for name in ("x0", "x1", "x2"):
            object.__setattr__(self, name, normalize_angle(getattr(self, name)))

    def unitary(self) -> LocalUnitary:
        return LocalUnitary(
            waveplate_jones("QWP", self.x0).matrix
            @ waveplate_jones("HWP", self.x1).matrix
            @ waveplate_jones("QWP", self.x2).matrix
        )

    def degrees(self) -> tuple[float, float, float]:
        return tuple(float(np.degrees(x)) for x in (self.x0, self.x1, self.x2))


def hwp_matrix(t):
    """Vectorized HWP Jones matrices; ``t`` may be an array, output (..., 2, 2)."""
    t = np.asarray(t, dtype=float)
    c, s = np.cos(2 * t), np.sin(2 * t)
    return np.stack([np.stack([c, s], -1), np.stack([s, -c], -1)], -2).astype(complex)


def qwp_matrix(t):
    """Vectorized QWP Jones matrices; ``t`` may be an array, output (..., 2, 2)."""
    t = np.asarray(t, dtype=float)
    c, s = np.cos(t), np.sin(t)
    # R(t) diag(1, i) R(-t) expanded
    a = c * c + 1j * s * s
    b = c * s * (1 - 1j)
    d = s * s + 1j * c * c
    return np.stack([np.stack([a, b], -1), np.stack([b, d], -1)], -2)


def waveplate_jones(kind: str, angle: float) -> LocalUnitary:
    kind = kind.upper()
    if kind == "HWP":
        return LocalUnitary(hwp_matrix(angle))
    if kind == "QWP":
        return LocalUnitary(qwp_matrix(angle))
    raise ValueError(f"unknown waveplate kind {kind!r}")


def basis_state(label: str) -> PureState:
    """Product state from a string such as ``"HVVH"``."""
    index = int(label.upper().replace("H", "0").replace("V", "1"), 2)
    amps = np.zeros(2 ** len(label), dtype=complex)
    amps[index] = 1.0
    return PureState(len(label), amps)


def ghz_state(n_qubits: int, delta: float = 0.0) -> PureState:
    if n_qubits < 2:
        raise ValueError("GHZ state needs at least 2 qubits")
    amps = np.zeros(2**n_qubits, dtype=complex)
    amps[0] = 1 / np.sqrt(2)
    amps[-1] = np.exp(1j * delta) / np.sqrt(2)
    return PureState(n_qubits, amps)


def bell_pair_state(theta: float = 0.0) -> PureState:
    """(|H>_s|V>_i + e^{i theta} |V>_s|H>_i) / sqrt(2), signal is qubit 0."""
    amps = np.zeros(4, dtype=complex)
    amps[1] = 1 / np.sqrt(2)
    amps[2] = np.exp(1j * theta) / np.sqrt(2)
    return PureState(2, amps)


def _as_matrix(rho) -> np.ndarray:
    return rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)


def _as_vector(psi) -> np.ndarray:
    return psi.amplitudes if isinstance(psi, PureState) else np.asarray(psi, dtype=complex)


def fidelity(rho, target) -> float:
    """Pure-target fidelity <psi|rho|psi>.

    This is the overlap itself, not its square; for a pure ``rho`` it equals
    ``|<psi|phi>|^2``.
    """
    m, v = _as_matrix(rho), _as_vector(target)
    if m.shape != (v.size, v.size):
        raise ValueError(f"dimension mismatch: rho {m.shape}, target {v.shape}")
    f = float(np.real(v.conj() @ m @ v))
    return min(max(f, 0.0), 1.0)


def kron_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    return reduce(np.kron, mats)


def apply_local_unitaries(rho, units: Sequence) -> DensityMatrix:
    """Return ``U^dagger rho U`` with ``U`` the tensor product of ``units``."""
    m = _as_matrix(rho)
    n = int(round(np.log2(m.shape[0])))
    if len(units) != n:
        raise ValueError(f"need {n} local unitaries, got {len(units)}")
    mats = [u.matrix if isinstance(u, LocalUnitary) else LocalUnitary(u).matrix for u in units]
    big = kron_all(mats)
    out = big.conj().T @ m @ big
    return DensityMatrix(n, (out + out.conj().T) / 2)


def random_unitary(rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    """Haar-random unitary via QR of a complex Ginibre matrix."""
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_density_matrix(rng: np.random.Generator, n_qubits: int, rank: int | None = None) -> np.ndarray:
    d = 2**n_qubits
    rank = d if rank is None else rank
    g = rng.standard_normal((d, rank)) + 1j * rng.standard_normal((d, rank))
    m = g @ g.conj().T
    return m / np.trace(m).real
