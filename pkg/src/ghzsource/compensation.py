"""Waveplate decomposition of local unitaries and GHZ compensation search."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize

from .polarization import (
    DensityMatrix,
    LocalUnitary,
    WaveplateSetting,
    apply_local_unitaries,
    fidelity,
    ghz_state,
    hwp_matrix,
    qwp_matrix,
)

log = logging.getLogger(__name__)


def waveplate_stack(x0, x1, x2) -> np.ndarray:
    """QWP(x0) HWP(x1) QWP(x2), broadcasting over array arguments."""
    return qwp_matrix(x0) @ hwp_matrix(x1) @ qwp_matrix(x2)


def phase_aligned_error(w: np.ndarray, u: np.ndarray) -> float:
    """min over phi of the Frobenius norm ||w - e^{i phi} u||."""
    overlap = np.trace(u.conj().T @ w)
    phase = overlap / abs(overlap) if abs(overlap) > 0 else 1.0
    return float(np.linalg.norm(w - phase * u))


# coarse grid for seeding, shared by every call
_GRID = np.linspace(-np.pi / 2, np.pi / 2, 13, endpoint=False)
_G0, _G1, _G2 = np.meshgrid(_GRID, _GRID, _GRID, indexing="ij")
_GRID_STACK = waveplate_stack(_G0.ravel(), _G1.ravel(), _G2.ravel())


def _residual(x, u):
    w = waveplate_stack(*x)
    overlap = np.trace(u.conj().T @ w)
    phase = overlap / abs(overlap) if abs(overlap) > 0 else 1.0
    r = (w - phase * u).ravel()
    return np.concatenate([r.real, r.imag])


def decompose_su2(u, tol: float = 1e-12, n_seeds: int = 4) -> WaveplateSetting:
    """Angles with QWP(x0) HWP(x1) QWP(x2) = e^{i phi} u.

    Seeds come from a 13^3 grid scored by |Tr(u^dagger W)|; the best few are
    polished with a Levenberg-Marquardt solve on the phase-aligned residual.
    """
    u = u.matrix if isinstance(u, LocalUnitary) else LocalUnitary(u).matrix
    scores = np.abs(np.einsum("ji,nji->n", u.conj(), _GRID_STACK))
    best = None
    for idx in np.argsort(scores)[::-1][:n_seeds]:
        x_start = np.array([_G0.ravel()[idx], _G1.ravel()[idx], _G2.ravel()[idx]])
        sol = least_squares(_residual, x_start, args=(u,), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        err = phase_aligned_error(waveplate_stack(*sol.x), u)
        if best is None or err < best[0]:
            best = (err, sol.x)
        if err < tol:
            break
    return WaveplateSetting(*best[1])


def reconstruction_error(setting: WaveplateSetting, u) -> float:
    u = u.matrix if isinstance(u, LocalUnitary) else np.asarray(u)
    return phase_aligned_error(setting.unitary().matrix, u)


@dataclass
class CompensationPlan:
    """Unitaries U1..U3 for qubits 1..3; qubit 0 carries no plates."""

    unitaries: list[LocalUnitary]
    waveplates: list[WaveplateSetting]
    achieved_fidelity: float
    initial_fidelity: float = float("nan")
    improved: bool = True
    meta: dict = field(default_factory=dict)

    @classmethod
    def identity(cls, achieved_fidelity: float = float("nan")) -> "CompensationPlan":
        plates = [WaveplateSetting(0.0, 0.0, 0.0)] * 3
        # QWP(0) HWP(0) QWP(0) = diag(1, i) diag(1, -1) diag(1, i) = 1
        return cls([LocalUnitary.identity()] * 3, plates, achieved_fidelity, achieved_fidelity)

    def inverse(self) -> "CompensationPlan":
        units = [u.dagger() for u in self.unitaries]
        return CompensationPlan(units, [decompose_su2(u) for u in units], float("nan"))

    def to_json(self) -> dict:
        return {
            "qubits": [1, 2, 3],
            "achieved_fidelity": self.achieved_fidelity,
            "initial_fidelity": self.initial_fidelity,
            "improved": self.improved,
            # degrees are rounded for display; radians keep full precision
            "waveplates_deg": [[round(a, 2) for a in w.degrees()] for w in self.waveplates],
            "waveplates_rad": [[w.x0, w.x1, w.x2] for w in self.waveplates],
            "unitaries": [
                {"real": u.matrix.real.tolist(), "imag": u.matrix.imag.tolist()} for u in self.unitaries
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "CompensationPlan":
        units = [LocalUnitary(np.array(u["real"]) + 1j * np.array(u["imag"])) for u in data["unitaries"]]
        plates = [WaveplateSetting(*w) for w in data["waveplates_rad"]]
        return cls(units, plates, data["achieved_fidelity"], data.get("initial_fidelity", float("nan")))


def apply_plan(rho, plan: CompensationPlan) -> DensityMatrix:
    """Conjugate ``rho`` by (1 x U1 x U2 x U3): returns U^dagger rho U."""
    m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
    if m.shape != (16, 16):
        raise ValueError(f"compensation acts on 4 qubits, got matrix of shape {m.shape}")
    return apply_local_unitaries(m, [LocalUnitary.identity(), *plan.unitaries])


def _rotated_ghz(angles: np.ndarray) -> np.ndarray:
    """(1 x U1 x U2 x U3)|GHZ_0> for the 9 waveplate angles."""
    us = waveplate_stack(angles[0::3], angles[1::3], angles[2::3])
    # columns of U_k are U_k|H>, U_k|V>
    h = np.kron(np.kron(us[0][:, 0], us[1][:, 0]), us[2][:, 0])
    v = np.kron(np.kron(us[0][:, 1], us[1][:, 1]), us[2][:, 1])
    return np.concatenate([h, v]) / np.sqrt(2)


def _neg_fidelity(angles, m):
    phi = _rotated_ghz(angles)
    return -float(np.real(phi.conj() @ m @ phi))


def optimize_compensation(
    rho,
    n_starts: int = 16,
    seed: int = 0,
    tol: float = 1e-8,
) -> CompensationPlan:
    """Maximize F(U^dagger rho U, GHZ_0) over U = 1 x U1 x U2 x U3.

    Each U_k is parametrized directly by its QWP-HWP-QWP angles, so the plan's
    waveplates are the optimizer's variables. F(U^dagger rho U, GHZ) equals
    <phi|rho|phi> with phi = U|GHZ>, which is what gets evaluated.
    """
    m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    if m.shape != (16, 16):
        raise ValueError("optimize_compensation expects a 4-qubit density matrix")
    target = ghz_state(4)
    f0 = fidelity(m, target)
    rng = np.random.default_rng(seed)
    starts = [np.zeros(9)] + [rng.uniform(-np.pi / 2, np.pi / 2, 9) for _ in range(n_starts - 1)]

    best_f, best_x = f0, np.zeros(9)
    for x_start in starts:
        res = minimize(_neg_fidelity, x_start, args=(m,), method="BFGS", options={"gtol": 1e-10})
        f = -res.fun
        # ties keep the earliest start
        if f > best_f + tol * 1e-3:
            best_f, best_x = f, res.x
        if 1.0 - best_f < 1e-12:
            break

    plates = [WaveplateSetting(*best_x[3 * k : 3 * k + 3]) for k in range(3)]
    units = [w.unitary() for w in plates]
    achieved = fidelity(apply_local_unitaries(m, [LocalUnitary.identity(), *units]), target)
    improved = achieved > f0 + tol
    if not improved:
        log.info("compensation did not improve on identity (F=%.10f)", f0)
    if achieved < f0:
        return CompensationPlan.identity(f0)
    return CompensationPlan(units, plates, achieved, f0, improved)
