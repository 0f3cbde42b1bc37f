"""Polarization-analyzer tomography: settings, count simulation, LRE, fast MLE.

Each qubit is read out by an HWP, then a QWP, then a PBS whose transmitted
('+', bit 0) port receives H and reflected ('-', bit 1) port receives V. A
photon in polarization ``psi`` leaves the plates as ``M psi`` with
``M = QWP(q) HWP(h)``, so outcome ``b`` projects onto ``M^dagger |b>``.
Outcomes are integers whose big-endian bits are the per-qubit port bits.
"""
from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .polarization import DensityMatrix, PureState, fidelity, ghz_state, hwp_matrix, kron_all, qwp_matrix

log = logging.getLogger(__name__)

LABELS = ("X", "Y", "Z", "-Z")
# (hwp, qwp) angles in radians; '+' port projects onto D, R, H and V respectively
ANALYZER_ANGLES = {
    "Z": (0.0, 0.0),
    "-Z": (np.pi / 4, 0.0),
    "X": (np.pi / 8, 0.0),
    "Y": (0.0, -np.pi / 4),
}
DEFAULT_ANGLE_SIGMA = np.radians(0.1)

_PAULIS = np.array(
    [[[1, 0], [0, 1]], [[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]],
    dtype=complex,
)


@dataclass(frozen=True)
class MeasurementSetting:
    labels: tuple[str, ...]
    angles: tuple[tuple[float, float], ...]

    def __post_init__(self):
        bad = [lab for lab in self.labels if lab not in LABELS]
        if bad:
            raise ValueError(f"unknown basis labels {bad}")
        if len(self.angles) != len(self.labels):
            raise ValueError("need one (hwp, qwp) pair per qubit")

    @classmethod
    def from_labels(cls, labels) -> "MeasurementSetting":
        labels = tuple(labels)
        bad = [lab for lab in labels if lab not in ANALYZER_ANGLES]
        if bad:
            raise ValueError(f"unknown basis labels {bad}")
        return cls(labels, tuple(ANALYZER_ANGLES[lab] for lab in labels))

    @property
    def n_qubits(self) -> int:
        return len(self.labels)

    def analyzers(self) -> np.ndarray:
        a = np.asarray(self.angles)
        return analyzer_matrices(a[:, 0], a[:, 1])


def analyzer_matrices(hwp, qwp) -> np.ndarray:
    """M = QWP(qwp) HWP(hwp), broadcasting."""
    return qwp_matrix(qwp) @ hwp_matrix(hwp)


def settings(n_qubits: int = 4) -> list[MeasurementSetting]:
    """All 3^n XYZ combinations followed by the 2^n {Z, -Z} combinations."""
    xyz = [MeasurementSetting.from_labels(c) for c in itertools.product(("X", "Y", "Z"), repeat=n_qubits)]
    zz = [MeasurementSetting.from_labels(c) for c in itertools.product(("Z", "-Z"), repeat=n_qubits)]
    return xyz + zz


def settings_97() -> list[MeasurementSetting]:
    return settings(4)


def outcome_bits(outcome: int, n_qubits: int) -> tuple[int, ...]:
    if not 0 <= outcome < 2**n_qubits:
        raise ValueError(f"outcome {outcome} out of range for {n_qubits} qubits")
    return tuple((outcome >> (n_qubits - 1 - k)) & 1 for k in range(n_qubits))


def as_detector_efficiencies(eff, n_qubits: int) -> np.ndarray:
    """Normalize efficiency input to an (n, 2) array of per-port efficiencies.

    A length-n vector is read as the efficiency of each '-' port relative to
    its '+' port.
    """
    if eff is None:
        return np.ones((n_qubits, 2))
    e = np.asarray(eff, dtype=float)
    if e.shape == (n_qubits,):
        e = np.stack([np.ones(n_qubits), e], axis=1)
    if e.shape != (n_qubits, 2):
        raise ValueError(f"efficiencies must have shape ({n_qubits},) or ({n_qubits}, 2)")
    if np.any(e < 0):
        raise ValueError("efficiencies must be nonnegative")
    return e


def outcome_efficiencies(eff, n_qubits: int) -> np.ndarray:
    """eta(o) for every outcome, as a product over qubits."""
    e = as_detector_efficiencies(eff, n_qubits)
    return kron_all(list(e))


def outcome_projector(setting: MeasurementSetting, outcome: int, efficiencies=None) -> np.ndarray:
    bits = outcome_bits(outcome, setting.n_qubits)
    ms = setting.analyzers()
    vecs = [ms[k][b].conj() for k, b in enumerate(bits)]
    psi = kron_all(vecs)
    scale = 1.0 if efficiencies is None else outcome_efficiencies(efficiencies, setting.n_qubits)[outcome]
    return scale * np.outer(psi, psi.conj())


def _json_count(c) -> int | float:
    return int(c) if float(c).is_integer() else float(c)


@dataclass
class CountRecord:
    setting: MeasurementSetting
    counts: np.ndarray
    acquisition_s: float = 1.0
    fivefold: np.ndarray | None = None  # (n, 2^(n-1)): [qubit with both ports, other bits]

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.shape != (2**self.setting.n_qubits,):
            raise ValueError("counts must have one entry per outcome")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")
        if self.fivefold is not None:
            self.fivefold = np.asarray(self.fivefold)
            n = self.setting.n_qubits
            if self.fivefold.shape != (n, 2 ** (n - 1)):
                raise ValueError(f"fivefold counts must have shape ({n}, {2 ** (n - 1)})")

    def to_json(self) -> dict:
        d = {
            "setting": list(self.setting.labels),
            "counts": [_json_count(c) for c in self.counts],
            "acquisition_s": float(self.acquisition_s),
        }
        if any(self.setting.angles[k] != ANALYZER_ANGLES[lab] for k, lab in enumerate(self.setting.labels)):
            d["angles"] = [list(a) for a in self.setting.angles]
        if self.fivefold is not None:
            d["fivefold"] = [[_json_count(c) for c in row] for row in self.fivefold]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CountRecord":
        setting = MeasurementSetting.from_labels(d["setting"])
        if "angles" in d:
            setting = MeasurementSetting(setting.labels, tuple(tuple(a) for a in d["angles"]))
        five = np.asarray(d["fivefold"]) if "fivefold" in d else None
        return cls(setting, np.asarray(d["counts"]), float(d.get("acquisition_s", 1.0)), five)


def dump_records(records: list[CountRecord]) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)


def load_records(text: str) -> list[CountRecord]:
    return [CountRecord.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def expected_probabilities(rho, setting: MeasurementSetting) -> np.ndarray:
    m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    big = kron_all(list(setting.analyzers()))
    return np.clip(np.real(np.einsum("ij,jk,ik->i", big, m, big.conj())), 0.0, None)


def simulate_counts(rho, setting: MeasurementSetting, mean_total: float, efficiencies=None, seed=None,
                    acquisition_s: float = 1.0) -> CountRecord:
    """Poisson counts with mean ``mean_total * eta(o) * Tr(Pi_o rho)``."""
    if mean_total <= 0:
        raise ValueError("mean_total must be positive")
    lam = mean_total * outcome_efficiencies(efficiencies, setting.n_qubits) * expected_probabilities(rho, setting)
    return CountRecord(setting, _rng(seed).poisson(lam), acquisition_s)


def simulate_dataset(rho, mean_total: float, efficiencies=None, seed=None, n_qubits: int | None = None,
                     acquisition_s: float = 1.0) -> list[CountRecord]:
    n = n_qubits or int(round(np.log2((rho.matrix if isinstance(rho, DensityMatrix) else rho).shape[0])))
    rng = _rng(seed)
    return [simulate_counts(rho, s, mean_total, efficiencies, rng, acquisition_s) for s in settings(n)]


def calibrate_efficiencies(records: list[CountRecord]) -> np.ndarray:
    """Relative port efficiencies from the {Z, -Z} block.

    For every qubit the same polarization pattern is seen through the '+' port
    under Z and through the '-' port under -Z, with all other factors equal, so
    the pooled '-'/'+' count ratio estimates the port efficiency ratio. Returns
    an (n, 2) array with each qubit's pair normalized to mean 1.
    """
    block = [r for r in records if all(lab in ("Z", "-Z") for lab in r.setting.labels)]
    if not block:
        raise ValueError("no {Z, -Z} settings among the records")
    n = block[0].setting.n_qubits
    # ZZ..Z also sits in the XYZ set; repeated settings are averaged so each counts once
    rates: dict[tuple, list] = {}
    for r in block:
        rates.setdefault(r.setting.labels, []).append(r.counts / r.acquisition_s)
    if len(rates) != 2**n:
        raise ValueError(f"need all {2**n} {{Z, -Z}} settings, got {len(rates)}")
    bits = np.array([outcome_bits(o, n) for o in range(2**n)])
    plus, minus = np.zeros(n), np.zeros(n)
    for reps in rates.values():
        rate = np.mean(reps, axis=0)
        minus += rate @ bits
        plus += rate @ (1 - bits)
    if np.any(plus <= 0) or np.any(minus <= 0):
        raise ValueError("zero total counts in an analyzer port; cannot calibrate efficiencies")
    ratio = minus / plus
    return np.stack([2 / (1 + ratio), 2 * ratio / (1 + ratio)], axis=1)


# ---------------------------------------------------------------- LRE


def bloch_rows(analyzers: np.ndarray) -> np.ndarray:
    """Pauli expectation rows [1, x, y, z] of each outcome eigenvector.

    ``analyzers`` has shape (..., 2, 2); output (..., 2 outcomes, 4).
    """
    v = analyzers.conj()  # row b of conj(M) is the eigenvector for outcome b
    v0, v1 = v[..., 0], v[..., 1]
    cross = np.conj(v0) * v1
    x = 2 * cross.real
    y = 2 * cross.imag
    z = np.abs(v0) ** 2 - np.abs(v1) ** 2
    return np.stack([np.ones_like(x), x, y, z], axis=-1)


def design_matrix(angles: np.ndarray) -> np.ndarray:
    """Rows Tr(Pi_{s,o} P) / 2^n for angles of shape (S, n, 2)."""
    S, n, _ = angles.shape
    t = bloch_rows(analyzer_matrices(angles[..., 0], angles[..., 1]))  # (S, n, 2, 4)
    rows = t[:, 0]  # (S, 2, 4)
    for k in range(1, n):
        rows = np.einsum("sab,scd->sacbd", rows, t[:, k]).reshape(S, 2 ** (k + 1), 4 ** (k + 1))
    return rows.reshape(S * 2**n, 4**n) / 2**n


@lru_cache(maxsize=4)
def pauli_basis(n_qubits: int) -> np.ndarray:
    mats = [kron_all([_PAULIS[j] for j in idx]) for idx in itertools.product(range(4), repeat=n_qubits)]
    return np.array(mats)


class _NormalSolver:
    """Normal-equation least squares for the non-identity Pauli coefficients."""

    def __init__(self, a: np.ndarray):
        self.a0 = a[:, 0]
        self.sub = a[:, 1:]
        gram = self.sub.T @ self.sub
        try:
            self.cho = cho_factor(gram)
        except np.linalg.LinAlgError:
            raise ValueError("rank-deficient design matrix; settings are not informationally complete") from None
        d = np.abs(np.diag(self.cho[0]))
        # squared diagonal ratio of the Cholesky factor bounds the conditioning from below
        if d.min() ** 2 < 1e-12 * d.max() ** 2:
            raise ValueError("rank-deficient design matrix; settings are not informationally complete")

    def __call__(self, f: np.ndarray) -> np.ndarray:
        return cho_solve(self.cho, self.sub.T @ (f - self.a0))


@lru_cache(maxsize=16)
def _cached_solver(key: bytes, shape: tuple, mask_key: bytes) -> _NormalSolver:
    angles = np.frombuffer(key).reshape(shape)
    mask = np.frombuffer(mask_key, dtype=bool)
    return _NormalSolver(design_matrix(angles)[mask])


def normalized_frequencies(records: list[CountRecord], efficiencies=None, counts=None):
    """Per-setting frequencies of efficiency-corrected counts and a row mask."""
    n = records[0].setting.n_qubits
    eta = outcome_efficiencies(efficiencies, n)
    c = np.array([r.counts for r in records], dtype=float) if counts is None else np.asarray(counts, float)
    c = c / eta
    tot = c.sum(axis=1, keepdims=True)
    ok = tot[:, 0] > 0
    f = np.divide(c, tot, out=np.zeros_like(c), where=tot > 0)
    return f.ravel(), np.repeat(ok, 2**n)


def lre_reconstruct(records: list[CountRecord], efficiencies=None, angles=None, counts=None) -> np.ndarray:
    """Least-squares Hermitian, trace-1 estimate in the Pauli basis.

    The identity coefficient is pinned so the trace is exactly 1. ``angles``
    and ``counts`` override the records' values (used for resampling).
    """
    n = records[0].setting.n_qubits
    ang = np.array([r.setting.angles for r in records], dtype=float) if angles is None else np.asarray(angles, float)
    f, mask = normalized_frequencies(records, efficiencies, counts)
    if angles is None:
        solver = _cached_solver(np.ascontiguousarray(ang).tobytes(), ang.shape, mask.tobytes())
    else:
        solver = _NormalSolver(design_matrix(ang)[mask])
    coeffs = np.concatenate([[1.0], solver(f[mask])])
    rho = np.einsum("p,pij->ij", coeffs, pauli_basis(n)) / 2**n
    return (rho + rho.conj().T) / 2


# ---------------------------------------------------------------- MLE


def project_eigenvalues(mu: np.ndarray) -> np.ndarray:
    """Truncate-and-redistribute on eigenvalues sorted in descending order."""
    mu = np.asarray(mu, dtype=float)
    lam = mu.copy()
    i = mu.size
    acc = 0.0
    while i > 0 and lam[i - 1] + acc / i < 0:
        acc += lam[i - 1]
        lam[i - 1] = 0.0
        i -= 1
    lam[:i] += acc / i
    return lam


def mle_project(h) -> DensityMatrix:
    """Closest physical density matrix by the fast eigenvalue method.

    The most negative eigenvalue is zeroed and its weight spread evenly over the
    remaining ones until the spectrum is nonnegative.
    """
    m = np.asarray(h.matrix if isinstance(h, DensityMatrix) else h, dtype=complex)
    m = (m + m.conj().T) / 2
    tr = np.trace(m).real
    if abs(tr - 1) > 1e-9:
        m = m + (1 - tr) / m.shape[0] * np.eye(m.shape[0])
    w, v = np.linalg.eigh(m)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    lam = project_eigenvalues(w)
    rho = (v * lam) @ v.conj().T
    rho = (rho + rho.conj().T) / 2
    rho /= np.trace(rho).real
    return DensityMatrix(int(round(np.log2(m.shape[0]))), rho)


# ---------------------------------------------------------------- pipeline


@dataclass
class ReconstructionResult:
    rho: DensityMatrix
    fidelity_to_ghz: float
    fidelity_err: float = 0.0
    method: str = "LRE+MLE"
    mc_samples: int = 0
    mc_failures: int = 0
    efficiencies: np.ndarray | None = None
    lre_min_eigenvalue: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        m = self.rho.matrix
        d = {
            "n_qubits": self.rho.n_qubits,
            "method": self.method,
            "fidelity_to_ghz": self.fidelity_to_ghz,
            "fidelity_err": self.fidelity_err,
            "mc_samples": self.mc_samples,
            "mc_failures": self.mc_failures,
            "lre_min_eigenvalue": self.lre_min_eigenvalue,
            "rho_real": m.real.tolist(),
            "rho_imag": m.imag.tolist(),
        }
        if self.efficiencies is not None:
            d["efficiencies"] = np.asarray(self.efficiencies).tolist()
        d.update(self.extra)
        return d

    @staticmethod
    def rho_from_json(d: dict) -> DensityMatrix:
        m = np.array(d["rho_real"]) + 1j * np.array(d["rho_imag"])
        return DensityMatrix(int(round(np.log2(m.shape[0]))), m)


def _resolve_efficiencies(records, efficiencies, counts=None):
    if isinstance(efficiencies, str):
        if efficiencies != "calibrate":
            raise ValueError(f"unknown efficiency mode {efficiencies!r}")
        if counts is None:
            return calibrate_efficiencies(records)
        return calibrate_efficiencies([CountRecord(r.setting, c, r.acquisition_s) for r, c in zip(records, counts)])
    return efficiencies


def estimate(records, efficiencies="calibrate", angles=None, counts=None, mle: bool = True):
    eff = _resolve_efficiencies(records, efficiencies, counts)
    h = lre_reconstruct(records, eff, angles=angles, counts=counts)
    return (mle_project(h) if mle else h), h, eff


def reconstruct(records: list[CountRecord], target: PureState | None = None, efficiencies="calibrate",
                mle: bool = True) -> ReconstructionResult:
    n = records[0].setting.n_qubits
    target = ghz_state(n) if target is None else target
    rho, h, eff = estimate(records, efficiencies, mle=mle)
    if not mle:
        rho = DensityMatrix(n, rho) if np.linalg.eigvalsh(rho).min() >= -1e-9 else mle_project(rho)
    return ReconstructionResult(
        rho=rho,
        fidelity_to_ghz=fidelity(rho, target),
        method="LRE+MLE" if mle else "LRE",
        efficiencies=None if eff is None else as_detector_efficiencies(eff, n),
        lre_min_eigenvalue=float(np.linalg.eigvalsh(h).min()),
    )


class MonteCarloError(RuntimeError):
    pass


def monte_carlo_errors(
    records: list[CountRecord],
    n_samples: int = 500,
    angle_sigma: float = DEFAULT_ANGLE_SIGMA,
    seed=0,
    target: PureState | None = None,
    efficiencies="calibrate",
    alpha: float | None = None,
    workers: int = 1,
) -> tuple[float, float, int]:
    """Mean and standard deviation of the fidelity over resampled data.

    Every sample redraws all counts from Poisson distributions centred on the
    observed ones, jitters every waveplate angle by N(0, angle_sigma) and runs
    LRE+MLE again. With ``alpha`` set, fivefold counts are resampled too and
    the higher-order correction is reapplied. Per-sample generators are
    spawned from ``seed``, so results do not depend on ``workers``.
    """
    from .source import correct_records  # local import: source depends on this module

    if n_samples < 2:
        raise ValueError("need at least 2 Monte Carlo samples")
    n = records[0].setting.n_qubits
    target = ghz_state(n) if target is None else target
    base_counts = np.array([r.counts for r in records], dtype=float)
    base_angles = np.array([r.setting.angles for r in records], dtype=float)
    base_five = None
    if alpha is not None:
        base_five = np.array([r.fivefold if r.fivefold is not None else np.zeros((n, 2 ** (n - 1))) for r in records])
    if isinstance(seed, np.random.SeedSequence):
        # fresh copy keeps the spawn key but not the spawn counter, so reruns agree
        seed = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    else:
        seed = np.random.SeedSequence(seed)
    children = seed.spawn(n_samples)

    def one(child):
        rng = np.random.default_rng(child)
        counts = rng.poisson(base_counts).astype(float)
        angles = base_angles + rng.normal(0.0, angle_sigma, base_angles.shape) if angle_sigma > 0 else None
        if base_five is not None:
            five = rng.poisson(base_five)
            counts = correct_records(counts, five, alpha)[0]
        try:
            rho, _, _ = estimate(records, efficiencies, angles=angles, counts=counts)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.debug("Monte Carlo sample failed: %s", exc)
            return None
        return fidelity(rho, target)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            fids = list(pool.map(one, children))
    else:
        fids = [one(c) for c in children]
    good = np.array([f for f in fids if f is not None])
    failed = n_samples - good.size
    if failed > 0.01 * n_samples:
        raise MonteCarloError(f"{failed} of {n_samples} Monte Carlo reconstructions failed")
    return float(good.mean()), float(good.std(ddof=1)), failed
