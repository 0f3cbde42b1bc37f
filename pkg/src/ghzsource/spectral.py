"""Joint spectral amplitudes, filtering, Schmidt purity and HOM dips.

Wavelengths are in nm, times in ps and angular frequencies in rad/ps.
Spectral grids store ``amplitude[idler_row, signal_col]``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq, curve_fit

C_NM_PER_PS = 299792.458
FWHM_PER_SIGMA = 2 * np.sqrt(2 * np.log(2))


def omega(wavelength_nm):
    return 2 * np.pi * C_NM_PER_PS / np.asarray(wavelength_nm, dtype=float)


@dataclass(frozen=True)
class PumpEnvelope:
    center_wavelength: float = 774.75  # nm
    pulse_duration_fwhm: float = 2.0  # ps, intensity FWHM, transform limited
    repetition_rate: float = 76.0  # MHz

    def __post_init__(self):
        if min(self.center_wavelength, self.pulse_duration_fwhm, self.repetition_rate) <= 0:
            raise ValueError("pump parameters must be positive")

    @property
    def bandwidth(self) -> float:
        """Intensity FWHM of the pump spectrum, rad/ps."""
        return 4 * np.log(2) / self.pulse_duration_fwhm

    def amplitude(self, detuning):
        """Spectral amplitude at a pump-frequency detuning (rad/ps)."""
        return np.exp(-(detuning**2) * self.pulse_duration_fwhm**2 / (8 * np.log(2)))


@dataclass(frozen=True)
class PhaseMatching:
    """Linearized quasi-phase matching of a periodically poled crystal.

    ``delta_k = gv_mismatch * (dw_s + group_velocity_slope * dw_i)`` with
    ``dw`` the detuning from the frequency of ``pm_center``. The poling period
    is recorded but the ridge position is set through ``pm_center`` directly.
    """

    crystal_length: float = 30.0  # mm
    poling_period: float = 46.2  # um
    group_velocity_slope: float = -1.0
    pm_center: float = 1549.5  # nm
    gv_mismatch: float = 0.182  # ps/mm

    def __post_init__(self):
        if self.crystal_length <= 0 or self.poling_period <= 0:
            raise ValueError("crystal length and poling period must be positive")

    def amplitude(self, dw_s, dw_i):
        x = 0.5 * self.crystal_length * self.gv_mismatch * (dw_s + self.group_velocity_slope * dw_i)
        return np.sinc(x / np.pi)


@dataclass(frozen=True)
class FilterSpec:
    center: float = 1549.5  # nm
    fwhm: float = 1.3  # nm, of the power transmission
    shape: str = "gaussian"

    def __post_init__(self):
        if self.fwhm <= 0:
            raise ValueError("filter fwhm must be positive")
        if self.shape not in ("gaussian", "rectangular"):
            raise ValueError(f"unknown filter shape {self.shape!r}")

    def amplitude_transmission(self, wavelength):
        d = np.asarray(wavelength, dtype=float) - self.center
        if self.shape == "gaussian":
            # power T = exp(-4 ln2 d^2 / fwhm^2), amplitude is its square root
            return np.exp(-2 * np.log(2) * d**2 / self.fwhm**2)
        # half-step slack keeps a width of one grid step to a single sample
        return (np.abs(d) <= self.fwhm / 2 * (1 + 1e-9)).astype(float)


@dataclass(frozen=True)
class GridSpec:
    start: float = 1546.0
    stop: float = 1553.0
    step: float = 0.02

    def axis(self) -> np.ndarray:
        n = int(round((self.stop - self.start) / self.step)) + 1
        return self.start + self.step * np.arange(n)


@dataclass(frozen=True)
class SpectralGrid:
    lambda_s_axis: np.ndarray
    lambda_i_axis: np.ndarray
    amplitude: np.ndarray

    def __post_init__(self):
        for ax in (self.lambda_s_axis, self.lambda_i_axis):
            steps = np.diff(ax)
            if ax.size > 1 and (np.any(steps <= 0) or np.ptp(steps) > 1e-9):
                raise ValueError("wavelength axes must be strictly increasing with uniform step")
        if self.amplitude.shape != (self.lambda_i_axis.size, self.lambda_s_axis.size):
            raise ValueError("amplitude shape must be (len(idler axis), len(signal axis))")

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.amplitude) ** 2

    def normalized(self) -> np.ndarray:
        norm = np.linalg.norm(self.amplitude)
        if norm == 0:
            raise ValueError("spectral grid has zero total intensity")
        return self.amplitude / norm

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["idler_nm\\signal_nm", *[f"{x:.3f}" for x in self.lambda_s_axis]])
        for li, row in zip(self.lambda_i_axis, self.intensity):
            w.writerow([f"{li:.3f}", *[repr(float(v)) for v in row]])
        return buf.getvalue()

    @staticmethod
    def intensity_from_csv(text: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rows = list(csv.reader(io.StringIO(text)))
        ls = np.array([float(x) for x in rows[0][1:]])
        li = np.array([float(r[0]) for r in rows[1:]])
        inten = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        return ls, li, inten


def build_jsa(
    pump: PumpEnvelope = PumpEnvelope(),
    pm: PhaseMatching = PhaseMatching(),
    axes: GridSpec = GridSpec(),
) -> SpectralGrid:
    """Energy-conservation envelope times sinc phase matching on a wavelength grid."""
    lam = axes.axis()
    w = omega(lam)
    step_omega = np.max(np.abs(np.diff(w))) if w.size > 1 else 0.0
    if step_omega > pump.bandwidth:
        raise ValueError(
            f"grid step ({step_omega:.3g} rad/ps) is coarser than the pump bandwidth ({pump.bandwidth:.3g} rad/ps)"
        )
    ws = w[None, :]
    wi = w[:, None]
    w0 = omega(pm.pm_center)
    amp = pump.amplitude(ws + wi - omega(pump.center_wavelength)) * pm.amplitude(ws - w0, wi - w0)
    grid = SpectralGrid(lam.copy(), lam.copy(), amp.astype(complex))
    grid.normalized()  # raises on an empty window
    return grid


def apply_filter(grid: SpectralGrid, signal_filter: FilterSpec, idler_filter: FilterSpec) -> SpectralGrid:
    for f, ax, name in ((signal_filter, grid.lambda_s_axis, "signal"), (idler_filter, grid.lambda_i_axis, "idler")):
        if not ax[0] <= f.center <= ax[-1]:
            raise ValueError(f"{name} filter center {f.center} nm is outside the grid")
    ts = signal_filter.amplitude_transmission(grid.lambda_s_axis)
    ti = idler_filter.amplitude_transmission(grid.lambda_i_axis)
    return replace(grid, amplitude=grid.amplitude * ti[:, None] * ts[None, :])


def schmidt_coefficients(grid: SpectralGrid) -> np.ndarray:
    return np.linalg.svd(grid.normalized(), compute_uv=False)


def schmidt_purity(grid: SpectralGrid) -> float:
    """Sum of s_k^4 over the singular values of the unit-norm JSA."""
    s = schmidt_coefficients(grid)
    return float(np.sum(s**4))


def schmidt_number(grid: SpectralGrid) -> float:
    return 1.0 / schmidt_purity(grid)


def heralded_idler_state(grid: SpectralGrid) -> np.ndarray:
    """Reduced spectral density matrix of the idler (rows of the grid)."""
    a = grid.normalized()
    return a @ a.conj().T


def marginal_bandwidth(grid: SpectralGrid, axis: str = "idler") -> float:
    """RMS width of a marginal spectral intensity in rad/ps."""
    inten = grid.intensity
    if axis == "idler":
        w, m = omega(grid.lambda_i_axis), inten.sum(axis=1)
    else:
        w, m = omega(grid.lambda_s_axis), inten.sum(axis=0)
    m = m / m.sum()
    mean = np.sum(w * m)
    return float(np.sqrt(np.sum(m * (w - mean) ** 2)))


def jitter_visibility(bandwidth: float, jitter_sigma: float) -> float:
    """Visibility penalty from Gaussian timing jitter.

    A photon with spectral RMS width ``bandwidth`` has a dip overlap
    exp(-bandwidth^2 tau^2) at relative delay tau. Each photon is delayed by
    N(0, jitter_sigma^2), so tau ~ N(0, 2 jitter_sigma^2), and averaging
    gives 1 / sqrt(1 + 4 bandwidth^2 jitter_sigma^2).
    """
    return float(1.0 / np.sqrt(1.0 + 4.0 * bandwidth**2 * jitter_sigma**2))


def jitter_for_visibility(bandwidth: float, target: float = 0.95) -> float:
    """Inverse of :func:`jitter_visibility` in the jitter argument."""
    if not 0 < target <= 1:
        raise ValueError("target visibility must be in (0, 1]")
    return float(np.sqrt(1.0 / target**2 - 1.0) / (2.0 * bandwidth))


def hom_visibility(grid_a: SpectralGrid, grid_b: SpectralGrid, jitter_sigma: float = 0.0) -> float:
    """Two-source heralded HOM visibility Tr(rho_a rho_b) times the jitter penalty."""
    if not (
        np.array_equal(grid_a.lambda_s_axis, grid_b.lambda_s_axis)
        and np.array_equal(grid_a.lambda_i_axis, grid_b.lambda_i_axis)
    ):
        raise ValueError("grids must share identical axes")
    rho_a, rho_b = heralded_idler_state(grid_a), heralded_idler_state(grid_b)
    overlap = float(np.real(np.trace(rho_a @ rho_b)))
    bw = 0.5 * (marginal_bandwidth(grid_a) + marginal_bandwidth(grid_b))
    return overlap * jitter_visibility(bw, jitter_sigma)


@dataclass
class HomScan:
    delays: np.ndarray
    coincidences: np.ndarray

    def __post_init__(self):
        self.delays = np.asarray(self.delays, dtype=float)
        self.coincidences = np.asarray(self.coincidences, dtype=float)
        if self.delays.shape != self.coincidences.shape:
            raise ValueError("delays and coincidences must have equal length")
        if np.any(self.coincidences < 0):
            raise ValueError("coincidence counts must be nonnegative")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delay_ps", "counts"])
        for d, c in zip(self.delays, self.coincidences):
            w.writerow([repr(float(d)), repr(float(c))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "HomScan":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        return cls(np.array([float(r[0]) for r in rows]), np.array([float(r[1]) for r in rows]))


def hom_model(tau, v, sigma, c0):
    return c0 * (1.0 - v * np.exp(-(np.asarray(tau) ** 2) / (2 * sigma**2)))


def hom_curve(v: float, sigma: float, c0: float, delays, noise_seed: int | None = None) -> HomScan:
    if not 0 <= v <= 1:
        raise ValueError("visibility must be in [0, 1]")
    if sigma <= 0 or c0 <= 0:
        raise ValueError("sigma and c0 must be positive")
    delays = np.asarray(delays, dtype=float)
    expected = hom_model(delays, v, sigma, c0)
    if noise_seed is None:
        return HomScan(delays, expected)
    rng = np.random.default_rng(noise_seed)
    return HomScan(delays, rng.poisson(expected).astype(float))


class HomFitError(RuntimeError):
    def __init__(self, message: str, residual_norm: float):
        super().__init__(f"{message} (residual norm {residual_norm:.4g})")
        self.residual_norm = residual_norm


@dataclass
class HomFit:
    v: float
    sigma: float
    c0: float
    tau_fwhm: float
    v_err: float
    sigma_err: float
    c0_err: float
    tau_fwhm_err: float
    residual_norm: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def fit_hom(scan: HomScan) -> HomFit:
    """Weighted Gaussian-dip fit; tau_fwhm = 2 sqrt(2 ln 2) sigma."""
    t, y = scan.delays, scan.coincidences
    if t.size < 5:
        raise ValueError("need at least 5 points to fit a HOM dip")
    # baseline from the outer quarter of the scan, depth from the minimum
    order = np.argsort(np.abs(t))
    c0_guess = float(np.mean(y[order[-max(2, t.size // 4) :]]))
    c0_guess = c0_guess if c0_guess > 0 else float(np.max(y) + 1)
    v_guess = float(np.clip(1 - np.min(y) / c0_guess, 0.01, 0.99))
    below = np.abs(t[y < c0_guess * (1 - v_guess / 2)])
    sigma_guess = float(below.max() / np.sqrt(2 * np.log(2))) if below.size else float(np.ptp(t) / 8)
    sigma_guess = max(sigma_guess, float(np.min(np.diff(np.sort(t)))) / 2)
    weights = np.sqrt(np.maximum(y, 1.0))

    try:
        popt, pcov = curve_fit(
            hom_model,
            t,
            y,
            p0=[v_guess, sigma_guess, c0_guess],
            sigma=weights,
            absolute_sigma=True,
            bounds=([-1.0, 1e-6, 0.0], [1.0, 10 * np.ptp(t), np.inf]),
            xtol=1e-15,
            ftol=1e-15,
            gtol=1e-15,
            max_nfev=10000,
        )
    except (RuntimeError, ValueError) as exc:
        resid = float(np.linalg.norm((y - hom_model(t, v_guess, sigma_guess, c0_guess)) / weights))
        raise HomFitError(f"HOM fit did not converge: {exc}", resid) from exc
    resid = float(np.linalg.norm((y - hom_model(t, *popt)) / weights))
    perr = np.sqrt(np.abs(np.diag(pcov)))
    if not np.all(np.isfinite(popt)):
        raise HomFitError("HOM fit returned non-finite parameters", resid)
    v, sigma, c0 = popt
    return HomFit(
        v=float(v),
        sigma=float(sigma),
        c0=float(c0),
        tau_fwhm=float(FWHM_PER_SIGMA * sigma),
        v_err=float(perr[0]),
        sigma_err=float(perr[1]),
        c0_err=float(perr[2]),
        tau_fwhm_err=float(FWHM_PER_SIGMA * perr[1]),
        residual_norm=resid,
    )


def find_peak(grid: SpectralGrid) -> tuple[float, float]:
    """(signal nm, idler nm) of the intensity maximum."""
    i, j = np.unravel_index(np.argmax(grid.intensity), grid.amplitude.shape)
    return float(grid.lambda_s_axis[j]), float(grid.lambda_i_axis[i])


def marginal_fwhm_nm(grid: SpectralGrid, axis: str = "signal") -> float:
    inten = grid.intensity
    lam, m = (grid.lambda_s_axis, inten.sum(axis=0)) if axis == "signal" else (grid.lambda_i_axis, inten.sum(axis=1))
    half = m.max() / 2
    k = int(np.argmax(m))
    f = lambda x: np.interp(x, lam, m) - half  # noqa: E731
    left = lam[:k][m[:k] < half]
    right = lam[k:][m[k:] < half]
    lo = brentq(f, left[-1], lam[k]) if left.size else lam[0]
    hi = brentq(f, lam[k], right[0]) if right.size else lam[-1]
    return float(hi - lo)
