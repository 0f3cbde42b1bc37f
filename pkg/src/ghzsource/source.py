"""Two-layer pair source, PBS fusion and coincidence statistics.

Modes. Four output paths carry the qubits in the order (s1, c, d, s2): the top
signal, the two PBS outputs and the bottom signal. Signal paths have two
local modes (H, V). PBS outputs have four local modes, ``pol + 2 * tag``,
where ``tag`` is an internal label that makes idler photons distinguishable:
top idlers are created in tag 0 and bottom idlers in
``sqrt(v)|0> + sqrt(1 - v)|1>``, so their amplitude overlap is ``sqrt(v)``.

The PBS maps input creation operators as

    a_H -> sqrt(1-e) c_H + sqrt(e) d_H      b_H -> sqrt(1-e) d_H - sqrt(e) c_H
    a_V -> sqrt(1-e) d_V + sqrt(e) c_V      b_V -> sqrt(1-e) c_V - sqrt(e) d_V

with ``e`` the linear extinction. An ideal fusion with one photon in each of c
and d leaves |HVVH> + e^{i delta}|VHHV>; an X frame on c and d turns this into
GHZ_delta with delta = theta_top + theta_bottom. Fiber rotations act on the
four output qubits after that frame.

Each path ends in an analyzer and two threshold detectors. Per path a click
pattern is one of '+', '-' or 'both' (index 0, 1, 2); patterns where some path
stays dark never matter here and are not tracked.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq, least_squares

from . import fock
from .polarization import DensityMatrix, LocalUnitary, fidelity, ghz_state, kron_all
from .tomography import (
    CountRecord,
    MeasurementSetting,
    as_detector_efficiencies,
    estimate,
    lre_reconstruct,
    mle_project,
    settings as all_settings,
)

log = logging.getLogger(__name__)

N_PATHS = 4
S1, C, D, S2 = range(N_PATHS)
PATH_MODES = (2, 4, 4, 2)
_X = np.array([[0, 1], [1, 0]], dtype=complex)


# ---------------------------------------------------------------- emission


@dataclass(frozen=True)
class EmissionStats:
    distribution: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.distribution, dtype=float)
        if np.any(d < 0) or abs(d.sum() - 1) > 1e-12:
            raise ValueError("emission distribution must be nonnegative and sum to 1")
        object.__setattr__(self, "distribution", d)

    def __getitem__(self, k: int) -> float:
        return float(self.distribution[k]) if k < self.distribution.size else 0.0


def emission_distribution(p: float, n_max: int = 3) -> EmissionStats:
    """Truncated geometric P(k) proportional to p^k, k = 0..n_max."""
    if not 0 <= p < 1:
        raise ValueError(f"emission probability must be in [0, 1), got {p}")
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    w = p ** np.arange(n_max + 1)
    return EmissionStats(w / w.sum())


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class SourceConfig:
    p_top: float = 0.01
    p_bottom: float = 0.01
    theta_top: float = 0.0
    theta_bottom: float = 0.0
    overlap_v: float = 1.0
    extinction_db: float = math.inf
    arm_efficiency: tuple = (1.0, 1.0, 1.0, 1.0)
    detector_efficiency: tuple | None = None  # (4, 2) relative port efficiencies, default all 1
    fiber_unitaries: tuple | None = None  # 4 LocalUnitary, default identities
    pulse_rate_hz: float = 76e6
    n_max: int = 3
    max_pairs: int = 3  # highest total pair number kept per pulse
    noise_model: str = "physical"
    alpha: float | None = None  # fivefold subtraction weight, default 1 / heralding efficiency

    def __post_init__(self):
        for name in ("p_top", "p_bottom"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if not 0 <= self.overlap_v <= 1:
            raise ValueError("overlap_v must be in [0, 1]")
        if not self.extinction_db > 0:
            raise ValueError("extinction_db must be positive")
        eff = np.asarray(self.arm_efficiency, dtype=float)
        if eff.shape != (N_PATHS,) or np.any(eff < 0) or np.any(eff > 1):
            raise ValueError("arm_efficiency must be 4 values in [0, 1]")
        object.__setattr__(self, "arm_efficiency", tuple(float(x) for x in eff))
        if self.detector_efficiency is not None:
            det = as_detector_efficiencies(self.detector_efficiency, N_PATHS)
            if np.any(det * eff[:, None] > 1 + 1e-12):
                raise ValueError("arm times detector efficiency exceeds 1")
            object.__setattr__(self, "detector_efficiency", tuple(map(tuple, det)))
        if self.fiber_unitaries is not None:
            units = tuple(u if isinstance(u, LocalUnitary) else LocalUnitary(u) for u in self.fiber_unitaries)
            if len(units) != N_PATHS:
                raise ValueError("need 4 fiber unitaries")
            object.__setattr__(self, "fiber_unitaries", units)
        if self.n_max < 2:
            raise ValueError("n_max must be at least 2")
        if self.max_pairs < 2:
            raise ValueError("max_pairs must be at least 2")
        if self.pulse_rate_hz <= 0:
            raise ValueError("pulse_rate_hz must be positive")
        if self.noise_model not in ("physical", "white"):
            raise ValueError("noise_model must be 'physical' or 'white'")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    @property
    def extinction(self) -> float:
        return 0.0 if math.isinf(self.extinction_db) else 10 ** (-self.extinction_db / 10)

    @property
    def delta(self) -> float:
        return self.theta_top + self.theta_bottom

    def port_efficiencies(self) -> np.ndarray:
        det = np.ones((N_PATHS, 2)) if self.detector_efficiency is None else np.asarray(self.detector_efficiency)
        return np.clip(np.asarray(self.arm_efficiency)[:, None] * det, 0.0, 1.0)

    def fibers(self) -> list[np.ndarray]:
        if self.fiber_unitaries is None:
            return [np.eye(2, dtype=complex)] * N_PATHS
        return [u.matrix for u in self.fiber_unitaries]

    def heralding_efficiency(self) -> float:
        return float(self.port_efficiencies().mean())

    def default_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        eta = self.heralding_efficiency()
        if eta <= 0:
            raise ValueError("heralding efficiency is zero; alpha undefined")
        return 1.0 / eta

    def pattern_weights(self) -> dict:
        """P_top(kt) P_bottom(kb) for every pattern that can fire all four paths."""
        pt = emission_distribution(self.p_top, self.n_max)
        pb = emission_distribution(self.p_bottom, self.n_max)
        return {k: pt[k[0]] * pb[k[1]] for k in emission_patterns(self.n_max, self.max_pairs)}

    def with_(self, **changes) -> "SourceConfig":
        return replace(self, **changes)


def emission_patterns(n_max: int = 3, max_pairs: int = 3) -> list[tuple[int, int]]:
    return [(kt, kb) for kt in range(1, n_max + 1) for kb in range(1, n_max + 1) if kt + kb <= max_pairs]


# ---------------------------------------------------------------- state


def _mode(path: int, pol: int, tag: int = 0) -> int:
    return 4 * path + pol + 2 * tag


def _pbs(layer: str, pol: int, tag: int, eps: float) -> dict:
    """Output modes and amplitudes of one idler creation operator."""
    t, r = np.sqrt(1 - eps), np.sqrt(eps)
    # (main port, leak port) per polarization; the bottom input leaks with a sign flip
    main, leak = (C, D) if (pol == 0) == (layer == "top") else (D, C)
    sign = 1.0 if layer == "top" else -1.0
    return {_mode(main, pol, tag): t, _mode(leak, pol, tag): sign * r}


def _pair_poly(cfg: SourceConfig, layer: str) -> fock.Poly:
    """(s_H i_V + e^{i theta} s_V i_H) / sqrt(2) after the PBS."""
    eps = cfg.extinction
    if layer == "top":
        sig, theta, tags = S1, cfg.theta_top, {0: 1.0}
    else:
        v = cfg.overlap_v
        sig, theta, tags = S2, cfg.theta_bottom, {0: np.sqrt(v), 1: np.sqrt(1 - v)}

    def idler(pol):
        out: dict = {}
        for tag, amp in tags.items():
            for mode, c in _pbs(layer, pol, tag, eps).items():
                out[mode] = out.get(mode, 0) + amp * c
        return fock.linear_form(out)

    hv = fock.poly_mul(fock.linear_form({_mode(sig, 0): 1.0}), idler(1))
    vh = fock.poly_mul(fock.linear_form({_mode(sig, 1): np.exp(1j * theta)}), idler(0))
    poly = dict(hv)
    for k, c in vh.items():
        poly[k] = poly.get(k, 0) + c
    return {k: c / np.sqrt(2) for k, c in poly.items()}


def pattern_sectors(cfg: SourceConfig, kt: int, kb: int) -> dict:
    """Normalized (A^dagger)^kt (B^dagger)^kb |0>, split by photons per path.

    Returns {(n_s1, n_c, n_d, n_s2): amplitude tensor}, each tensor indexed by
    the local Fock basis of every path. Only sectors with a photon in every
    path are returned; the squared norms of all sectors, kept or not, sum to 1.
    """
    poly = fock.poly_mul(fock.poly_pow(_pair_poly(cfg, "top"), kt), fock.poly_pow(_pair_poly(cfg, "bottom"), kb))
    amps = fock.fock_amplitudes(poly, 4 * N_PATHS)
    norm = np.sqrt(sum(abs(a) ** 2 for a in amps.values()))
    sectors: dict = {}
    for occ, a in amps.items():
        if abs(a) < 1e-15:
            continue
        local = [occ[4 * p : 4 * p + PATH_MODES[p]] for p in range(N_PATHS)]
        ns = tuple(sum(x) for x in local)
        if min(ns) == 0:
            continue
        if ns not in sectors:
            sectors[ns] = np.zeros(tuple(len(fock.fock_basis(n, m)) for n, m in zip(ns, PATH_MODES)), dtype=complex)
        idx = tuple(fock.fock_index(n, m)[x] for n, m, x in zip(ns, PATH_MODES, local))
        sectors[ns][idx] += a / norm
    return sectors


# ---------------------------------------------------------------- fusion


@dataclass
class FusionOutcome:
    rho4: DensityMatrix
    success_probability: float
    fourfold_rate_hz: float | None = None
    fivefold_rate_hz: float | None = None


def _frame(path: int) -> np.ndarray:
    return _X if path in (C, D) else np.eye(2, dtype=complex)


def fuse_pairs(cfg: SourceConfig, rates: bool = True) -> FusionOutcome:
    """Post-selected four-photon state from exactly one pair per layer.

    The tag degree of freedom is traced out, then the X frame on c, d and the
    fiber rotations are applied. ``success_probability`` is the chance of one
    photon in each PBS output.
    """
    psi = pattern_sectors(cfg, 1, 1).get((1, 1, 1, 1))
    if psi is None:
        raise ValueError("fusion never succeeds for this configuration")
    # one-photon Fock basis index i holds local mode m - 1 - i; flip to mode
    # order, where idler local mode is pol + 2 * tag, then split (tag, pol)
    t = psi[::-1, ::-1, ::-1, ::-1].reshape(2, 2, 2, 2, 2, 2)
    rho = np.einsum("atbucd,AtBuCD->abcdABCD", t, t.conj()).reshape(16, 16)
    prob = float(np.trace(rho).real)
    g = kron_all([f @ _frame(p) for p, f in enumerate(cfg.fibers())])
    rho = g @ (rho / prob) @ g.conj().T
    out = FusionOutcome(DensityMatrix(4, (rho + rho.conj().T) / 2), prob)
    if rates:
        four, five, _ = coincidence_rates(cfg)
        out.fourfold_rate_hz, out.fivefold_rate_hz = four, five
    return out


# ---------------------------------------------------------------- detection


@lru_cache(maxsize=4096)
def _rep_cached(key: bytes, m: int, n: int) -> np.ndarray:
    u = np.frombuffer(key, dtype=complex).reshape(m, m)
    return fock.fock_representation(u, n)


def _click_matrix(n: int, m: int, eff: tuple) -> np.ndarray:
    """(3, dim) click probabilities for '+', '-', 'both' per Fock basis state."""
    ports = fock.port_counts(n, m, (0, 1) * (m // 2))
    qp = (1 - eff[0]) ** ports[:, 0]
    qm = (1 - eff[1]) ** ports[:, 1]
    return np.stack([(1 - qp) * qm, qp * (1 - qm), (1 - qp) * (1 - qm)])


def path_unitaries(cfg: SourceConfig, setting: MeasurementSetting) -> list[np.ndarray]:
    """Mode transformations analyzer . fiber . frame, extended over tags."""
    out = []
    for p, (m, f) in enumerate(zip(setting.analyzers(), cfg.fibers())):
        u = m @ f @ _frame(p)
        out.append(np.kron(np.eye(2), u) if PATH_MODES[p] == 4 else u)
    return out


def click_tensor(sectors: dict, units: list, port_eff: np.ndarray) -> np.ndarray:
    """Probabilities of the 3^4 click patterns with every path firing."""
    out = np.zeros((3,) * N_PATHS)
    for ns, psi in sectors.items():
        phi = psi
        for p, (n, u) in enumerate(zip(ns, units)):
            r = _rep_cached(np.ascontiguousarray(u).tobytes(), u.shape[0], n)
            phi = np.moveaxis(np.tensordot(r, phi, axes=([1], [p])), 0, p)
        prob = np.abs(phi) ** 2
        ds = [_click_matrix(n, PATH_MODES[p], tuple(port_eff[p])) for p, n in enumerate(ns)]
        out += np.einsum("abcd,ia,jb,kc,ld->ijkl", prob, *ds)
    return out


_SELECT = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])


def fourfold_from_clicks(t: np.ndarray) -> np.ndarray:
    """Counts per 4-bit outcome; a path firing both detectors counts for either bit."""
    out = np.einsum("...ijkl,ai,bj,ck,dl->...abcd", t, _SELECT, _SELECT, _SELECT, _SELECT)
    return out.reshape(*t.shape[:-4], 16)


def fivefold_from_clicks(t: np.ndarray) -> np.ndarray:
    """(..., 4, 8): path k fires both detectors, the rest one each (big-endian rest bits)."""
    lead = t.shape[:-4]
    out = []
    for k in range(N_PATHS):
        sub = np.moveaxis(t, len(lead) + k, -1)[..., 2]
        out.append(sub[(...,) + (slice(0, 2),) * 3].reshape(*lead, 8))
    return np.stack(out, axis=-2)


class CoincidenceModel:
    """Click statistics of every emission pattern under every setting.

    Everything here is independent of the emission probabilities, which enter
    only through the pattern weights; one model serves a whole sweep.
    """

    def __init__(self, cfg: SourceConfig, settings: list[MeasurementSetting] | None = None):
        self.cfg = cfg
        self.settings = all_settings(N_PATHS) if settings is None else settings
        self.patterns = emission_patterns(cfg.n_max, cfg.max_pairs)
        port_eff = cfg.port_efficiencies()
        sectors = {k: pattern_sectors(cfg, *k) for k in self.patterns}
        units = [path_unitaries(cfg, s) for s in self.settings]
        self.clicks = np.array(
            [[click_tensor(sectors[k], u, port_eff) for u in units] for k in self.patterns]
        )  # (patterns, settings, 3, 3, 3, 3)
        self.xyz = np.array([all(lab != "-Z" for lab in s.labels) for s in self.settings])

    def weights(self, p_top: float | None = None, p_bottom: float | None = None) -> np.ndarray:
        cfg = self.cfg.with_(
            p_top=self.cfg.p_top if p_top is None else p_top,
            p_bottom=self.cfg.p_bottom if p_bottom is None else p_bottom,
        )
        w = cfg.pattern_weights()
        return np.array([w[k] for k in self.patterns])

    def click_rates(self, p_top=None, p_bottom=None) -> np.ndarray:
        """(settings, 3, 3, 3, 3) pattern rates in Hz."""
        w = self.weights(p_top, p_bottom)
        return self.cfg.pulse_rate_hz * np.tensordot(w, self.clicks, axes=1)

    def fourfold_rate(self, p_top=None, p_bottom=None) -> float:
        """Rate of any fourfold event, averaged over the XYZ settings."""
        w = self.weights(p_top, p_bottom)
        per = self.clicks[:, self.xyz].sum(axis=(2, 3, 4, 5)).mean(axis=1)
        return float(self.cfg.pulse_rate_hz * w @ per)

    def breakdown(self, p_top=None, p_bottom=None) -> dict:
        w = self.weights(p_top, p_bottom)
        per = self.clicks[:, self.xyz].sum(axis=(2, 3, 4, 5)).mean(axis=1)
        five = fivefold_from_clicks(self.clicks[:, self.xyz]).sum(axis=(2, 3)).mean(axis=1)
        return {
            k: {"fourfold_hz": float(self.cfg.pulse_rate_hz * wk * f4), "fivefold_hz": float(self.cfg.pulse_rate_hz * wk * f5)}
            for k, wk, f4, f5 in zip(self.patterns, w, per, five)
        }

    def p_for_rate(self, rate_hz: float, ratio: float = 1.0) -> float:
        """Emission probability p (bottom = ratio * p) giving a fourfold rate."""
        if rate_hz <= 0:
            return 0.0
        hi = 0.999 / max(1.0, ratio)
        f = lambda p: self.fourfold_rate(p, ratio * p) - rate_hz  # noqa: E731
        if f(hi) < 0:
            raise ValueError(f"fourfold rate {rate_hz} Hz is out of reach for this configuration")
        return float(brentq(f, 0.0, hi, xtol=1e-15, rtol=1e-13))

    def records(self, acquisition_s: float, p_top=None, p_bottom=None, seed=None,
                patterns: list | None = None, deviates: np.ndarray | None = None) -> list[CountRecord]:
        """Count records for every setting.

        Expected values by default; Poisson draws when ``seed`` is given. With
        ``deviates`` (standard normals shaped like the click tensors) counts are
        ``lam + sqrt(lam) z`` clipped at 0, a smooth stand-in for Poisson noise.
        """
        w = self.weights(p_top, p_bottom)
        if patterns is not None:
            w = np.where([k in patterns for k in self.patterns], w, 0.0)
        lam = self.cfg.pulse_rate_hz * acquisition_s * np.tensordot(w, self.clicks, axes=1)
        if seed is not None:
            lam = np.random.default_rng(seed).poisson(lam).astype(float)
        elif deviates is not None:
            lam = np.maximum(lam + np.sqrt(lam) * deviates, 0.0)
        four = fourfold_from_clicks(lam)
        five = fivefold_from_clicks(lam)
        return [CountRecord(s, four[i], acquisition_s, five[i]) for i, s in enumerate(self.settings)]


def coincidence_rates(cfg: SourceConfig, model: CoincidenceModel | None = None):
    """(fourfold_hz, fivefold_hz, breakdown by emission pattern)."""
    model = CoincidenceModel(cfg, all_settings(N_PATHS)[:3**N_PATHS]) if model is None else model
    br = model.breakdown(cfg.p_top, cfg.p_bottom)
    four = sum(b["fourfold_hz"] for b in br.values())
    five = sum(b["fivefold_hz"] for b in br.values())
    return four, five, br


def contaminated_state(cfg: SourceConfig, model: CoincidenceModel | None = None,
                       weight: float | None = None) -> DensityMatrix:
    """(1 - w) rho_fusion + w rho_noise.

    ``w`` is the share of fourfold events coming from more than one pair in a
    layer. ``rho_noise`` is the least-squares state behind those events' own
    fourfold statistics, or I/16 when ``cfg.noise_model == 'white'``.
    """
    model = CoincidenceModel(cfg) if model is None else model
    rho_f = fuse_pairs(cfg, rates=False).rho4.matrix
    br = model.breakdown(cfg.p_top, cfg.p_bottom)
    total = sum(b["fourfold_hz"] for b in br.values())
    if weight is None:
        weight = 0.0 if total == 0 else 1 - br[(1, 1)]["fourfold_hz"] / total
    if weight == 0:
        return DensityMatrix(4, rho_f)
    if cfg.noise_model == "white":
        rho_n = np.eye(16) / 16
    else:
        noise = [k for k in model.patterns if k != (1, 1)]
        recs = model.records(1.0, cfg.p_top, cfg.p_bottom, patterns=noise)
        rho_n = mle_project(lre_reconstruct(recs, cfg.port_efficiencies())).matrix
    return DensityMatrix(4, (1 - weight) * rho_f + weight * rho_n)


# ---------------------------------------------------------------- correction


def correct_records(counts, fivefold, alpha: float):
    """Batch form of :func:`higher_order_correction` over leading axes."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    counts = np.asarray(counts, dtype=float)
    five = np.asarray(fivefold, dtype=float)
    n = five.shape[-2]
    if counts.shape[-1] != 2**n or five.shape[-1] != 2 ** (n - 1) or counts.shape[:-1] != five.shape[:-2]:
        raise ValueError(f"mismatched outcome sets: fourfold {counts.shape}, fivefold {five.shape}")
    sub = np.zeros_like(counts)
    for o in range(2**n):
        for k in range(n):
            # drop bit k (big-endian) from o
            hi = o >> (n - k)
            lo = o & ((1 << (n - 1 - k)) - 1)
            sub[..., o] += five[..., k, (hi << (n - 1 - k)) | lo]
    raw = counts - alpha * sub
    return np.maximum(raw, 0.0), raw < 0


def higher_order_correction(fourfold_counts, fivefold_counts, alpha: float):
    """corrected(o) = max(0, four(o) - alpha * sum of fivefolds consistent with o).

    A fivefold event on path k is consistent with both values of bit k, so it
    is subtracted from two outcomes. Returns (corrected, clamped) where
    ``clamped`` flags outcomes that hit zero.
    """
    return correct_records(fourfold_counts, fivefold_counts, alpha)


def corrected_records(records: list[CountRecord], alpha: float) -> list[CountRecord]:
    out = []
    for r in records:
        five = r.fivefold if r.fivefold is not None else np.zeros((r.setting.n_qubits, 2 ** (r.setting.n_qubits - 1)))
        c, _ = higher_order_correction(r.counts, five, alpha)
        out.append(CountRecord(r.setting, c, r.acquisition_s, r.fivefold))
    return out


# ---------------------------------------------------------------- sweep


@dataclass
class SweepPoint:
    p: float
    rate_hz: float
    fivefold_rate_hz: float
    fidelity_raw: float
    fidelity_raw_err: float
    fidelity_corrected: float
    fidelity_corrected_err: float
    fidelity_model: float

    CSV_HEADER = "rate_hz,fidelity_raw,fidelity_raw_err,fidelity_corrected,fidelity_corrected_err"

    def csv_row(self) -> str:
        vals = (self.rate_hz, self.fidelity_raw, self.fidelity_raw_err, self.fidelity_corrected,
                self.fidelity_corrected_err)
        return ",".join(f"{v:.10g}" for v in vals)


def sweep_to_csv(points: list[SweepPoint]) -> str:
    return "\n".join([SweepPoint.CSV_HEADER] + [pt.csv_row() for pt in points]) + "\n"


def sweep_from_csv(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    if lines[0] != SweepPoint.CSV_HEADER:
        raise ValueError("not a sweep CSV")
    return np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]]).reshape(-1, 5)


def expected_fidelities(model: CoincidenceModel, p: float, acquisition_s: float = 600.0,
                        alpha: float | None = None, draws: int = 0, seed: int = 0) -> tuple[float, float]:
    """(F_raw, F_corrected) as the reconstruction would report them.

    With ``draws == 0`` the data are the noise-free expected counts. Otherwise
    the result is averaged over ``draws`` noisy data sets built from a fixed
    set of normal deviates, so it includes the low bias that the physical
    projection shows at finite counts while staying smooth in the model
    parameters.
    """
    alpha = model.cfg.default_alpha() if alpha is None else alpha
    ratio = model.cfg.p_bottom / model.cfg.p_top if model.cfg.p_top > 0 else 1.0
    target = ghz_state(4, model.cfg.delta)
    if draws == 0:
        sets = [model.records(acquisition_s, p, ratio * p)]
    else:
        z = np.random.default_rng(seed).standard_normal((draws, *model.clicks.shape[1:]))
        sets = [model.records(acquisition_s, p, ratio * p, deviates=zk) for zk in z]
    raw = np.mean([fidelity(estimate(r)[0], target) for r in sets])
    corr = np.mean([fidelity(estimate(corrected_records(r, alpha))[0], target) for r in sets])
    return float(raw), float(corr)


def fidelity_rate_sweep(
    cfg: SourceConfig,
    p_values=None,
    target_rates_hz=None,
    acquisition_s: float = 600.0,
    mc_samples: int = 100,
    angle_sigma: float | None = None,
    seed: int = 0,
    alpha: float | None = None,
    model: CoincidenceModel | None = None,
    min_counts: float = 1000.0,
) -> list[SweepPoint]:
    """Raw and corrected tomography fidelity against fourfold rate.

    Both layers share each swept p. Points are given either as ``p_values`` or
    as ``target_rates_hz`` (solved for p). Every point gets its own simulated
    97-setting data set; error bars come from Monte Carlo resampling. Low-rate
    points integrate longer than ``acquisition_s`` so that each setting still
    collects about ``min_counts`` fourfolds.
    """
    from .tomography import DEFAULT_ANGLE_SIGMA, monte_carlo_errors

    if (p_values is None) == (target_rates_hz is None):
        raise ValueError("give exactly one of p_values or target_rates_hz")
    angle_sigma = DEFAULT_ANGLE_SIGMA if angle_sigma is None else angle_sigma
    model = CoincidenceModel(cfg) if model is None else model
    alpha = cfg.default_alpha() if alpha is None else alpha
    if p_values is None:
        p_values = [model.p_for_rate(r) for r in target_rates_hz]
    p_values = [float(p) for p in p_values]
    if any(not 0 <= p < 1 for p in p_values):
        raise ValueError("p values must lie in [0, 1)")
    target = ghz_state(4, cfg.delta)
    children = np.random.SeedSequence(seed).spawn(len(p_values))
    points = []
    for p, child in zip(p_values, children):
        pcfg = cfg.with_(p_top=p, p_bottom=p)
        f_model = fidelity(contaminated_state(pcfg, model), target) if p > 0 else fidelity(
            fuse_pairs(pcfg, rates=False).rho4, target)
        if p == 0:
            f0 = fidelity(fuse_pairs(pcfg, rates=False).rho4, target)
            points.append(SweepPoint(0.0, 0.0, 0.0, f0, 0.0, f0, 0.0, f0))
            continue
        s_counts, s_raw, s_corr = child.spawn(3)
        br = model.breakdown(p, p)
        rate = sum(b["fourfold_hz"] for b in br.values())
        acq = max(acquisition_s, min_counts / rate) if rate > 0 else acquisition_s
        recs = model.records(acq, p, p, seed=np.random.default_rng(s_counts))
        f_raw = fidelity(estimate(recs)[0], target)
        f_corr = fidelity(estimate(corrected_records(recs, alpha))[0], target)
        _, e_raw, _ = monte_carlo_errors(recs, mc_samples, angle_sigma, s_raw, target)
        _, e_corr, _ = monte_carlo_errors(recs, mc_samples, angle_sigma, s_corr, target, alpha=alpha)
        points.append(
            SweepPoint(
                p,
                rate,
                sum(b["fivefold_hz"] for b in br.values()),
                f_raw,
                e_raw,
                f_corr,
                e_corr,
                f_model,
            )
        )
        log.info("p=%.5f rate=%.3f Hz F_raw=%.4f F_corr=%.4f", p, points[-1].rate_hz, f_raw, f_corr)
    return points


# ---------------------------------------------------------------- calibration

# (rate Hz, raw fidelity, corrected fidelity or None)
ANCHORS = ((1.7, 0.9473, None), (152.0, 0.8971, 0.9214))


@dataclass
class CalibrationResult:
    config: SourceConfig
    arm_efficiency: float
    overlap_v: float
    extinction_db: float
    alpha: float
    predictions: list = field(default_factory=list)  # (rate, p, F_raw, F_corr)
    residuals: list = field(default_factory=list)
    success: bool = True

    def to_json(self) -> dict:
        return {
            "arm_efficiency": self.arm_efficiency,
            "overlap_v": self.overlap_v,
            "extinction_db": self.extinction_db,
            "alpha": self.alpha,
            "predictions": [
                {"rate_hz": r, "p": p, "fidelity_raw": fr, "fidelity_corrected": fc}
                for r, p, fr, fc in self.predictions
            ],
            "residuals": self.residuals,
            "success": self.success,
        }


def _calibrated_config(template: SourceConfig, x, fit_alpha: bool) -> SourceConfig:
    eta, v, eps = x[:3]
    return template.with_(
        arm_efficiency=(float(eta),) * N_PATHS,
        overlap_v=float(v),
        extinction_db=float(-10 * np.log10(eps)),
        alpha=float(x[3]) if fit_alpha else None,
    )


def _predict(cfg: SourceConfig, anchors, acquisition_s: float, draws: int):
    model = CoincidenceModel(cfg)
    out = []
    for rate, _, _ in anchors:
        p = model.p_for_rate(rate)
        out.append((rate, p, *expected_fidelities(model, p, acquisition_s, draws=draws)))
    return out


def calibrate_source(
    template: SourceConfig,
    anchors=ANCHORS,
    x0=(0.3, 0.9062, 10 ** -2.9, 1.0),
    fit_alpha: bool = True,
    acquisition_s: float = 600.0,
    draws: int = 8,
    res_tol: float = 1e-5,
) -> CalibrationResult:
    """Least-squares fit of (arm efficiency, overlap_v, linear extinction[, alpha]).

    The arm efficiency sets how a fourfold rate maps to p, so it plays the
    role of the rate scale. Fidelities go through the full reconstruction and
    are averaged over ``draws`` fixed noise realizations of an
    ``acquisition_s`` acquisition per setting (see :func:`expected_fidelities`).
    With ``fit_alpha`` False the subtraction weight stays at 1 / heralding
    efficiency. The fit stops as soon as every residual is below ``res_tol``.
    """
    x0 = np.asarray(x0 if fit_alpha else x0[:3], dtype=float)
    lo, hi = [0.05, 0.5, 1e-6, 0.0], [0.9, 1.0, 0.03, 20.0]
    scale = [0.05, 0.02, 1e-3, 0.2]
    k = 4 if fit_alpha else 3

    n_res = sum(2 if a[2] is not None else 1 for a in anchors)
    best = {"x": x0, "res": None}

    class _Done(Exception):
        pass

    def residuals(x):
        try:
            preds = _predict(_calibrated_config(template, x, fit_alpha), anchors, acquisition_s, draws)
        except ValueError:
            # an anchor rate out of reach: steer the fit back with a flat penalty
            return np.ones(n_res)
        res = []
        for (rate, f_raw, f_corr), (_, _, pr, pc) in zip(anchors, preds):
            res.append(pr - f_raw)
            if f_corr is not None:
                res.append(pc - f_corr)
        res = np.array(res)
        log.debug("calibration x=%s max|res|=%.2e", x, np.abs(res).max())
        if best["res"] is None or np.sum(res**2) < np.sum(best["res"] ** 2):
            best.update(x=np.array(x), res=res)
        # the problem can be underdetermined; stop once the anchors are met
        if np.abs(res).max() < res_tol:
            raise _Done
        return res

    success = True
    try:
        sol = least_squares(
            residuals, x0, bounds=(lo[:k], hi[:k]), x_scale=scale[:k], diff_step=1e-4, xtol=1e-8, ftol=1e-8,
            method="trf",
        )
        success = bool(sol.success)
    except _Done:
        pass
    x, res = best["x"], best["res"]
    cfg = _calibrated_config(template, x, fit_alpha)
    return CalibrationResult(
        cfg,
        float(x[0]),
        float(x[1]),
        float(cfg.extinction_db),
        cfg.default_alpha(),
        _predict(cfg, anchors, acquisition_s, draws),
        [float(r) for r in res],
        success,
    )
