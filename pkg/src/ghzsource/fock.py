"""Small Fock-space toolkit for a few photons in a few modes.

A multiphoton state is held as a polynomial in creation operators: a dict
mapping a sorted tuple of mode indices to a complex coefficient. The state it
denotes is that polynomial applied to the vacuum.
"""
from __future__ import annotations

import itertools
from functools import lru_cache
from math import factorial, prod

import numpy as np

Poly = dict  # tuple[int, ...] -> complex


def poly_mul(a: Poly, b: Poly) -> Poly:
    out: Poly = {}
    for ka, va in a.items():
        for kb, vb in b.items():
            key = tuple(sorted(ka + kb))
            out[key] = out.get(key, 0) + va * vb
    return out


def poly_pow(a: Poly, k: int) -> Poly:
    out: Poly = {(): 1.0}
    for _ in range(k):
        out = poly_mul(out, a)
    return out


def linear_form(coeffs: dict) -> Poly:
    """Single-photon creation operator sum_j c_j a_j^dagger."""
    return {(mode,): c for mode, c in coeffs.items() if c != 0}


def occupation(modes: tuple, n_modes: int) -> tuple:
    occ = [0] * n_modes
    for m in modes:
        occ[m] += 1
    return tuple(occ)


def fock_amplitudes(poly: Poly, n_modes: int) -> dict:
    """Occupation-number amplitudes of poly|0>, unnormalized.

    A monomial prod_j (a_j^dagger)^{n_j} acting on vacuum gives
    sqrt(prod n_j!) |n>.
    """
    out: dict = {}
    for modes, c in poly.items():
        occ = occupation(modes, n_modes)
        out[occ] = out.get(occ, 0) + c * np.sqrt(prod(factorial(k) for k in occ))
    return out


@lru_cache(maxsize=None)
def fock_basis(n_photons: int, n_modes: int) -> tuple:
    """All occupations of ``n_photons`` in ``n_modes``, lexicographically sorted."""
    combos = itertools.combinations_with_replacement(range(n_modes), n_photons)
    return tuple(sorted({occupation(c, n_modes) for c in combos}))


@lru_cache(maxsize=None)
def fock_index(n_photons: int, n_modes: int) -> dict:
    return {occ: i for i, occ in enumerate(fock_basis(n_photons, n_modes))}


def fock_representation(u: np.ndarray, n_photons: int) -> np.ndarray:
    """Matrix of the mode transformation a_j^dagger -> sum_k u[k, j] a_k^dagger on n photons."""
    m = u.shape[0]
    basis = fock_basis(n_photons, m)
    index = fock_index(n_photons, m)
    rep = np.zeros((len(basis), len(basis)), dtype=complex)
    if n_photons == 0:
        rep[0, 0] = 1.0
        return rep
    for col, occ in enumerate(basis):
        modes_in = [j for j, k in enumerate(occ) for _ in range(k)]
        norm_in = np.sqrt(prod(factorial(k) for k in occ))
        for modes_out in itertools.product(range(m), repeat=n_photons):
            c = prod(u[k, j] for k, j in zip(modes_out, modes_in))
            if c == 0:
                continue
            out = occupation(modes_out, m)
            rep[index[out], col] += c * np.sqrt(prod(factorial(k) for k in out)) / norm_in
    return rep


def port_counts(n_photons: int, n_modes: int, port_of_mode: tuple) -> np.ndarray:
    """Photons per port for every basis occupation, shape (dim, n_ports)."""
    n_ports = max(port_of_mode) + 1
    basis = fock_basis(n_photons, n_modes)
    out = np.zeros((len(basis), n_ports), dtype=int)
    for i, occ in enumerate(basis):
        for mode, k in enumerate(occ):
            out[i, port_of_mode[mode]] += k
    return out
