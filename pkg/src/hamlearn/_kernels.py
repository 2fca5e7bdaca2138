"""Compiled inner loops for the spin-1/2 kernels."""
import numba
import numpy as np


@numba.njit(cache=True)
def tfim_matvec(x, diag, omega, n, out):
    """out = diag * x + omega * sum_i x[b ^ (1 << i)]."""
    for b in range(x.size):
        acc = 0.0
        for i in range(n):
            acc += x[b ^ (1 << i)]
        out[b] = diag[b] * x[b] + omega * acc
    return out


@numba.njit(cache=True)
def tfim_matvec_even(x, diag, omega, n, out):
    """Same operator restricted to states even under the global spin flip.

    Only amplitudes with the top bit clear are stored; the partner of ``b`` is
    ``b ^ (2**n - 1)``, so flipping the top bit of ``b`` lands on the stored
    amplitude ``half - 1 - b``.
    """
    half = x.size
    for b in range(half):
        acc = x[half - 1 - b]
        for i in range(n - 1):
            acc += x[b ^ (1 << i)]
        out[b] = diag[b] * x[b] + omega * acc
    return out


@numba.njit(cache=True)
def xx_correlators(psi, edges):
    out = np.zeros(edges.shape[0])
    for k in range(edges.shape[0]):
        mask = (1 << edges[k, 0]) | (1 << edges[k, 1])
        acc = 0.0
        for b in range(psi.size):
            acc += psi[b] * psi[b ^ mask]
        out[k] = acc
    return out


@numba.njit(cache=True)
def zz_correlators(prob, edges):
    out = np.zeros(edges.shape[0])
    for k in range(edges.shape[0]):
        i = edges[k, 0]
        j = edges[k, 1]
        acc = 0.0
        for b in range(prob.size):
            if ((b >> i) ^ (b >> j)) & 1:
                acc -= prob[b]
            else:
                acc += prob[b]
        out[k] = acc
    return out
