"""Compiled inner loops shared by the solenoid, stats and coupling modules."""

from __future__ import annotations

import math

import numba
import numpy as np

TWO_PI = 2.0 * math.pi

# observable codes understood by the compiled loops
OBS_CONST = 0
OBS_DIST_FIXED = 1
OBS_COS2PIX = 2
OBS_HALFCIRCLE = 3
OBS_LIPSCHITZ_XY = 4


@numba.njit(cache=True, inline="always")
def circle_step(x, gamma, dm1):
    ax = x if x >= 0.0 else -x
    y = x * (1.0 + dm1 * (2.0 * ax) ** gamma)
    return y - math.floor(y + 0.5)


@numba.njit(cache=True, inline="always")
def circle_deriv(x, gamma, dm1):
    ax = x if x >= 0.0 else -x
    return 1.0 + dm1 * (1.0 + gamma) * (2.0 * ax) ** gamma


@numba.njit(cache=True, inline="always")
def observe(code, x, y, z, y_fix):
    if code == OBS_DIST_FIXED:
        ax = x if x >= 0.0 else -x
        dy = y - y_fix
        return math.sqrt(ax * ax + dy * dy + z * z)
    if code == OBS_COS2PIX:
        return math.cos(TWO_PI * x)
    if code == OBS_HALFCIRCLE:
        return 1.0 if x >= 0.0 else 0.0
    if code == OBS_LIPSCHITZ_XY:
        ax = x if x >= 0.0 else -x
        return ax + 0.5 * y
    return 1.0


@numba.njit(cache=True)
def solenoid_orbit(x, y, z, n, gamma, dm1, contraction, amplitude, out):
    """Fill out[j] = g^j(x, y, z) for j < n."""
    for j in range(n):
        out[j, 0] = x
        out[j, 1] = y
        out[j, 2] = z
        c = math.cos(TWO_PI * x)
        s = math.sin(TWO_PI * x)
        y = contraction * y + amplitude * c
        z = contraction * z + amplitude * s
        x = circle_step(x, gamma, dm1)


@numba.njit(cache=True)
def solenoid_birkhoff(x, y, z, n, burn_in, gamma, dm1, contraction, amplitude, code, y_fix, checkpoints):
    """Running Birkhoff sums of an observable, read off at sorted checkpoints."""
    for _ in range(burn_in):
        c = math.cos(TWO_PI * x)
        s = math.sin(TWO_PI * x)
        y = contraction * y + amplitude * c
        z = contraction * z + amplitude * s
        x = circle_step(x, gamma, dm1)
    out = np.empty(checkpoints.size)
    acc = 0.0
    k = 0
    for j in range(n):
        acc += observe(code, x, y, z, y_fix)
        while k < checkpoints.size and checkpoints[k] == j + 1:
            out[k] = acc / (j + 1)
            k += 1
        c = math.cos(TWO_PI * x)
        s = math.sin(TWO_PI * x)
        y = contraction * y + amplitude * c
        z = contraction * z + amplitude * s
        x = circle_step(x, gamma, dm1)
    return out


@numba.njit(cache=True)
def observable_series(x, y, z, n, burn_in, gamma, dm1, contraction, amplitude, code, y_fix, quotient, out):
    """Write phi(g^{burn_in + j}(p)) for j < n into out.

    With ``quotient`` set only the circle coordinate is iterated; valid for
    observables that depend on x alone.
    """
    for _ in range(burn_in):
        if not quotient:
            c = math.cos(TWO_PI * x)
            s = math.sin(TWO_PI * x)
            y = contraction * y + amplitude * c
            z = contraction * z + amplitude * s
        x = circle_step(x, gamma, dm1)
    for j in range(n):
        out[j] = observe(code, x, y, z, y_fix)
        if not quotient:
            c = math.cos(TWO_PI * x)
            s = math.sin(TWO_PI * x)
            y = contraction * y + amplitude * c
            z = contraction * z + amplitude * s
        x = circle_step(x, gamma, dm1)
    return x, y, z


@numba.njit(cache=True)
def lagged_block_sums(phi, psi, lags, block_len, n_blocks, sxy, sx, sy, start):
    """Accumulate per-block sums of phi[j+lag]*psi[j], phi[j+lag], psi[j].

    Pairs are assigned to the block of their origin j.  ``phi``/``psi`` are a
    window of the orbit beginning at global index ``start``; origins are those
    j with j + max(lag) inside the window.
    """
    max_lag = lags.max()
    m = phi.size - max_lag
    for j in range(m):
        b = (start + j) // block_len
        if b >= n_blocks:
            break
        pv = psi[j]
        for a in range(lags.size):
            v = phi[j + lags[a]]
            sxy[b, a] += v * pv
            sx[b, a] += v
        sy[b] += pv
    return m


@numba.njit(cache=True)
def ensemble_lagged(starts, burn_in, lags, gamma, dm1, contraction, amplitude, code_phi, code_psi, y_fix,
                    quotient, phi_out, psi_out):
    """For each start: psi at time burn_in and phi at burn_in + lag for each lag."""
    max_lag = lags.max()
    for k in range(starts.shape[0]):
        x = starts[k, 0]
        y = starts[k, 1]
        z = starts[k, 2]
        a = 0
        for j in range(burn_in + max_lag + 1):
            if j == burn_in:
                psi_out[k] = observe(code_psi, x, y, z, y_fix)
            while a < lags.size and j == burn_in + lags[a]:
                phi_out[k, a] = observe(code_phi, x, y, z, y_fix)
                a += 1
            if not quotient:
                c = math.cos(TWO_PI * x)
                s = math.sin(TWO_PI * x)
                y = contraction * y + amplitude * c
                z = contraction * z + amplitude * s
            x = circle_step(x, gamma, dm1)


@numba.njit(cache=True)
def observable_pair_series(x, y, z, n, burn_in, gamma, dm1, contraction, amplitude, code_phi, code_psi, y_fix,
                           quotient, out_phi, out_psi):
    """Like observable_series for two observables along the same orbit."""
    for _ in range(burn_in):
        if not quotient:
            c = math.cos(TWO_PI * x)
            s = math.sin(TWO_PI * x)
            y = contraction * y + amplitude * c
            z = contraction * z + amplitude * s
        x = circle_step(x, gamma, dm1)
    for j in range(n):
        out_phi[j] = observe(code_phi, x, y, z, y_fix)
        out_psi[j] = observe(code_psi, x, y, z, y_fix)
        if not quotient:
            c = math.cos(TWO_PI * x)
            s = math.sin(TWO_PI * x)
            y = contraction * y + amplitude * c
            z = contraction * z + amplitude * s
        x = circle_step(x, gamma, dm1)
    return x, y, z
