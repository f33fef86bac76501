"""Pure-Python twin of the compiled RK4 kernel.

Same stepping scheme and truncation rules as _simcore.pyx; used when the
compiled extension is unavailable (or forced via GFMKIT_BACKEND=python).
Roughly two orders of magnitude slower -- see benchmarks/bench_simcore.py.
"""

import math

import numpy as np

NXP = 8
STATE_LIMIT = 1e6
VDC_FLOOR = 1e-6


def _rhs(z, nc, wb, Lf, Cf, Lg, Rg, Rf, Cdc, wg, vg, yref, u0,
         Ac, Br, By, Cc, Dr, Dy, M, c_v, c_xi):
    """Closed-loop derivative and the control input at this state."""
    id_, iq, vd, vq, iod, ioq, delta, vdc = z[:NXP]
    yhat = np.array([vdc,
                     vd * iod + vq * ioq,
                     0.0,
                     -vd * ioq + vq * iod,
                     math.sqrt(vd * vd + vq * vq)])
    xi = z[NXP:]
    v = c_v + (Cc @ xi if nc else 0.0) + Dy @ yhat
    u = M @ v
    y = yhat.copy()
    y[2] = u[1]

    iu, wu, Eu = u
    sd, cd = math.sin(delta), math.cos(delta)
    vdc_den = vdc if vdc > 1e-12 else 1e-12

    dz = np.empty_like(z)
    dz[0] = wb / Lf * (Eu - vd) + wb * wu * iq - wb * Rf / Lf * id_
    dz[1] = -wb / Lf * vq - wb * wu * id_ - wb * Rf / Lf * iq
    dz[2] = wb / Cf * (id_ - iod) + wb * wu * vq
    dz[3] = wb / Cf * (iq - ioq) - wb * wu * vd
    dz[4] = wb / Lg * (vd - vg * cd) - wb * Rg / Lg * iod + wb * wu * ioq
    dz[5] = wb / Lg * (vq + vg * sd) - wb * Rg / Lg * ioq - wb * wu * iod
    dz[6] = wb * (wu - wg)
    dz[7] = wb / Cdc * (iu - Eu * id_ / vdc_den)
    if nc:
        dz[NXP:] = c_xi + Ac @ xi + By @ y
    return dz, u


def rk4_segment(pp, Ac, Br, By, Cc, Dr, Dy, M, u0, yref, wg, vg,
                dt, nsteps, offset, Z, U):
    """See _simcore.rk4_segment; identical contract."""
    nc = Ac.shape[0]
    nz = NXP + nc
    wb, Lf, Cf, Lg, Rg, Rf, Cdc = pp
    c_v = u0 + Dr @ yref          # constant over the segment
    c_xi = Br @ yref if nc else np.zeros(0)
    args = (nc, wb, Lf, Cf, Lg, Rg, Rf, Cdc, wg, vg, yref, u0,
            Ac, Br, By, Cc, Dr, Dy, M, c_v, c_xi)

    z = Z[offset, :nz].copy()
    h2, h6 = 0.5 * dt, dt / 6.0
    done = 0
    for k in range(nsteps):
        k1, u = _rhs(z, *args)
        U[offset + k] = u
        k2, _ = _rhs(z + h2 * k1, *args)
        k3, _ = _rhs(z + h2 * k2, *args)
        k4, _ = _rhs(z + dt * k3, *args)
        z = z + h6 * (k1 + 2.0 * (k2 + k3) + k4)
        if not np.all(np.abs(z) <= STATE_LIMIT) or z[7] <= VDC_FLOOR:
            break
        Z[offset + k + 1, :nz] = z
        done = k + 1
    _, u = _rhs(Z[offset + done, :nz], *args)
    U[offset + done] = u
    return done
