# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled RK4 kernel for the closed-loop converter simulation.

Integrates the 8-state converter/grid model together with a linear controller
(reference/feedback split) over one segment of constant references and
disturbances.  gfmkit.simkit drives this once per inter-event segment; the
pure-Python twin in _simcore_py implements the identical stepping scheme.
"""

from libc.math cimport sin, cos, sqrt, fabs

DEF NXP = 8        # plant states
DEF NMAX = 64      # plant + controller states, hard cap

STATE_LIMIT = 1e6
VDC_FLOOR = 1e-6


cdef inline void _rhs(double* z, int nc,
                      double wb, double Lf, double Cf, double Lg,
                      double Rg, double Rf, double Cdc,
                      double wg, double vg,
                      double* yref, double* u0,
                      double[:, ::1] Ac, double[:, ::1] Br, double[:, ::1] By,
                      double[:, ::1] Cc, double[:, ::1] Dr, double[:, ::1] Dy,
                      double[:, ::1] M,
                      double* dz, double* u_out) noexcept nogil:
    cdef double id_ = z[0]
    cdef double iq = z[1]
    cdef double vd = z[2]
    cdef double vq = z[3]
    cdef double iod = z[4]
    cdef double ioq = z[5]
    cdef double delta = z[6]
    cdef double vdc = z[7]
    cdef double yhat[5]
    cdef double v[3]
    cdef double u[3]
    cdef double y[5]
    cdef double sd, cd, wu, Eu, iu, vdc_den, acc
    cdef int i, j

    yhat[0] = vdc
    yhat[1] = vd * iod + vq * ioq
    yhat[2] = 0.0
    yhat[3] = -vd * ioq + vq * iod
    yhat[4] = sqrt(vd * vd + vq * vq)

    for i in range(3):
        acc = u0[i]
        for j in range(nc):
            acc += Cc[i, j] * z[NXP + j]
        for j in range(5):
            acc += Dr[i, j] * yref[j] + Dy[i, j] * yhat[j]
        v[i] = acc
    for i in range(3):
        acc = 0.0
        for j in range(3):
            acc += M[i, j] * v[j]
        u[i] = acc

    y[0] = yhat[0]
    y[1] = yhat[1]
    y[2] = u[1]
    y[3] = yhat[3]
    y[4] = yhat[4]

    iu = u[0]
    wu = u[1]
    Eu = u[2]
    sd = sin(delta)
    cd = cos(delta)
    vdc_den = vdc if vdc > 1e-12 else 1e-12   # divergence is truncated by the caller

    dz[0] = wb / Lf * (Eu - vd) + wb * wu * iq - wb * Rf / Lf * id_
    dz[1] = -wb / Lf * vq - wb * wu * id_ - wb * Rf / Lf * iq
    dz[2] = wb / Cf * (id_ - iod) + wb * wu * vq
    dz[3] = wb / Cf * (iq - ioq) - wb * wu * vd
    dz[4] = wb / Lg * (vd - vg * cd) - wb * Rg / Lg * iod + wb * wu * ioq
    dz[5] = wb / Lg * (vq + vg * sd) - wb * Rg / Lg * ioq - wb * wu * iod
    dz[6] = wb * (wu - wg)
    dz[7] = wb / Cdc * (iu - Eu * id_ / vdc_den)

    for i in range(nc):
        acc = 0.0
        for j in range(nc):
            acc += Ac[i, j] * z[NXP + j]
        for j in range(5):
            acc += Br[i, j] * yref[j] + By[i, j] * y[j]
        dz[NXP + i] = acc

    u_out[0] = u[0]
    u_out[1] = u[1]
    u_out[2] = u[2]


def rk4_segment(double[::1] pp,
                double[:, ::1] Ac, double[:, ::1] Br, double[:, ::1] By,
                double[:, ::1] Cc, double[:, ::1] Dr, double[:, ::1] Dy,
                double[:, ::1] M,
                double[::1] u0, double[::1] yref, double wg, double vg,
                double dt, Py_ssize_t nsteps, Py_ssize_t offset,
                double[:, ::1] Z, double[:, ::1] U):
    """Advance nsteps RK4 steps from the state stored in Z[offset].

    pp packs [wb, Lf, Cf, Lg, Rg, Rf, Cdc].  States are written to
    Z[offset+1 .. offset+nsteps]; the control input is logged at every
    boundary including both endpoints.  Returns the number of completed
    steps, which is < nsteps when the run diverged (state magnitude above
    1e6, non-finite values, or DC voltage at/below its floor).
    """
    cdef int nc = <int>Ac.shape[0]
    cdef int nz = NXP + nc
    if nz > NMAX:
        raise ValueError(f"controller too large: {nc} states (cap {NMAX - NXP})")
    cdef double wb = pp[0], Lf = pp[1], Cf = pp[2], Lg = pp[3]
    cdef double Rg = pp[4], Rf = pp[5], Cdc = pp[6]
    cdef double z[NMAX]
    cdef double zs[NMAX]
    cdef double k1[NMAX]
    cdef double k2[NMAX]
    cdef double k3[NMAX]
    cdef double k4[NMAX]
    cdef double ub[3]
    cdef double yref_c[5]
    cdef double u0_c[3]
    cdef Py_ssize_t k, done
    cdef int i
    cdef double h2 = 0.5 * dt, h6 = dt / 6.0
    cdef double zi
    cdef bint bad

    for i in range(5):
        yref_c[i] = yref[i]
    for i in range(3):
        u0_c[i] = u0[i]
    for i in range(nz):
        z[i] = Z[offset, i]

    done = 0
    with nogil:
        for k in range(nsteps):
            _rhs(z, nc, wb, Lf, Cf, Lg, Rg, Rf, Cdc, wg, vg, yref_c, u0_c,
                 Ac, Br, By, Cc, Dr, Dy, M, k1, ub)
            U[offset + k, 0] = ub[0]
            U[offset + k, 1] = ub[1]
            U[offset + k, 2] = ub[2]
            for i in range(nz):
                zs[i] = z[i] + h2 * k1[i]
            _rhs(zs, nc, wb, Lf, Cf, Lg, Rg, Rf, Cdc, wg, vg, yref_c, u0_c,
                 Ac, Br, By, Cc, Dr, Dy, M, k2, ub)
            for i in range(nz):
                zs[i] = z[i] + h2 * k2[i]
            _rhs(zs, nc, wb, Lf, Cf, Lg, Rg, Rf, Cdc, wg, vg, yref_c, u0_c,
                 Ac, Br, By, Cc, Dr, Dy, M, k3, ub)
            for i in range(nz):
                zs[i] = z[i] + dt * k3[i]
            _rhs(zs, nc, wb, Lf, Cf, Lg, Rg, Rf, Cdc, wg, vg, yref_c, u0_c,
                 Ac, Br, By, Cc, Dr, Dy, M, k4, ub)
            bad = 0
            for i in range(nz):
                zi = z[i] + h6 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i])
                if not (fabs(zi) <= 1e6):
                    bad = 1
                z[i] = zi
            if z[7] <= 1e-6:
                bad = 1
            if bad:
                break
            for i in range(nz):
                Z[offset + k + 1, i] = z[i]
            done = k + 1
    # control input at the final valid boundary
    _rhs(&Z[offset + done, 0], nc, wb, Lf, Cf, Lg, Rg, Rf, Cdc, wg, vg,
         yref_c, u0_c, Ac, Br, By, Cc, Dr, Dy, M, k1, ub)
    U[offset + done, 0] = ub[0]
    U[offset + done, 1] = ub[1]
    U[offset + done, 2] = ub[2]
    return done
