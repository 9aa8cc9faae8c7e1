"""Compiled inner loops for the closed-loop DAE integration.

Everything here works on flat float64 arrays; the object layer packs
network, machine and controller data once per run (see ``dae.ClosedLoop``)
and the pure-NumPy reference implementations in :mod:`core` and
:mod:`controller` stay the source of truth the kernels are tested against.

Differential state layout (length m + 3*ng + n + mc):

    [theta_diff (m), momentum (ng), volt_g (ng), p_gen (ng),
     price (n), flow (mc)]

Algebraic state layout (length 2*nl): [freq_l (nl), volt_l (nl)].
"""

import numpy as np
from numba import njit

OK = 0
FAIL_ALGEBRAIC = 1
FAIL_FREQUENCY = 2
FAIL_VOLTAGE = 3


@njit(cache=True)
def _flows(theta, volts, ei, ej, be, ge, bsh, gsh):
    """Active/reactive injections and the conductance term per node."""
    n = bsh.shape[0]
    m = theta.shape[0]
    p = np.empty(n)
    q = np.empty(n)
    phi = np.empty(n)
    for k in range(n):
        u2 = volts[k] * volts[k]
        p[k] = gsh[k] * u2
        q[k] = -bsh[k] * u2
        phi[k] = gsh[k] * u2
    for e in range(m):
        i = ei[e]
        j = ej[e]
        s = np.sin(theta[e])
        c = np.cos(theta[e])
        uij = volts[i] * volts[j]
        bs = be[e] * uij * s
        gs = ge[e] * uij * s
        bc = be[e] * uij * c
        gc = ge[e] * uij * c
        p[i] += bs + gc
        p[j] += gc - bs
        q[i] += gs - bc
        q[j] += -gs - bc
        phi[i] += gc
        phi[j] += gc
    return p, q, phi


@njit(cache=True)
def _solve_algebraic(y, z, ei, ej, be, ge, bsh, gsh, al, p_load, q_load,
                     m, ng, nl, tol, maxit):
    """Newton solve of the load-bus equations for the algebraic states.

    The reactive residuals depend on the load voltages only, so the voltage
    block is solved first and the load frequencies follow in closed form
    from the active balances (exactly the index-1 structure).
    """
    n = ng + nl
    z_out = z.copy()
    if nl == 0:
        return z_out, True, 0
    volts = np.empty(n)
    for i in range(ng):
        volts[i] = y[m + ng + i]
    for i in range(nl):
        volts[ng + i] = z[nl + i]
    theta = y[:m]

    iters = 0
    converged = False
    for _ in range(maxit):
        iters += 1
        _, q, _ = _flows(theta, volts, ei, ej, be, ge, bsh, gsh)
        resid = np.empty(nl)
        rmax = 0.0
        for i in range(nl):
            resid[i] = -q_load[i] - q[ng + i]
            if abs(resid[i]) > rmax:
                rmax = abs(resid[i])
        if rmax < tol:
            converged = True
            break
        # d(residual)/d(volt_l): -d q / d U restricted to load nodes
        jac = np.zeros((nl, nl))
        for i in range(nl):
            jac[i, i] = 2.0 * bsh[ng + i] * volts[ng + i]
        for e in range(ei.shape[0]):
            i = ei[e]
            j = ej[e]
            s = np.sin(theta[e])
            c = np.cos(theta[e])
            if i >= ng:
                jac[i - ng, i - ng] -= volts[j] * (ge[e] * s - be[e] * c)
            if j >= ng:
                jac[j - ng, j - ng] -= volts[i] * (-ge[e] * s - be[e] * c)
            if i >= ng and j >= ng:
                jac[i - ng, j - ng] -= volts[i] * (ge[e] * s - be[e] * c)
                jac[j - ng, i - ng] -= volts[j] * (-ge[e] * s - be[e] * c)
        step = np.linalg.solve(jac, resid)
        for i in range(nl):
            volts[ng + i] -= step[i]
            if not np.isfinite(volts[ng + i]):
                return z_out, False, iters
    if not converged:
        return z_out, False, iters

    p, _, _ = _flows(theta, volts, ei, ej, be, ge, bsh, gsh)
    for i in range(nl):
        z_out[i] = (-p_load[ng + i] - p[ng + i]) / al[i]
        z_out[nl + i] = volts[ng + i]
    return z_out, True, iters


@njit(cache=True)
def _rhs(y, z, ei, ej, be, ge, bsh, gsh, minv, ag, xgap, tau_u, al,
         weights, ci, cj, cw, tau_g, tau_p, tau_f, lossy,
         p_load, q_load, u_field, drift, m, ng, nl, mc):
    """Time derivative of the differential states at consistent (y, z)."""
    n = ng + nl
    volts = np.empty(n)
    omega = np.empty(n)
    for i in range(ng):
        volts[i] = y[m + ng + i]
        omega[i] = y[m + i] * minv[i]
    for i in range(nl):
        volts[ng + i] = z[nl + i]
        omega[ng + i] = z[i]
    theta = y[:m]
    p, q, phi = _flows(theta, volts, ei, ej, be, ge, bsh, gsh)

    dy = np.empty(y.shape[0])
    for e in range(m):
        dy[e] = omega[ei[e]] - omega[ej[e]]
    for i in range(ng):
        dy[m + i] = -ag[i] * omega[i] + y[m + 2 * ng + i] - p_load[i] - p[i]
        dy[m + ng + i] = (u_field[i] - volts[i]
                          - xgap[i] * q[i] / volts[i]) / tau_u[i]
        dy[m + 2 * ng + i] = (-y[m + 2 * ng + i] / weights[i]
                              + y[m + 3 * ng + i]
                              - (omega[i] + drift[i])) / tau_g[i]
    off_price = m + 3 * ng
    off_flow = off_price + n
    for k in range(n):
        bal = p_load[k]
        if lossy:
            bal += phi[k]
        if k < ng:
            bal -= y[m + 2 * ng + k]
        dy[off_price + k] = bal
    for e in range(mc):
        f = cw[e] * y[off_flow + e]
        dy[off_price + ci[e]] += f
        dy[off_price + cj[e]] -= f
    for k in range(n):
        dy[off_price + k] /= tau_p[k]
    for e in range(mc):
        dy[off_flow + e] = -cw[e] * (y[off_price + ci[e]]
                                     - y[off_price + cj[e]]) / tau_f[e]
    return dy


@njit(cache=True)
def _rk4_step(y, z, h, ei, ej, be, ge, bsh, gsh, minv, ag, xgap, tau_u, al,
              weights, ci, cj, cw, tau_g, tau_p, tau_f, lossy,
              p_load, q_load, u_field, drift, m, ng, nl, mc, tol, maxit):
    """One classic Runge-Kutta step; the algebraic block is re-solved at
    every stage and once more at the step end."""
    z1, ok, _ = _solve_algebraic(y, z, ei, ej, be, ge, bsh, gsh, al,
                                 p_load, q_load, m, ng, nl, tol, maxit)
    if not ok:
        return y, z, False
    k1 = _rhs(y, z1, ei, ej, be, ge, bsh, gsh, minv, ag, xgap, tau_u, al,
              weights, ci, cj, cw, tau_g, tau_p, tau_f, lossy,
              p_load, q_load, u_field, drift, m, ng, nl, mc)

    y2 = y + (0.5 * h) * k1
    z2, ok, _ = _solve_algebraic(y2, z1, ei, ej, be, ge, bsh, gsh, al,
                                 p_load, q_load, m, ng, nl, tol, maxit)
    if not ok:
        return y, z, False
    k2 = _rhs(y2, z2, ei, ej, be, ge, bsh, gsh, minv, ag, xgap, tau_u, al,
              weights, ci, cj, cw, tau_g, tau_p, tau_f, lossy,
              p_load, q_load, u_field, drift, m, ng, nl, mc)

    y3 = y + (0.5 * h) * k2
    z3, ok, _ = _solve_algebraic(y3, z2, ei, ej, be, ge, bsh, gsh, al,
                                 p_load, q_load, m, ng, nl, tol, maxit)
    if not ok:
        return y, z, False
    k3 = _rhs(y3, z3, ei, ej, be, ge, bsh, gsh, minv, ag, xgap, tau_u, al,
              weights, ci, cj, cw, tau_g, tau_p, tau_f, lossy,
              p_load, q_load, u_field, drift, m, ng, nl, mc)

    y4 = y + h * k3
    z4, ok, _ = _solve_algebraic(y4, z3, ei, ej, be, ge, bsh, gsh, al,
                                 p_load, q_load, m, ng, nl, tol, maxit)
    if not ok:
        return y, z, False
    k4 = _rhs(y4, z4, ei, ej, be, ge, bsh, gsh, minv, ag, xgap, tau_u, al,
              weights, ci, cj, cw, tau_g, tau_p, tau_f, lossy,
              p_load, q_load, u_field, drift, m, ng, nl, mc)

    y_new = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    z_new, ok, _ = _solve_algebraic(y_new, z4, ei, ej, be, ge, bsh, gsh, al,
                                    p_load, q_load, m, ng, nl, tol, maxit)
    if not ok:
        return y, z, False
    return y_new, z_new, True


@njit(cache=True)
def _integrate_span(y, z, t0, dts, times, record, ei, ej, be, ge, bsh, gsh,
                    minv, ag, xgap, tau_u, al, weights, ci, cj, cw,
                    tau_g, tau_p, tau_f, lossy, p_load, q_load, u_field,
                    drift, m, ng, nl, mc, tol, maxit, omega_max, v_min,
                    out_t, out_y, out_z, rec_start):
    """Integrate one event-free span, recording flagged step ends.

    The final state is written back into ``y`` and ``z``.  Returns
    ``(steps_done, records_written, status, t_reached)``.
    """
    rec = rec_start
    t = t0
    y_cur = y.copy()
    z_cur = z.copy()
    status = OK
    steps = dts.shape[0]
    for k in range(dts.shape[0]):
        y_new, z_new, ok = _rk4_step(
            y_cur, z_cur, dts[k], ei, ej, be, ge, bsh, gsh, minv, ag, xgap,
            tau_u, al, weights, ci, cj, cw, tau_g, tau_p, tau_f, lossy,
            p_load, q_load, u_field, drift, m, ng, nl, mc, tol, maxit)
        if not ok:
            steps = k
            status = FAIL_ALGEBRAIC
            break
        y_cur = y_new
        z_cur = z_new
        t = times[k]
        wmax = 0.0
        for i in range(ng):
            w = abs(y_cur[m + i] * minv[i])
            if w > wmax:
                wmax = w
        for i in range(nl):
            w = abs(z_cur[i])
            if w > wmax:
                wmax = w
        vmin_cur = 1e300
        for i in range(ng):
            if y_cur[m + ng + i] < vmin_cur:
                vmin_cur = y_cur[m + ng + i]
        for i in range(nl):
            if z_cur[nl + i] < vmin_cur:
                vmin_cur = z_cur[nl + i]
        if not np.isfinite(wmax) or wmax > omega_max:
            steps = k + 1
            status = FAIL_FREQUENCY
            break
        if vmin_cur < v_min:
            steps = k + 1
            status = FAIL_VOLTAGE
            break
        if record[k]:
            out_t[rec] = t
            for i in range(y_cur.shape[0]):
                out_y[rec, i] = y_cur[i]
            for i in range(z_cur.shape[0]):
                out_z[rec, i] = z_cur[i]
            rec += 1
    for i in range(y.shape[0]):
        y[i] = y_cur[i]
    for i in range(z.shape[0]):
        z[i] = z_cur[i]
    return steps, rec, status, t
