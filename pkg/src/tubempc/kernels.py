"""Hot numeric kernels shared across the package.

Everything here operates on plain float64/int32 arrays so the same source
compiles under numba and runs uncompiled on the fallback path (see _accel).
State layout: x = [P(3), v(3), Theta(3) = (phi, theta, psi), omega(3)],
input layout: u = [thrust, tau_x, tau_y, tau_z].
"""

import numpy as np

from ._accel import maybe_njit

# quadrotor parameter vector indices
P_M, P_G, P_JX, P_JY, P_JZ, P_KDV, P_KDW, P_BX, P_BY, P_BZ = range(10)

# library term opcodes
T_CONST = 0   # 1
T_STATE = 1   # x[a]
T_INPUT = 2   # u[a]
T_PROD_SS = 3  # x[a]*x[b]
T_PROD_SU = 4  # x[a]*u[b]
T_SIN = 5     # sin(x[a])
T_COS = 6     # cos(x[a])
T_SINU = 7    # sin(x[a])*u[b]

NX = 12
NU = 4


@maybe_njit
def term_value(kind, a, b, x, u):
    if kind == T_CONST:
        return 1.0
    if kind == T_STATE:
        return x[a]
    if kind == T_INPUT:
        return u[a]
    if kind == T_PROD_SS:
        return x[a] * x[b]
    if kind == T_PROD_SU:
        return x[a] * u[b]
    if kind == T_SIN:
        return np.sin(x[a])
    if kind == T_COS:
        return np.cos(x[a])
    if kind == T_SINU:
        return np.sin(x[a]) * u[b]
    return 0.0


@maybe_njit
def library_row(terms, x, u, out):
    for l in range(terms.shape[0]):
        out[l] = term_value(terms[l, 0], terms[l, 1], terms[l, 2], x, u)
    return out


@maybe_njit
def library_matrix(terms, X, U, out):
    for r in range(X.shape[0]):
        for l in range(terms.shape[0]):
            out[r, l] = term_value(terms[l, 0], terms[l, 1], terms[l, 2], X[r], U[r])
    return out


@maybe_njit
def quad_rhs(x, u, p, out):
    """Rigid-body quadrotor dynamics, z-up, ZYX Euler angles."""
    m = p[P_M]
    g = p[P_G]
    sph = np.sin(x[6]); cph = np.cos(x[6])
    sth = np.sin(x[7]); cth = np.cos(x[7])
    sps = np.sin(x[8]); cps = np.cos(x[8])
    # thrust direction, third column of R = Rz(psi) Ry(theta) Rx(phi)
    e3x = cph * sth * cps + sph * sps
    e3y = cph * sth * sps - sph * cps
    e3z = cph * cth
    a = u[0] / m
    out[0] = x[3]
    out[1] = x[4]
    out[2] = x[5]
    out[3] = e3x * a - p[P_KDV] * x[3] + p[P_BX]
    out[4] = e3y * a - p[P_KDV] * x[4] + p[P_BY]
    out[5] = e3z * a - g - p[P_KDV] * x[5] + p[P_BZ]
    # Euler kinematics, singular at |theta| = pi/2
    tth = sth / cth
    out[6] = x[9] + sph * tth * x[10] + cph * tth * x[11]
    out[7] = cph * x[10] - sph * x[11]
    out[8] = (sph * x[10] + cph * x[11]) / cth
    jx = p[P_JX]; jy = p[P_JY]; jz = p[P_JZ]
    out[9] = (u[1] - x[10] * x[11] * (jz - jy)) / jx - p[P_KDW] * x[9]
    out[10] = (u[2] - x[11] * x[9] * (jx - jz)) / jy - p[P_KDW] * x[10]
    out[11] = (u[3] - x[9] * x[10] * (jy - jx)) / jz - p[P_KDW] * x[11]
    return out


@maybe_njit
def residual_accum(x, u, terms, xi, out):
    """Add the sparse library residual xi^T Psi(x, u) onto out."""
    for l in range(terms.shape[0]):
        v = term_value(terms[l, 0], terms[l, 1], terms[l, 2], x, u)
        if v != 0.0:
            for d in range(NX):
                c = xi[l, d]
                if c != 0.0:
                    out[d] += c * v
    return out


@maybe_njit
def sindy_rhs(x, u, p, terms, xi, out):
    quad_rhs(x, u, p, out)
    residual_accum(x, u, terms, xi, out)
    return out


@maybe_njit
def sindy_rhs_jac(x, u, p, terms, xi, fx, fu):
    """Analytic Jacobians of sindy_rhs. fx is 12x12, fu is 12x4."""
    m = p[P_M]
    sph = np.sin(x[6]); cph = np.cos(x[6])
    sth = np.sin(x[7]); cth = np.cos(x[7])
    sps = np.sin(x[8]); cps = np.cos(x[8])
    a = u[0] / m
    for i in range(NX):
        for j in range(NX):
            fx[i, j] = 0.0
        for j in range(NU):
            fu[i, j] = 0.0
    fx[0, 3] = 1.0
    fx[1, 4] = 1.0
    fx[2, 5] = 1.0
    e3x = cph * sth * cps + sph * sps
    e3y = cph * sth * sps - sph * cps
    e3z = cph * cth
    # d(R e3)/d Theta
    fx[3, 6] = (-sph * sth * cps + cph * sps) * a
    fx[3, 7] = (cph * cth * cps) * a
    fx[3, 8] = (-cph * sth * sps + sph * cps) * a
    fx[4, 6] = (-sph * sth * sps - cph * cps) * a
    fx[4, 7] = (cph * cth * sps) * a
    fx[4, 8] = e3x * a
    fx[5, 6] = (-sph * cth) * a
    fx[5, 7] = (-cph * sth) * a
    kdv = p[P_KDV]
    fx[3, 3] = -kdv
    fx[4, 4] = -kdv
    fx[5, 5] = -kdv
    fu[3, 0] = e3x / m
    fu[4, 0] = e3y / m
    fu[5, 0] = e3z / m
    # Euler kinematics
    tth = sth / cth
    sec2 = 1.0 / (cth * cth)
    wy = x[10]; wz = x[11]
    fx[6, 6] = cph * tth * wy - sph * tth * wz
    fx[6, 7] = (sph * wy + cph * wz) * sec2
    fx[6, 9] = 1.0
    fx[6, 10] = sph * tth
    fx[6, 11] = cph * tth
    fx[7, 6] = -sph * wy - cph * wz
    fx[7, 10] = cph
    fx[7, 11] = -sph
    fx[8, 6] = (cph * wy - sph * wz) / cth
    fx[8, 7] = (sph * wy + cph * wz) * sth * sec2
    fx[8, 10] = sph / cth
    fx[8, 11] = cph / cth
    jx = p[P_JX]; jy = p[P_JY]; jz = p[P_JZ]
    kdw = p[P_KDW]
    wx = x[9]
    fx[9, 9] = -kdw
    fx[9, 10] = -wz * (jz - jy) / jx
    fx[9, 11] = -wy * (jz - jy) / jx
    fx[10, 9] = -wz * (jx - jz) / jy
    fx[10, 10] = -kdw
    fx[10, 11] = -wx * (jx - jz) / jy
    fx[11, 9] = -wy * (jy - jx) / jz
    fx[11, 10] = -wx * (jy - jx) / jz
    fx[11, 11] = -kdw
    fu[9, 1] = 1.0 / jx
    fu[10, 2] = 1.0 / jy
    fu[11, 3] = 1.0 / jz
    # sparse residual contributions
    for l in range(terms.shape[0]):
        kind = terms[l, 0]
        ia = terms[l, 1]
        ib = terms[l, 2]
        if kind == T_CONST:
            continue
        for d in range(NX):
            c = xi[l, d]
            if c == 0.0:
                continue
            if kind == T_STATE:
                fx[d, ia] += c
            elif kind == T_INPUT:
                fu[d, ia] += c
            elif kind == T_PROD_SS:
                fx[d, ia] += c * x[ib]
                fx[d, ib] += c * x[ia]
            elif kind == T_PROD_SU:
                fx[d, ia] += c * u[ib]
                fu[d, ib] += c * x[ia]
            elif kind == T_SIN:
                fx[d, ia] += c * np.cos(x[ia])
            elif kind == T_COS:
                fx[d, ia] -= c * np.sin(x[ia])
            elif kind == T_SINU:
                fx[d, ia] += c * np.cos(x[ia]) * u[ib]
                fu[d, ib] += c * np.sin(x[ia])
    return fx


@maybe_njit
def sindy_step(x, u, dt, p, terms, xi):
    """Classic RK4 step of the nominal-plus-residual vector field."""
    k1 = np.empty(NX); k2 = np.empty(NX); k3 = np.empty(NX); k4 = np.empty(NX)
    tmp = np.empty(NX)
    sindy_rhs(x, u, p, terms, xi, k1)
    for i in range(NX):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    sindy_rhs(tmp, u, p, terms, xi, k2)
    for i in range(NX):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    sindy_rhs(tmp, u, p, terms, xi, k3)
    for i in range(NX):
        tmp[i] = x[i] + dt * k3[i]
    sindy_rhs(tmp, u, p, terms, xi, k4)
    out = np.empty(NX)
    for i in range(NX):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return out


@maybe_njit
def sindy_rollout(x0, U, dt, p, terms, xi):
    n = U.shape[0]
    X = np.empty((n + 1, NX))
    X[0] = x0
    for j in range(n):
        X[j + 1] = sindy_step(X[j], U[j], dt, p, terms, xi)
    return X


@maybe_njit
def sindy_horizon_jac(X, U, dt, p, terms, xi):
    """Per-stage discrete Jacobians by chaining the RK4 stages analytically."""
    n = U.shape[0]
    A = np.empty((n, NX, NX))
    B = np.empty((n, NX, NU))
    k1 = np.empty(NX); k2 = np.empty(NX); k3 = np.empty(NX)
    x2 = np.empty(NX); x3 = np.empty(NX); x4 = np.empty(NX)
    J = np.empty((NX, NX)); G = np.empty((NX, NU))
    eye = np.eye(NX)
    for j in range(n):
        x = X[j]
        u = U[j]
        sindy_rhs(x, u, p, terms, xi, k1)
        for i in range(NX):
            x2[i] = x[i] + 0.5 * dt * k1[i]
        sindy_rhs(x2, u, p, terms, xi, k2)
        for i in range(NX):
            x3[i] = x[i] + 0.5 * dt * k2[i]
        sindy_rhs(x3, u, p, terms, xi, k3)
        for i in range(NX):
            x4[i] = x[i] + dt * k3[i]
        sindy_rhs_jac(x, u, p, terms, xi, J, G)
        K1 = J.copy()
        L1 = G.copy()
        sindy_rhs_jac(x2, u, p, terms, xi, J, G)
        K2 = np.dot(J, eye + 0.5 * dt * K1)
        L2 = G + np.dot(J, 0.5 * dt * L1)
        sindy_rhs_jac(x3, u, p, terms, xi, J, G)
        K3 = np.dot(J, eye + 0.5 * dt * K2)
        L3 = G + np.dot(J, 0.5 * dt * L2)
        sindy_rhs_jac(x4, u, p, terms, xi, J, G)
        K4 = np.dot(J, eye + dt * K3)
        L4 = G + np.dot(J, dt * L3)
        for r in range(NX):
            for c in range(NX):
                A[j, r, c] = eye[r, c] + dt / 6.0 * (K1[r, c] + 2.0 * K2[r, c] + 2.0 * K3[r, c] + K4[r, c])
            for c in range(NU):
                B[j, r, c] = dt / 6.0 * (L1[r, c] + 2.0 * L2[r, c] + 2.0 * L3[r, c] + L4[r, c])
    return A, B


@maybe_njit
def sindy_fd_jac(x, u, dt, p, terms, xi, eps):
    """Central finite differences straight through the RK4 map."""
    A = np.empty((NX, NX))
    B = np.empty((NX, NU))
    xp = x.copy()
    for i in range(NX):
        xp[i] = x[i] + eps
        fp = sindy_step(xp, u, dt, p, terms, xi)
        xp[i] = x[i] - eps
        fm = sindy_step(xp, u, dt, p, terms, xi)
        xp[i] = x[i]
        for r in range(NX):
            A[r, i] = (fp[r] - fm[r]) / (2.0 * eps)
    up = u.copy()
    for i in range(NU):
        up[i] = u[i] + eps
        fp = sindy_step(x, up, dt, p, terms, xi)
        up[i] = u[i] - eps
        fm = sindy_step(x, up, dt, p, terms, xi)
        up[i] = u[i]
        for r in range(NX):
            B[r, i] = (fp[r] - fm[r]) / (2.0 * eps)
    return A, B


@maybe_njit
def mlp_step(x, u, W1, b1, W2, b2, W3, b3, mu_in, sd_in, mu_out, sd_out):
    """One discrete step of the normalized two-hidden-layer ReLU network."""
    h1 = np.empty(W1.shape[0])
    for r in range(W1.shape[0]):
        s = b1[r]
        for c in range(NX):
            s += W1[r, c] * (x[c] - mu_in[c]) / sd_in[c]
        for c in range(NU):
            s += W1[r, NX + c] * (u[c] - mu_in[NX + c]) / sd_in[NX + c]
        h1[r] = s if s > 0.0 else 0.0
    h2 = np.empty(W2.shape[0])
    for r in range(W2.shape[0]):
        s = b2[r]
        for c in range(W1.shape[0]):
            s += W2[r, c] * h1[c]
        h2[r] = s if s > 0.0 else 0.0
    out = np.empty(NX)
    for r in range(NX):
        s = b3[r]
        for c in range(W2.shape[0]):
            s += W3[r, c] * h2[c]
        out[r] = s * sd_out[r] + mu_out[r]
    return out


@maybe_njit
def mlp_rollout(x0, U, W1, b1, W2, b2, W3, b3, mu_in, sd_in, mu_out, sd_out):
    n = U.shape[0]
    X = np.empty((n + 1, NX))
    X[0] = x0
    for j in range(n):
        X[j + 1] = mlp_step(X[j], U[j], W1, b1, W2, b2, W3, b3, mu_in, sd_in, mu_out, sd_out)
    return X


@maybe_njit
def mlp_horizon_jac(X, U, W1, b1, W2, b2, W3, b3, mu_in, sd_in, mu_out, sd_out):
    """Exact layer-chain Jacobians of the network step at every stage."""
    n = U.shape[0]
    h1n = W1.shape[0]
    h2n = W2.shape[0]
    A = np.empty((n, NX, NX))
    B = np.empty((n, NX, NU))
    z = np.empty(NX + NU)
    a1 = np.empty(h1n)
    a2 = np.empty(h2n)
    for j in range(n):
        for c in range(NX):
            z[c] = (X[j, c] - mu_in[c]) / sd_in[c]
        for c in range(NU):
            z[NX + c] = (U[j, c] - mu_in[NX + c]) / sd_in[NX + c]
        for r in range(h1n):
            s = b1[r]
            for c in range(NX + NU):
                s += W1[r, c] * z[c]
            a1[r] = s
        for r in range(h2n):
            s = b2[r]
            for c in range(h1n):
                s += W2[r, c] * (a1[c] if a1[c] > 0.0 else 0.0)
            a2[r] = s
        # M2 = W2 * D1 masked, M = W3 * D2 @ M2: build (12, 16) chain
        M2 = np.zeros((h2n, NX + NU))
        for r in range(h2n):
            for k in range(h1n):
                if a1[k] > 0.0:
                    w = W2[r, k]
                    if w != 0.0:
                        for c in range(NX + NU):
                            M2[r, c] += w * W1[k, c]
        for r in range(NX):
            for c in range(NX + NU):
                s = 0.0
                for k in range(h2n):
                    if a2[k] > 0.0:
                        s += W3[r, k] * M2[k, c]
                s *= sd_out[r]
                if c < NX:
                    A[j, r, c] = s / sd_in[c]
                else:
                    B[j, r, c - NX] = s / sd_in[c]
    return A, B


@maybe_njit
def gn_assemble(X, U, A, B, ref, uref, Qd, Rd, Pterm, alpha,
                xlo, xhi, mu_state, mu_term, H, g):
    """Gauss-Newton data for the condensed shooting problem.

    Fills H (4N x 4N) and g (4N), returns (V, pen, viol_box, term_ex) where
    V is the tracking objective, pen the soft-penalty total, viol_box the
    worst state-box violation over stages 1..N-1 and term_ex the terminal
    ellipsoid excess (both 0 when feasible).
    """
    n = U.shape[0]
    nv = NU * n
    for r in range(nv):
        g[r] = 0.0
        for c in range(nv):
            H[r, c] = 0.0
    S = np.zeros((NX, nv))
    V = 0.0
    pen = 0.0
    viol_box = 0.0
    gx = np.empty(NX)
    wd = np.empty(NX)
    for j in range(n):
        m = NU * j
        # stage state cost (skip penalties at j=0: the initial state is fixed)
        for i in range(NX):
            dx = X[j, i] - ref[j, i]
            V += Qd[i] * dx * dx
            gx[i] = 2.0 * Qd[i] * dx
            wd[i] = 2.0 * Qd[i]
            if j > 0:
                vhi = X[j, i] - xhi[i]
                vlo = xlo[i] - X[j, i]
                if vhi > 0.0:
                    pen += mu_state * vhi * vhi
                    gx[i] += 2.0 * mu_state * vhi
                    wd[i] += 2.0 * mu_state
                    if vhi > viol_box:
                        viol_box = vhi
                elif vlo > 0.0:
                    pen += mu_state * vlo * vlo
                    gx[i] -= 2.0 * mu_state * vlo
                    wd[i] += 2.0 * mu_state
                    if vlo > viol_box:
                        viol_box = vlo
        if j > 0:
            for a in range(NX):
                if gx[a] != 0.0:
                    for c in range(m):
                        g[c] += S[a, c] * gx[a]
                wa = wd[a]
                if wa != 0.0:
                    for r in range(m):
                        t = wa * S[a, r]
                        if t != 0.0:
                            for c in range(r, m):
                                H[r, c] += t * S[a, c]
        # input cost
        for i in range(NU):
            du = U[j, i] - uref[i]
            V += Rd[i] * du * du
            g[m + i] += 2.0 * Rd[i] * du
            H[m + i, m + i] += 2.0 * Rd[i]
        # propagate sensitivities: S <- A_j S + B_j E_j
        Snew = np.zeros((NX, nv))
        for r in range(NX):
            for c in range(m):
                s = 0.0
                for k in range(NX):
                    s += A[j, r, k] * S[k, c]
                Snew[r, c] = s
            for c in range(NU):
                Snew[r, m + c] = B[j, r, c]
        S = Snew
    # terminal stage
    dxN = np.empty(NX)
    for i in range(NX):
        dxN[i] = X[n, i] - ref[n, i]
    Pdx = np.dot(Pterm, dxN)
    q = 0.0
    for i in range(NX):
        q += dxN[i] * Pdx[i]
    V += q
    ex = q - alpha
    term_ex = ex if ex > 0.0 else 0.0
    # hinge weight is relative to alpha so enforcement strength is the same
    # however tight the terminal set is
    mt = mu_term / (alpha * alpha) if alpha > 0.0 else mu_term
    for i in range(NX):
        gx[i] = 2.0 * Pdx[i]
    Wt = 2.0 * Pterm
    if ex > 0.0:
        pen += mt * ex * ex
        for i in range(NX):
            gx[i] += 4.0 * mt * ex * Pdx[i]
        Wt = Wt + 4.0 * mt * ex * Pterm
    for a in range(NX):
        if gx[a] != 0.0:
            for c in range(nv):
                g[c] += S[a, c] * gx[a]
    T = np.dot(Wt, S)
    for r in range(nv):
        for c in range(r, nv):
            s = 0.0
            for a in range(NX):
                s += S[a, r] * T[a, c]
            H[r, c] += s
    if ex > 0.0:
        v = np.empty(nv)
        for c in range(nv):
            s = 0.0
            for a in range(NX):
                s += Pdx[a] * S[a, c]
            v[c] = s
        for r in range(nv):
            t = 8.0 * mt * v[r]
            for c in range(r, nv):
                H[r, c] += t * v[c]
    for r in range(nv):
        for c in range(r):
            H[r, c] = H[c, r]
    return V, pen, viol_box, term_ex


@maybe_njit
def ocp_cost(X, U, ref, uref, Qd, Rd, Pterm, alpha, xlo, xhi, mu_state, mu_term):
    """Objective + penalties only, for line search."""
    n = U.shape[0]
    V = 0.0
    pen = 0.0
    viol_box = 0.0
    for j in range(n):
        for i in range(NX):
            dx = X[j, i] - ref[j, i]
            V += Qd[i] * dx * dx
            if j > 0:
                vhi = X[j, i] - xhi[i]
                vlo = xlo[i] - X[j, i]
                if vhi > 0.0:
                    pen += mu_state * vhi * vhi
                    if vhi > viol_box:
                        viol_box = vhi
                elif vlo > 0.0:
                    pen += mu_state * vlo * vlo
                    if vlo > viol_box:
                        viol_box = vlo
        for i in range(NU):
            du = U[j, i] - uref[i]
            V += Rd[i] * du * du
    q = 0.0
    for i in range(NX):
        s = 0.0
        for k in range(NX):
            s += Pterm[i, k] * (X[n, k] - ref[n, k])
        q += (X[n, i] - ref[n, i]) * s
    V += q
    ex = q - alpha
    term_ex = ex if ex > 0.0 else 0.0
    if ex > 0.0:
        mt = mu_term / (alpha * alpha) if alpha > 0.0 else mu_term
        pen += mt * ex * ex
    return V, pen, viol_box, term_ex


@maybe_njit
def box_qp(H, g, dlo, dhi, inner):
    """Approximate minimizer of 0.5 z'Hz + g'z over the box [dlo, dhi].

    Projected Newton with active-set freezing, started at z = 0 (feasible
    since the box brackets the origin), so the result is always a descent
    step for the quadratic model.  H must be positive definite.
    """
    n = g.shape[0]
    z = np.zeros(n)
    q = 0.0
    for _ in range(inner):
        grad = g + np.dot(H, z)
        nf = 0
        idx = np.empty(n, dtype=np.int64)
        for i in range(n):
            pinned = ((z[i] <= dlo[i] + 1e-14 and grad[i] > 0.0) or
                      (z[i] >= dhi[i] - 1e-14 and grad[i] < 0.0))
            if not pinned:
                idx[nf] = i
                nf += 1
        if nf == 0:
            break
        Hf = np.empty((nf, nf))
        gf = np.empty(nf)
        tr = 0.0
        for a in range(nf):
            gf[a] = grad[idx[a]]
            for b in range(nf):
                Hf[a, b] = H[idx[a], idx[b]]
            tr += Hf[a, a]
        for a in range(nf):
            Hf[a, a] += 1e-12 * tr / nf
        pf = np.linalg.solve(Hf, -gf)
        p = np.zeros(n)
        for a in range(nf):
            p[idx[a]] = pf[a]
        if nf == n:
            cand = z + p
            inside = True
            for i in range(n):
                if cand[i] < dlo[i] or cand[i] > dhi[i]:
                    inside = False
                    break
            if inside:
                return cand  # interior Newton point solves the QP outright
        t = 1.0
        improved = False
        for _ in range(20):
            zc = np.minimum(np.maximum(z + t * p, dlo), dhi)
            qc = 0.5 * np.dot(zc, np.dot(H, zc)) + np.dot(g, zc)
            if qc < q - 1e-15:
                z = zc
                q = qc
                improved = True
                break
            t *= 0.5
        if not improved:
            break
    return z


@maybe_njit
def cd_lasso(Phi, y, h, beta, tol, max_sweeps):
    """Cyclic coordinate descent with soft thresholding.

    Minimizes (1/2n)||y - Phi b||^2 + h ||b||_1 in place, warm-started from
    beta. Interleaves active-set sweeps with full sweeps (a full sweep that
    moves nothing ends the run). Returns the sweep count.
    """
    n = Phi.shape[0]
    p = Phi.shape[1]
    cn = np.empty(p)
    for i in range(p):
        s = 0.0
        for r in range(n):
            s += Phi[r, i] * Phi[r, i]
        cn[i] = s / n
    r_vec = y.copy()
    for i in range(p):
        if beta[i] != 0.0:
            for r in range(n):
                r_vec[r] -= Phi[r, i] * beta[i]
    sweeps = 0
    full_pass = True
    while sweeps < max_sweeps:
        sweeps += 1
        delta = 0.0
        for i in range(p):
            bi = beta[i]
            if not full_pass and bi == 0.0:
                continue
            if cn[i] == 0.0:
                continue
            rho = 0.0
            for r in range(n):
                rho += Phi[r, i] * r_vec[r]
            rho = rho / n + cn[i] * bi
            if rho > h:
                bnew = (rho - h) / cn[i]
            elif rho < -h:
                bnew = (rho + h) / cn[i]
            else:
                bnew = 0.0
            d = bnew - bi
            if d != 0.0:
                for r in range(n):
                    r_vec[r] -= Phi[r, i] * d
                beta[i] = bnew
                ad = d if d > 0.0 else -d
                if ad > delta:
                    delta = ad
        if delta < tol:
            if full_pass:
                break
            full_pass = True
        else:
            full_pass = False
    return sweeps


@maybe_njit
def rpi_iterate(Aabs, d, eps, max_iter):
    """Fixed-point iteration s <- |A| s + d from zero."""
    nx = d.shape[0]
    s = np.zeros(nx)
    it = 0
    while it < max_iter:
        it += 1
        delta = 0.0
        snew = np.dot(Aabs, s) + d
        for i in range(nx):
            ch = snew[i] - s[i]
            if ch < 0.0:
                ch = -ch
            if ch > delta:
                delta = ch
        s = snew
        if delta < eps:
            return s, it, True
    return s, it, False


@maybe_njit
def mc_error_containment(Acl, w_half, s_box, n_traj, n_steps, seed):
    """Fraction of simulated error trajectories that never leave the box."""
    np.random.seed(seed)
    nx = Acl.shape[0]
    contained = 0
    for t in range(n_traj):
        e = np.zeros(nx)
        ok = True
        for k in range(n_steps):
            w = np.empty(nx)
            for i in range(nx):
                w[i] = (2.0 * np.random.random() - 1.0) * w_half[i]
            e = np.dot(Acl, e) + w
            for i in range(nx):
                if e[i] > s_box[i] or e[i] < -s_box[i]:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            contained += 1
    return contained / n_traj
