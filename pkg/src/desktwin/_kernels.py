"""Compiled numerical kernels for chain dynamics and fixed-step simulation.

Everything here operates on the packed array form of a chain model
(see chain.ChainModel.packed): per-link joint axes, origin transforms,
masses, world-frame inertias, joint limits, and a gravity vector. The
math is written with explicit component arithmetic so numba can keep
the inner loops allocation-free; the public API in chain.py / simcore.py
wraps these with validated, documented signatures.

Conventions:
  - link i's joint frame: T_i = T_{i-1} * origin_i * Rot(axis_i, q_i)
  - RNEA runs in world coordinates with the base accelerated at -gravity,
    so returned torques include the gravity load.
  - mass matrix assembled from composite spatial inertias about the world
    origin; the unit-acceleration-column identity against RNEA is kept as
    a test property.

Divergence status codes: kernels return -1 on success, otherwise an
encoded (tick, substep, joint) of the first non-finite value.
"""

import numpy as np

try:
    from numba import config as _numba_config
    from numba import njit, prange

    # The built-in layer avoids a TBB-version probe warning and is plenty
    # for the coarse-grained rollout parallelism used here.
    _numba_config.THREADING_LAYER = "workqueue"

    NUMBA_ENABLED = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    NUMBA_ENABLED = False
    prange = range

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


# Comp modes used by step/rollout kernels.
COMP_NONE = 0
COMP_ACTIVE = 1
COMP_PASSIVE = 2

_QBIG = 1.0e8  # |q| or |qd| beyond this counts as divergence


@njit(cache=True)
def _rnea_core(axis, ot, oR, mass, com, inertia, gx, gy, gz,
               q, qd, qdd, tau, R, p, z, cw, Iw, FN):
    """Recursive Newton-Euler in world frame; fills kinematic workspaces.

    On return: tau holds joint torques; R/p/z/cw hold per-link world
    rotation, joint-frame origin, world joint axis, world com; Iw holds
    world-frame rotational inertia about each link's com.
    """
    n = axis.shape[0]
    # parent running state (base at identity, accelerated against gravity)
    Rp00 = 1.0; Rp01 = 0.0; Rp02 = 0.0
    Rp10 = 0.0; Rp11 = 1.0; Rp12 = 0.0
    Rp20 = 0.0; Rp21 = 0.0; Rp22 = 1.0
    ppx = 0.0; ppy = 0.0; ppz = 0.0
    omx = 0.0; omy = 0.0; omz = 0.0
    alx = 0.0; aly = 0.0; alz = 0.0
    apx = -gx; apy = -gy; apz = -gz
    for i in range(n):
        o = oR[i]
        # A = R_parent @ origin_R  (pre-joint frame rotation)
        A00 = Rp00 * o[0, 0] + Rp01 * o[1, 0] + Rp02 * o[2, 0]
        A01 = Rp00 * o[0, 1] + Rp01 * o[1, 1] + Rp02 * o[2, 1]
        A02 = Rp00 * o[0, 2] + Rp01 * o[1, 2] + Rp02 * o[2, 2]
        A10 = Rp10 * o[0, 0] + Rp11 * o[1, 0] + Rp12 * o[2, 0]
        A11 = Rp10 * o[0, 1] + Rp11 * o[1, 1] + Rp12 * o[2, 1]
        A12 = Rp10 * o[0, 2] + Rp11 * o[1, 2] + Rp12 * o[2, 2]
        A20 = Rp20 * o[0, 0] + Rp21 * o[1, 0] + Rp22 * o[2, 0]
        A21 = Rp20 * o[0, 1] + Rp21 * o[1, 1] + Rp22 * o[2, 1]
        A22 = Rp20 * o[0, 2] + Rp21 * o[1, 2] + Rp22 * o[2, 2]
        tx = ot[i, 0]; ty = ot[i, 1]; tz = ot[i, 2]
        pix = ppx + Rp00 * tx + Rp01 * ty + Rp02 * tz
        piy = ppy + Rp10 * tx + Rp11 * ty + Rp12 * tz
        piz = ppz + Rp20 * tx + Rp21 * ty + Rp22 * tz
        # joint rotation about axis (Rodrigues)
        ax = axis[i, 0]; ay = axis[i, 1]; az = axis[i, 2]
        c = np.cos(q[i]); s = np.sin(q[i]); C = 1.0 - c
        J00 = ax * ax * C + c;      J01 = ax * ay * C - az * s; J02 = ax * az * C + ay * s
        J10 = ay * ax * C + az * s; J11 = ay * ay * C + c;      J12 = ay * az * C - ax * s
        J20 = az * ax * C - ay * s; J21 = az * ay * C + ax * s; J22 = az * az * C + c
        R00 = A00 * J00 + A01 * J10 + A02 * J20
        R01 = A00 * J01 + A01 * J11 + A02 * J21
        R02 = A00 * J02 + A01 * J12 + A02 * J22
        R10 = A10 * J00 + A11 * J10 + A12 * J20
        R11 = A10 * J01 + A11 * J11 + A12 * J21
        R12 = A10 * J02 + A11 * J12 + A12 * J22
        R20 = A20 * J00 + A21 * J10 + A22 * J20
        R21 = A20 * J01 + A21 * J11 + A22 * J21
        R22 = A20 * J02 + A21 * J12 + A22 * J22
        # world joint axis (invariant under the joint's own rotation)
        zx = A00 * ax + A01 * ay + A02 * az
        zy = A10 * ax + A11 * ay + A12 * az
        zz = A20 * ax + A21 * ay + A22 * az
        dx = pix - ppx; dy = piy - ppy; dz = piz - ppz
        qdi = qd[i]; qddi = qdd[i]
        # angular velocity / acceleration
        oix = omx + zx * qdi; oiy = omy + zy * qdi; oiz = omz + zz * qdi
        cx1 = omy * zz * qdi - omz * zy * qdi
        cy1 = omz * zx * qdi - omx * zz * qdi
        cz1 = omx * zy * qdi - omy * zx * qdi
        lix = alx + zx * qddi + cx1
        liy = aly + zy * qddi + cy1
        liz = alz + zz * qddi + cz1
        # linear acceleration of the frame origin
        c2x = aly * dz - alz * dy; c2y = alz * dx - alx * dz; c2z = alx * dy - aly * dx
        wdx = omy * dz - omz * dy; wdy = omz * dx - omx * dz; wdz = omx * dy - omy * dx
        c3x = omy * wdz - omz * wdy; c3y = omz * wdx - omx * wdz; c3z = omx * wdy - omy * wdx
        aix = apx + c2x + c3x; aiy = apy + c2y + c3y; aiz = apz + c2z + c3z
        # world com and its acceleration
        mx = com[i, 0]; my = com[i, 1]; mz = com[i, 2]
        rcx = R00 * mx + R01 * my + R02 * mz
        rcy = R10 * mx + R11 * my + R12 * mz
        rcz = R20 * mx + R21 * my + R22 * mz
        cix = pix + rcx; ciy = piy + rcy; ciz = piz + rcz
        c4x = liy * rcz - liz * rcy; c4y = liz * rcx - lix * rcz; c4z = lix * rcy - liy * rcx
        w2x = oiy * rcz - oiz * rcy; w2y = oiz * rcx - oix * rcz; w2z = oix * rcy - oiy * rcx
        c5x = oiy * w2z - oiz * w2y; c5y = oiz * w2x - oix * w2z; c5z = oix * w2y - oiy * w2x
        acx = aix + c4x + c5x; acy = aiy + c4y + c5y; acz = aiz + c4z + c5z
        # world inertia about com: Iw = R I R^T
        I = inertia[i]
        B00 = R00 * I[0, 0] + R01 * I[1, 0] + R02 * I[2, 0]
        B01 = R00 * I[0, 1] + R01 * I[1, 1] + R02 * I[2, 1]
        B02 = R00 * I[0, 2] + R01 * I[1, 2] + R02 * I[2, 2]
        B10 = R10 * I[0, 0] + R11 * I[1, 0] + R12 * I[2, 0]
        B11 = R10 * I[0, 1] + R11 * I[1, 1] + R12 * I[2, 1]
        B12 = R10 * I[0, 2] + R11 * I[1, 2] + R12 * I[2, 2]
        B20 = R20 * I[0, 0] + R21 * I[1, 0] + R22 * I[2, 0]
        B21 = R20 * I[0, 1] + R21 * I[1, 1] + R22 * I[2, 1]
        B22 = R20 * I[0, 2] + R21 * I[1, 2] + R22 * I[2, 2]
        W00 = B00 * R00 + B01 * R01 + B02 * R02
        W01 = B00 * R10 + B01 * R11 + B02 * R12
        W02 = B00 * R20 + B01 * R21 + B02 * R22
        W10 = B10 * R00 + B11 * R01 + B12 * R02
        W11 = B10 * R10 + B11 * R11 + B12 * R12
        W12 = B10 * R20 + B11 * R21 + B12 * R22
        W20 = B20 * R00 + B21 * R01 + B22 * R02
        W21 = B20 * R10 + B21 * R11 + B22 * R12
        W22 = B20 * R20 + B21 * R21 + B22 * R22
        Lax = W00 * lix + W01 * liy + W02 * liz
        Lay = W10 * lix + W11 * liy + W12 * liz
        Laz = W20 * lix + W21 * liy + W22 * liz
        Hox = W00 * oix + W01 * oiy + W02 * oiz
        Hoy = W10 * oix + W11 * oiy + W12 * oiz
        Hoz = W20 * oix + W21 * oiy + W22 * oiz
        Nx = Lax + oiy * Hoz - oiz * Hoy
        Ny = Lay + oiz * Hox - oix * Hoz
        Nz = Laz + oix * Hoy - oiy * Hox
        m = mass[i]
        FN[i, 0] = m * acx; FN[i, 1] = m * acy; FN[i, 2] = m * acz
        FN[i, 3] = Nx; FN[i, 4] = Ny; FN[i, 5] = Nz
        # store workspaces
        R[i, 0, 0] = R00; R[i, 0, 1] = R01; R[i, 0, 2] = R02
        R[i, 1, 0] = R10; R[i, 1, 1] = R11; R[i, 1, 2] = R12
        R[i, 2, 0] = R20; R[i, 2, 1] = R21; R[i, 2, 2] = R22
        p[i, 0] = pix; p[i, 1] = piy; p[i, 2] = piz
        z[i, 0] = zx; z[i, 1] = zy; z[i, 2] = zz
        cw[i, 0] = cix; cw[i, 1] = ciy; cw[i, 2] = ciz
        Iw[i, 0, 0] = W00; Iw[i, 0, 1] = W01; Iw[i, 0, 2] = W02
        Iw[i, 1, 0] = W10; Iw[i, 1, 1] = W11; Iw[i, 1, 2] = W12
        Iw[i, 2, 0] = W20; Iw[i, 2, 1] = W21; Iw[i, 2, 2] = W22
        # advance parent state
        Rp00 = R00; Rp01 = R01; Rp02 = R02
        Rp10 = R10; Rp11 = R11; Rp12 = R12
        Rp20 = R20; Rp21 = R21; Rp22 = R22
        ppx = pix; ppy = piy; ppz = piz
        omx = oix; omy = oiy; omz = oiz
        alx = lix; aly = liy; alz = liz
        apx = aix; apy = aiy; apz = aiz
    # backward force/moment recursion
    fnx = 0.0; fny = 0.0; fnz = 0.0
    nnx = 0.0; nny = 0.0; nnz = 0.0
    pnx = 0.0; pny = 0.0; pnz = 0.0
    for i in range(n - 1, -1, -1):
        pix = p[i, 0]; piy = p[i, 1]; piz = p[i, 2]
        Fx = FN[i, 0]; Fy = FN[i, 1]; Fz = FN[i, 2]
        fix = Fx + fnx; fiy = Fy + fny; fiz = Fz + fnz
        rx = cw[i, 0] - pix; ry = cw[i, 1] - piy; rz = cw[i, 2] - piz
        m1x = ry * Fz - rz * Fy; m1y = rz * Fx - rx * Fz; m1z = rx * Fy - ry * Fx
        dxn = pnx - pix; dyn = pny - piy; dzn = pnz - piz
        m2x = dyn * fnz - dzn * fny; m2y = dzn * fnx - dxn * fnz; m2z = dxn * fny - dyn * fnx
        nix = FN[i, 3] + m1x + nnx + m2x
        niy = FN[i, 4] + m1y + nny + m2y
        niz = FN[i, 5] + m1z + nnz + m2z
        tau[i] = z[i, 0] * nix + z[i, 1] * niy + z[i, 2] * niz
        fnx = fix; fny = fiy; fnz = fiz
        nnx = nix; nny = niy; nnz = niz
        pnx = pix; pny = piy; pnz = piz


@njit(cache=True)
def rnea(axis, ot, oR, mass, com, inertia, gravity, q, qd, qdd):
    """Inverse dynamics: torques realizing qdd at (q, qd) under gravity."""
    n = axis.shape[0]
    tau = np.empty(n)
    R = np.empty((n, 3, 3)); p = np.empty((n, 3)); z = np.empty((n, 3))
    cw = np.empty((n, 3)); Iw = np.empty((n, 3, 3)); FN = np.empty((n, 6))
    _rnea_core(axis, ot, oR, mass, com, inertia,
               gravity[0], gravity[1], gravity[2], q, qd, qdd,
               tau, R, p, z, cw, Iw, FN)
    return tau


@njit(cache=True)
def kinematics(axis, ot, oR, q, R, p, z, cw, com):
    """Forward kinematics only: world rotation/origin/axis/com per link."""
    n = axis.shape[0]
    Rp = np.eye(3)
    pp = np.zeros(3)
    for i in range(n):
        A = Rp @ oR[i]
        pi = pp + Rp @ ot[i]
        ax = axis[i, 0]; ay = axis[i, 1]; az = axis[i, 2]
        c = np.cos(q[i]); s = np.sin(q[i]); C = 1.0 - c
        J = np.empty((3, 3))
        J[0, 0] = ax * ax * C + c;      J[0, 1] = ax * ay * C - az * s; J[0, 2] = ax * az * C + ay * s
        J[1, 0] = ay * ax * C + az * s; J[1, 1] = ay * ay * C + c;      J[1, 2] = ay * az * C - ax * s
        J[2, 0] = az * ax * C - ay * s; J[2, 1] = az * ay * C + ax * s; J[2, 2] = az * az * C + c
        Ri = A @ J
        R[i] = Ri
        p[i] = pi
        z[i] = A @ axis[i]
        cw[i] = pi + Ri @ com[i]
        Rp = Ri
        pp = pi
    return 0


@njit(cache=True)
def _crba_from_kin(mass, p, z, cw, Iw, M):
    """Mass matrix from composite spatial inertias about the world origin.

    Uses the kinematic workspaces of _rnea_core. Joint j's motion screw at
    the origin is (z_j, p_j x z_j); composites are suffix sums over links.
    """
    n = mass.shape[0]
    msuf = np.empty(n)
    hsuf = np.empty((n, 3))
    Jsuf = np.empty((n, 3, 3))
    m_acc = 0.0
    hx = 0.0; hy = 0.0; hz = 0.0
    J00 = 0.0; J01 = 0.0; J02 = 0.0; J11 = 0.0; J12 = 0.0; J22 = 0.0
    for i in range(n - 1, -1, -1):
        m = mass[i]
        cx = cw[i, 0]; cy = cw[i, 1]; cz = cw[i, 2]
        c2 = cx * cx + cy * cy + cz * cz
        # rotational inertia about world origin (parallel axis from com)
        J00 += Iw[i, 0, 0] + m * (c2 - cx * cx)
        J01 += Iw[i, 0, 1] - m * cx * cy
        J02 += Iw[i, 0, 2] - m * cx * cz
        J11 += Iw[i, 1, 1] + m * (c2 - cy * cy)
        J12 += Iw[i, 1, 2] - m * cy * cz
        J22 += Iw[i, 2, 2] + m * (c2 - cz * cz)
        m_acc += m
        hx += m * cx; hy += m * cy; hz += m * cz
        msuf[i] = m_acc
        hsuf[i, 0] = hx; hsuf[i, 1] = hy; hsuf[i, 2] = hz
        Jsuf[i, 0, 0] = J00; Jsuf[i, 0, 1] = J01; Jsuf[i, 0, 2] = J02
        Jsuf[i, 1, 0] = J01; Jsuf[i, 1, 1] = J11; Jsuf[i, 1, 2] = J12
        Jsuf[i, 2, 0] = J02; Jsuf[i, 2, 1] = J12; Jsuf[i, 2, 2] = J22
    for j in range(n):
        zx = z[j, 0]; zy = z[j, 1]; zz = z[j, 2]
        px = p[j, 0]; py = p[j, 1]; pz_ = p[j, 2]
        vx = py * zz - pz_ * zy
        vy = pz_ * zx - px * zz
        vz = px * zy - py * zx
        # composite momentum response to unit rate of joint j
        Jc = Jsuf[j]; hc = hsuf[j]; mc = msuf[j]
        Px = mc * vx + zy * hc[2] - zz * hc[1]
        Py = mc * vy + zz * hc[0] - zx * hc[2]
        Pz = mc * vz + zx * hc[1] - zy * hc[0]
        Lx = Jc[0, 0] * zx + Jc[0, 1] * zy + Jc[0, 2] * zz + hc[1] * vz - hc[2] * vy
        Ly = Jc[1, 0] * zx + Jc[1, 1] * zy + Jc[1, 2] * zz + hc[2] * vx - hc[0] * vz
        Lz = Jc[2, 0] * zx + Jc[2, 1] * zy + Jc[2, 2] * zz + hc[0] * vy - hc[1] * vx
        for i in range(j + 1):
            zix = z[i, 0]; ziy = z[i, 1]; ziz = z[i, 2]
            pix = p[i, 0]; piy = p[i, 1]; piz = p[i, 2]
            uix = piy * ziz - piz * ziy
            uiy = piz * zix - pix * ziz
            uiz = pix * ziy - piy * zix
            mij = zix * Lx + ziy * Ly + ziz * Lz + uix * Px + uiy * Py + uiz * Pz
            M[i, j] = mij
            M[j, i] = mij
    return 0


@njit(cache=True)
def mass_matrix(axis, ot, oR, mass, com, inertia, gravity, q):
    """Joint-space mass matrix at configuration q."""
    n = axis.shape[0]
    tau = np.empty(n)
    R = np.empty((n, 3, 3)); p = np.empty((n, 3)); z = np.empty((n, 3))
    cw = np.empty((n, 3)); Iw = np.empty((n, 3, 3)); FN = np.empty((n, 6))
    zero = np.zeros(n)
    _rnea_core(axis, ot, oR, mass, com, inertia, 0.0, 0.0, 0.0,
               q, zero, zero, tau, R, p, z, cw, Iw, FN)
    M = np.empty((n, n))
    _crba_from_kin(mass, p, z, cw, Iw, M)
    return M


@njit(cache=True)
def _chol_factor(A, L):
    """Cholesky factorization A = L L^T; returns 0 or the failing row."""
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return i + 1
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return 0


@njit(cache=True)
def _chol_solve(L, b, x):
    n = L.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]


@njit(cache=True)
def forward_dynamics(axis, ot, oR, mass, com, inertia, gravity, q, qd, tau, armature):
    """Accelerations from torques: solve (M + diag(armature)) qdd = tau - bias."""
    n = axis.shape[0]
    bias = np.empty(n)
    R = np.empty((n, 3, 3)); p = np.empty((n, 3)); z = np.empty((n, 3))
    cw = np.empty((n, 3)); Iw = np.empty((n, 3, 3)); FN = np.empty((n, 6))
    zero = np.zeros(n)
    _rnea_core(axis, ot, oR, mass, com, inertia,
               gravity[0], gravity[1], gravity[2], q, qd, zero,
               bias, R, p, z, cw, Iw, FN)
    M = np.empty((n, n))
    _crba_from_kin(mass, p, z, cw, Iw, M)
    for i in range(n):
        M[i, i] += armature[i]
    L = np.zeros((n, n))
    bad = _chol_factor(M, L)
    qdd = np.empty(n)
    if bad != 0:
        for i in range(n):
            qdd[i] = np.nan
        return qdd
    rhs = np.empty(n)
    for i in range(n):
        rhs[i] = tau[i] - bias[i]
    _chol_solve(L, rhs, qdd)
    return qdd


@njit(cache=True)
def _retractor_tau_add(p, R, z, nlinks, anchors, attach_links, attach_points, forces, tau):
    """Add Jacobian-transpose cable tensions to tau. Zero-length cables are skipped."""
    nr = anchors.shape[0]
    for r in range(nr):
        li = attach_links[r]
        ax = attach_points[r, 0]; ay = attach_points[r, 1]; az = attach_points[r, 2]
        wx = p[li, 0] + R[li, 0, 0] * ax + R[li, 0, 1] * ay + R[li, 0, 2] * az
        wy = p[li, 1] + R[li, 1, 0] * ax + R[li, 1, 1] * ay + R[li, 1, 2] * az
        wz = p[li, 2] + R[li, 2, 0] * ax + R[li, 2, 1] * ay + R[li, 2, 2] * az
        dx = anchors[r, 0] - wx; dy = anchors[r, 1] - wy; dz = anchors[r, 2] - wz
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        if dist < 1e-12:
            continue
        fs = forces[r] / dist
        fx = fs * dx; fy = fs * dy; fz = fs * dz
        for j in range(li + 1):
            rx = wx - p[j, 0]; ry = wy - p[j, 1]; rz = wz - p[j, 2]
            # column_j = z_j x (attach - p_j); tau_j += column_j . f
            cx = z[j, 1] * rz - z[j, 2] * ry
            cy = z[j, 2] * rx - z[j, 0] * rz
            cz = z[j, 0] * ry - z[j, 1] * rx
            tau[j] += cx * fx + cy * fy + cz * fz


@njit(cache=True)
def step_ticks(axis, ot, oR, mass, com, inertia, gravity,
               lo, hi,
               kp, kv, armature, friction, tau_max, eps_v,
               comp_mode, ret_anchor, ret_link, ret_point, ret_force,
               q, qd, targets, n_sub, inner_dt,
               out_q, out_qd, out_tau):
    """Advance ticks with zero-order-hold targets; record samples before each step.

    targets has shape (S, n): sample i is recorded from the pre-step state,
    then (except after the last sample) one control tick of n_sub substeps
    integrates toward targets[i]. q/qd are mutated in place. Returns -1, or
    an encoded (tick*1e6 + substep*64 + joint) for the first non-finite state.
    """
    n = axis.shape[0]
    S = targets.shape[0]
    gx = gravity[0]; gy = gravity[1]; gz = gravity[2]
    bias = np.empty(n)
    R = np.empty((n, 3, 3)); p = np.empty((n, 3)); z = np.empty((n, 3))
    cw = np.empty((n, 3)); Iw = np.empty((n, 3, 3)); FN = np.empty((n, 6))
    M = np.empty((n, n)); L = np.zeros((n, n))
    tau = np.empty(n); comp = np.empty(n); rhs = np.empty(n); qdd = np.empty(n)
    zero = np.zeros(n)
    for tick in range(S):
        # servo + compensation torque at the sampled state (logged)
        _rnea_core(axis, ot, oR, mass, com, inertia, gx, gy, gz,
                   q, qd, zero, bias, R, p, z, cw, Iw, FN)
        for j in range(n):
            comp[j] = 0.0
        if comp_mode == COMP_ACTIVE:
            _rnea_core(axis, ot, oR, mass, com, inertia, gx, gy, gz,
                       q, zero, zero, comp, R, p, z, cw, Iw, FN)
        elif comp_mode == COMP_PASSIVE:
            _retractor_tau_add(p, R, z, n, ret_anchor, ret_link, ret_point, ret_force, comp)
        for j in range(n):
            e = targets[tick, j] - q[j]
            t = kp[j] * e - kv[j] * qd[j] - friction[j] * np.tanh(qd[j] / eps_v)
            if t > tau_max[j]:
                t = tau_max[j]
            elif t < -tau_max[j]:
                t = -tau_max[j]
            tau[j] = t + comp[j]
        for j in range(n):
            out_q[tick, j] = q[j]
            out_qd[tick, j] = qd[j]
            out_tau[tick, j] = tau[j]
        if tick == S - 1:
            break
        for sub in range(n_sub):
            if sub > 0:
                _rnea_core(axis, ot, oR, mass, com, inertia, gx, gy, gz,
                           q, qd, zero, bias, R, p, z, cw, Iw, FN)
                for j in range(n):
                    comp[j] = 0.0
                if comp_mode == COMP_ACTIVE:
                    _rnea_core(axis, ot, oR, mass, com, inertia, gx, gy, gz,
                               q, zero, zero, comp, R, p, z, cw, Iw, FN)
                elif comp_mode == COMP_PASSIVE:
                    _retractor_tau_add(p, R, z, n, ret_anchor, ret_link, ret_point,
                                       ret_force, comp)
                for j in range(n):
                    e = targets[tick, j] - q[j]
                    t = kp[j] * e - kv[j] * qd[j] - friction[j] * np.tanh(qd[j] / eps_v)
                    if t > tau_max[j]:
                        t = tau_max[j]
                    elif t < -tau_max[j]:
                        t = -tau_max[j]
                    tau[j] = t + comp[j]
            _crba_from_kin(mass, p, z, cw, Iw, M)
            for j in range(n):
                M[j, j] += armature[j]
            bad = _chol_factor(M, L)
            if bad != 0:
                return tick * 1000000 + sub * 64 + (bad - 1)
            for j in range(n):
                rhs[j] = tau[j] - bias[j]
            _chol_solve(L, rhs, qdd)
            for j in range(n):
                qd[j] += qdd[j] * inner_dt
                q[j] += qd[j] * inner_dt
                if q[j] > hi[j]:
                    q[j] = hi[j]
                    qd[j] = 0.0
                elif q[j] < lo[j]:
                    q[j] = lo[j]
                    qd[j] = 0.0
                if not (np.abs(q[j]) < _QBIG and np.abs(qd[j]) < _QBIG):
                    return tick * 1000000 + sub * 64 + j
    return -1


@njit(cache=True, parallel=True)
def batch_rollout_q(axis, ot, oR, mass, com, inertia, gravity, lo, hi,
                    thetas, eps_v,
                    q0s, qd0s, targets, n_sub, inner_dt,
                    out_q, stat):
    """Parallel rollouts for sysid: one per (parameter variant, trajectory).

    thetas: (B, 5, n) rows kp, kv, armature, friction, tau_max.
    targets: (K, S, n); out_q: (B, K, S, n); stat: (B, K) first diverged
    tick or -1. Diverged samples are NaN from the offending tick onward.
    """
    B = thetas.shape[0]
    K = targets.shape[0]
    S = targets.shape[1]
    n = axis.shape[0]
    dummy = np.zeros((0, 3))
    dummy_i = np.zeros(0, dtype=np.int64)
    dummy_f = np.zeros(0)
    for w in prange(B * K):
        b = w // K
        k = w % K
        q = q0s[k].copy()
        qd = qd0s[k].copy()
        oq = np.empty((S, n))
        oqd = np.empty((S, n))
        ot_ = np.empty((S, n))
        st = step_ticks(axis, ot, oR, mass, com, inertia, gravity, lo, hi,
                        thetas[b, 0], thetas[b, 1], thetas[b, 2],
                        thetas[b, 3], thetas[b, 4], eps_v,
                        COMP_NONE, dummy, dummy_i, dummy, dummy_f,
                        q, qd, targets[k], n_sub, inner_dt,
                        oq, oqd, ot_)
        if st >= 0:
            bad_tick = st // 1000000
            for t in range(bad_tick, S):
                for j in range(n):
                    oq[t, j] = np.nan
            stat[b, k] = bad_tick
        else:
            stat[b, k] = -1
        out_q[b, k] = oq


def warmup(n: int = 2) -> None:
    """Force-compile the kernels on a tiny model (cached across runs)."""
    axis = np.zeros((n, 3)); axis[:, 2] = 1.0
    ot = np.tile(np.array([0.1, 0.0, 0.0]), (n, 1))
    oR = np.tile(np.eye(3), (n, 1, 1))
    mass = np.ones(n)
    com = np.tile(np.array([0.05, 0.0, 0.0]), (n, 1))
    inertia = np.tile(np.eye(3) * 1e-3, (n, 1, 1))
    gravity = np.array([0.0, 0.0, -9.81])
    lo = np.full(n, -3.0); hi = np.full(n, 3.0)
    q = np.zeros(n); qd = np.zeros(n)
    rnea(axis, ot, oR, mass, com, inertia, gravity, q, qd, qd)
    mass_matrix(axis, ot, oR, mass, com, inertia, gravity, q)
    forward_dynamics(axis, ot, oR, mass, com, inertia, gravity, q, qd, qd, np.zeros(n))
    ones = np.ones(n)
    thetas = np.stack([np.stack([ones, ones, ones * 0.01, ones * 0.1, ones * 5.0])])
    targets = np.zeros((1, 3, n))
    out_q = np.empty((1, 1, 3, n))
    stat = np.empty((1, 1), dtype=np.int64)
    batch_rollout_q(axis, ot, oR, mass, com, inertia, gravity, lo, hi,
                    thetas, 0.05, np.zeros((1, n)), np.zeros((1, n)),
                    targets, 2, 0.01, out_q, stat)
