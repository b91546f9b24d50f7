"""Dense primal-dual interior-point kernel for small convex QPs.

Solves   min 1/2 z'Qz + q'z   s.t.  A z = b,  G z <= h
with a Mehrotra predictor-corrector scheme on the slack form
G z + s = h, s >= 0, lam >= 0, followed by an active-set polish that
re-solves the KKT system on the constraints the interior-point iterate
identifies as binding.  Written in a numba-compatible subset of numpy; the
jitted and plain paths share this single implementation (see
hedgekit._accel).

Status codes: 0 optimal, 1 infeasible (dual blow-up), 2 max_iter, 3 numerical.
"""

from __future__ import annotations

import numpy as np

from .._accel import KERNEL_OPTS, force_njit, maybe_njit

# static regularization keeps the saddle systems quasidefinite; small enough
# to stay invisible at the 1e-9 residual level
_DELTA = 1e-11

OPTIMAL = 0
INFEASIBLE = 1
MAX_ITER = 2
NUMERICAL = 3


def _qp_ipm(Q, q, A, b, G, h, z0, tol, max_iter):
    n = q.shape[0]
    me = b.shape[0]
    mi = h.shape[0]
    eye = np.eye(n)

    if mi == 0:
        # purely (equality-)constrained strongly convex problem: one Newton
        # solve plus refinement passes against the unregularized blocks
        dim = n + me
        K = np.zeros((dim, dim))
        K[:n, :n] = Q + _DELTA * eye
        rhs = np.zeros(dim)
        rhs[:n] = -q
        if me > 0:
            K[:n, n:] = A.T
            K[n:, :n] = A
            for i in range(me):
                K[n + i, n + i] = -_DELTA
            rhs[n:] = b
        sol = np.linalg.solve(K, rhs)
        for _ in range(2):
            resid = K @ sol - rhs
            resid[:n] -= _DELTA * sol[:n]
            if me > 0:
                resid[n:] += _DELTA * sol[n:]
            sol = sol - np.linalg.solve(K, resid)
        z = sol[:n]
        y = sol[n:]
        lam = np.zeros(0)
        r_d = Q @ z + q
        if me > 0:
            r_d = r_d + A.T @ y
        res = 0.0
        for i in range(n):
            res = max(res, abs(r_d[i]))
        if me > 0:
            r_p = A @ z - b
            for i in range(me):
                res = max(res, abs(r_p[i]))
        status = OPTIMAL if res <= tol else NUMERICAL
        return z, y, lam, status, 1, res

    z = z0.copy()
    y = np.zeros(me)
    gz = G @ z
    s = np.empty(mi)
    for i in range(mi):
        s[i] = max(abs(h[i] - gz[i]), 1.0)
    lam = np.ones(mi)

    is_lp = np.max(np.abs(Q)) == 0.0
    dim = n + me
    best_res = np.inf
    best_iter = 0
    best_z = z.copy()
    best_y = y.copy()
    best_lam = lam.copy()
    best_s = s.copy()
    status = MAX_ITER
    res = np.inf
    it = 0

    for it in range(1, max_iter + 1):
        gz = G @ z
        r_d = Q @ z + q + G.T @ lam
        if me > 0:
            r_d = r_d + A.T @ y
        r_g = gz + s - h

        # true KKT measure (slack-free complementarity, primal violation)
        res = 0.0
        for i in range(n):
            res = max(res, abs(r_d[i]))
        if me > 0:
            r_p = A @ z - b
            for i in range(me):
                res = max(res, abs(r_p[i]))
        else:
            r_p = np.zeros(0)
        for i in range(mi):
            res = max(res, gz[i] - h[i])
            res = max(res, abs(lam[i] * (h[i] - gz[i])))
        if res <= tol:
            status = OPTIMAL
            break
        if not np.isfinite(res):
            status = NUMERICAL
            break
        if res < best_res:
            best_z = z.copy()
            best_y = y.copy()
            best_lam = lam.copy()
            best_s = s.copy()
            if res < 0.5 * best_res:
                best_iter = it
            best_res = res
        if it - best_iter > 15:
            big_dual = np.max(np.abs(lam)) > 1e10
            if me > 0 and np.max(np.abs(y)) > 1e10:
                big_dual = True
            status = INFEASIBLE if (big_dual and res > 1e3 * tol) else MAX_ITER
            break

        mu = 0.0
        for i in range(mi):
            mu += s[i] * lam[i]
        mu /= mi

        # floors and the cap on the scaling keep the Newton matrix finite and
        # reasonably conditioned even when slacks shrink toward underflow
        for i in range(mi):
            if s[i] < 1e-250:
                s[i] = 1e-250
            if lam[i] < 1e-250:
                lam[i] = 1e-250
        D = np.minimum(lam / s, 1e14)
        M = Q + (G.T * D) @ G + _DELTA * eye
        K = np.zeros((dim, dim))
        K[:n, :n] = M
        if me > 0:
            K[:n, n:] = A.T
            K[n:, :n] = A
            for i in range(me):
                K[n + i, n + i] = -_DELTA

        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(s)) and np.all(np.isfinite(lam))):
            status = NUMERICAL
            break

        # predictor (affine scaling) direction
        r_c = s * lam
        rhs = np.zeros(dim)
        rhs[:n] = -r_d - G.T @ (D * r_g - r_c / s)
        if me > 0:
            rhs[n:] = -r_p
        sol = np.linalg.solve(K, rhs)
        dz = sol[:n]
        ds = -r_g - G @ dz
        dlam = (-r_c - lam * ds) / s

        a_aff = 1.0
        for i in range(mi):
            if ds[i] < 0.0:
                a_aff = min(a_aff, -s[i] / ds[i])
            if dlam[i] < 0.0:
                a_aff = min(a_aff, -lam[i] / dlam[i])
        mu_aff = 0.0
        for i in range(mi):
            mu_aff += (s[i] + a_aff * ds[i]) * (lam[i] + a_aff * dlam[i])
        mu_aff /= mi
        sigma = (mu_aff / mu) ** 3 if mu > 1e-300 else 0.0

        # corrector with the second-order complementarity term
        r_c = s * lam + ds * dlam - sigma * mu
        rhs[:n] = -r_d - G.T @ (D * r_g - r_c / s)
        if me > 0:
            rhs[n:] = -r_p
        sol = np.linalg.solve(K, rhs)
        if mu < 1e-4:
            # endgame refinement of the saddle solve
            sol = sol - np.linalg.solve(K, K @ sol - rhs)
        dz = sol[:n]
        dy = sol[n:]
        ds = -r_g - G @ dz
        dlam = (-r_c - lam * ds) / s

        alpha_p = 1.0
        alpha_d = 1.0
        for i in range(mi):
            if ds[i] < 0.0:
                alpha_p = min(alpha_p, -s[i] / ds[i])
            if dlam[i] < 0.0:
                alpha_d = min(alpha_d, -lam[i] / dlam[i])
        if is_lp:
            # no primal-dual coupling through the Hessian: step independently
            alpha_p = min(1.0, 0.995 * alpha_p)
            alpha_d = min(1.0, 0.995 * alpha_d)
        else:
            alpha_p = alpha_d = min(1.0, 0.995 * min(alpha_p, alpha_d))

        z = z + alpha_p * dz
        if me > 0:
            y = y + alpha_d * dy
        s = s + alpha_p * ds
        lam = lam + alpha_d * dlam

    if res > best_res:
        z, y, lam, s = best_z, best_y, best_lam, best_s
        res = best_res

    # ----- active-set polish -------------------------------------------------
    # re-solve the KKT system on the rows the iterate identifies as binding;
    # negative multipliers drop the row and retry.  Adopt only on improvement.
    if status != INFEASIBLE and mi > 0:
        act = np.empty(mi, dtype=np.bool_)
        for i in range(mi):
            act[i] = s[i] <= lam[i]
        for _ in range(6):
            na = int(act.sum())
            dp = n + me + na
            Kp = np.zeros((dp, dp))
            Kp[:n, :n] = Q + _DELTA * eye
            rp_ = np.zeros(dp)
            rp_[:n] = -q
            if me > 0:
                Kp[:n, n:n + me] = A.T
                Kp[n:n + me, :n] = A
                rp_[n:n + me] = b
            if na > 0:
                Gact = np.empty((na, n))
                hact = np.empty(na)
                j = 0
                for i in range(mi):
                    if act[i]:
                        Gact[j] = G[i]
                        hact[j] = h[i]
                        j += 1
                Kp[:n, n + me:] = Gact.T
                Kp[n + me:, :n] = Gact
                rp_[n + me:] = hact
            for i in range(me + na):
                Kp[n + i, n + i] = -_DELTA
            solp = np.linalg.solve(Kp, rp_)
            for _ in range(2):
                residp = Kp @ solp - rp_
                residp[:n] -= _DELTA * solp[:n]
                residp[n:] += _DELTA * solp[n:]
                solp = solp - np.linalg.solve(Kp, residp)
            lam_act = solp[n + me:]
            if na > 0 and np.min(lam_act) < -1e-11:
                j = 0
                for i in range(mi):
                    if act[i]:
                        if lam_act[j] < -1e-11:
                            act[i] = False
                        j += 1
                continue
            zp = solp[:n]
            yp = solp[n:n + me]
            lamp = np.zeros(mi)
            j = 0
            for i in range(mi):
                if act[i]:
                    lamp[i] = max(lam_act[j], 0.0)
                    j += 1
            gzp = G @ zp
            r_dp = Q @ zp + q + G.T @ lamp
            if me > 0:
                r_dp = r_dp + A.T @ yp
            resp = 0.0
            for i in range(n):
                resp = max(resp, abs(r_dp[i]))
            if me > 0:
                r_pp = A @ zp - b
                for i in range(me):
                    resp = max(resp, abs(r_pp[i]))
            for i in range(mi):
                resp = max(resp, gzp[i] - h[i])
                resp = max(resp, abs(lamp[i] * (h[i] - gzp[i])))
            if np.isfinite(resp) and resp < res:
                z, y, lam, res = zp, yp, lamp, resp
            break
        if res <= tol:
            status = OPTIMAL

    return z, y, lam, status, it, res


qp_ipm_numpy = _qp_ipm
qp_ipm = maybe_njit(**KERNEL_OPTS)(_qp_ipm)


def jitted_kernel():
    """Jitted kernel regardless of the env flag (benchmark use); None if no numba."""
    decorate = force_njit(**KERNEL_OPTS)
    if decorate is None:
        return None
    return decorate(_qp_ipm)
