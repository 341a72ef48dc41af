"""Small dense SDP solver for block LMIs with equality constraints.

Problem form handled here:

    minimize    c . y
    subject to  F0 + sum_i y_i F_i  >= 0   (one or more symmetric blocks)
                a . y = b                  (equalities)
                y_i >= l_i                 (optional per-variable lower bounds)

The engine is a primal-dual interior-point method with Nesterov-Todd
scaling on the homogeneous self-dual embedding, dense factorizations
only.  Everything is meant for small instances (a few PSD blocks of
dimension <= ~64, up to a couple thousand scalar variables): the kind of
problem produced by lifting one step of a first-order method into its
Gram-matrix relaxation.

Duals are first-class citizens: for a solved LMI the per-block dual
matrices are the worst-case Gram matrices, and for an infeasible one
they form a Farkas witness, so both are validated and returned.
"""

import json

import numpy as np
import scipy.linalg

from .symlin import MAX_DIM, eig_sym, psd_scale

__all__ = [
    "SdpProblem",
    "SdpSolution",
    "FeasReport",
    "solve",
    "check_solution",
    "problem_to_json",
    "problem_from_json",
]

_SQRT2 = np.sqrt(2.0)
_SVEC_CACHE = {}


def _svec_inds(n):
    if n not in _SVEC_CACHE:
        rows, cols = np.tril_indices(n)
        scale = np.where(rows == cols, 1.0, _SQRT2)
        _SVEC_CACHE[n] = (rows, cols, scale)
    return _SVEC_CACHE[n]


def svec(M):
    """Pack a symmetric matrix so that svec(A).svec(B) = <A,B>_F."""
    M = np.asarray(M, dtype=float)
    rows, cols, scale = _svec_inds(M.shape[0])
    return M[rows, cols] * scale


def smat(v, n):
    rows, cols, scale = _svec_inds(n)
    out = np.zeros((n, n))
    out[rows, cols] = v / scale
    out[cols, rows] = out[rows, cols]
    return out


def _dense_sym(a, what="matrix"):
    arr = np.asarray(getattr(a, "to_dense", lambda: a)(), dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{what} must be square")
    if not np.allclose(arr, arr.T, atol=1e-12 * (1.0 + np.abs(arr).max())):
        raise ValueError(f"{what} must be symmetric")
    return 0.5 * (arr + arr.T)


class SdpProblem:
    """Block-LMI instance: minimize c.y with F0 + sum y_i F_i >= 0 per block.

    blocks: list of (F0, F) with F either a length-m list (None for a
    variable that does not touch the block) or a dict {i: F_i}.
    equalities: list of (a, b) rows meaning a.y = b.
    bounds: None, or length-m list of lower bounds (None = unbounded below).
    An all-zero objective makes this a pure feasibility problem.
    """

    def __init__(self, nvars, objective=None, blocks=(), equalities=(), bounds=None):
        if nvars < 1:
            raise ValueError("need at least one variable")
        self.vars = int(nvars)
        if objective is None:
            self.objective = np.zeros(self.vars)
        else:
            self.objective = np.asarray(objective, dtype=float).reshape(-1)
            if self.objective.size != self.vars:
                raise ValueError("objective length mismatch")
        self.blocks = []
        for F0, F in blocks:
            F0 = _dense_sym(F0, "F0")
            n = F0.shape[0]
            if n > MAX_DIM:
                raise ValueError(f"block dimension {n} exceeds {MAX_DIM}")
            if isinstance(F, dict):
                items = F.items()
            else:
                if len(F) != self.vars:
                    raise ValueError("per-variable matrix list has wrong length")
                items = ((i, Fi) for i, Fi in enumerate(F) if Fi is not None)
            coeff = {}
            for i, Fi in items:
                if not 0 <= i < self.vars:
                    raise ValueError(f"variable index {i} out of range")
                Fi = _dense_sym(Fi, f"F_{i}")
                if Fi.shape[0] != n:
                    raise ValueError("block matrices must share dimension")
                if np.any(Fi):
                    coeff[i] = Fi
            self.blocks.append((F0, coeff))
        self.equalities = []
        for a, rhs in equalities:
            a = np.asarray(a, dtype=float).reshape(-1)
            if a.size != self.vars:
                raise ValueError("equality vector length mismatch")
            self.equalities.append((a, float(rhs)))
        if bounds is None:
            self.bounds = [None] * self.vars
        else:
            if len(bounds) != self.vars:
                raise ValueError("bounds length mismatch")
            self.bounds = [None if b is None else float(b) for b in bounds]
        if not self.blocks and not any(b is not None for b in self.bounds):
            raise ValueError("problem has no conic part")

    def feasibility_only(self):
        return not np.any(self.objective)


class SdpSolution:
    """Outcome of solve().

    status is one of optimal / infeasible / unbounded / numerical-failure.
    block_certificates holds lambda_min of each achieved slack matrix for
    optimal (and numerical-failure) runs; for an infeasible problem it
    holds the Farkas witness matrices Z_b >= 0 instead, with the matching
    equality and bound multipliers in farkas_equalities / farkas_bounds
    (certificate identity: sum_b <F_i,Z_b> + zeta_i = sum_j nu_j a_ji
    and sum_b <F0_b,Z_b> - sum_i l_i zeta_i + nu.b = -1).
    For unbounded, y is an improving ray (c.y = -1).
    """

    def __init__(self, status, y, objective_value, primal_residual, dual_residual,
                 gap, block_certificates, dual_blocks=None, dual_equalities=None,
                 dual_bounds=None, dual_objective=None, farkas_equalities=None,
                 farkas_bounds=None, iterations=0, message=""):
        self.status = status
        self.y = y
        self.objective_value = objective_value
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual
        self.gap = gap
        self.block_certificates = block_certificates
        self.dual_blocks = dual_blocks
        self.dual_equalities = dual_equalities
        self.dual_bounds = dual_bounds
        self.dual_objective = dual_objective
        self.farkas_equalities = farkas_equalities
        self.farkas_bounds = farkas_bounds
        self.iterations = iterations
        self.message = message

    def __repr__(self):
        val = self.objective_value
        return f"SdpSolution(status={self.status!r}, objective={val}, iters={self.iterations})"


class FeasReport:
    """Per-constraint feasibility of a candidate y, via Jacobi eigenvalues."""

    def __init__(self, passed, block_lambda_min, equality_residuals, bound_violations, tol):
        self.passed = passed
        self.block_lambda_min = block_lambda_min
        self.equality_residuals = equality_residuals
        self.bound_violations = bound_violations
        self.tol = tol

    def worst(self):
        vals = [0.0]
        vals += [-lm for lm in self.block_lambda_min]
        vals += [abs(r) for r in self.equality_residuals]
        vals += list(self.bound_violations)
        return max(vals)


def block_slack(problem, block_index, y):
    F0, coeff = problem.blocks[block_index]
    S = F0.copy()
    for i, Fi in coeff.items():
        S += y[i] * Fi
    return S


def check_solution(problem, y, tol=1e-7):
    """Report per-block lambda_min, equality residuals and bound violations.

    Passes iff every block is PSD to -tol (relative to the block's scale),
    equalities hold to tol, and bounds are violated by at most tol.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != problem.vars:
        raise ValueError("candidate length mismatch")
    lmins = []
    ok = True
    for bi in range(len(problem.blocks)):
        S = block_slack(problem, bi, y)
        w, _ = eig_sym(S)
        lmins.append(float(w[0]))
        if w[0] < -tol * psd_scale(S):
            ok = False
    eqres = []
    for a, rhs in problem.equalities:
        r = float(a @ y - rhs)
        eqres.append(r)
        if abs(r) > tol * (1.0 + abs(rhs)):
            ok = False
    bviol = []
    for i, lb in enumerate(problem.bounds):
        v = 0.0 if lb is None else max(0.0, lb - y[i])
        bviol.append(v)
        if v > tol * (1.0 + abs(lb or 0.0)):
            ok = False
    return FeasReport(ok, lmins, eqres, bviol, tol)


# ---------------------------------------------------------------------------
# cone-LP core:   min c.x  s.t.  A x = b,  G x + s = h,  s in K,
# K = nonneg orthant (one entry per bound row) x PSD blocks in svec form.
# Solved on the homogeneous self-dual embedding in (x, y, z, s, tau, kappa).
# ---------------------------------------------------------------------------


class _NumericalFailure(Exception):
    pass


class _Cone:
    def __init__(self, nonneg, psd_dims):
        self.nonneg = nonneg
        self.psd = list(psd_dims)
        self.slices = []
        off = nonneg
        for n in self.psd:
            ln = n * (n + 1) // 2
            self.slices.append(slice(off, off + ln))
            off += ln
        self.dim = off
        self.degree = nonneg + sum(self.psd)

    def identity(self):
        e = np.zeros(self.dim)
        e[: self.nonneg] = 1.0
        for n, sl in zip(self.psd, self.slices):
            e[sl] = svec(np.eye(n))
        return e

    def mats(self, u):
        return [smat(u[sl], n) for n, sl in zip(self.psd, self.slices)]


def _inf_norm(v):
    return float(np.abs(v).max()) if v.size else 0.0


def _chol_psd(M, name):
    # plain Cholesky with one jittered retry; iterates can graze the boundary
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        eps = 1e-14 * (1.0 + np.trace(M))
        try:
            return np.linalg.cholesky(M + eps * np.eye(M.shape[0]))
        except np.linalg.LinAlgError:
            raise _NumericalFailure(f"{name} iterate left the cone")


class _Scaling:
    """Nesterov-Todd scaling point for the current (s, z)."""

    def __init__(self, cone, s, z):
        self.cone = cone
        m = cone.nonneg
        sl_, zl_ = s[:m], z[:m]
        if np.any(sl_ <= 0) or np.any(zl_ <= 0):
            raise _NumericalFailure("orthant iterate left the cone")
        self.d = np.sqrt(sl_ / zl_)
        self.lam_l = np.sqrt(sl_ * zl_)
        self.r = []
        self.rti = []
        self.lam_b = []
        for n, sl in zip(cone.psd, cone.slices):
            S = smat(s[sl], n)
            Z = smat(z[sl], n)
            Ls = _chol_psd(S, "primal slack")
            Lz = _chol_psd(Z, "dual slack")
            U, dt, Vt = np.linalg.svd(Lz.T @ Ls)
            if dt[-1] <= 0:
                raise _NumericalFailure("scaling collapsed")
            inv_sqrt = 1.0 / np.sqrt(dt)
            # r^{-1} S r^{-T} = r^T Z r = diag(dt): both points map to the
            # same diagonal, which is what makes the NT direction symmetric.
            self.r.append(Ls @ Vt.T * inv_sqrt)
            self.rti.append(Lz @ U * inv_sqrt)
            self.lam_b.append(dt)

    def lam_vec(self):
        out = np.zeros(self.cone.dim)
        out[: self.cone.nonneg] = self.lam_l
        for dt, n, sl in zip(self.lam_b, self.cone.psd, self.cone.slices):
            out[sl] = svec(np.diag(dt))
        return out

    def _per_block(self, u, f):
        out = np.empty_like(u)
        for bi, (n, sl) in enumerate(zip(self.cone.psd, self.cone.slices)):
            out[sl] = svec(f(bi, smat(u[sl], n)))
        return out

    def w_z(self, u):
        # W u = svec(r^T U r) on PSD blocks, d*u on the orthant
        out = self._per_block(u, lambda bi, U: self.r[bi].T @ U @ self.r[bi])
        out[: self.cone.nonneg] = self.d * u[: self.cone.nonneg]
        return out

    def w_invt_s(self, u):
        # W^{-T} u = svec(r^{-1} U r^{-T}); r^{-T} = rti
        out = self._per_block(u, lambda bi, U: self.rti[bi].T @ U @ self.rti[bi])
        out[: self.cone.nonneg] = u[: self.cone.nonneg] / self.d
        return out

    def w_t(self, u):
        out = self._per_block(u, lambda bi, U: self.r[bi] @ U @ self.r[bi].T)
        out[: self.cone.nonneg] = self.d * u[: self.cone.nonneg]
        return out

    def w_tw_inv(self, u):
        # (W^T W)^{-1} u = svec(rti rti^T U rti rti^T)
        def f(bi, U):
            R = self.rti[bi]
            return R @ (R.T @ U @ R) @ R.T

        out = self._per_block(u, f)
        out[: self.cone.nonneg] = u[: self.cone.nonneg] / self.d ** 2
        return out

    def jdiv_lam(self, u):
        # solve lam o v = u; for diagonal lam this is a Lyapunov division
        m = self.cone.nonneg
        out = np.empty_like(u)
        out[:m] = u[:m] / self.lam_l
        for dt, n, sl in zip(self.lam_b, self.cone.psd, self.cone.slices):
            U = smat(u[sl], n)
            out[sl] = svec(2.0 * U / np.add.outer(dt, dt))
        return out

    def lam_sq(self):
        m = self.cone.nonneg
        out = np.zeros(self.cone.dim)
        out[:m] = self.lam_l ** 2
        for dt, n, sl in zip(self.lam_b, self.cone.psd, self.cone.slices):
            out[sl] = svec(np.diag(dt ** 2))
        return out

    def max_step(self, u):
        """max t >= 0 with lam + alpha*u in K iff alpha <= 1/t (t=0: any step)."""
        m = self.cone.nonneg
        t = 0.0
        if m:
            t = max(t, float(np.max(-u[:m] / self.lam_l)))
        for dt, n, sl in zip(self.lam_b, self.cone.psd, self.cone.slices):
            U = smat(u[sl], n)
            inv_sqrt = 1.0 / np.sqrt(dt)
            M = U * np.outer(inv_sqrt, inv_sqrt)
            w = np.linalg.eigvalsh(0.5 * (M + M.T))
            t = max(t, float(-w[0]))
        return t


def _jmul(cone, u, v):
    # Jordan product of two scaled directions
    m = cone.nonneg
    out = np.empty(cone.dim)
    out[:m] = u[:m] * v[:m]
    for n, sl in zip(cone.psd, cone.slices):
        U = smat(u[sl], n)
        V = smat(v[sl], n)
        out[sl] = svec(0.5 * (U @ V + V @ U))
    return out


class _ConeData:
    """Conelp data assembled from an SdpProblem, with sparse column bookkeeping."""

    def __init__(self, p):
        self.m = p.vars
        self.c = p.objective.copy()
        self.bound_idx = np.array([i for i, lb in enumerate(p.bounds) if lb is not None], dtype=int)
        self.bound_lo = np.array([p.bounds[i] for i in self.bound_idx], dtype=float)
        psd_dims = [F0.shape[0] for F0, _ in p.blocks]
        self.cone = _Cone(len(self.bound_idx), psd_dims)
        # per block: touched variable indices, stacked F_i tensors, svec'd columns
        self.touched = []
        self.fstack = []
        self.fmat = []
        self.f0 = []
        self.block_scale = []
        for F0, coeff in p.blocks:
            idx = np.array(sorted(coeff), dtype=int)
            n = F0.shape[0]
            stack = np.stack([coeff[i] for i in idx]) if idx.size else np.zeros((0, n, n))
            # normalize each block to unit magnitude so the interior-point
            # iteration sees O(1) data regardless of how the caller scaled
            # the matrices; duals are mapped back in solve()
            tb = max(np.abs(F0).max(initial=0.0), np.abs(stack).max(initial=0.0))
            tb = tb if tb > 0.0 else 1.0
            F0 = F0 / tb
            stack = stack / tb
            rows, cols, scale = _svec_inds(n)
            self.block_scale.append(tb)
            self.touched.append(idx)
            self.fstack.append(stack)
            self.fmat.append(stack[:, rows, cols] * scale if idx.size else np.zeros((0, rows.size)))
            self.f0.append(F0)
        self.h = np.zeros(self.cone.dim)
        self.h[: self.cone.nonneg] = -self.bound_lo
        for F0, sl in zip(self.f0, self.cone.slices):
            self.h[sl] = svec(F0)
        if p.equalities:
            A = np.stack([a for a, _ in p.equalities])
            b = np.array([rhs for _, rhs in p.equalities], dtype=float)
            self.eq_scale = np.maximum(np.maximum(np.abs(A).max(axis=1), np.abs(b)), 1e-300)
            self.A = A / self.eq_scale[:, None]
            self.b = b / self.eq_scale
        else:
            self.A = np.zeros((0, self.m))
            self.b = np.zeros(0)
            self.eq_scale = np.zeros(0)

    # G x: orthant rows are -x_i (bound rows), PSD rows -sum x_i svec(F_i)
    def Gx(self, x):
        out = np.zeros(self.cone.dim)
        out[: self.cone.nonneg] = -x[self.bound_idx]
        for idx, fm, sl in zip(self.touched, self.fmat, self.cone.slices):
            if idx.size:
                out[sl] = -(fm.T @ x[idx])
        return out

    def GTz(self, z):
        out = np.zeros(self.m)
        np.add.at(out, self.bound_idx, -z[: self.cone.nonneg])
        for idx, fm, sl in zip(self.touched, self.fmat, self.cone.slices):
            if idx.size:
                out[idx] += -(fm @ z[sl])
        return out


def _kkt_factor(data, W):
    """Factor [S A^T; A 0] with S = G^T (W^T W)^{-1} G, exploiting block locality."""
    m, A = data.m, data.A
    neq = A.shape[0]
    S = np.zeros((m, m))
    if data.cone.nonneg:
        dinv2 = 1.0 / W.d ** 2
        np.add.at(S, (data.bound_idx, data.bound_idx), dinv2)
    ghat = []
    for bi, (idx, stack, sl) in enumerate(zip(data.touched, data.fstack, data.cone.slices)):
        n = data.cone.psd[bi]
        rows, cols, scale = _svec_inds(n)
        if idx.size == 0:
            ghat.append(np.zeros((rows.size, 0)))
            continue
        R = W.rti[bi]
        H = np.matmul(np.matmul(R.T[None, :, :], stack), R[None, :, :])
        Gb = -(H[:, rows, cols] * scale).T  # svec_len x ntouched
        ghat.append(Gb)
        S[np.ix_(idx, idx)] += Gb.T @ Gb
    K = np.zeros((m + neq, m + neq))
    K[:m, :m] = S
    if neq:
        K[:m, m:] = A.T
        K[m:, :m] = A
    try:
        lu = scipy.linalg.lu_factor(K)
    except (ValueError, scipy.linalg.LinAlgError):
        raise _NumericalFailure("KKT factorization failed")
    if not np.all(np.isfinite(lu[0])):
        raise _NumericalFailure("KKT factorization produced non-finite factors")

    def solve3(bx, by, bz, refine=5):
        # [0 A^T G^T; A 0 0; G 0 -W^T W] (ux,uy,uz) = (bx,by,bz)
        def once(bx_, by_, bz_):
            # eliminate uz = (W^T W)^{-1} (G ux - bz); GTz carries G's signs
            wz = W.w_tw_inv(bz_)
            rhs = np.concatenate([bx_ + data.GTz(wz), by_])
            sol = scipy.linalg.lu_solve(lu, rhs)
            ux, uy = sol[:m], sol[m:]
            uz = W.w_tw_inv(data.Gx(ux) - bz_)
            return ux, uy, uz

        def resid(ux, uy, uz):
            rx = bx - (data.A.T @ uy + data.GTz(uz))
            ry = by - data.A @ ux
            rz = bz - (data.Gx(ux) - W.w_t(W.w_z(uz)))
            return rx, ry, rz

        # Near convergence W^T W has condition ~ 1/mu, so a single Newton
        # solve loses several digits; refine until the residual stops
        # shrinking, keeping the best candidate seen.
        ux, uy, uz = once(bx, by, bz)
        rx, ry, rz = resid(ux, uy, uz)
        rnorm = max(_inf_norm(rx), _inf_norm(ry), _inf_norm(rz))
        best = (ux, uy, uz)
        best_rnorm = rnorm
        for _ in range(refine):
            if rnorm == 0.0:
                break
            dx, dy, dz = once(rx, ry, rz)
            ux, uy, uz = ux + dx, uy + dy, uz + dz
            rx, ry, rz = resid(ux, uy, uz)
            rnorm = max(_inf_norm(rx), _inf_norm(ry), _inf_norm(rz))
            if rnorm >= best_rnorm:
                break
            still_contracting = rnorm < 0.5 * best_rnorm
            best = (ux, uy, uz)
            best_rnorm = rnorm
            if not still_contracting:
                break
        return best

    return solve3


def _drop_dependent_equalities(data, feastol):
    """Rank-reveal A; drop dependent rows, or return a Farkas nu if inconsistent."""
    A, b = data.A, data.b
    neq = A.shape[0]
    if neq == 0:
        return None
    q, r, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r)) if r.size else np.zeros(0)
    tol = max(A.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > max(tol, 1e-13)))
    if rank == neq:
        return None
    keep = piv[:rank]
    drop = piv[rank:]
    # dropped rows are combinations of kept ones; check rhs consistency
    coeffs, *_ = np.linalg.lstsq(A[keep].T, A[drop].T, rcond=None)
    resid = b[drop] - coeffs.T @ b[keep]
    bad = np.argmax(np.abs(resid))
    if abs(resid[bad]) > feastol * (1.0 + np.abs(b).max()):
        nu = np.zeros(neq)
        nu[drop[bad]] = 1.0
        nu[keep] = -coeffs[:, bad]
        nu /= -resid[bad]  # normalize so b.nu = -1
        return nu
    data.A = A[np.sort(keep)]
    data.b = b[np.sort(keep)]
    data.kept_eq = np.sort(keep)
    return None


def _conelp(data, feastol, reltol, abstol, maxiters):
    """HSD interior-point loop; returns a dict with raw embedding output."""
    cone = data.cone
    m = data.m
    c, h, b = data.c, data.h, data.b
    e = cone.identity()
    deg = cone.degree + 1

    resx0 = max(1.0, np.linalg.norm(c))
    resy0 = max(1.0, np.linalg.norm(b))
    resz0 = max(1.0, np.linalg.norm(h))

    # initial point from two least-norm solves with identity scaling
    s0 = np.concatenate([np.ones(cone.nonneg)] + [svec(np.eye(n)) for n in cone.psd]) \
        if cone.dim else np.zeros(0)
    z0 = s0.copy()
    Wi = _Scaling(cone, s0, z0)
    solve3 = _kkt_factor(data, Wi)
    x, _, zt = solve3(np.zeros(m), b, h)
    s = -zt
    ts = Wi.max_step(s)  # with identity scaling, lam = e
    if ts >= -1e-8 * max(1.0, np.linalg.norm(s)):
        s = s + (1.0 + ts) * e
    _, y, z = solve3(-c, np.zeros(b.size), np.zeros(cone.dim))
    tz = Wi.max_step(z)
    if tz >= -1e-8 * max(1.0, np.linalg.norm(z)):
        z = z + (1.0 + tz) * e
    tau, kappa = 1.0, 1.0

    best, best_score = None, np.inf
    stall = 0
    message = f"no convergence in {maxiters} iterations"
    for it in range(maxiters):
        rx = data.A.T @ y + data.GTz(z) + c * tau
        ry = data.A @ x - b * tau
        rz = data.Gx(x) + s - h * tau
        cx = float(c @ x)
        by_hz = float(b @ y + h @ z)
        rtau = kappa + cx + by_hz

        pcost = cx / tau
        dcost = -by_hz / tau
        gap = float(s @ z) / tau ** 2
        relgap = gap / max(1.0, abs(pcost), abs(dcost))
        pres = max(np.linalg.norm(ry) / resy0, np.linalg.norm(rz) / resz0) / tau
        dres = np.linalg.norm(rx) / resx0 / tau

        hresx = np.linalg.norm(data.A.T @ y + data.GTz(z))
        pinfres = hresx / resx0 / -by_hz if by_hz < 0 else None
        hres_pri = max(np.linalg.norm(data.A @ x) / resy0,
                       np.linalg.norm(data.Gx(x) + s) / resz0)
        dinfres = hres_pri / -cx if cx < 0 else None

        cur = dict(x=x / tau, y=y / tau, z=z / tau, s=s / tau, pres=pres,
                   dres=dres, gap=gap, relgap=relgap, pcost=pcost, dcost=dcost,
                   iterations=it, tau=tau, kappa=kappa)
        score = max(pres, dres, relgap)
        if score < 0.999 * best_score:
            best, best_score = cur, score
            stall = 0
        else:
            stall += 1
        if pres <= feastol and dres <= feastol and \
                (gap <= abstol or relgap <= reltol):
            cur["status"] = "optimal"
            return cur
        if pinfres is not None and pinfres <= feastol:
            scl = -by_hz
            cur.update(status="primal_infeasible", y_cert=y / scl, z_cert=z / scl)
            return cur
        if dinfres is not None and dinfres <= feastol:
            scl = -cx
            cur.update(status="dual_infeasible", x_cert=x / scl, s_cert=s / scl)
            return cur
        if tau < 1e-8 * max(1.0, kappa):
            # embedding says "no finite solution"; try both certificates at a
            # looser threshold before giving up
            if pinfres is not None and pinfres <= np.sqrt(feastol):
                scl = -by_hz
                cur.update(status="primal_infeasible", y_cert=y / scl, z_cert=z / scl)
                return cur
            if dinfres is not None and dinfres <= np.sqrt(feastol):
                scl = -cx
                cur.update(status="dual_infeasible", x_cert=x / scl, s_cert=s / scl)
                return cur
            cur["status"] = "numerical-failure"
            cur["message"] = "tau collapsed without a validated certificate"
            return cur
        if stall >= 10:
            # the endgame stopped making progress; report the best iterate
            message = "progress stalled near the numerical floor"
            break

        try:
            W = _Scaling(cone, s, z)
            lam = W.lam_vec()
            mu = (float(lam @ lam) + tau * kappa) / deg
            solve3 = _kkt_factor(data, W)
            x2, y2, z2 = solve3(-c, b, h)
            ctx2 = float(c @ x2 + b @ y2 + h @ z2)

            def direction(eta, sigma, corr_s=None, corr_k=0.0):
                ds_rhs = -W.lam_sq() + sigma * mu * e
                if corr_s is not None:
                    ds_rhs = ds_rhs - corr_s
                dk_rhs = -tau * kappa + sigma * mu - corr_k
                bz = -eta * rz - W.w_t(W.jdiv_lam(ds_rhs))
                x1, y1, z1 = solve3(-eta * rx, -eta * ry, bz)
                num = -eta * rtau - dk_rhs / tau - float(c @ x1 + b @ y1 + h @ z1)
                # den = -|W z2|^2 - kappa/tau <= 0; both num and den shrink
                # together at convergence, so only a true zero is fatal
                den = ctx2 - kappa / tau
                if den == 0.0 or not np.isfinite(den):
                    raise _NumericalFailure("singular tau subsystem")
                dtau = num / den
                if not np.isfinite(dtau):
                    raise _NumericalFailure("tau direction overflowed")
                dx = x1 + dtau * x2
                dy = y1 + dtau * y2
                dz = z1 + dtau * z2
                dz_s = W.w_z(dz)
                ds_s = W.jdiv_lam(ds_rhs) - dz_s
                ds = W.w_t(ds_s)
                dkappa = (dk_rhs - kappa * dtau) / tau
                return dx, dy, dz, ds, dtau, dkappa, ds_s, dz_s

            dxa, dya, dza, dsa, dtaua, dkappaa, ds_sa, dz_sa = direction(1.0, 0.0)
            t = max(W.max_step(ds_sa), W.max_step(dz_sa))
            if dtaua < 0:
                t = max(t, -dtaua / tau)
            if dkappaa < 0:
                t = max(t, -dkappaa / kappa)
            alpha_aff = 1.0 if t <= 0 else min(1.0, 1.0 / t)
            lam_s = lam + alpha_aff * ds_sa
            lam_z = lam + alpha_aff * dz_sa
            mu_aff = (float(lam_s @ lam_z) + (tau + alpha_aff * dtaua) * (kappa + alpha_aff * dkappaa)) / deg
            sigma = min(1.0, max(0.0, (mu_aff / mu))) ** 3

            corr_s = _jmul(cone, ds_sa, dz_sa)
            dx, dy, dz, ds, dtau, dkappa, ds_s, dz_s = direction(
                1.0 - sigma, sigma, corr_s, dtaua * dkappaa)
            t = max(W.max_step(ds_s), W.max_step(dz_s))
            if dtau < 0:
                t = max(t, -dtau / tau)
            if dkappa < 0:
                t = max(t, -dkappa / kappa)
            alpha = 1.0 if t <= 0 else min(1.0, 0.99 / t)
        except _NumericalFailure as exc:
            message = str(exc)
            break

        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        tau += alpha * dtau
        kappa += alpha * dkappa
        if not (np.isfinite(tau) and np.isfinite(kappa) and tau > 0 and kappa > 0):
            message = "embedding variables left the cone"
            break

    if best is None:
        raise _NumericalFailure(message)
    if best["pres"] <= feastol and best["dres"] <= feastol and \
            (best["gap"] <= abstol or best["relgap"] <= reltol):
        best["status"] = "optimal"
    elif best["pres"] <= 100 * feastol and best["dres"] <= 100 * feastol and \
            (best["gap"] <= 100 * abstol or best["relgap"] <= 100 * reltol):
        # problems whose solution set has empty interior stall a few
        # digits short of the target; the iterate is still usable and the
        # achieved residuals are reported for the caller to gate on
        best["status"] = "optimal"
        best["message"] = "stopped short of target tolerances"
    else:
        best["status"] = "numerical-failure"
        best["message"] = message
    return best


def _lam_min_jacobi(M):
    w, _ = eig_sym(M)
    return float(w[0])


def solve(problem, feastol=1e-8, reltol=1e-7, abstol=1e-9, maxiters=200):
    """Solve an SdpProblem; returns SdpSolution with validated certificates.

    optimal: y satisfies every block/equality to tolerance, duals attached.
    infeasible: Farkas witness in block_certificates (+ bound/equality
    multipliers), validated before being reported.
    unbounded: y is an improving ray.
    numerical-failure: best iterate returned for inspection.
    """
    data = _ConeData(problem)
    nu = _drop_dependent_equalities(data, feastol)
    neq_full = len(problem.equalities)
    if nu is not None:
        zeros = [np.zeros_like(F0) for F0, _ in problem.blocks]
        return SdpSolution(
            "infeasible", None, np.nan, np.inf, 0.0, np.inf, zeros,
            farkas_equalities=nu / data.eq_scale,
            farkas_bounds=np.zeros(data.bound_idx.size),
            message="inconsistent equality rows")
    try:
        raw = _conelp(data, feastol, reltol, abstol, maxiters)
    except _NumericalFailure as exc:
        return SdpSolution("numerical-failure", None, np.nan, np.inf, np.inf,
                           np.inf, [], message=str(exc))

    kept = getattr(data, "kept_eq", np.arange(neq_full))

    def expand_eq(v):
        out = np.zeros(neq_full)
        out[kept] = v
        return out

    if raw["status"] == "optimal":
        yvec = raw["x"]
        lmins = [_lam_min_jacobi(block_slack(problem, bi, yvec))
                 for bi in range(len(problem.blocks))]
        Z = [Zb / tb for Zb, tb in zip(data.cone.mats(raw["z"]), data.block_scale)]
        gap = raw["relgap"] if raw["relgap"] is not None else raw["gap"]
        return SdpSolution(
            "optimal", yvec, float(problem.objective @ yvec), raw["pres"],
            raw["dres"], gap, lmins, dual_blocks=Z,
            dual_equalities=expand_eq(raw["y"]) / data.eq_scale,
            dual_bounds=raw["z"][: data.cone.nonneg].copy(),
            dual_objective=raw["dcost"], iterations=raw["iterations"])

    if raw["status"] == "primal_infeasible":
        z = raw["z_cert"]
        Zs = data.cone.mats(z)
        zeta = z[: data.cone.nonneg].copy()
        # validate in the equilibrated space, where the data is O(1):
        # G^T z + A^T nu ~ 0, z in K, h.z + b.nu = -1
        lin = data.GTz(z) + data.A.T @ raw["y_cert"]
        ref = max(1.0, _inf_norm(z), _inf_norm(raw["y_cert"]))
        ok = np.abs(lin).max(initial=0.0) <= np.sqrt(feastol) * ref
        ok = ok and all(_lam_min_jacobi(Zb) >= -np.sqrt(feastol) * psd_scale(Zb) for Zb in Zs)
        ok = ok and np.all(zeta >= -np.sqrt(feastol))
        if ok:
            Z = [Zb / tb for Zb, tb in zip(Zs, data.block_scale)]
            return SdpSolution(
                "infeasible", None, np.nan, np.inf, raw["dres"], raw["gap"], Z,
                farkas_equalities=expand_eq(raw["y_cert"]) / data.eq_scale,
                farkas_bounds=zeta,
                iterations=raw["iterations"])
        return SdpSolution("numerical-failure", None, np.nan, np.inf, np.inf,
                           np.inf, [], iterations=raw["iterations"],
                           message="infeasibility certificate failed validation")

    if raw["status"] == "dual_infeasible":
        ray = raw["x_cert"]
        lmins = []
        ok = True
        for F0, coeff in problem.blocks:
            D = np.zeros_like(F0)
            for i, Fi in coeff.items():
                D += ray[i] * Fi
            lm = _lam_min_jacobi(D)
            lmins.append(lm)
            ok = ok and lm >= -np.sqrt(feastol) * psd_scale(D)
        ok = ok and np.abs(data.A @ ray).max(initial=0.0) <= np.sqrt(feastol)
        ok = ok and np.all(ray[data.bound_idx] >= -np.sqrt(feastol))
        if ok:
            return SdpSolution("unbounded", ray, -np.inf, raw["pres"], np.inf,
                               raw["gap"], lmins, iterations=raw["iterations"])
        return SdpSolution("numerical-failure", None, np.nan, np.inf, np.inf,
                           np.inf, [], iterations=raw["iterations"],
                           message="unboundedness certificate failed validation")

    yvec = raw.get("x")
    lmins = []
    if yvec is not None:
        lmins = [_lam_min_jacobi(block_slack(problem, bi, yvec))
                 for bi in range(len(problem.blocks))]
    return SdpSolution("numerical-failure", yvec,
                       float(problem.objective @ yvec) if yvec is not None else np.nan,
                       raw.get("pres", np.inf), raw.get("dres", np.inf),
                       raw.get("gap", np.inf), lmins,
                       iterations=raw.get("iterations", 0),
                       message=raw.get("message", "did not converge"))


# ---------------------------------------------------------------------------
# JSON round-trip for debugging / CLI hand-off
# ---------------------------------------------------------------------------


def problem_to_json(problem, indent=None):
    blocks = []
    for F0, coeff in problem.blocks:
        F = [None] * problem.vars
        for i, Fi in coeff.items():
            F[i] = Fi.tolist()
        blocks.append({"dim": F0.shape[0], "F0": F0.tolist(), "F": F})
    doc = {
        "vars": problem.vars,
        "objective": problem.objective.tolist(),
        "blocks": blocks,
        "equalities": [{"a": a.tolist(), "b": rhs} for a, rhs in problem.equalities],
        "bounds": problem.bounds,
    }
    return json.dumps(doc, indent=indent)


def problem_from_json(text):
    doc = json.loads(text)
    blocks = [(np.array(b["F0"], dtype=float),
               [None if Fi is None else np.array(Fi, dtype=float) for Fi in b["F"]])
              for b in doc["blocks"]]
    return SdpProblem(
        doc["vars"],
        objective=doc.get("objective"),
        blocks=blocks,
        equalities=[(e["a"], e["b"]) for e in doc.get("equalities", [])],
        bounds=doc.get("bounds"),
    )
