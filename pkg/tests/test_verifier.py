import numpy as np
import pytest

from lyapcert.pep_model import FunctionClass, MethodSpec, NoiseModel
from lyapcert.verifier import (
    ChainLink, PotentialStructure, PotTerm, build_vk_problem, chain_bound,
    contraction_factor, potential, verify_tuple,
)

L = 1.0
FC = FunctionClass(0.0, L)
GD = MethodSpec(alpha=1.0, delta=1.0 / L)
EXACT = NoiseModel("exact")
BV2 = NoiseModel("unified", sigma_star2=1.0, rho1=0.0, rho2=1.0, n=2)


def gm_pot(d, b, a=L ** 2):
    return potential(("fgap", "x", d), ("sqgrad", "x", b), ("sqdist", "x", a))


def dist_pot(d):
    return potential(("fgap", "x", d), ("sqdist", "x", L / 2))


def scale_pot(pot, s):
    return PotentialStructure(
        [PotTerm(t.kind, t.state, s * t.coeff) for t in pot.terms])


def add_pots(p1, p2):
    return PotentialStructure(tuple(p1.terms) + tuple(p2.terms))


# ---------------------------------------------------------------------------
# gradient descent, deterministic
# ---------------------------------------------------------------------------


def test_gd_schedule_first_step():
    r = verify_tuple(GD, FC, EXACT, gm_pot(L, 0.0), gm_pot(3 * L, 3.0), 0.0)
    assert r.status == "verified"
    assert r.margin >= -1e-7
    # the certificate is the known hand proof: weights 2L, 2d+2L(2+b),
    # 2L(1+b)+d at (d,b) = (L,0)
    big = sorted(v for v in r.multipliers.values() if v > 1e-3)
    assert np.allclose(big, [2.0, 3.0, 6.0], atol=2e-3)


def test_gd_schedule_later_step():
    # d_k = (2k+1)L, b_k = k(k+2) satisfies the one-step condition
    k = 3
    d0, b0 = (2 * k + 1) * L, k * (k + 2.0)
    d1, b1 = (2 * k + 3) * L, (k + 1) * (k + 3.0)
    r = verify_tuple(GD, FC, EXACT, gm_pot(d0, b0), gm_pot(d1, b1), 0.0)
    assert r.status == "verified"


def test_identity_step_needs_no_inequalities():
    ident = MethodSpec(beta=1.0, gamma_p=1.0)
    pot = gm_pot(2.0, 1.0)
    r = verify_tuple(ident, FC, EXACT, pot, pot, 0.0)
    assert r.status == "verified"
    assert max(abs(v) for v in r.multipliers.values()) < 1e-6


def test_zero_step_size_is_degenerate_but_valid():
    frozen = MethodSpec(alpha=1.0, delta=0.0)
    pot = gm_pot(2.0, 1.0)
    assert verify_tuple(frozen, FC, EXACT, pot, pot, 0.0).status == "verified"


def test_negative_step_rejected_at_parse_time():
    with pytest.raises(ValueError):
        MethodSpec(alpha=1.0, delta=-0.1)
    with pytest.raises(ValueError):
        MethodSpec(gamma_p=1.0, eps=-1e-3)


def test_b_increment_boundary_when_d_removed():
    # with the value coefficient pinned to zero the squared-gradient
    # weight can only grow by 3 per step (at delta = 1/L); the schedule
    # increment 2 + d_k/L of a live d_k > 0 overshoots that
    ok = verify_tuple(GD, FC, EXACT, gm_pot(0.0, 0.0), gm_pot(0.0, 2.75), 0.0)
    assert ok.status == "verified"
    at = verify_tuple(GD, FC, EXACT, gm_pot(0.0, 0.0), gm_pot(0.0, 3.0), 0.0)
    assert at.status == "verified"
    bad = verify_tuple(GD, FC, EXACT, gm_pot(0.0, 0.0), gm_pot(0.0, 4.0), 0.0)
    assert bad.status == "refuted"
    assert bad.witness is not None
    w, _ = np.linalg.eigh(bad.witness["gram"])
    assert w.min() >= -1e-8


# ---------------------------------------------------------------------------
# brute-force agreement on the one-step gradient descent block
# ---------------------------------------------------------------------------


def _sym_outer(u, v):
    return 0.5 * (np.outer(u, v) + np.outer(v, u))


def _lam_max_3x3(Q):
    """Largest eigenvalue of a stack of symmetric 3x3 matrices, in closed
    form (trigonometric solution of the characteristic cubic)."""
    q = np.trace(Q, axis1=-2, axis2=-1) / 3.0
    B = Q - q[..., None, None] * np.eye(3)
    p2 = np.sum(B * B, axis=(-2, -1)) / 6.0
    p = np.sqrt(np.maximum(p2, 0.0))
    detB = (B[..., 0, 0] * (B[..., 1, 1] * B[..., 2, 2] - B[..., 1, 2] ** 2)
            - B[..., 0, 1] * (B[..., 0, 1] * B[..., 2, 2] - B[..., 1, 2] * B[..., 0, 2])
            + B[..., 0, 2] * (B[..., 0, 1] * B[..., 1, 2] - B[..., 1, 1] * B[..., 0, 2]))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(p > 0, detB / (2 * np.maximum(p, 1e-300) ** 3), 0.0)
    phi = np.arccos(np.clip(r, -1.0, 1.0)) / 3.0
    return q + 2.0 * p * np.cos(phi)


class _GdBlock:
    """Hand-built 3x3 forms for one gradient step, columns (x, g0, g1).

    x* = 0, f* = 0, x1 = x - g0/L. Multipliers live on the interpolation
    pairs; the two value rows eliminate lam(k,k+1) and lam(*,k) exactly,
    leaving lam(k+1,k), lam(k,*), lam(k+1,*) as the gridded coordinates.
    The pair (*,k+1) states the new point is no better than x* and never
    helps a decrease certificate, so it carries no multiplier here.
    """

    def __init__(self):
        x0 = np.array([1.0, 0.0, 0.0])
        g0 = np.array([0.0, 1.0, 0.0])
        g1 = np.array([0.0, 0.0, 1.0])
        x1 = x0 - g0 / L
        zero = np.zeros(3)

        def interp(xi, gi, xj, gj):
            return -_sym_outer(gj, xi - xj) - _sym_outer(gi - gj, gi - gj) / (2 * L)

        self.x0, self.g0, self.g1, self.x1 = x0, g0, g1, x1
        self.cA = interp(x1, g1, x0, g0)      # (k+1, k)
        self.cB = interp(x0, g0, zero, zero)  # (k, *)
        self.cC = interp(x1, g1, zero, zero)  # (k+1, *)
        self.cKK1 = interp(x0, g0, x1, g1)    # (k, k+1), eliminated
        self.cSK = interp(zero, zero, x0, g0)  # (*, k), eliminated

    def vdiff_quad(self, d0, b0, d1, b1):
        return (b1 * _sym_outer(self.g1, self.g1) + L ** 2 * _sym_outer(self.x1, self.x1)
                - b0 * _sym_outer(self.g0, self.g0) - L ** 2 * _sym_outer(self.x0, self.x0))

    def sweep(self, d0, b0, d1, b1, grids):
        vq = self.vdiff_quad(d0, b0, d1, b1)
        A, B, C = np.meshgrid(*grids, indexing="ij")
        lKK1 = A + C + d1          # value row of f(x_{k+1})
        lSK = B + C + (d1 - d0)    # value row of f(x_k)
        Q = (vq
             + A[..., None, None] * self.cA + B[..., None, None] * self.cB
             + C[..., None, None] * self.cC + lKK1[..., None, None] * self.cKK1
             + lSK[..., None, None] * self.cSK)
        w = _lam_max_3x3(Q)
        w[(lSK < 0) | (lKK1 < 0)] = np.inf
        i = np.unravel_index(np.argmin(w), w.shape)
        return float(w[i]), tuple(g[j] for g, j in zip(grids, i))

    def margin(self, d0, b0, d1, b1, lam_max=10.0, h=0.2):
        coarse = np.arange(0.0, lam_max + h / 2, h)
        m, at = self.sweep(d0, b0, d1, b1, (coarse, coarse, coarse))
        fine = [np.clip(np.arange(v - 1.5 * h, v + 1.5 * h, h / 10), 0, lam_max)
                for v in at]
        m2, _ = self.sweep(d0, b0, d1, b1, fine)
        return min(m, m2)


def test_brute_force_grid_agrees_with_sdp():
    # feasible combinations form a thin slab (the pure-x direction pins
    # the whole first row of the slack to zero), so a grid margin near
    # zero means feasible and a clearly positive one means infeasible;
    # draws inside the resolution band between the two are redrawn
    block = _GdBlock()
    rng = np.random.default_rng(11)
    n_checked = 0
    for _ in range(200):
        if n_checked == 50:
            break
        d0 = rng.uniform(0.0, 2.0)
        d1 = d0 + rng.uniform(0.0, 2.0)
        b0 = rng.uniform(0.0, 2.0)
        b1 = max(b0 + rng.uniform(-1.0, 4.0), 0.0)
        m = block.margin(d0, b0, d1, b1)
        if 2e-3 < m < 1e-2:
            continue
        r = verify_tuple(GD, FC, EXACT, gm_pot(d0, b0), gm_pot(d1, b1), 0.0)
        assert r.status in ("verified", "refuted")
        assert (m <= 2e-3) == (r.status == "verified"), \
            (d0, b0, d1, b1, m, r.status)
        n_checked += 1
    assert n_checked == 50


# ---------------------------------------------------------------------------
# stochastic steps: bounded variance
# ---------------------------------------------------------------------------


def _sgd_e(k, delta=1.0 / L):
    return (delta ** 2 * L / 2) * (1 + (k + 1.0))


def test_sgd_schedule_step_k4():
    r = verify_tuple(GD, FC, BV2, dist_pot(4.0), dist_pot(5.0), _sgd_e(4))
    assert r.status == "verified"
    assert r.margin >= -1e-7


def test_sgd_negative_variance_budget_refuted():
    r = verify_tuple(GD, FC, BV2, dist_pot(4.0), dist_pot(5.0), -1.0)
    assert r.status == "refuted"


def test_sgd_underpaid_variance_refuted_with_witness():
    r = verify_tuple(GD, FC, BV2, dist_pot(4.0), dist_pot(5.0), 0.6 * _sgd_e(4))
    assert r.status == "refuted"
    assert r.witness is not None
    assert r.witness["sigma2"] > 1e-6
    w, _ = np.linalg.eigh(r.witness["gram"])
    assert w.min() >= -1e-8


def test_enlarging_e_keeps_verified():
    for bump in (1.0, 1.5, 4.0):
        r = verify_tuple(GD, FC, BV2, dist_pot(4.0), dist_pot(5.0),
                         bump * _sgd_e(4))
        assert r.status == "verified", bump


def test_scenario_count_does_not_change_the_verdict():
    bv10 = NoiseModel("unified", sigma_star2=1.0, rho1=0.0, rho2=1.0, n=10)
    r = verify_tuple(GD, FC, bv10, dist_pot(2.0), dist_pot(3.0), _sgd_e(2))
    assert r.status == "verified"


# ---------------------------------------------------------------------------
# the other step templates
# ---------------------------------------------------------------------------


def test_averaged_iterate_step():
    dlt, dk = 1.0 / L, 2.0
    m = MethodSpec(alpha=1.0, delta=dlt, gamma_p=dk / (dk + 1.0),
                   eps=dlt / (dk + 1.0))
    pot_k = potential(("fgap", "z", dlt * dk * L), ("sqdist", "x", L / 2))
    pot_k1 = potential(("fgap", "z", dlt * (dk + 1) * L), ("sqdist", "x", L / 2))
    ek = (dlt ** 2 / 2) * L * (1 + dk + L * dlt) / (1 + dk)
    assert verify_tuple(m, FC, BV2, pot_k, pot_k1, ek).status == "verified"
    assert verify_tuple(m, FC, BV2, pot_k, pot_k1, 0.9 * ek).status == "refuted"


def _pavg_method(dk, dlt):
    return MethodSpec(alpha=dlt * L / (dk + dlt * L), beta=1.0, delta=dlt)


def _pavg_pot(d):
    return potential(("fgap", "y", d), ("sqdist", "x", L / 2))


def test_primal_averaging_step():
    dk, dlt = 3.0, 1.0 / L
    r = verify_tuple(_pavg_method(dk, dlt), FC, BV2, _pavg_pot(dk),
                     _pavg_pot(dk + dlt * L), L * dlt ** 2 / 2)
    assert r.status == "verified"


def test_overparameterized_both_branches():
    op = NoiseModel("variance_at_opt", sigma_star2=0.0, n=2)
    dk = 2.0
    for dlt in (1.0, 1.5):
        gain = dlt * L if dlt <= 1.0 / L else 2 * dlt * L - dlt ** 2 * L ** 2
        m = _pavg_method(dk, dlt)
        r = verify_tuple(m, FC, op, _pavg_pot(dk), _pavg_pot(dk + gain), 0.0)
        assert r.status == "verified", dlt
        r = verify_tuple(m, FC, op, _pavg_pot(dk), _pavg_pot(dk + gain + 0.05), 0.0)
        assert r.status == "refuted", dlt


def test_variance_at_optimum_step():
    vo = NoiseModel("variance_at_opt", sigma_star2=1.0, n=2)
    dk, dlt = 2.0, 0.5 / L
    ek = dlt ** 2 * L / (2 * (1 - dlt * L))
    m = _pavg_method(dk, dlt)
    assert verify_tuple(m, FC, vo, _pavg_pot(dk), _pavg_pot(dk + dlt * L),
                        ek).status == "verified"
    assert verify_tuple(m, FC, vo, _pavg_pot(dk), _pavg_pot(dk + dlt * L),
                        0.8 * ek).status == "refuted"


def test_weak_growth_step():
    rho = 2.0
    wg = NoiseModel("weak_growth", rho=rho, n=2)
    dlt = 1.0 / (2 * rho * L)
    dk = 1.0
    dk1 = dk + dlt * L - rho * dlt ** 2 * L ** 2
    m = _pavg_method(dk, dlt)
    assert verify_tuple(m, FC, wg, _pavg_pot(dk), _pavg_pot(dk1),
                        0.0).status == "verified"


def test_rbcd_sublinear_step():
    rb = NoiseModel("block_coordinate", n=3)
    dk = 1.0
    r = verify_tuple(GD, FC, rb, dist_pot(dk), dist_pot(dk + 1.0 / 3.0), 0.0)
    assert r.status == "verified"


def test_rbcd_strongly_convex_contraction():
    fc = FunctionClass(0.1, 1.0)
    rb = NoiseModel("block_coordinate", n=2)
    dist = potential(("sqdist", "x", 1.0))
    # rho^2 = ((delta L - 1)^2 + n - 1) / n at delta = 1, mu = 0.1, n = 2
    target = ((0.1 - 1.0) ** 2 + 1.0) / 2.0
    assert verify_tuple(GD, fc, rb, scale_pot(dist, target - 5e-3), dist,
                        0.0).status == "refuted"
    assert verify_tuple(GD, fc, rb, scale_pot(dist, target + 5e-3), dist,
                        0.0).status == "verified"
    got = contraction_factor(GD, fc, rb, dist, lo=0.5, hi=1.0, tol=1e-6)
    assert abs(got - target) < 1e-4


def test_accelerated_step_fixed_and_searched():
    dk, bk = 1.0, 1.0
    dk1 = 1.0 + dk + np.sqrt(1.0 + 1.5 * dk)
    tau = (dk1 - dk) / dk1
    gam = (dk1 - dk) / L

    def pot(d, b):
        return potential(("fgap", "x", d), ("sqgrad", "x", b / (2 * L)),
                         ("sqdist", "z", L / 2))

    fixed = MethodSpec(alpha=1.0 - tau, alpha_p=tau, delta=1.0 / L,
                       gamma_p=1.0, eps=gam)
    r = verify_tuple(fixed, FC, EXACT, pot(dk, bk), pot(dk1, dk1), 0.0)
    assert r.status == "verified"
    searched = MethodSpec(search_y=True, search_x=True, gamma_p=1.0, eps=gam)
    r = verify_tuple(searched, FC, EXACT, pot(dk, bk), pot(dk1, dk1), 0.0)
    assert r.status == "verified"
    r = verify_tuple(fixed, FC, EXACT, pot(dk, bk), pot(dk1 + 0.3, dk1 + 0.3), 0.0)
    assert r.status == "refuted"


def test_line_search_rows_are_free_variables():
    searched = MethodSpec(search_y=True, search_x=True, gamma_p=1.0, eps=1.0)
    pot = potential(("fgap", "x", 1.0), ("sqdist", "z", L / 2))
    built = build_vk_problem(searched, FC, EXACT, pot, pot, 0.0)
    nl = len(built.ineq_forms)
    bounds = built.problem.bounds
    assert all(b == 0.0 for b in bounds[:nl])
    assert all(b is None for b in bounds[nl:])
    assert len(built.eq_forms) == 4  # two stationarity rows per search


def test_potential_on_untouched_state_is_an_error():
    with pytest.raises(ValueError):
        verify_tuple(GD, FC, EXACT, potential(("fgap", "z", 1.0)),
                     potential(("fgap", "z", 1.0)), 0.0)
    resting_y = MethodSpec(beta=1.0, gamma_p=1.0)
    with pytest.raises(ValueError):
        verify_tuple(resting_y, FC, EXACT, potential(("sqdist", "y", 1.0)),
                     potential(("sqdist", "y", 1.0)), 0.0)


def test_free_slots_are_rejected():
    with pytest.raises(ValueError):
        verify_tuple(GD, FC, EXACT, potential(("fgap", "x", "d0")),
                     gm_pot(1.0, 1.0), 0.0)


# ---------------------------------------------------------------------------
# the verified set is a convex cone
# ---------------------------------------------------------------------------


def test_cone_scaling():
    r = verify_tuple(GD, FC, BV2, scale_pot(dist_pot(4.0), 2.5),
                     scale_pot(dist_pot(5.0), 2.5), 2.5 * _sgd_e(4))
    assert r.status == "verified"


def test_cone_sum():
    p1k, p1k1, e1 = dist_pot(2.0), dist_pot(3.0), _sgd_e(2)
    p2k, p2k1, e2 = dist_pot(4.0), dist_pot(5.0), _sgd_e(4)
    assert verify_tuple(GD, FC, BV2, p1k, p1k1, e1).status == "verified"
    assert verify_tuple(GD, FC, BV2, p2k, p2k1, e2).status == "verified"
    r = verify_tuple(GD, FC, BV2, add_pots(p1k, p2k), add_pots(p1k1, p2k1),
                     e1 + e2)
    assert r.status == "verified"


# ---------------------------------------------------------------------------
# chaining one-step bounds
# ---------------------------------------------------------------------------


def test_chain_bound_gd_four_steps():
    R = 1.0
    pots = [gm_pot((2 * k + 1) * L, k * (k + 2.0)) for k in range(5)]
    links = []
    for k in range(4):
        r = verify_tuple(GD, FC, EXACT, pots[k], pots[k + 1], 0.0)
        assert r.status == "verified", k
        links.append(ChainLink(pots[k], pots[k + 1], 0.0))
    chain = chain_bound(links, phi0_value=L ** 2 * R ** 2)
    assert chain.total == pytest.approx(L ** 2 * R ** 2)
    assert chain.variance_weight == 0.0
    # terminal readings: phi_4 dominates both d_4 (f - f*) and b_4 ||f'||^2
    d4, b4 = 9.0 * L, 24.0
    assert chain.total / d4 == pytest.approx(L * R ** 2 / 9.0)
    assert chain.total / b4 == pytest.approx(L ** 2 * R ** 2 / 24.0)


def test_chain_bound_no_links_is_phi0():
    assert chain_bound([], 7.25).total == 7.25


def test_chain_bound_sgd_variance_sum():
    N, R, sig2 = 6, 1.3, 0.7
    links = []
    for k in range(N):
        r = verify_tuple(GD, FC, BV2, dist_pot(float(k)), dist_pot(k + 1.0),
                         _sgd_e(k))
        assert r.status == "verified", k
        links.append(ChainLink(dist_pot(float(k)), dist_pot(k + 1.0), _sgd_e(k)))
    chain = chain_bound(links, phi0_value=L / 2 * R ** 2, sigma2=sig2)
    assert chain.variance_weight == pytest.approx(N * (N + 3) / (4 * L), rel=1e-12)
    assert chain.total == pytest.approx(L / 2 * R ** 2 + N * (N + 3) / (4 * L) * sig2)


def test_chain_mismatch_raises():
    l1 = ChainLink(dist_pot(0.0), dist_pot(1.0), 0.5)
    l2 = ChainLink(dist_pot(2.0), dist_pot(3.0), 0.5)
    with pytest.raises(ValueError):
        chain_bound([l1, l2], 1.0)
