import numpy as np
import pytest

from lyapcert.pep_model import (
    ZERO, Affine, FunctionClass, GramBasis, MethodSpec, MethodState,
    NoiseModel, constrained_family, inner_form, interpolation_constraints,
    method_spec_from_json, method_spec_to_json, method_step,
    noise_constraints, noise_model_from_json, noise_model_to_json,
    scenario_columns, sqnorm_form, value_form,
)


def _concrete(basis, rng, d):
    """Random vector per column and random value per slot."""
    P = rng.standard_normal((d, basis.p_dim))
    F = rng.standard_normal(basis.f_dim)
    return P, F


def _vec(basis, P, aff):
    return P @ basis.pvec(aff)


def test_affine_algebra():
    a = Affine({0: 1.0})
    b = Affine({1: 2.0})
    c = a + 0.5 * b - a
    assert c == Affine({1: 1.0})
    assert (a - a).is_zero()
    assert (2.0 * a / 2.0) == a


def test_basis_rejects_duplicate_labels():
    basis = GramBasis()
    basis.column("x_k")
    with pytest.raises(ValueError):
        basis.column("x_k")
    basis.value("f(x_k)")
    with pytest.raises(ValueError):
        basis.value("f(x_k)")


def test_representation_faithfulness():
    # Trace(G quad) + F lin must equal the scalar computed straight from
    # the concrete vectors, for randomly assembled forms.
    rng = np.random.default_rng(3)
    for _ in range(200):
        basis = GramBasis()
        cols = [basis.column(f"c{i}") for i in range(rng.integers(2, 6))]
        vals = [basis.value(f"v{i}") for i in range(rng.integers(1, 4))]
        d = int(rng.integers(1, 9))

        def rand_aff(slots):
            out = ZERO
            for s in slots:
                out = out + float(rng.standard_normal()) * s
            return out

        u, v = rand_aff(cols), rand_aff(cols)
        fa = rand_aff(vals)
        form = (inner_form(basis, u, v) + 0.5 * sqnorm_form(basis, u)
                - 2.0 * value_form(basis, fa))
        P, F = _concrete(basis, rng, d)
        uu, vv = _vec(basis, P, u), _vec(basis, P, v)
        direct = float(uu @ vv) + 0.5 * float(uu @ uu) - 2.0 * float(F @ basis.fvec(fa))
        got = form.evaluate(P, F)
        assert abs(got - direct) <= 1e-12 * (1.0 + abs(direct))


def _interp_direct(xi, gi, fi, xj, gj, fj, mu, L):
    """The pairwise condition computed with plain vector arithmetic."""
    dx, dg = xi - xj, gi - gj
    val = fi - fj - gj @ dx
    if np.isinf(L):
        return val - 0.5 * mu * (dx @ dx)
    coef = 1.0 / (2.0 * (1.0 - mu / L))
    corr = (dg @ dg) / L + mu * (dx @ dx) - (2.0 * mu / L) * (dg @ dx)
    return val - coef * corr


def _quadratic_scene(rng, d, npts, mu, L):
    """Sample a quadratic in the class and oracle data at random points."""
    lams = rng.uniform(mu, L, d)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    H = Q @ np.diag(lams) @ Q.T
    xs = [rng.standard_normal(d) for _ in range(npts)]
    gs = [H @ w for w in xs]
    fs = [0.5 * w @ H @ w for w in xs]
    return xs, gs, fs


def test_interpolation_count_and_faithfulness():
    rng = np.random.default_rng(11)
    basis = GramBasis()
    pts = []
    for name in ("x_k", "x_k+1"):
        x = basis.column(name)
        g = basis.column(f"g({name})")
        f = basis.value(f"f({name})")
        pts.append((x, g, f))
    pts.append((ZERO, ZERO, ZERO))
    fc = FunctionClass(mu=0.0, L=1.0)
    cons = interpolation_constraints(basis, fc, pts)
    assert len(cons) == 6
    # faithfulness on arbitrary (not class-consistent) data
    P, F = _concrete(basis, rng, 5)
    conc = [(_vec(basis, P, x), _vec(basis, P, g),
             F @ basis.fvec(f) if not f.is_zero() else 0.0) for x, g, f in pts]
    k = 0
    for i in range(3):
        for j in range(3):
            if i == j:
                continue
            xi, gi, fi = conc[i]
            xj, gj, fj = conc[j]
            direct = _interp_direct(xi, gi, fi, xj, gj, fj, 0.0, 1.0)
            assert abs(cons[k].evaluate(P, F) - direct) <= 1e-12 * (1 + abs(direct))
            k += 1


@pytest.mark.parametrize("mu,L", [(0.0, 1.0), (0.1, 1.0), (0.3, 2.5)])
def test_interpolation_sound_on_class_members(mu, L):
    # every emitted constraint must hold on data sampled from an actual
    # function in the class
    rng = np.random.default_rng(29)
    for _ in range(100):
        d = int(rng.integers(1, 6))
        xs, gs, fs = _quadratic_scene(rng, d, 3, mu, L)
        basis = GramBasis()
        pts = []
        for i in range(3):
            pts.append((basis.column(f"x{i}"), basis.column(f"g{i}"),
                        basis.value(f"f{i}")))
        pts.append((ZERO, ZERO, ZERO))
        P = np.zeros((d, basis.p_dim))
        F = np.zeros(basis.f_dim)
        for i, (x, g, f) in enumerate(pts[:3]):
            P[:, next(iter(x.terms))] = xs[i]
            P[:, next(iter(g.terms))] = gs[i]
            F[next(iter(f.terms))] = fs[i]
        for con in interpolation_constraints(basis, FunctionClass(mu, L), pts):
            assert con.evaluate(P, F) >= -1e-9


def test_plain_convexity_and_descent_lemma():
    rng = np.random.default_rng(5)
    basis = GramBasis()
    pts = [(basis.column("a"), basis.column("ga"), basis.value("fa")),
           (basis.column("b"), basis.column("gb"), basis.value("fb"))]
    # L = inf drops the quadratic correction entirely when mu = 0
    cons = interpolation_constraints(basis, FunctionClass(0.0, np.inf), pts)
    manual = (value_form(basis, pts[0][2]) - value_form(basis, pts[1][2])
              - inner_form(basis, pts[1][1], pts[0][0] - pts[1][0]))
    P, F = _concrete(basis, rng, 4)
    assert abs(cons[0].evaluate(P, F) - manual.evaluate(P, F)) < 1e-14
    # descent lemma holds on class members
    for _ in range(50):
        d = int(rng.integers(1, 5))
        xs, gs, fs = _quadratic_scene(rng, d, 2, 0.0, 2.0)
        b2 = GramBasis()
        p2 = [(b2.column("a"), b2.column("ga"), b2.value("fa")),
              (b2.column("b"), b2.column("gb"), b2.value("fb"))]
        P2 = np.stack([xs[0], gs[0], xs[1], gs[1]], axis=1)
        F2 = np.array(fs)
        for con in interpolation_constraints(b2, FunctionClass(0.0, 2.0), p2,
                                             variant="descent_lemma"):
            assert con.evaluate(P2, F2) >= -1e-9


def test_function_class_validation():
    with pytest.raises(ValueError):
        FunctionClass(mu=1.0, L=1.0)
    with pytest.raises(ValueError):
        FunctionClass(mu=-0.1, L=1.0)
    with pytest.raises(ValueError):
        basis = GramBasis()
        x = basis.column("x")
        interpolation_constraints(basis, FunctionClass(0.0, 1.0),
                                  [(x, x, ZERO)])
    basis = GramBasis()
    pts = [(basis.column("a"), basis.column("ga"), basis.value("fa")),
           (ZERO, ZERO, ZERO)]
    with pytest.raises(ValueError):
        interpolation_constraints(basis, FunctionClass(0.0, 1.0), pts,
                                  variant="nonsense")


def test_unified_noise_matches_hand_data():
    # finite-support oracle G = f'(x) +/- xi; the bounded-variance wiring
    # (rho1=0, rho2=1) must be tight at sigma^2 = ||xi||^2
    rng = np.random.default_rng(7)
    basis = GramBasis()
    fx = basis.value("f(x)")
    oracle = scenario_columns(basis, 2, "x")
    model = NoiseModel(kind="unified", sigma_star2=1.0, rho1=0.0, rho2=1.0, n=2)
    step = noise_constraints(basis, model, oracle, fval=fx, L=1.0)
    assert step.mean == (oracle[0] + oracle[1]) / 2.0
    assert not step.equalities and len(step.inequalities) == 1
    for _ in range(20):
        d = int(rng.integers(1, 6))
        g = rng.standard_normal(d)
        xi = rng.standard_normal(d)
        P = np.zeros((d, basis.p_dim))
        P[:, next(iter(oracle[0].terms))] = g + xi
        P[:, next(iter(oracle[1].terms))] = g - xi
        F = np.zeros(1)
        got = step.inequalities[0].evaluate(P, F, sigma2=float(xi @ xi))
        assert abs(got) < 1e-10  # exactly tight
        assert step.inequalities[0].evaluate(P, F, sigma2=float(xi @ xi) + 1.0) > 0.5


def test_unified_with_growth_terms():
    rng = np.random.default_rng(13)
    basis = GramBasis()
    fx = basis.value("f(x)")
    oracle = scenario_columns(basis, 3, "x")
    model = NoiseModel(kind="unified", sigma_star2=2.0, rho1=0.5, rho2=0.25, n=3)
    step = noise_constraints(basis, model, oracle, fval=fx, L=2.0)
    P, F = _concrete(basis, rng, 4)
    sigma2 = 1.7
    gs = [P[:, next(iter(g.terms))] for g in oracle]
    mean = sum(gs) / 3.0
    direct = (2.0 * sigma2 + 2.0 * 0.5 * 2.0 * F[0] + 0.25 * mean @ mean
              - sum(g @ g for g in gs) / 3.0)
    assert abs(step.inequalities[0].evaluate(P, F, sigma2=sigma2) - direct) < 1e-12


def test_exact_noise_is_empty():
    basis = GramBasis()
    g = basis.column("g")
    step = noise_constraints(basis, NoiseModel(), [g])
    assert step.mean == g
    assert not step.equalities and not step.inequalities


def test_weak_growth_on_quadratics():
    # f_i all equal to f: E||f'||^2 <= 2 L (f - f*) for curvature <= L
    rng = np.random.default_rng(17)
    basis = GramBasis()
    fx = basis.value("f(x)")
    g1 = basis.column("G(x;0)")
    g2 = basis.column("G(x;1)")
    model = NoiseModel(kind="weak_growth", rho=1.0, n=2)
    step = noise_constraints(basis, model, [g1, g2], fval=fx, L=1.0)
    for _ in range(100):
        c = rng.uniform(0.05, 1.0)  # curvature within the class
        w = rng.standard_normal()
        P = np.array([[c * w, c * w]])
        F = np.array([0.5 * c * w * w])
        assert step.inequalities[0].evaluate(P, F) >= -1e-9


def test_variance_at_opt():
    basis = GramBasis()
    gs = constrained_family(basis, 3, "g*", ZERO)
    assert (gs[0] + gs[1] + gs[2]).is_zero()
    model = NoiseModel(kind="variance_at_opt", sigma_star2=1.0, n=3)
    step = noise_constraints(basis, model, gs)
    rng = np.random.default_rng(19)
    a, b = rng.standard_normal(4), rng.standard_normal(4)
    P = np.stack([a, b], axis=1)
    vecs = [a, b, -a - b]
    want = sum(v @ v for v in vecs) / 3.0
    assert abs(step.inequalities[0].evaluate(P, [], sigma2=want) - 0.0) < 1e-12


def test_block_coordinate_forces_pythagoras():
    # aliasing + pairwise orthogonality make sum ||U_i g||^2 = ||g||^2 an
    # algebraic identity: the combination below must vanish as a form
    basis = GramBasis()
    g = basis.column("g(x)")
    parts = constrained_family(basis, 3, "g(x)", g)
    step = noise_constraints(basis, NoiseModel(kind="block_coordinate", n=3),
                             parts)
    assert len(step.equalities) == 3
    total = -1.0 * sqnorm_form(basis, g)
    for p in parts:
        total = total + sqnorm_form(basis, p)
    for eq in step.equalities:
        total = total + 2.0 * eq
    assert np.abs(total.quad).max() < 1e-14
    assert total.lin.size == 0 and total.const == 0.0


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel(kind="banana")
    with pytest.raises(ValueError):
        NoiseModel(kind="exact", n=2)
    with pytest.raises(ValueError):
        NoiseModel(kind="weak_growth", rho=0.5)
    with pytest.raises(ValueError):
        NoiseModel(kind="unified", sigma_star2=-1.0)
    basis = GramBasis()
    cols = scenario_columns(basis, 2, "x")
    with pytest.raises(ValueError):
        noise_constraints(basis, NoiseModel(kind="unified", n=3), cols,
                          fval=basis.value("f"), L=1.0)


def test_method_step_gradient_descent():
    basis = GramBasis()
    xk = basis.column("x_k")
    spec = MethodSpec(delta=0.5)  # delta = 1/L with L = 2
    res = method_step(basis, spec, MethodState(xk, xk, xk))
    assert res.y1 == xk
    assert len(res.oracle) == 1
    assert res.x1[0] == xk - 0.5 * res.oracle[0]
    assert res.z1[0] == xk
    assert not res.equalities


def test_method_step_identity():
    basis = GramBasis()
    y = basis.column("y_k")
    x = basis.column("x_k")
    z = basis.column("z_k")
    before = basis.p_dim
    res = method_step(basis, MethodSpec(), MethodState(y, x, z))
    assert res.y1 == y and res.x1[0] == res.y1 and res.z1[0] == res.y1
    assert basis.p_dim == before  # lazy: no oracle columns materialized
    assert res.oracle == [] and res.grad_y1 is None


def test_method_step_scenarios():
    basis = GramBasis()
    xk = basis.column("x_k")
    spec = MethodSpec(delta=0.1)
    res = method_step(basis, spec, MethodState(xk, xk, xk), n_scenarios=3)
    assert len(res.oracle) == 3 and len(res.x1) == 3
    mean = (res.oracle[0] + res.oracle[1] + res.oracle[2]) / 3.0
    assert res.grad_y1 == mean
    for i in range(3):
        assert res.x1[i] == xk - 0.1 * res.oracle[i]


def test_method_step_double_line_search():
    # both searches: four stationarity equalities whose traces against a
    # Gram matrix of concrete vectors equal the direct inner products
    rng = np.random.default_rng(23)
    basis = GramBasis()
    z = basis.column("z_k")
    x = basis.column("x_k")
    spec = MethodSpec(search_y=True, search_x=True, gamma_p=0.4, eps=0.7)
    res = method_step(basis, spec, MethodState(x, x, z))
    assert len(res.equalities) == 4
    assert res.z1[0] == res.y1 + 0.4 * (z - res.y1) - 0.7 * res.grad_y1
    P = rng.standard_normal((5, basis.p_dim))
    vec = lambda a: P @ basis.pvec(a)
    gy, gx = vec(res.grad_y1), vec(res.grad_x1)
    direct = [gy @ (vec(res.y1) - vec(x)),
              gy @ (vec(z) - vec(x)),
              gx @ (vec(res.y1) - vec(res.x1[0])),
              gx @ gy]
    for eq, want in zip(res.equalities, direct):
        assert abs(eq.evaluate(P, np.zeros(basis.f_dim)) - want) < 1e-12


def test_method_spec_conflicts():
    with pytest.raises(ValueError):
        MethodSpec(search_y=True, alpha=0.5)
    with pytest.raises(ValueError):
        MethodSpec(search_x=True, delta=0.1)
    with pytest.raises(ValueError):
        MethodSpec(oracle_at="x_k")
    basis = GramBasis()
    x = basis.column("x")
    with pytest.raises(ValueError):
        method_step(basis, MethodSpec(search_y=True), MethodState(x, x, x),
                    n_scenarios=2)


def test_json_round_trips():
    spec = MethodSpec(alpha=0.25, delta=1.0, search_x=False)
    assert method_spec_from_json(method_spec_to_json(spec)) == spec
    model = NoiseModel(kind="unified", sigma_star2=1.0, rho2=1.0, n=4)
    assert noise_model_from_json(noise_model_to_json(model)) == model
