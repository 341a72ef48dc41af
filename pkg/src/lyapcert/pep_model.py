"""One-step Gram-matrix modeling of stochastic first-order methods.

A worst-case analysis of a single algorithm step only ever touches a
finite list of vectors (iterates, gradients, oracle outputs) and function
values. We track the vectors as columns of an implicit matrix P and the
values as entries of a vector F; everything measurable then lives in the
Gram matrix G = P^T P, so potentials and inequalities become QuadLinForm
objects: a symmetric matrix tested against G, a linear functional of F, a
constant, and a coefficient on the noise budget sigma^2.

Conventions: the minimizer sits at the origin with zero gradient and
f(x*) = 0, so the star point never occupies a basis slot. Points are
sparse linear combinations (Affine) of basis columns; structural vector
equalities (unbiasedness, block decompositions) are enforced by aliasing,
which is exact, rather than by extra constraint rows.
"""

import json
from collections import namedtuple
from dataclasses import dataclass, asdict

import numpy as np


class Affine:
    """Sparse linear combination of basis slots: {slot index: coefficient}."""

    __slots__ = ("terms",)

    def __init__(self, terms=None):
        self.terms = {}
        if terms:
            for k, v in dict(terms).items():
                if v:
                    self.terms[int(k)] = float(v)

    def __add__(self, other):
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, 0.0) + v
        return Affine(out)

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return Affine({k: -v for k, v in self.terms.items()})

    def __mul__(self, c):
        return Affine({k: c * v for k, v in self.terms.items()})

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / c)

    def __eq__(self, other):
        return isinstance(other, Affine) and self.terms == other.terms

    __hash__ = None

    def is_zero(self):
        return not self.terms

    def __repr__(self):
        return f"Affine({self.terms!r})"


ZERO = Affine()


class GramBasis:
    """Labels for the columns of P and the entries of F.

    Label grammar used by the step builders (stable, for debugging and
    JSON dumps; nothing parses labels back):
        iterates        "x_k", "y_k+1", "z_k"
        oracle outputs  "G(y_k+1;0)", "G(y_k+1;1)", ...
        gradients       "g(y_k+1)"    (deterministic / searched points)
        block pieces    "U0(g(x_k))"
        values          "f(x_k)"
    """

    def __init__(self):
        self.p_labels = []
        self.f_labels = []

    @property
    def p_dim(self):
        return len(self.p_labels)

    @property
    def f_dim(self):
        return len(self.f_labels)

    def column(self, label):
        if label in self.p_labels:
            raise ValueError(f"duplicate column label {label!r}")
        self.p_labels.append(label)
        return Affine({len(self.p_labels) - 1: 1.0})

    def value(self, label):
        if label in self.f_labels:
            raise ValueError(f"duplicate value label {label!r}")
        self.f_labels.append(label)
        return Affine({len(self.f_labels) - 1: 1.0})

    def pvec(self, aff):
        out = np.zeros(self.p_dim)
        for k, v in aff.terms.items():
            out[k] = v
        return out

    def fvec(self, aff):
        out = np.zeros(self.f_dim)
        for k, v in aff.terms.items():
            out[k] = v
        return out


class QuadLinForm:
    """Scalar Tr(G @ quad) + F @ lin + const + sig2 * sigma^2.

    quad is symmetric over a prefix of the basis columns and lin over a
    prefix of the values; forms built at different basis sizes pad with
    zeros when combined, which is exact because later columns never
    appear in earlier forms.
    """

    __slots__ = ("quad", "lin", "const", "sig2")

    def __init__(self, quad=None, lin=None, const=0.0, sig2=0.0):
        self.quad = np.zeros((0, 0)) if quad is None else np.asarray(quad, dtype=float)
        self.lin = np.zeros(0) if lin is None else np.asarray(lin, dtype=float)
        self.const = float(const)
        self.sig2 = float(sig2)

    def padded(self, p, f):
        q = np.zeros((p, p))
        n = self.quad.shape[0]
        q[:n, :n] = self.quad
        l = np.zeros(f)
        l[: self.lin.size] = self.lin
        return q, l

    def __add__(self, other):
        p = max(self.quad.shape[0], other.quad.shape[0])
        f = max(self.lin.size, other.lin.size)
        q1, l1 = self.padded(p, f)
        q2, l2 = other.padded(p, f)
        return QuadLinForm(q1 + q2, l1 + l2, self.const + other.const,
                           self.sig2 + other.sig2)

    def __sub__(self, other):
        return self + (-1.0) * other

    def __mul__(self, c):
        return QuadLinForm(c * self.quad, c * self.lin, c * self.const, c * self.sig2)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def evaluate(self, P, F=(), sigma2=0.0):
        """Value on concrete data: P has one designated vector per column."""
        P = np.asarray(P, dtype=float)
        n = self.quad.shape[0]
        if P.shape[1] < n:
            raise ValueError("fewer concrete columns than the form references")
        val = float(np.sum((P[:, :n] @ self.quad) * P[:, :n]))
        F = np.asarray(F, dtype=float)
        val += float(self.lin @ F[: self.lin.size])
        return val + self.const + self.sig2 * sigma2


def inner_form(basis, u, v):
    """<u, v> as a Gram-matrix form."""
    a, b = basis.pvec(u), basis.pvec(v)
    return QuadLinForm(quad=0.5 * (np.outer(a, b) + np.outer(b, a)))


def sqnorm_form(basis, u):
    a = basis.pvec(u)
    return QuadLinForm(quad=np.outer(a, a))


def value_form(basis, fa):
    return QuadLinForm(lin=basis.fvec(fa))


def sigma2_form(c):
    return QuadLinForm(sig2=c)


@dataclass(frozen=True)
class FunctionClass:
    """Smooth (strongly) convex functions: mu-strong convexity, L-smooth.

    L may be inf (no smoothness, plain strongly-convex/convex class).
    """

    mu: float = 0.0
    L: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.mu < self.L):
            raise ValueError(f"need 0 <= mu < L, got mu={self.mu}, L={self.L}")
        if self.L <= 0:
            raise ValueError("L must be positive")


def interpolation_constraints(basis, fclass, points, variant="interpolation"):
    """Constraints a discrete data set must satisfy to extend to a class member.

    points: triples (x, g, f) of Affines; use (ZERO, ZERO, ZERO) for the
    minimizer. Returns one QuadLinForm (meaning expr >= 0) per ordered
    pair. variant: "interpolation" (exact), "convexity" (first-order
    lower bound only), "descent_lemma" (smoothness upper bound only).
    """
    if len(points) < 2:
        raise ValueError("need at least two points to interpolate between")
    mu, L = fclass.mu, fclass.L
    out = []
    for i, (xi, gi, fi) in enumerate(points):
        for j, (xj, gj, fj) in enumerate(points):
            if i == j:
                continue
            dx, dg = xi - xj, gi - gj
            if variant == "descent_lemma":
                if np.isinf(L):
                    raise ValueError("descent lemma needs finite L")
                expr = (value_form(basis, fj) - value_form(basis, fi)
                        + inner_form(basis, gj, dx)
                        + (L / 2.0) * sqnorm_form(basis, dx))
                out.append(expr)
                continue
            expr = (value_form(basis, fi) - value_form(basis, fj)
                    - inner_form(basis, gj, dx))
            if variant == "interpolation":
                if np.isinf(L):
                    if mu:
                        expr = expr - (mu / 2.0) * sqnorm_form(basis, dx)
                else:
                    coef = 1.0 / (2.0 * (1.0 - mu / L))
                    corr = (1.0 / L) * sqnorm_form(basis, dg)
                    if mu:
                        corr = (corr + mu * sqnorm_form(basis, dx)
                                - (2.0 * mu / L) * inner_form(basis, dg, dx))
                    expr = expr - coef * corr
            elif variant != "convexity":
                raise ValueError(f"unknown variant {variant!r}")
            out.append(expr)
    return out


@dataclass(frozen=True)
class NoiseModel:
    """Oracle model. kinds:

    exact            G(x) = f'(x), single scenario
    unified          E_i ||G(x;i)||^2 <= sigma_star2*s^2 + 2*rho1*L*(f(x)-f*)
                     + rho2*||f'(x)||^2, oracle unbiased
    variance_at_opt  per-scenario f_i, E_i ||f_i'(x*)||^2 <= sigma_star2*s^2
    weak_growth      E_i ||G(x;i)||^2 <= 2*rho*L*(f(x)-f*)
    block_coordinate G(x;i) = U_i f'(x) over n orthogonal blocks
    """

    kind: str = "exact"
    sigma_star2: float = 0.0
    rho1: float = 0.0
    rho2: float = 0.0
    rho: float = 1.0
    n: int = 1

    def __post_init__(self):
        kinds = ("exact", "unified", "variance_at_opt", "weak_growth",
                 "block_coordinate")
        if self.kind not in kinds:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("need at least one scenario")
        if self.kind == "exact" and self.n != 1:
            raise ValueError("exact oracle has a single scenario")
        if self.kind == "weak_growth" and self.rho < 1.0:
            raise ValueError("weak growth needs rho >= 1")
        if min(self.sigma_star2, self.rho1, self.rho2) < 0.0:
            raise ValueError("variance parameters must be nonnegative")

    @property
    def n_scenarios(self):
        return self.n


NoiseStep = namedtuple("NoiseStep", "mean equalities inequalities")


def scenario_columns(basis, n, tag):
    """n fresh oracle columns G(tag;i)."""
    return [basis.column(f"G({tag};{i})") for i in range(n)]


def constrained_family(basis, n, tag, total):
    """n columns that sum to `total` exactly (last one is the remainder)."""
    parts = [basis.column(f"U{i}({tag})") for i in range(n - 1)]
    rest = total
    for p in parts:
        rest = rest - p
    parts.append(rest)
    return parts


def noise_constraints(basis, model, oracle, fval=None, L=None):
    """Gram constraints tying the oracle columns to the noise model.

    oracle: per-scenario Affines at the query point (for variance_at_opt
    these are the scenario gradients at the minimizer). fval: value slot
    of f at the query point when the bound references it. Returns
    NoiseStep(mean, equalities, inequalities); inequalities mean
    expr >= 0 and carry the sigma^2 budget in their sig2 channel.
    """
    n = len(oracle)
    if n != model.n_scenarios:
        raise ValueError("oracle column count does not match the model")
    mean = ZERO
    for g in oracle:
        mean = mean + g
    mean = mean / n
    eqs, ineqs = [], []
    if model.kind == "exact":
        pass
    elif model.kind == "unified":
        if fval is None or L is None:
            raise ValueError("unified model needs f(x) slot and L")
        expr = sigma2_form(model.sigma_star2)
        if model.rho1:
            expr = expr + (2.0 * model.rho1 * L) * value_form(basis, fval)
        if model.rho2:
            expr = expr + model.rho2 * sqnorm_form(basis, mean)
        for g in oracle:
            expr = expr - (1.0 / n) * sqnorm_form(basis, g)
        ineqs.append(expr)
    elif model.kind == "variance_at_opt":
        expr = sigma2_form(model.sigma_star2)
        for g in oracle:
            expr = expr - (1.0 / n) * sqnorm_form(basis, g)
        ineqs.append(expr)
    elif model.kind == "weak_growth":
        if fval is None or L is None:
            raise ValueError("weak growth needs f(x) slot and L")
        expr = (2.0 * model.rho * L) * value_form(basis, fval)
        for g in oracle:
            expr = expr - (1.0 / n) * sqnorm_form(basis, g)
        ineqs.append(expr)
    elif model.kind == "block_coordinate":
        for i in range(n):
            for j in range(i + 1, n):
                eqs.append(inner_form(basis, oracle[i], oracle[j]))
    return NoiseStep(mean, eqs, ineqs)


@dataclass(frozen=True)
class MethodSpec:
    """Per-iteration coefficients of the three-sequence template

        y+ = y + alpha (x - y) + alpha_p (z - y)
        x+(i) = y+ + beta (x - y+) + beta_p (z - y+) - delta G(y+; i)
        z+(i) = y+ + gamma (x - y+) + gamma_p (z - y+) - eps G(y+; i)

    search_y replaces the y-update by an exact minimization over
    x + span{z - x}; search_x replaces the x-update by one over
    y+ + span{f'(y+)}. A searched sequence cannot also carry fixed
    coefficients. The oracle is always queried at y+ (oracle_at is kept
    for schema stability and only accepts that value).
    """

    alpha: float = 0.0
    alpha_p: float = 0.0
    beta: float = 0.0
    beta_p: float = 0.0
    delta: float = 0.0
    gamma: float = 0.0
    gamma_p: float = 0.0
    eps: float = 0.0
    search_y: bool = False
    search_x: bool = False
    oracle_at: str = "y_next"

    def __post_init__(self):
        if self.search_y and (self.alpha or self.alpha_p):
            raise ValueError("y-update: line search and fixed coefficients conflict")
        if self.search_x and (self.beta or self.beta_p or self.delta):
            raise ValueError("x-update: line search and fixed coefficients conflict")
        if self.oracle_at != "y_next":
            raise ValueError("oracle is queried at the new y sequence")
        if self.delta < 0.0 or self.eps < 0.0:
            raise ValueError("negative step size")


MethodState = namedtuple("MethodState", "y x z")
StepResult = namedtuple(
    "StepResult", "y1 x1 z1 oracle grad_y1 f_y1 grad_x1 f_x1 equalities")


def method_step(basis, spec, state, n_scenarios=1, tag="k+1", oracle=None):
    """Propagate one step; returns per-scenario selectors and side conditions.

    x1/z1 are lists over scenarios. oracle holds the G(y+; i) columns
    (empty when the step never reads the oracle), grad_y1 their mean.
    Callers that tie the oracle to existing columns (block pieces,
    per-component gradients) can pass the list in; value slots are then
    theirs to manage and f_y1 comes back None. Searched sequences
    contribute stationarity equalities (QuadLinForm, meaning expr = 0)
    and their own gradient/value slots.
    """
    y, x, z = state
    eqs = []
    if spec.search_y:
        if n_scenarios != 1:
            raise ValueError("line search assumes an exact oracle")
        if oracle is not None:
            raise ValueError("a searched y-update owns its oracle column")
        y1 = basis.column(f"y_{tag}")
        gy = basis.column(f"g(y_{tag})")
        fy = basis.value(f"f(y_{tag})")
        eqs.append(inner_form(basis, gy, y1 - x))
        eqs.append(inner_form(basis, gy, z - x))
        oracle = [gy]
    else:
        y1 = y + spec.alpha * (x - y) + spec.alpha_p * (z - y)
        needs_oracle = bool(spec.delta or spec.eps or spec.search_x)
        if oracle is not None:
            if len(oracle) != n_scenarios:
                raise ValueError("oracle column count does not match scenarios")
            fy = None
        elif needs_oracle:
            if n_scenarios == 1:
                oracle = [basis.column(f"g(y_{tag})")]
            else:
                oracle = scenario_columns(basis, n_scenarios, f"y_{tag}")
            fy = basis.value(f"f(y_{tag})")
        else:
            oracle, fy = [], None
        gy = None
    if oracle:
        gy = ZERO
        for g in oracle:
            gy = gy + g
        gy = gy / len(oracle)

    if spec.search_x:
        if n_scenarios != 1:
            raise ValueError("line search assumes an exact oracle")
        x1c = basis.column(f"x_{tag}")
        gx = basis.column(f"g(x_{tag})")
        fx = basis.value(f"f(x_{tag})")
        eqs.append(inner_form(basis, gx, y1 - x1c))
        eqs.append(inner_form(basis, gx, gy))
        x1 = [x1c]
    else:
        gx = fx = None
        base = y1 + spec.beta * (x - y1) + spec.beta_p * (z - y1)
        if spec.delta:
            x1 = [base - spec.delta * g for g in oracle]
        else:
            x1 = [base] * max(1, n_scenarios)

    zbase = y1 + spec.gamma * (x - y1) + spec.gamma_p * (z - y1)
    if spec.eps:
        z1 = [zbase - spec.eps * g for g in oracle]
    else:
        z1 = [zbase] * max(1, n_scenarios)

    return StepResult(y1, x1, z1, oracle, gy, fy, gx, fx, eqs)


# ---------------------------------------------------------------------------
# JSON round-trips for the two schema types
# ---------------------------------------------------------------------------


def method_spec_to_json(spec, indent=None):
    return json.dumps(asdict(spec), indent=indent)


def method_spec_from_json(text):
    return MethodSpec(**json.loads(text))


def noise_model_to_json(model, indent=None):
    return json.dumps(asdict(model), indent=indent)


def noise_model_from_json(text):
    return NoiseModel(**json.loads(text))
