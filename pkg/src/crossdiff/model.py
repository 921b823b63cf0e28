"""Cross-diffusion models as data.

A model is a polynomial map P (the diffusion potential, with Jacobian
A(u) = P_u(u)), a declared coercivity envelope lambda(u) = lambda0 +
lambda1*|u|^k, and optional reaction data.  This module evaluates those
objects on batches of states and certifies, by seeded sampling over a
declared box, the structural hypotheses the solver and diagnostics rely
on: ellipticity of A against lambda, boundedness of ||A||/lambda, growth
of lambda_u, growth of the zero-order reaction, and the spectral
test-function constants lambda_l.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import qmc

from .errors import InputError, ModelDefinitionError

logger = logging.getLogger(__name__)

__all__ = [
    "PolynomialMap",
    "MatrixPolynomial",
    "LambdaSpec",
    "ReactionSpec",
    "GeneralReaction",
    "ModelSpec",
    "Region",
    "StructuralReport",
    "eval_P",
    "eval_A",
    "eval_lambda",
    "eval_reaction",
    "reaction_zero_order",
    "verify_structure",
    "compute_lambda_l",
    "classic_skt",
    "with_sigma",
    "model_to_dict",
    "model_from_dict",
    "load_model",
    "save_model",
]


def _as_points(u, m):
    """Coerce u to a float array whose last axis has length m."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] != m:
        raise ModelDefinitionError(f"state has wrong component count (expected {m})")
    return u


class PolynomialMap:
    """Polynomial map R^m -> R^m with no constant terms, so P(0) = 0.

    terms[i] lists the monomials of output component i as (coef, exps)
    pairs; exps is a length-m tuple of nonnegative integer powers.
    Evaluation and differentiation are exact and vectorized over leading
    axes of the input.
    """

    def __init__(self, m, terms, max_degree=None):
        self.m = int(m)
        if self.m < 1:
            raise ModelDefinitionError("component count must be >= 1")
        if len(terms) != self.m:
            raise ModelDefinitionError(
                f"expected {self.m} component term lists, got {len(terms)}")
        self._coefs = []
        self._exps = []
        for i, comp in enumerate(terms):
            comp = list(comp)
            coefs = np.array([float(c) for c, _ in comp], dtype=float)
            if comp:
                exps = np.array([[int(e) for e in ex] for _, ex in comp], dtype=np.int64)
                if exps.shape != (len(comp), self.m):
                    raise ModelDefinitionError(
                        f"component {i}: exponent vectors must have length {self.m}")
            else:
                exps = np.zeros((0, self.m), dtype=np.int64)
            if np.any(exps < 0):
                raise ModelDefinitionError(f"component {i}: negative exponent")
            constant = (exps.sum(axis=1) == 0) & (coefs != 0.0)
            if constant.any():
                raise ModelDefinitionError(
                    f"component {i} has a constant term; the map must vanish at 0")
            if max_degree is not None and exps.size and exps.sum(axis=1).max() > max_degree:
                raise ModelDefinitionError(
                    f"component {i} exceeds declared max degree {max_degree}")
            self._coefs.append(coefs)
            self._exps.append(exps)
        degs = [int(e.sum(axis=1).max()) if e.size else 0 for e in self._exps]
        self.max_degree = max(degs) if degs else 0
        # precomputed term data for the analytic Jacobian
        self._jac = []
        for i in range(self.m):
            row = []
            for j in range(self.m):
                ej = self._exps[i][:, j]
                mask = ej > 0
                dc = self._coefs[i][mask] * ej[mask]
                de = self._exps[i][mask].copy()
                de[:, j] -= 1
                row.append((dc, de))
            self._jac.append(row)

    @staticmethod
    def _eval_terms(coefs, exps, u):
        if coefs.size == 0:
            return np.zeros(u.shape[:-1])
        pw = u[..., None, :] ** exps          # (..., T, m)
        return pw.prod(axis=-1) @ coefs

    def __call__(self, u):
        u = _as_points(u, self.m)
        out = np.empty(u.shape)
        for i in range(self.m):
            out[..., i] = self._eval_terms(self._coefs[i], self._exps[i], u)
        return out

    def jacobian(self, u):
        u = _as_points(u, self.m)
        out = np.empty(u.shape + (self.m,))
        for i in range(self.m):
            for j in range(self.m):
                dc, de = self._jac[i][j]
                out[..., i, j] = self._eval_terms(dc, de, u)
        return out

    def scaled(self, s, power_offset=0):
        """Return the map whose term coefficients are multiplied by
        s**(degree + power_offset); with power_offset=-1 this is
        u -> P(s*u)/s, whose Jacobian is A(s*u)."""
        s = float(s)
        terms = []
        for i in range(self.m):
            comp = []
            for c, ex in zip(self._coefs[i], self._exps[i]):
                d = int(ex.sum()) + power_offset
                comp.append((c * s ** d, tuple(int(e) for e in ex)))
            terms.append(comp)
        return PolynomialMap(self.m, terms)

    @classmethod
    def identity(cls, m):
        terms = []
        for i in range(m):
            ex = [0] * m
            ex[i] = 1
            terms.append([(1.0, tuple(ex))])
        return cls(m, terms)

    def to_dict(self):
        return [[[float(c)] + [int(e) for e in ex]
                 for c, ex in zip(self._coefs[i], self._exps[i])]
                for i in range(self.m)]

    @classmethod
    def from_dict(cls, m, data):
        terms = [[(row[0], tuple(row[1:])) for row in comp] for comp in data]
        return cls(m, terms)

    def __repr__(self):
        nt = sum(len(c) for c in self._coefs)
        return f"PolynomialMap(m={self.m}, terms={nt}, degree={self.max_degree})"


class MatrixPolynomial:
    """Matrix-valued map u -> M(u) with entries that are sums of
    coef * |u|^radial * prod_i u_i^{e_i}.

    The radial factor admits non-polynomial comparison data such as
    G(u) = |u| * Id.  terms is an iterable of (i, j, coef, radial, exps).
    """

    def __init__(self, m, shape, terms):
        self.m = int(m)
        self.shape = (int(shape[0]), int(shape[1]))
        self._terms = []
        for i, j, c, s, ex in terms:
            i, j = int(i), int(j)
            if not (0 <= i < self.shape[0] and 0 <= j < self.shape[1]):
                raise ModelDefinitionError("matrix term index out of range")
            if float(s) < 0:
                raise ModelDefinitionError("radial power must be nonnegative")
            ex = tuple(int(e) for e in ex)
            if len(ex) != self.m or any(e < 0 for e in ex):
                raise ModelDefinitionError("bad exponent vector in matrix term")
            if float(c) != 0.0:
                self._terms.append((i, j, float(c), float(s), ex))

    def __call__(self, u):
        u = _as_points(u, self.m)
        out = np.zeros(u.shape[:-1] + self.shape)
        if not self._terms:
            return out
        r = None
        for i, j, c, s, ex in self._terms:
            v = np.full(u.shape[:-1], c)
            for axis, e in enumerate(ex):
                if e:
                    v = v * u[..., axis] ** e
            if s:
                if r is None:
                    r = np.linalg.norm(u, axis=-1)
                v = v * r ** s
            out[..., i, j] += v
        return out

    def scaled(self, s, prefactor=1.0):
        """Return u -> prefactor * M(s*u): coefficients pick up
        prefactor * s**(radial + degree)."""
        s = float(s)
        terms = [(i, j, c * prefactor * s ** (rad + sum(ex)), rad, ex)
                 for i, j, c, rad, ex in self._terms]
        return MatrixPolynomial(self.m, self.shape, terms)

    @classmethod
    def constant(cls, m, M):
        M = np.asarray(M, dtype=float)
        zero = (0,) * m
        terms = [(i, j, M[i, j], 0.0, zero)
                 for i in range(M.shape[0]) for j in range(M.shape[1])]
        return cls(m, M.shape, terms)

    @classmethod
    def radial_identity(cls, m, coef=1.0, power=1.0):
        """G(u) = coef * |u|^power * Id."""
        zero = (0,) * m
        return cls(m, (m, m), [(i, i, coef, power, zero) for i in range(m)])

    def to_dict(self):
        return [[i, j, c, s, *ex] for i, j, c, s, ex in self._terms]

    @classmethod
    def from_dict(cls, m, shape, data):
        return cls(m, shape, [(r[0], r[1], r[2], r[3], tuple(r[4:])) for r in data])

    def __repr__(self):
        return f"MatrixPolynomial(m={self.m}, shape={self.shape}, terms={len(self._terms)})"


@dataclass(frozen=True)
class LambdaSpec:
    """Coercivity envelope lambda(u) = lambda0 + lambda1 * |u|^k."""

    lambda0: float
    lambda1: float = 0.0
    k: float = 0.0

    def __post_init__(self):
        if not (self.lambda0 > 0):
            raise ModelDefinitionError("lambda0 must be positive")
        if self.lambda1 < 0 or self.k < 0:
            raise ModelDefinitionError("lambda1 and k must be nonnegative")

    @property
    def lambda_S(self):
        return self.lambda0 + self.lambda1

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        r = np.linalg.norm(u, axis=-1)
        if self.lambda1 == 0.0:
            return np.full(r.shape, self.lambda0)
        return self.lambda0 + self.lambda1 * r ** self.k

    def grad_norm(self, u):
        """|lambda_u(u)| = lambda1 * k * |u|^(k-1) (radial gradient)."""
        u = np.asarray(u, dtype=float)
        r = np.linalg.norm(u, axis=-1)
        c = self.lambda1 * self.k
        if c == 0.0:
            return np.zeros(r.shape)
        e = self.k - 1.0
        if e == 0.0:
            return np.full(r.shape, c)
        if e > 0:
            return c * r ** e
        with np.errstate(divide="ignore"):
            out = c * r ** e
        return out

    def to_dict(self):
        return {"lambda0": self.lambda0, "lambda1": self.lambda1, "k": self.k}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["lambda0"]), float(d.get("lambda1", 0.0)), float(d.get("k", 0.0)))


def _flatten_gradient(g, m):
    """(..., m, 2) gradient -> (..., 2m) with component-major layout
    (du1/dx, du1/dy, du2/dx, ...)."""
    g = np.asarray(g, dtype=float)
    if g.shape[-2:] != (m, 2):
        raise ModelDefinitionError(f"gradient must have shape (..., {m}, 2)")
    return g.reshape(g.shape[:-2] + (2 * m,))


@dataclass(frozen=True)
class ReactionSpec:
    """Competitive reaction f(u, Du) = B(u) Du + K u - G(u) u with the
    coercivity declaration <G(w)u, u> >= c0 |w|^kappa |u|^2."""

    K: np.ndarray
    B: MatrixPolynomial | None
    G: MatrixPolynomial | None
    kappa: float
    c0: float

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ModelDefinitionError("K must be a square matrix")
        object.__setattr__(self, "K", K)
        if not (self.kappa > 0):
            raise ModelDefinitionError("kappa must be positive")
        if not (self.c0 > 0):
            raise ModelDefinitionError("c0 must be positive")

    @property
    def m(self):
        return self.K.shape[0]

    def zero_order(self, u):
        u = _as_points(u, self.m)
        out = u @ self.K.T
        if self.G is not None:
            out = out - np.einsum("...ij,...j->...i", self.G(u), u)
        return out

    def __call__(self, u, g):
        out = self.zero_order(u)
        if self.B is not None:
            gf = _flatten_gradient(g, self.m)
            out = out + np.einsum("...ij,...j->...i", self.B(np.asarray(u, float)), gf)
        return out


@dataclass(frozen=True)
class GeneralReaction:
    """General reaction f(u, Du) = B(u) Du + f0(u)."""

    m: int
    B: MatrixPolynomial | None = None
    f0: PolynomialMap | None = None

    def zero_order(self, u):
        u = _as_points(u, self.m)
        if self.f0 is None:
            return np.zeros(u.shape)
        return self.f0(u)

    def __call__(self, u, g):
        out = self.zero_order(u)
        if self.B is not None:
            gf = _flatten_gradient(g, self.m)
            out = out + np.einsum("...ij,...j->...i", self.B(np.asarray(u, float)), gf)
        return out


@dataclass(frozen=True)
class ModelSpec:
    """A full model: diffusion potential P, envelope lambda, reaction.

    C_f, when declared, bounds the zero-order reaction by
    |f(u)| <= C_f * lambda_S^{-1} * |u| * lambda(u); the verifier
    compares the sampled ratio against it.
    """

    P: PolynomialMap
    lam: LambdaSpec
    reaction: ReactionSpec | GeneralReaction | None = None
    C_f: float | None = None
    name: str = ""

    def __post_init__(self):
        m = self.P.m
        r = self.reaction
        if isinstance(r, ReactionSpec):
            if r.m != m:
                raise ModelDefinitionError("reaction dimension does not match P")
            if r.B is not None and (r.B.m != m or r.B.shape != (m, 2 * m)):
                raise ModelDefinitionError(f"B must map to a {m}x{2 * m} matrix")
            if r.G is not None and (r.G.m != m or r.G.shape != (m, m)):
                raise ModelDefinitionError(f"G must map to a {m}x{m} matrix")
            if self.lam.k > 0 and r.kappa > self.lam.k + 1e-12:
                raise ModelDefinitionError("kappa must not exceed the lambda exponent k")
        elif isinstance(r, GeneralReaction):
            if r.m != m:
                raise ModelDefinitionError("reaction dimension does not match P")
            if r.B is not None and (r.B.m != m or r.B.shape != (m, 2 * m)):
                raise ModelDefinitionError(f"B must map to a {m}x{2 * m} matrix")
            if r.f0 is not None and r.f0.m != m:
                raise ModelDefinitionError("zero-order map dimension does not match P")
        elif r is not None:
            raise ModelDefinitionError("unsupported reaction object")
        if self.C_f is not None and not (self.C_f > 0):
            raise ModelDefinitionError("declared C_f must be positive")

    @property
    def m(self):
        return self.P.m


def eval_P(spec, u):
    """Evaluate the diffusion potential P at one state or a batch."""
    return spec.P(u)


def eval_A(spec, u):
    """Evaluate A(u) = P_u(u), the Jacobian of P, analytically."""
    return spec.P.jacobian(u)


def eval_lambda(spec, u):
    """Evaluate the declared envelope lambda(u) = lambda0 + lambda1 |u|^k."""
    return spec.lam(u)


def eval_reaction(spec, u, g):
    """Evaluate the reaction f(u, Du); g has shape (..., m, 2)."""
    if spec.reaction is None:
        return np.zeros(_as_points(u, spec.m).shape)
    return spec.reaction(u, g)


def reaction_zero_order(spec, u):
    """The zero-order part f(u) of the reaction (0 if no reaction)."""
    if spec.reaction is None:
        return np.zeros(_as_points(u, spec.m).shape)
    return spec.reaction.zero_order(u)


@dataclass(frozen=True)
class Region:
    """Axis-aligned sampling box."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        if len(lo) != len(hi) or not lo:
            raise InputError("region bounds must have equal, positive length")
        if any(not (h > l) for l, h in zip(lo, hi)):
            raise InputError("degenerate region: need hi > lo in every coordinate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, U, m):
        return cls((-float(U),) * m, (float(U),) * m)

    @classmethod
    def positive(cls, U, m):
        return cls((0.0,) * m, (float(U),) * m)

    @property
    def m(self):
        return len(self.lo)

    def sample(self, n, seed):
        """Deterministic sample of n points, interleaving a scrambled
        Halton stream (even indices) with uniform random points (odd
        indices).  For a fixed seed the first n rows of a larger draw
        equal a draw of size n, so enlarging a sample only appends."""
        n = int(n)
        if n < 1:
            raise InputError("sample count must be >= 1")
        m = self.m
        n_q = (n + 1) // 2
        halton = qmc.Halton(d=m, scramble=True, seed=np.random.default_rng([int(seed), 0x48]))
        pts = np.empty((n, m))
        pts[0::2] = halton.random(n_q)
        if n - n_q:
            rng = np.random.default_rng([int(seed), 0x55])
            pts[1::2] = rng.random((n - n_q, m))
        lo = np.array(self.lo)
        hi = np.array(self.hi)
        return lo + pts * (hi - lo)

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["lo"]), tuple(d["hi"]))


@dataclass
class StructuralReport:
    """Sampled certificates for the structural hypotheses of a model."""

    lambda_ratio_min: float
    lambda_ratio_max: float
    C_star_hat: float
    Lambda_hat: float
    Lambda1_hat: float
    eps0_hat: float
    C_f_hat: float
    C_P_hat: float
    lambda_l: dict
    ellipticity_pass: bool
    growth_pass: bool
    f_pass: bool
    sg_pass: bool
    sg_prime_pass: bool
    delta_k: float
    tol_ell: float
    sample_count: int
    region: Region
    seed: int

    @property
    def passed(self):
        return (self.ellipticity_pass and self.growth_pass and self.f_pass
                and self.sg_pass and self.sg_prime_pass)

    def to_dict(self):
        return {
            "lambda_ratio_min": self.lambda_ratio_min,
            "lambda_ratio_max": self.lambda_ratio_max,
            "C_star_hat": self.C_star_hat,
            "Lambda_hat": self.Lambda_hat,
            "Lambda1_hat": self.Lambda1_hat,
            "eps0_hat": self.eps0_hat,
            "C_f_hat": self.C_f_hat,
            "C_P_hat": self.C_P_hat,
            "lambda_l": {repr(float(l)): v for l, v in self.lambda_l.items()},
            "ellipticity_pass": self.ellipticity_pass,
            "growth_pass": self.growth_pass,
            "f_pass": self.f_pass,
            "sg_pass": self.sg_pass,
            "sg_prime_pass": self.sg_prime_pass,
            "passed": self.passed,
            "delta_k": self.delta_k,
            "tol_ell": self.tol_ell,
            "sample_count": self.sample_count,
            "region": self.region.to_dict(),
            "seed": self.seed,
        }


def _opnorms(A):
    """Largest singular value per matrix in a (..., m, m) batch."""
    return np.linalg.svd(A, compute_uv=False)[..., 0]


def verify_structure(spec, region, n=10000, seed=0, delta_k=0.99, tol_ell=1e-9,
                     ls=(0.0, 1.0, 2.0)):
    """Sample the region and certify the structural hypotheses.

    Returns a StructuralReport.  Ellipticity is declared violated when
    any sample has mineig(sym A(u)) < lambda(u) * (1 - tol_ell) or a
    nonpositive minimum eigenvalue.  The sample set is reproducible from
    (region, n, seed) via region.sample.
    """
    if not isinstance(region, Region):
        region = Region(*region)
    if region.m != spec.m:
        raise InputError("region dimension does not match the model")
    n = int(n)
    if n < 1:
        raise InputError("sample count must be >= 1")
    U = region.sample(n, seed)
    A = eval_A(spec, U)
    sym = 0.5 * (A + np.swapaxes(A, -1, -2))
    mineig = np.linalg.eigvalsh(sym)[..., 0]
    opn = _opnorms(A)
    lam = eval_lambda(spec, U)
    gradn = spec.lam.grad_norm(U)

    ratio = mineig / lam
    ratio_min = float(ratio.min())
    ratio_max = float(ratio.max())
    C_star = float(np.max(opn / lam))
    Lambda_hat = float(np.max(gradn / lam))
    eps0 = 1.0 / spec.lam.k if spec.lam.k > 1.0 else 1.0
    Lambda1_hat = float(np.max(gradn / lam ** (1.0 - eps0)))

    un = np.linalg.norm(U, axis=-1)
    mask = un > 0
    Pn = np.linalg.norm(eval_P(spec, U), axis=-1)
    if mask.any():
        C_P_hat = float(np.max(Pn[mask] / (lam[mask] * un[mask])))
    else:
        C_P_hat = 0.0
    fvals = reaction_zero_order(spec, U)
    fn = np.linalg.norm(fvals, axis=-1)
    if spec.reaction is not None and mask.any():
        C_f_hat = float(np.max(fn[mask] * spec.lam.lambda_S / (un[mask] * lam[mask])))
    else:
        C_f_hat = 0.0

    ellipticity_pass = bool(np.all(mineig > 0) and ratio_min >= 1.0 - tol_ell)
    growth_pass = bool(np.isfinite(C_P_hat))
    f_pass = bool(np.isfinite(C_f_hat) and
                  (spec.C_f is None or C_f_hat <= spec.C_f * (1.0 + 1e-12)))
    sg_pass = bool(np.isfinite(C_star))          # (n_space-2)/n_space = 0 in 2D
    k = spec.lam.k
    sg_prime_pass = bool(k <= 2.0 or (k - 2.0) / k <= delta_k / C_star)

    lam_l = {}
    for l in ls:
        lam_l[float(l)] = compute_lambda_l(spec, l, n=n, seed=seed,
                                           region=region, delta=delta_k)

    return StructuralReport(
        lambda_ratio_min=ratio_min, lambda_ratio_max=ratio_max,
        C_star_hat=C_star, Lambda_hat=Lambda_hat,
        Lambda1_hat=Lambda1_hat, eps0_hat=eps0,
        C_f_hat=C_f_hat, C_P_hat=C_P_hat, lambda_l=lam_l,
        ellipticity_pass=ellipticity_pass, growth_pass=growth_pass,
        f_pass=f_pass, sg_pass=sg_pass, sg_prime_pass=sg_prime_pass,
        delta_k=float(delta_k), tol_ell=float(tol_ell),
        sample_count=n, region=region, seed=int(seed))


def compute_lambda_l(spec, l, n=100000, seed=0, region=None, delta=0.99):
    """Brute-force the spectral test-function constant lambda_l.

    Samples states u over the region and matrix directions q, and
    returns the infimum of <A(u) q, M_l(u) q> / (lambda(u) |u|^l |q|^2)
    where M_l(u) = |u|^l Id + l |u|^(l-2) u (x) u is the Jacobian of
    u -> |u|^l u.  The |u|^l factor cancels, which keeps the quotient
    finite for all sampled magnitudes.  Every sample is tested against
    one rank-one direction (the infimum over matrices is attained on
    rank-one q) and one full random matrix, each drawn from its own
    seeded stream, so enlarging n only adds (u, q) pairs and the
    returned infimum is nonincreasing in n.  A positive return value
    is an empirical certificate.
    """
    l = float(l)
    if l < 0:
        raise InputError("l must be nonnegative")
    n = int(n)
    if n < 1:
        raise InputError("sample count must be >= 1")
    if region is None:
        region = Region.symmetric(10.0, spec.m)
    elif not isinstance(region, Region):
        region = Region(*region)
    m = spec.m
    U = region.sample(n, seed)
    d = np.random.default_rng([int(seed), 0xD1]).standard_normal((n, m))
    dn = np.linalg.norm(d, axis=-1, keepdims=True)
    dn[dn == 0] = 1.0
    d /= dn
    q = np.random.default_rng([int(seed), 0xD2]).standard_normal((n, m, 2))
    qn = np.linalg.norm(q, axis=(-2, -1), keepdims=True)
    qn[qn == 0] = 1.0
    q /= qn
    lam = eval_lambda(spec, U)
    if l > 0:
        keep = np.linalg.norm(U, axis=-1) > 0
        if not keep.any():
            raise InputError("all samples at the origin; quotient undefined for l > 0")
        U, lam, d, q = U[keep], lam[keep], d[keep], q[keep]
    A = eval_A(spec, U)
    AT = np.swapaxes(A, -1, -2)
    if l > 0:
        # gate check: l/(l+2) <= delta / C_*, reported but not enforced
        C_star = float(np.max(_opnorms(A) / lam))
        if l / (l + 2.0) > delta / C_star:
            logger.info("spectral-gap gate fails for l=%g (C_*~%.3g); "
                        "the certified constant may be nonpositive", l, C_star)
        uhat = U / np.linalg.norm(U, axis=-1, keepdims=True)
        Au = np.einsum("nij,nj->ni", AT, uhat)
        T = AT + l * Au[:, :, None] * uhat[:, None, :]
    else:
        T = AT
    vals1 = np.einsum("ni,nij,nj->n", d, T, d) / lam
    vals2 = np.einsum("nic,nij,njc->n", q, T, q) / lam
    return float(min(vals1.min(), vals2.min()))


def _skt_lambda1(a11, a12, a21, a22):
    """Certified linear coercivity slope for the classic quadratic map.

    Along any positive-orthant ray u = s*d the symmetric part of A is an
    affine matrix pencil, so its minimum eigenvalue is concave in s and
    bounded below by mineig(A(0)) + s * mineig(sym A_lin(d)).  The
    infimum of the directional slope over the quarter circle is the
    certified lambda1.
    """
    def slope(theta):
        c, s = math.cos(theta), math.sin(theta)
        m11 = 2.0 * a11 * c + a12 * s
        m12 = a12 * c
        m21 = a21 * s
        m22 = a21 * c + 2.0 * a22 * s
        mean = 0.5 * (m11 + m22)
        return mean - math.hypot(0.5 * (m11 - m22), 0.5 * (m12 + m21))

    thetas = np.linspace(0.0, 0.5 * math.pi, 2049)
    vals = np.array([slope(t) for t in thetas])
    i = int(np.argmin(vals))
    lo = max(i - 1, 0)
    hi = min(i + 1, len(thetas) - 1)
    best = vals[i]
    if hi > lo:
        res = minimize_scalar(slope, bounds=(thetas[lo], thetas[hi]),
                              method="bounded", options={"xatol": 1e-12})
        best = min(best, float(res.fun))
    # small safety margin so the sampled ellipticity ratio stays >= 1
    return max(best, 0.0) * (1.0 - 1e-7)


def classic_skt(a1, a2, a11, a12, a21, a22, b=None, lv=None):
    """Two-species quadratic cross-diffusion model.

    P = (a1*u + a11*u^2 + a12*u*v,  a2*v + a21*u*v + a22*v^2) with a
    certified envelope lambda(u) = min(a1,a2) + lambda1*|u| on the
    positive orthant (lambda1 from the directional slope bound).  An
    optional competitive Lotka-Volterra reaction lv = (r1, r2, s11, s12,
    s21, s22) maps to K = diag(r1, r2) and a diagonal matrix map G with
    kappa = 1 and c0 = min(s_ij); the coercivity declaration holds on
    the positive orthant.  b, when given, is a MatrixPolynomial of shape
    (2, 4) multiplying the flattened gradient.
    """
    a1, a2 = float(a1), float(a2)
    if min(a1, a2) <= 0:
        raise ModelDefinitionError("linear diffusion rates must be positive")
    comp0 = [(a1, (1, 0))]
    if a11:
        comp0.append((float(a11), (2, 0)))
    if a12:
        comp0.append((float(a12), (1, 1)))
    comp1 = [(a2, (0, 1))]
    if a21:
        comp1.append((float(a21), (1, 1)))
    if a22:
        comp1.append((float(a22), (0, 2)))
    P = PolynomialMap(2, [comp0, comp1])
    lam1 = _skt_lambda1(float(a11), float(a12), float(a21), float(a22))
    if lam1 > 0:
        lam = LambdaSpec(min(a1, a2), lam1, 1.0)
    else:
        lam = LambdaSpec(min(a1, a2), 0.0, 0.0)
    reaction = None
    if lv is not None:
        r1, r2, s11, s12, s21, s22 = (float(x) for x in lv)
        if min(s11, s12, s21, s22) <= 0:
            raise ModelDefinitionError(
                "competitive rates must all be positive for the coercivity declaration")
        K = np.diag([r1, r2])
        G = MatrixPolynomial(2, (2, 2), [
            (0, 0, s11, 0.0, (1, 0)), (0, 0, s12, 0.0, (0, 1)),
            (1, 1, s21, 0.0, (1, 0)), (1, 1, s22, 0.0, (0, 1))])
        reaction = ReactionSpec(K=K, B=b, G=G, kappa=1.0, c0=min(s11, s12, s21, s22))
    elif b is not None:
        reaction = GeneralReaction(m=2, B=b)
    return ModelSpec(P=P, lam=lam, reaction=reaction, name="classic_skt")


def with_sigma(spec, sigma):
    """Interpolation transform: replace u by sigma*u inside A and the
    reaction.  Returns a new ModelSpec with P_s(u) = P(sigma*u)/sigma
    (so its Jacobian is A(sigma*u)) and the reaction evaluated at
    (sigma*u, sigma*Du).  Data-level only; no claim is made about the
    transformed model's estimates."""
    sigma = float(sigma)
    if not (0.0 <= sigma <= 1.0):
        raise InputError("sigma must lie in [0, 1]")
    P = spec.P.scaled(sigma, power_offset=-1)
    lam = LambdaSpec(spec.lam.lambda0, spec.lam.lambda1 * sigma ** spec.lam.k, spec.lam.k)
    r = spec.reaction
    if isinstance(r, ReactionSpec):
        reaction = ReactionSpec(
            K=sigma * r.K,
            B=None if r.B is None else r.B.scaled(sigma, prefactor=sigma),
            G=None if r.G is None else r.G.scaled(sigma, prefactor=sigma),
            kappa=r.kappa,
            c0=max(r.c0 * sigma ** (1.0 + r.kappa), np.finfo(float).tiny))
    elif isinstance(r, GeneralReaction):
        reaction = GeneralReaction(
            m=r.m,
            B=None if r.B is None else r.B.scaled(sigma, prefactor=sigma),
            f0=None if r.f0 is None else r.f0.scaled(sigma, power_offset=0))
    else:
        reaction = None
    return ModelSpec(P=P, lam=lam, reaction=reaction, C_f=spec.C_f,
                     name=f"{spec.name}@sigma={sigma:g}" if spec.name else "")


def model_to_dict(spec):
    d = {"m": spec.m, "P": spec.P.to_dict(), "lambda": spec.lam.to_dict(),
         "C_f": spec.C_f, "name": spec.name}
    r = spec.reaction
    if isinstance(r, ReactionSpec):
        d["reaction"] = {
            "K": r.K.tolist(),
            "B": None if r.B is None else r.B.to_dict(),
            "G": None if r.G is None else r.G.to_dict(),
            "kappa": r.kappa, "c0": r.c0}
    elif isinstance(r, GeneralReaction):
        d["reaction"] = {"general": {
            "B": None if r.B is None else r.B.to_dict(),
            "f": None if r.f0 is None else r.f0.to_dict()}}
    else:
        d["reaction"] = None
    return d


def model_from_dict(d):
    try:
        m = int(d["m"])
        P = PolynomialMap.from_dict(m, d["P"])
        lam = LambdaSpec.from_dict(d["lambda"])
    except (KeyError, TypeError, IndexError) as e:
        raise ModelDefinitionError(f"malformed model definition: {e}") from e
    reaction = None
    r = d.get("reaction")
    if r:
        if "general" in r:
            g = r["general"]
            B = None if g.get("B") is None else MatrixPolynomial.from_dict(m, (m, 2 * m), g["B"])
            f0 = None if g.get("f") is None else PolynomialMap.from_dict(m, g["f"])
            reaction = GeneralReaction(m=m, B=B, f0=f0)
        else:
            B = None if r.get("B") is None else MatrixPolynomial.from_dict(m, (m, 2 * m), r["B"])
            G = None if r.get("G") is None else MatrixPolynomial.from_dict(m, (m, m), r["G"])
            reaction = ReactionSpec(K=np.asarray(r["K"], dtype=float), B=B, G=G,
                                    kappa=float(r["kappa"]), c0=float(r["c0"]))
    C_f = d.get("C_f")
    return ModelSpec(P=P, lam=lam, reaction=reaction,
                     C_f=None if C_f is None else float(C_f),
                     name=d.get("name", ""))


def save_model(path, spec):
    with open(path, "w") as fh:
        json.dump(model_to_dict(spec), fh, indent=2)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
