import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossdiff import (InputError, LambdaSpec, MatrixPolynomial,
                       ModelDefinitionError, ModelSpec, PolynomialMap,
                       ReactionSpec, Region, classic_skt, compute_lambda_l,
                       eval_A, eval_lambda, eval_P, eval_reaction, load_model,
                       model_from_dict, model_to_dict, reaction_zero_order,
                       save_model, verify_structure, with_sigma)


def diag_model(*diag):
    """Constant diagonal diffusion matrix via linear P."""
    m = len(diag)
    terms = []
    for i, d in enumerate(diag):
        ex = [0] * m
        ex[i] = 1
        terms.append([(float(d), tuple(ex))])
    return ModelSpec(P=PolynomialMap(m, terms), lam=LambdaSpec(1.0))


def random_poly_model(rng, m):
    """Random polynomial map of total degree <= 3, no constant terms."""
    terms = []
    for _ in range(m):
        comp = []
        for _ in range(rng.integers(1, 4)):
            deg = int(rng.integers(1, 4))
            ex = np.zeros(m, dtype=int)
            for _ in range(deg):
                ex[rng.integers(0, m)] += 1
            comp.append((float(rng.uniform(-2, 2)), tuple(int(e) for e in ex)))
        terms.append(comp)
    return ModelSpec(P=PolynomialMap(m, terms), lam=LambdaSpec(1.0))


def fd_jacobian(spec, u, h=1e-6):
    u = np.asarray(u, dtype=float)
    m = u.shape[-1]
    out = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        out[:, j] = (eval_P(spec, u + e) - eval_P(spec, u - e)) / (2 * h)
    return out


class TestEvalP:
    def test_identity_coefficients(self):
        spec = classic_skt(1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
        assert np.allclose(eval_P(spec, [3.0, 5.0]), [3.0, 5.0])

    def test_quadratic_first_component(self):
        # a1*u + a11*u^2 + a12*u*v = 1 + 1 + 2 at (1, 1)
        spec = classic_skt(1.0, 1.0, 1.0, 2.0, 0.0, 0.0)
        assert eval_P(spec, [1.0, 1.0])[0] == pytest.approx(4.0)

    @pytest.mark.parametrize("maker", [
        lambda: classic_skt(1.0, 2.0, 1.0, 1.0, 1.0, 1.0),
        lambda: random_poly_model(np.random.default_rng(0), 3),
    ])
    def test_vanishes_at_zero(self, maker):
        spec = maker()
        assert np.all(eval_P(spec, np.zeros(spec.m)) == 0.0)

    def test_batch_evaluation(self, skt):
        U = np.random.default_rng(1).uniform(0, 2, size=(7, 5, 2))
        batch = eval_P(skt, U)
        for idx in np.ndindex(7, 5):
            assert np.allclose(batch[idx], eval_P(skt, U[idx]))

    def test_dimension_mismatch(self, skt):
        with pytest.raises(ModelDefinitionError):
            eval_P(skt, [1.0, 2.0, 3.0])


class TestEvalA:
    def test_identity_everywhere(self):
        spec = classic_skt(1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
        for u in ([0.0, 0.0], [3.0, 7.0], [-1.0, 2.0]):
            assert np.allclose(eval_A(spec, u), np.eye(2))

    def test_origin_is_diagonal(self):
        spec = classic_skt(1.0, 2.0, 1.0, 1.0, 1.0, 1.0)
        assert np.allclose(eval_A(spec, [0.0, 0.0]), np.diag([1.0, 2.0]))

    def test_quadratic_jacobian_matches_fd_oracle(self):
        # frozen from the central-difference oracle of eval_P at (1,1)
        spec = classic_skt(1.0, 2.0, 1.0, 1.0, 1.0, 1.0)
        A = eval_A(spec, [1.0, 1.0])
        assert np.allclose(A, [[4.0, 1.0], [1.0, 5.0]], atol=1e-12)
        assert np.allclose(fd_jacobian(spec, [1.0, 1.0]), A, atol=1e-7)

    def test_fd_consistency_100_random(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            m = int(rng.integers(1, 4))
            spec = random_poly_model(rng, m)
            u = rng.uniform(-2, 2, size=m)
            A = eval_A(spec, u)
            err = np.abs(A - fd_jacobian(spec, u)).max()
            assert err <= 1e-6 * (1.0 + np.abs(A).max())


class TestEvalLambda:
    def test_constant_envelope(self, heat2):
        assert eval_lambda(heat2, [9.0, -4.0]) == 1.0

    def test_linear_growth(self):
        spec = ModelSpec(P=PolynomialMap.identity(1), lam=LambdaSpec(1.0, 2.0, 1.0))
        assert eval_lambda(spec, [3.0]) == pytest.approx(7.0)

    def test_quadratic_growth(self):
        spec = ModelSpec(P=PolynomialMap.identity(2), lam=LambdaSpec(0.5, 1.0, 2.0))
        assert eval_lambda(spec, [1.0, 1.0]) == pytest.approx(2.5)

    def test_lambda_s_accessor(self):
        assert LambdaSpec(1.5, 2.5, 1.0).lambda_S == 4.0

    def test_grad_norm_matches_fd(self):
        lam = LambdaSpec(1.0, 2.0, 3.0)
        u = np.array([0.6, -0.8])
        h = 1e-7
        d = u / np.linalg.norm(u)
        fd = (lam(u + h * d) - lam(u - h * d)) / (2 * h)
        assert lam.grad_norm(u) == pytest.approx(abs(fd), rel=1e-6)

    def test_invalid_parameters(self):
        with pytest.raises(ModelDefinitionError):
            LambdaSpec(0.0)
        with pytest.raises(ModelDefinitionError):
            LambdaSpec(1.0, -1.0)
        with pytest.raises(ModelDefinitionError):
            LambdaSpec(1.0, 1.0, -2.0)


class TestEvalReaction:
    def test_pure_linear_term(self):
        spec = ModelSpec(
            P=PolynomialMap.identity(2), lam=LambdaSpec(1.0),
            reaction=ReactionSpec(K=np.eye(2), B=None, G=None, kappa=1.0, c0=1.0))
        g = np.random.default_rng(0).normal(size=(2, 2))
        assert np.allclose(eval_reaction(spec, [2.0, 3.0], g), [2.0, 3.0])

    def test_radial_competition(self):
        # G(u) = |u| Id and |(3,4)| = 5
        spec = ModelSpec(
            P=PolynomialMap.identity(2), lam=LambdaSpec(1.0, 0.0, 1.0),
            reaction=ReactionSpec(K=np.zeros((2, 2)), B=None,
                                  G=MatrixPolynomial.radial_identity(2),
                                  kappa=1.0, c0=1.0))
        out = eval_reaction(spec, [3.0, 4.0], np.zeros((2, 2)))
        assert np.allclose(out, [-15.0, -20.0])

    def test_zero_state_leaves_gradient_part(self):
        B0 = np.arange(8, dtype=float).reshape(2, 4)
        spec = ModelSpec(
            P=PolynomialMap.identity(2), lam=LambdaSpec(1.0),
            reaction=ReactionSpec(K=np.eye(2), B=MatrixPolynomial.constant(2, B0),
                                  G=None, kappa=1.0, c0=1.0))
        g = np.array([[1.0, 2.0], [3.0, 4.0]])    # rows (du_c/dx, du_c/dy)
        expect = B0 @ g.reshape(4)
        assert np.allclose(eval_reaction(spec, [0.0, 0.0], g), expect)

    def test_lotka_volterra_by_hand(self, skt_lv):
        # f_i = u_i (r_i - s_i1 u - s_i2 v) at u = (2, 1)
        out = reaction_zero_order(skt_lv, [2.0, 1.0])
        assert np.allclose(out, [-3.0, -1.0])

    def test_no_reaction_is_zero(self, skt):
        assert np.all(eval_reaction(skt, [1.0, 2.0], np.ones((2, 2))) == 0.0)


class TestConstructionErrors:
    def test_constant_term_rejected(self):
        with pytest.raises(ModelDefinitionError):
            PolynomialMap(1, [[(1.0, (0,))]])

    def test_negative_exponent_rejected(self):
        with pytest.raises(ModelDefinitionError):
            PolynomialMap(1, [[(1.0, (-1,))]])

    def test_exponent_length_rejected(self):
        with pytest.raises(ModelDefinitionError):
            PolynomialMap(2, [[(1.0, (1,))], []])

    def test_max_degree_enforced(self):
        with pytest.raises(ModelDefinitionError):
            PolynomialMap(1, [[(1.0, (3,))]], max_degree=2)

    def test_nonsquare_k_rejected(self):
        with pytest.raises(ModelDefinitionError):
            ReactionSpec(K=np.ones((2, 3)), B=None, G=None, kappa=1.0, c0=1.0)

    def test_kappa_exceeding_k_rejected(self):
        with pytest.raises(ModelDefinitionError):
            ModelSpec(P=PolynomialMap.identity(1), lam=LambdaSpec(1.0, 1.0, 1.0),
                      reaction=ReactionSpec(K=np.eye(1), B=None,
                                            G=MatrixPolynomial.radial_identity(1),
                                            kappa=2.0, c0=1.0))

    def test_reaction_dimension_mismatch(self):
        with pytest.raises(ModelDefinitionError):
            ModelSpec(P=PolynomialMap.identity(2), lam=LambdaSpec(1.0),
                      reaction=ReactionSpec(K=np.eye(1), B=None, G=None,
                                            kappa=1.0, c0=1.0))

    def test_nonpositive_diffusion_rate_rejected(self):
        with pytest.raises(ModelDefinitionError):
            classic_skt(0.0, 1.0, 1.0, 1.0, 1.0, 1.0)

    def test_nonpositive_competition_rejected(self):
        with pytest.raises(ModelDefinitionError):
            classic_skt(1.0, 1.0, 1.0, 1.0, 1.0, 1.0,
                        lv=(1.0, 1.0, 1.0, 0.0, 1.0, 1.0))


class TestRegion:
    def test_samples_stay_in_box(self):
        reg = Region((-1.0, 2.0), (0.5, 4.0))
        pts = reg.sample(400, 9)
        assert pts.shape == (400, 2)
        assert np.all(pts >= [-1.0, 2.0]) and np.all(pts <= [0.5, 4.0])

    @pytest.mark.parametrize("small,large", [(500, 1000), (500, 501), (1, 2)])
    def test_prefix_stability(self, small, large):
        reg = Region.symmetric(3.0, 2)
        assert np.array_equal(reg.sample(small, 7), reg.sample(large, 7)[:small])

    def test_degenerate_rejected(self):
        with pytest.raises(InputError):
            Region((0.0, 0.0), (1.0, 0.0))

    def test_round_trip(self):
        reg = Region.positive(5.0, 3)
        assert Region.from_dict(reg.to_dict()) == reg


class TestVerifyStructure:
    def test_identity_model_all_pass(self, heat2):
        rep = verify_structure(heat2, Region.symmetric(10.0, 2), n=2000, seed=0)
        assert rep.passed
        assert rep.lambda_ratio_min == pytest.approx(1.0, abs=1e-12)
        assert rep.lambda_ratio_max == pytest.approx(1.0, abs=1e-12)
        assert rep.C_star_hat == pytest.approx(1.0, abs=1e-12)
        assert rep.Lambda_hat == 0.0
        assert rep.lambda_l[0.0] == pytest.approx(1.0, abs=1e-9)

    def test_constant_diagonal_by_inspection(self):
        rep = verify_structure(diag_model(1.0, 2.0), Region.symmetric(10.0, 2),
                               n=1000, seed=0)
        assert rep.lambda_ratio_min == pytest.approx(1.0, abs=1e-12)
        assert rep.C_star_hat == pytest.approx(2.0, abs=1e-12)
        assert rep.passed

    def test_classic_skt_positive_orthant(self, skt):
        rep = verify_structure(skt, Region.positive(100.0, 2), n=2000, seed=0)
        assert rep.passed
        assert rep.lambda_ratio_min >= 1.0 - rep.tol_ell
        # envelope comparable to 1 + u + v on the sampled box
        U = Region.positive(100.0, 2).sample(2000, 0)
        comp = eval_lambda(skt, U) / (1.0 + U.sum(axis=-1))
        assert 0.2 <= comp.min() and comp.max() <= 5.0

    def test_ellipticity_failure_is_reported_not_raised(self):
        bad = ModelSpec(P=PolynomialMap(1, [[(-1.0, (1,))]]), lam=LambdaSpec(1.0))
        rep = verify_structure(bad, Region.symmetric(1.0, 1), n=200, seed=0)
        assert not rep.ellipticity_pass and not rep.passed

    def test_cf_declaration_checked(self, logistic):
        # |f(u)| = |u| |1 - |u|| exceeds C_f |u| lambda(u)/lambda_S for
        # small C_f on a box reaching |u| = 4
        tight = ModelSpec(P=logistic.P, lam=logistic.lam,
                          reaction=logistic.reaction, C_f=1.0)
        rep = verify_structure(tight, Region.symmetric(4.0, 1), n=2000, seed=0)
        assert not rep.f_pass
        loose = ModelSpec(P=logistic.P, lam=logistic.lam,
                          reaction=logistic.reaction, C_f=3.5)
        rep2 = verify_structure(loose, Region.symmetric(4.0, 1), n=2000, seed=0)
        assert rep2.f_pass

    def test_sg_prime_gate(self):
        # k = 4 with C_* ~ 5: (k-2)/k = 0.5 > delta/C_*
        stiff = ModelSpec(P=PolynomialMap(1, [[(1.0, (1,)), (1.0, (5,))]]),
                          lam=LambdaSpec(1.0, 1.0, 4.0))
        rep = verify_structure(stiff, Region.symmetric(10.0, 1), n=2000, seed=0)
        assert rep.ellipticity_pass
        assert not rep.sg_prime_pass and not rep.passed

    def test_eps0_reporting(self):
        spec = ModelSpec(P=PolynomialMap(1, [[(1.0, (1,)), (1.0, (3,))]]),
                         lam=LambdaSpec(1.0, 3.0, 2.0))
        rep = verify_structure(spec, Region.symmetric(5.0, 1), n=500, seed=0)
        assert rep.eps0_hat == pytest.approx(0.5)

    def test_region_dimension_checked(self, skt):
        with pytest.raises(InputError):
            verify_structure(skt, Region.symmetric(1.0, 3), n=10, seed=0)

    def test_determinism(self, skt):
        a = verify_structure(skt, Region.positive(50.0, 2), n=500, seed=3)
        b = verify_structure(skt, Region.positive(50.0, 2), n=500, seed=3)
        assert a.to_dict() == b.to_dict()

    def test_certificate_soundness(self, skt):
        # every sample obeys <A z, z> >= ratio_min * lambda |z|^2 and the
        # norm sandwich lambda^2|z|^2 <= |A z|^2 <= C*^2 lambda^2 |z|^2
        region = Region.positive(20.0, 2)
        rep = verify_structure(skt, region, n=300, seed=5)
        assert rep.passed
        U = region.sample(300, 5)
        A = eval_A(skt, U)
        lam = eval_lambda(skt, U)
        rng = np.random.default_rng(11)
        for _ in range(100):
            z = rng.normal(size=2)
            quad = np.einsum("i,nij,j->n", z, A, z)
            assert np.all(quad >= rep.lambda_ratio_min * lam * (z @ z) * (1 - 1e-12))
            Az2 = (np.einsum("nij,j->ni", A, z) ** 2).sum(axis=-1)
            assert np.all(Az2 >= lam ** 2 * (z @ z) * (1 - 1e-9))
            assert np.all(Az2 <= rep.C_star_hat ** 2 * lam ** 2 * (z @ z) * (1 + 1e-9))


class TestComputeLambdaL:
    def test_scalar_collapses_to_l_plus_one(self):
        spec = ModelSpec(P=PolynomialMap(1, [[(1.0, (1,)), (1.0, (3,))]]),
                         lam=LambdaSpec(1.0, 3.0, 2.0))
        for l in (0.0, 1.0, 2.0):
            v = compute_lambda_l(spec, l, n=2000, seed=0)
            assert v == pytest.approx(l + 1.0, abs=1e-12)

    def test_isotropic_matrix_gives_one(self, heat2):
        v = compute_lambda_l(heat2, 1.0, n=20000, seed=0)
        assert v == pytest.approx(1.0, abs=1e-6)
        assert v >= 1.0 - 1e-12

    def test_l_zero_is_symmetric_min_eigenvalue(self):
        # A = [[2,1],[0,3]]: mineig(sym A) = 5/2 - sqrt(1/2)
        spec = ModelSpec(
            P=PolynomialMap(2, [[(2.0, (1, 0)), (1.0, (0, 1))], [(3.0, (0, 1))]]),
            lam=LambdaSpec(1.0))
        exact = 2.5 - math.sqrt(0.5)
        v = compute_lambda_l(spec, 0.0, n=50000, seed=0)
        assert v >= exact - 1e-12
        assert v == pytest.approx(exact, abs=1e-4)

    @pytest.mark.parametrize("l,scan", [
        # dense (uhat, w) angle-scan oracle, 4001 x 4003 grid
        (1.0, 1.751264436471321),
        (2.0, 1.6912108097368201),
    ])
    def test_anisotropic_against_scan_oracle(self, l, scan):
        spec = ModelSpec(
            P=PolynomialMap(2, [[(2.0, (1, 0)), (1.0, (0, 1))], [(3.0, (0, 1))]]),
            lam=LambdaSpec(1.0))
        v = compute_lambda_l(spec, l, n=200000, seed=0)
        assert v == pytest.approx(scan, abs=1e-3)

    def test_monotone_in_sample_count(self):
        spec = ModelSpec(
            P=PolynomialMap(2, [[(2.0, (1, 0)), (1.0, (0, 1))], [(3.0, (0, 1))]]),
            lam=LambdaSpec(1.0))
        vals = [compute_lambda_l(spec, 1.0, n=n, seed=3)
                for n in (1000, 4000, 16000)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_negative_l_rejected(self, heat2):
        with pytest.raises(InputError):
            compute_lambda_l(heat2, -0.5)


class TestWithSigma:
    @given(st.floats(min_value=0.05, max_value=1.0))
    def test_transforms_evaluate_at_scaled_state(self, sigma):
        spec = classic_skt(1.0, 1.0, 1.0, 0.5, 0.5, 1.0,
                           lv=(1.0, 1.0, 1.0, 0.5, 0.5, 1.0))
        scaled = with_sigma(spec, sigma)
        rng = np.random.default_rng(0)
        u = rng.uniform(0.1, 3.0, size=2)
        g = rng.normal(size=(2, 2))
        assert np.allclose(eval_A(scaled, u), eval_A(spec, sigma * u),
                           rtol=1e-12, atol=1e-12)
        assert eval_lambda(scaled, u) == pytest.approx(
            eval_lambda(spec, sigma * u), rel=1e-12)
        assert np.allclose(eval_reaction(scaled, u, g),
                           eval_reaction(spec, sigma * u, sigma * g),
                           rtol=1e-10, atol=1e-12)

    def test_sigma_out_of_range(self, skt):
        with pytest.raises(InputError):
            with_sigma(skt, 1.5)


class TestSerialization:
    def check_equivalent(self, a, b, m, with_gradient=True):
        rng = np.random.default_rng(4)
        U = rng.uniform(-2.0, 2.0, size=(64, m))
        G = rng.normal(size=(64, m, 2))
        assert np.array_equal(eval_P(a, U), eval_P(b, U))
        assert np.array_equal(eval_A(a, U), eval_A(b, U))
        assert np.array_equal(eval_lambda(a, U), eval_lambda(b, U))
        if with_gradient:
            assert np.array_equal(eval_reaction(a, U, G), eval_reaction(b, U, G))

    def test_dict_round_trip_competitive(self, skt_lv):
        again = model_from_dict(model_to_dict(skt_lv))
        self.check_equivalent(skt_lv, again, 2)

    def test_dict_round_trip_general(self, decay_model):
        again = model_from_dict(model_to_dict(decay_model))
        self.check_equivalent(decay_model, again, 1)
        assert again.C_f == decay_model.C_f

    def test_file_round_trip(self, tmp_path, skt_lv):
        path = tmp_path / "model.json"
        save_model(path, skt_lv)
        data = json.loads(path.read_text())
        assert set(data) >= {"m", "P", "lambda", "reaction", "C_f"}
        self.check_equivalent(skt_lv, load_model(path), 2)

    def test_malformed_rejected(self):
        with pytest.raises(ModelDefinitionError):
            model_from_dict({"m": 2, "P": [[[1.0, 1]]], "lambda": {"lambda0": 1.0}})
