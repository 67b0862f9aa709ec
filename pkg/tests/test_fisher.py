import numpy as np
import pytest

from conftest import make_gradient_sets
from rose_ood.errors import ConfigError, DataFormatError, NumericError, ShapeError
from rose_ood.fisher import (
    DiagAccumulator,
    EkfacFactor,
    FisherArtifact,
    fit,
    fit_diag,
    fit_ekfac,
    quad_form,
    quad_form_batch,
)
from rose_ood.schemas import LayerGradient, LayerGradientSet
from rose_ood.tensor import vec


def _grads(sets, name="layer"):
    return [gs[name].grad for gs in sets]


def _dense_fisher(sets, name="layer"):
    flat = np.stack([vec(g) for g in _grads(sets, name)])
    return flat.T @ flat / len(flat)


def _dense_quad_form(fisher, damping, s):
    v = vec(s)
    return float(v @ np.linalg.solve(fisher + damping * np.eye(fisher.shape[0]), v))


class TestDiag:
    def test_single_sample_is_squared_gradient(self):
        sets = make_gradient_sets(1, p=3, q=2)
        np.testing.assert_array_equal(fit_diag(sets)["layer"].diag, sets[0]["layer"].grad ** 2)

    def test_sign_cancels(self):
        (gs,) = make_gradient_sets(1, p=3, q=2)
        g = gs["layer"]
        flipped = LayerGradientSet(1, {"layer": LayerGradient("layer", -g.grad, g.h, -g.delta)})
        np.testing.assert_allclose(fit_diag([gs, flipped])["layer"].diag, g.grad**2, rtol=1e-15)

    def test_matches_dense_outer_product_diagonal(self):
        sets = make_gradient_sets(50, p=4, q=3, positions=5)
        diag = fit_diag(sets)["layer"].diag
        np.testing.assert_allclose(vec(diag), np.diag(_dense_fisher(sets)), rtol=1e-12)

    def test_quad_form_closed_form(self):
        sets = make_gradient_sets(10, p=3, q=2)
        factor = fit_diag(sets)["layer"]
        s = sets[0]["layer"].grad
        assert quad_form(factor, s) == pytest.approx(np.sum(s**2 / (factor.diag + factor.damping)), rel=1e-14)

    def test_merge_equals_single_pass(self):
        sets = make_gradient_sets(12, p=3, q=2)
        whole, left, right = DiagAccumulator("layer"), DiagAccumulator("layer"), DiagAccumulator("layer")
        for i, gs in enumerate(sets):
            whole.update(gs["layer"])
            (left if i < 5 else right).update(gs["layer"])
        np.testing.assert_allclose(left.merge(right).finalize().diag, whole.finalize().diag, rtol=1e-14)


class TestEkfac:
    def test_eigenbases_are_orthogonal(self):
        factor = fit_ekfac(make_gradient_sets(30, p=5, q=4, positions=3))["layer"]
        np.testing.assert_allclose(factor.u_a.T @ factor.u_a, np.eye(5), atol=1e-5)
        np.testing.assert_allclose(factor.u_b.T @ factor.u_b, np.eye(4), atol=1e-5)
        assert np.all(factor.sigma >= 0.0)

    def test_sigma_is_exact_in_the_kronecker_eigenbasis(self):
        sets = make_gradient_sets(50, p=6, q=6, positions=4)
        factor = fit_ekfac(sets)["layer"]
        basis = np.kron(factor.u_a, factor.u_b)
        expected = np.diag(basis.T @ _dense_fisher(sets) @ basis)
        np.testing.assert_allclose(vec(factor.sigma), expected, rtol=1e-10, atol=1e-12)

    def test_quad_form_matches_dense_reconstruction(self):
        sets = make_gradient_sets(50, p=3, q=2, positions=4)
        factor = fit_ekfac(sets)["layer"]
        s = make_gradient_sets(1, p=3, q=2, positions=4, seed=99)[0]["layer"].grad
        dense = _dense_quad_form(factor.to_dense(), factor.damping, s)
        assert quad_form(factor, s) == pytest.approx(dense, rel=1e-8)

    def test_rank_one_fit_matches_dense_inverse(self):
        sets = make_gradient_sets(1, p=4, q=3)
        s = sets[0]["layer"].grad
        factor = fit_ekfac(sets)["layer"]
        outer = np.outer(vec(s), vec(s))
        other = make_gradient_sets(1, p=4, q=3, seed=5)[0]["layer"].grad
        for g in (s, other):
            assert quad_form(factor, g) == pytest.approx(_dense_quad_form(outer, factor.damping, g), rel=1e-5)

    def test_zero_gradients(self):
        sets = make_gradient_sets(5, p=3, q=2, scale=0.0)
        factor = fit_ekfac(sets)["layer"]
        np.testing.assert_array_equal(factor.sigma, 0.0)
        assert quad_form(factor, np.zeros((2, 3))) == 0.0

    @pytest.mark.parametrize("method", ["diag", "ekfac"])
    def test_zero_fisher_rejects_nonzero_gradient(self, method):
        factor = fit(make_gradient_sets(5, p=3, q=2, scale=0.0), method)["layer"]
        s = np.full((2, 3), 10.0)
        with pytest.raises(NumericError, match="layer"):
            quad_form(factor, s)
        with pytest.raises(NumericError):
            quad_form_batch(factor, s[None])

    def test_lapack_solver_gives_the_same_quad_forms(self):
        sets = make_gradient_sets(20, p=4, q=3, positions=2)
        jacobi = fit(sets, "ekfac", eig_solver="jacobi")["layer"]
        lapack = fit(sets, "ekfac", eig_solver="lapack")["layer"]
        s = sets[3]["layer"].grad
        assert quad_form(jacobi, s) == pytest.approx(quad_form(lapack, s), rel=1e-8)

    def test_dense_materialization_is_refused_for_large_layers(self):
        factor = EkfacFactor("big", np.eye(100), np.eye(101), np.ones((101, 100)), 1, 1e-8)
        with pytest.raises(ShapeError):
            factor.to_dense()


@pytest.mark.parametrize("method", ["diag", "ekfac"])
class TestProperties:
    def test_quad_form_is_positive(self, method):
        sets = make_gradient_sets(20, p=3, q=3, positions=2)
        factor = fit(sets, method)["layer"]
        assert quad_form(factor, np.zeros((3, 3))) == 0.0
        for g in _grads(make_gradient_sets(10, p=3, q=3, positions=2, seed=3)):
            assert quad_form(factor, g) > 0.0

    def test_sample_order_does_not_matter(self, method):
        sets = make_gradient_sets(30, p=4, q=3, positions=3)
        forward, backward = fit(sets, method)["layer"], fit(sets[::-1], method)["layer"]
        for g in _grads(sets[:5]):
            assert quad_form(forward, g) == pytest.approx(quad_form(backward, g), rel=1e-9)

    @pytest.mark.parametrize("c", [1e-3, 1e3])
    def test_scaling_gradients_leaves_quad_form_unchanged(self, method, c):
        sets = make_gradient_sets(30, p=4, q=3, positions=3)
        scaled = make_gradient_sets(30, p=4, q=3, positions=3, scale=c)
        base, refit = fit(sets, method)["layer"], fit(scaled, method)["layer"]
        for g, cg in zip(_grads(sets[:5]), _grads(scaled[:5])):
            assert quad_form(refit, cg) == pytest.approx(quad_form(base, g), rel=1e-8)

    def test_batch_matches_single(self, method):
        sets = make_gradient_sets(15, p=3, q=2, positions=2)
        factor = fit(sets, method)["layer"]
        grads = np.stack(_grads(sets))
        np.testing.assert_allclose(quad_form_batch(factor, grads), [quad_form(factor, g) for g in grads], rtol=1e-12)

    def test_dimension_mismatch(self, method):
        factor = fit(make_gradient_sets(5, p=3, q=2), method)["layer"]
        with pytest.raises(ShapeError):
            quad_form(factor, np.zeros((3, 2)))


class TestStreams:
    def test_empty_stream(self):
        with pytest.raises(DataFormatError):
            fit([], "diag")

    def test_one_shot_iterator_is_rejected(self):
        with pytest.raises(TypeError):
            fit(iter(make_gradient_sets(3, p=2, q=2)), "ekfac")

    def test_factory_matches_sequence(self):
        sets = make_gradient_sets(8, p=3, q=2, positions=2)
        from_factory = fit(lambda: iter(sets), "ekfac")["layer"]
        np.testing.assert_array_equal(from_factory.sigma, fit(sets, "ekfac")["layer"].sigma)

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            fit(make_gradient_sets(3, p=2, q=2), "kfac")

    def test_artifact_raw_scores(self):
        sets = [
            LayerGradientSet(i, {**a.layers, **b.layers})
            for i, (a, b) in enumerate(
                zip(make_gradient_sets(6, p=3, q=2, name="a"), make_gradient_sets(6, p=2, q=4, name="b", seed=1))
            )
        ]
        artifact = FisherArtifact("ekfac", fit(sets, "ekfac"))
        raw = artifact.raw_scores(sets)
        assert raw.shape == (6, 2)
        assert raw[2, 1] == pytest.approx(quad_form(artifact.layers["b"], sets[2]["b"].grad), rel=1e-12)
