import numpy as np
import pytest

from finegan.errors import DimensionError, StateError
from finegan.losses import contrastive, hinge_d
from finegan.models import Discriminator, Generator
from finegan.nn import finite_diff_check
from finegan.numerics import l2_normalize, make_rng


def small_g(seed=0, bounded=False):
    return Generator(3, 4, 5, make_rng(seed), hidden=6, n_blocks=2, context_dim=3, bounded=bounded)


def small_d(seed=0):
    return Discriminator(5, 4, 3, make_rng(seed), hidden=6, embed_dim=4)


def inputs(seed, n=4, z=3, t=4, x=5):
    rng = make_rng(seed)
    return rng.normal(size=(n, z)), rng.normal(size=(n, t)), rng.normal(size=(n, x))


class TestGenerator:
    def test_shape(self):
        G = Generator(16, 32, 64, make_rng(0))
        rng = make_rng(1)
        assert G.forward(rng.normal(size=(8, 16)), rng.normal(size=(8, 32))).shape == (8, 64)

    def test_heads_match_blocks(self):
        G = Generator(4, 4, 4, make_rng(0), n_blocks=5)
        assert len(G.gammas) == len(G.betas) == len(G.blocks) == 5

    def test_deterministic(self):
        z, t, _ = inputs(2)
        a = small_g(7).forward(z, t)
        b = small_g(7).forward(z, t)
        assert a.tobytes() == b.tobytes()

    def test_zero_context_weights(self):
        G = small_g(3)
        for k, v in G.params().items():
            if k.startswith(("ctx_", "gamma", "beta")) and k.endswith(".W"):
                v[...] = 0.0
        G.params()["ctx_c.b"][...] = 0.0
        z, t, _ = inputs(4)
        G.forward(z, t)
        _, hs, us, gs, ms, _ = G._cache
        assert all(not np.any(h) for h in hs)
        for k, (u, g, m) in enumerate(zip(us, gs, ms)):
            np.testing.assert_array_equal(g, np.broadcast_to(G.gammas[k].b, g.shape))
            np.testing.assert_array_equal(m, g * u + G.betas[k].b)

    def test_bounded_range(self):
        z, t, _ = inputs(5)
        y = small_g(5, bounded=True).forward(z * 10, t * 10)
        assert y.min() >= 0.0 and y.max() <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            small_g().forward(np.zeros((2, 3)), np.zeros((3, 4)))
        with pytest.raises(DimensionError):
            small_g().forward(np.zeros((2, 2)), np.zeros((2, 4)))

    def test_backward_before_forward(self):
        with pytest.raises(StateError):
            small_g().backward(np.zeros((1, 5)))

    def test_zero_cotangent(self):
        G = small_g()
        z, t, _ = inputs(1)
        G.forward(z, t)
        assert all(not np.any(g) for g in G.backward(np.zeros((4, 5))).values())

    @pytest.mark.parametrize("bounded", [False, True])
    def test_finite_differences(self, bounded):
        G = small_g(11, bounded)
        z, t, _ = inputs(12)
        c = make_rng(13).normal(size=(4, 5))

        def loss():
            return float(np.sum(G.forward(z, t) * c))

        loss()
        grads = G.backward(c)
        rep = finite_diff_check(loss, G.params(), grads, 1e-4)
        assert rep.passed, rep


class TestDiscriminator:
    def test_contracts(self):
        D = Discriminator(64, 32, 12, make_rng(0))
        rng = make_rng(1)
        out = D.forward(rng.normal(size=(9, 64)), rng.normal(size=(9, 32)))
        assert out.scores.shape == (9,)
        np.testing.assert_allclose(np.linalg.norm(out.embeddings, axis=1), 1.0, atol=1e-12, rtol=0)
        assert np.all(out.probs >= 0)
        np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-12, rtol=0)

    def test_dimension_error_names_both(self):
        with pytest.raises(DimensionError, match="5.*4.*7.*4"):
            small_d().forward(np.zeros((1, 7)), np.zeros((1, 4)))

    def test_backward_before_forward(self):
        with pytest.raises(StateError):
            small_d().backward(np.zeros(1))

    def test_zero_cotangents(self):
        D = small_d()
        _, t, x = inputs(2)
        D.forward(x, t)
        grads, gx = D.backward(np.zeros(4), np.zeros((4, 4)), np.zeros((4, 3)))
        assert not np.any(gx) and all(not np.any(g) for g in grads.values())

    def test_score_gradient_wrt_x(self):
        D = small_d(3)
        _, t, x = inputs(3)
        params = {"x": x}

        def loss():
            return float(np.sum(D.forward(params["x"], t).scores))

        loss()
        _, gx = D.backward(np.ones(4))
        rep = finite_diff_check(loss, params, {"x": gx}, 1e-4)
        assert rep.passed, rep

    def test_full_parameter_gradients(self):
        D = small_d(4)
        _, t, x = inputs(5)
        rng = make_rng(6)
        cs, ce, cp = rng.normal(size=4), rng.normal(size=(4, 4)), rng.normal(size=(4, 3))

        def loss():
            out = D.forward(x, t)
            return float(out.scores @ cs + np.sum(out.embeddings * ce) + np.sum(out.probs * cp))

        loss()
        grads, _ = D.backward(cs, ce, cp)
        rep = finite_diff_check(loss, D.params(), grads, 1e-4)
        assert rep.passed, rep

    def test_normalize_gradient_is_tangent(self):
        D = small_d(7)
        _, t, x = inputs(8)
        out = D.forward(x, t)
        p1, p2, pj, pr, e, norms, probs = D._cache
        ge = make_rng(9).normal(size=e.shape)
        g_v = (ge - e * np.sum(e * ge, axis=1, keepdims=True)) / norms
        assert np.max(np.abs(np.sum(g_v * out.embeddings, axis=1))) < 1e-10

    def test_scale_invariance(self):
        v = make_rng(10).normal(size=(5, 4))
        for s in (1e-3, 0.5, 7.0, 1e4):
            np.testing.assert_allclose(l2_normalize(s * v), l2_normalize(v), atol=1e-10, rtol=0)


def test_end_to_end_total_loss():
    """Hinge plus contrastive on a 4-sample batch, checked through both networks."""
    G, D = small_g(20), small_d(21)
    z, t, x = inputs(22)
    rng = make_rng(23)
    mem = (l2_normalize(rng.normal(size=(6, 4))), rng.integers(0, 3, size=6))
    labels = np.array([0, 1, 2, 1])

    def loss():
        fake = G.forward(z, t)
        real = D.forward(x, t)
        s_real, e_real = real.scores, real.embeddings
        s_fake = D.forward(fake, t).scores
        return hinge_d(s_real, s_fake, s_fake)[0] + contrastive(e_real, labels, mem)[0]

    loss()
    fake = G.forward(z, t)
    out_r = D.forward(x, t)
    _, (gr, gf, gm) = hinge_d(out_r.scores, np.zeros(4), np.zeros(4))
    _, ge = contrastive(out_r.embeddings, labels, mem)
    grads_r, _ = D.backward(gr, ge)
    out_f = D.forward(fake, t)
    _, (_, gf, gm) = hinge_d(out_r.scores, out_f.scores, out_f.scores)
    grads_f, gx = D.backward(gf + gm)
    grads_d = {k: grads_r[k] + grads_f[k] for k in grads_r}
    grads_g = G.backward(gx)

    rep_d = finite_diff_check(loss, D.params(), grads_d, 1e-4)
    rep_g = finite_diff_check(loss, G.params(), grads_g, 1e-4)
    assert rep_d.passed, rep_d
    assert rep_g.passed, rep_g
