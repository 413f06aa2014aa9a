"""Finite-difference verification of every analytic gradient in the package.

Isolated losses are checked against a relative tolerance of 1e-6; the two
composed objectives (discriminator and generator totals pushed through the
networks) against 1e-4. The memory bank is a fixed snapshot throughout, so
bank contents are constants, as they are during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .models import Discriminator, Generator
from .nn import finite_diff_check
from .numerics import l2_normalize, make_rng, softmax

ISOLATED_TOL = 1e-6
COMPOSED_TOL = 1e-4
COMPONENTS = ("hinge_d", "hinge_g", "ce_d", "ce_g", "contrastive", "composed_d", "composed_g")


@dataclass(frozen=True)
class ComponentResult:
    name: str
    worst_rel: float
    tolerance: float
    n_checked: int

    @property
    def passed(self):
        return self.worst_rel <= self.tolerance


def _away_from(x, kinks, gap=1e-3):
    """Nudge entries off the non-differentiable points of a hinge."""
    x = x.copy()
    for k in kinks:
        close = np.abs(x - k) < gap
        x[close] = k + np.where(x[close] >= k, gap, -gap) * 2
    return x


def _softmax_vjp(p, g):
    return p * (g - np.sum(p * g, axis=1, keepdims=True))


def _unit_rows(rng, n, d):
    return l2_normalize(rng.normal(size=(n, d)))


def _hinge_d(rng):
    s = {k: _away_from(rng.normal(size=6) * 1.5, (-1.0, 1.0)) for k in "rfm"}
    _, (gr, gf, gm) = losses.hinge_d(s["r"], s["f"], s["m"])
    return lambda: losses.hinge_d(s["r"], s["f"], s["m"])[0], s, {"r": gr, "f": gf, "m": gm}


def _hinge_g(rng):
    s = {"f": rng.normal(size=6)}
    _, g = losses.hinge_g(s["f"])
    return lambda: losses.hinge_g(s["f"])[0], s, {"f": g}


def _ce_d(rng):
    s = {"zf": rng.normal(size=(5, 4)), "zr": rng.normal(size=(5, 4))}
    y = rng.integers(0, 4, size=5)
    pf, pr = softmax(s["zf"]), softmax(s["zr"])
    _, (gf, gr) = losses.ce_d(pf, pr, y)
    grads = {"zf": _softmax_vjp(pf, gf), "zr": _softmax_vjp(pr, gr)}
    return lambda: losses.ce_d(softmax(s["zf"]), softmax(s["zr"]), y)[0], s, grads


def _ce_g(rng):
    s = {"z": rng.normal(size=(5, 4))}
    y = rng.integers(0, 4, size=5)
    p = softmax(s["z"])
    _, g = losses.ce_g(p, y)
    return lambda: losses.ce_g(softmax(s["z"]), y)[0], s, {"z": _softmax_vjp(p, g)}


def _contrastive(rng):
    alpha = 0.3
    mem = (_unit_rows(rng, 12, 5), rng.integers(0, 3, size=12))
    E = _unit_rows(rng, 4, 5)
    # keep every negative cosine clear of the margin kink
    for _ in range(100):
        cos = E @ mem[0].T
        if np.all(np.abs(cos - alpha) > 1e-3):
            break
        E = _unit_rows(rng, 4, 5)
    s = {"E": E}
    y = rng.integers(0, 3, size=4)
    _, g = losses.contrastive(E, y, mem, alpha)
    return lambda: losses.contrastive(s["E"], y, mem, alpha)[0], s, {"E": g}


def _small_nets(rng):
    G = Generator(3, 4, 5, rng, hidden=6, n_blocks=2, context_dim=3)
    D = Discriminator(5, 4, 3, rng, hidden=6, embed_dim=4)
    return G, D


def _world(rng, n=4):
    G, D = _small_nets(rng)
    w = {
        "z": rng.normal(size=(n, 3)),
        "t": rng.normal(size=(n, 4)),
        "t_mis": rng.normal(size=(n, 4)),
        "x": rng.normal(size=(n, 5)),
        "y": rng.integers(0, 3, size=n),
        "mem": (_unit_rows(rng, 10, 4), rng.integers(0, 3, size=10)),
    }
    return G, D, w


def _d_objective(G, D, w):
    n = w["y"].shape[0]
    fake = G.forward(w["z"], w["t"])
    out = D.forward(np.concatenate([w["x"], fake, w["x"]]), np.concatenate([w["t"], w["t"], w["t_mis"]]))
    r, f, m = slice(0, n), slice(n, 2 * n), slice(2 * n, 3 * n)
    adv, (gr, gf, gm) = losses.hinge_d(out.scores[r], out.scores[f], out.scores[m])
    ce, (gpf, gpr) = losses.ce_d(out.probs[f], out.probs[r], w["y"])
    cl, ge = losses.contrastive(out.embeddings[r], w["y"], w["mem"])
    grad_probs = np.zeros_like(out.probs)
    grad_probs[r], grad_probs[f] = gpr, gpf
    grad_emb = np.zeros_like(out.embeddings)
    grad_emb[r] = ge
    return adv + ce + cl, (np.concatenate([gr, gf, gm]), grad_emb, grad_probs)


def _g_objective(G, D, w):
    fake = G.forward(w["z"], w["t"])
    out = D.forward(fake, w["t"])
    adv, gs = losses.hinge_g(out.scores)
    ce, gp = losses.ce_g(out.probs, w["y"])
    cl, ge = losses.contrastive(out.embeddings, w["y"], w["mem"])
    return adv + ce + cl, (gs, ge, gp)


def _composed_d(rng):
    G, D, w = _world(rng)
    _, cot = _d_objective(G, D, w)
    grads, _ = D.backward(*cot)
    return lambda: _d_objective(G, D, w)[0], D.params(), grads


def _composed_g(rng):
    G, D, w = _world(rng)
    _, cot = _g_objective(G, D, w)
    _, grad_x = D.backward(*cot)
    grads = G.backward(grad_x)
    return lambda: _g_objective(G, D, w)[0], G.params(), grads


_BUILDERS = {
    "hinge_d": (_hinge_d, ISOLATED_TOL),
    "hinge_g": (_hinge_g, ISOLATED_TOL),
    "ce_d": (_ce_d, ISOLATED_TOL),
    "ce_g": (_ce_g, ISOLATED_TOL),
    "contrastive": (_contrastive, ISOLATED_TOL),
    "composed_d": (_composed_d, COMPOSED_TOL),
    "composed_g": (_composed_g, COMPOSED_TOL),
}


def run_gradcheck(seed=0, n_seeds=20, flip=None):
    """Check every component over ``n_seeds`` derived seeds.

    ``flip`` names a component whose analytic gradient is negated before
    comparison; it exists so the harness itself can be shown to fail.
    """
    results = []
    for name in COMPONENTS:
        build, tol = _BUILDERS[name]
        worst, checked = 0.0, 0
        for k in range(n_seeds):
            loss_fn, params, grads = build(make_rng([seed, k, COMPONENTS.index(name)]))
            if name == flip:
                grads = {key: -g for key, g in grads.items()}
            rep = finite_diff_check(loss_fn, params, grads, tol)
            worst = max(worst, rep.max_rel_error)
            checked += rep.n_checked
        results.append(ComponentResult(name, worst, tol, checked))
    return results
