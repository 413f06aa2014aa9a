"""Conditional generator and three-headed discriminator, with manual backprop.

Generator
    a_0 = lrelu(W_in [z; t])
    h_0 = 0,  h_k = tanh(W_h h_{k-1} + W_c t)             (shared context cell)
    a_k = lrelu(gamma_k(h_k) * (W_k a_{k-1}) + beta_k(h_k))   k = 1..K
    x   = W_out a_K            (vector mode; 0.5 * (tanh + 1) in bounded mode)

Discriminator
    f      = trunk(x)                          image-only features
    score  = w . lrelu(W_j [f; t])             caption-conditioned adversarial head
    r      = lrelu(W_red f)                    dimension reduction
    e      = normalize(W_emb r)                contrastive embedding (unit norm)
    probs  = softmax(W_cls r)                  auxiliary subclass classifier
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, StateError
from .nn import Linear, activation, activation_backward, glorot_uniform
from .numerics import l2_normalize, softmax


class Network:
    """Named-parameter bookkeeping shared by both networks."""

    def __init__(self):
        self._params = {}

    def _register(self, prefix, layer: Linear):
        self._params[f"{prefix}.W"] = layer.W
        self._params[f"{prefix}.b"] = layer.b
        return layer

    def params(self):
        """Live name -> array mapping; mutating an entry mutates the network."""
        return self._params

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self._params.items()}

    def load_params(self, values):
        for name, arr in values.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name}")
            if self._params[name].shape != np.shape(arr):
                raise DimensionError(f"{name}: shape {np.shape(arr)} != {self._params[name].shape}")
            self._params[name][...] = arr


def _put(grads, prefix, gW, gb):
    grads[f"{prefix}.W"] += gW
    grads[f"{prefix}.b"] += gb


class Generator(Network):
    def __init__(self, z_dim, caption_dim, data_dim, rng, hidden=64, n_blocks=3, context_dim=32, bounded=False):
        super().__init__()
        self.z_dim, self.caption_dim, self.data_dim = z_dim, caption_dim, data_dim
        self.hidden, self.n_blocks, self.context_dim = hidden, n_blocks, context_dim
        self.bounded = bounded
        self.inp = self._register("in", Linear(z_dim + caption_dim, hidden, rng))
        self.ctx_in = self._register("ctx_c", Linear(caption_dim, context_dim, rng))
        self.W_h = glorot_uniform(rng, context_dim, context_dim)
        self._params["ctx_h.W"] = self.W_h
        self.blocks, self.gammas, self.betas = [], [], []
        for k in range(n_blocks):
            self.blocks.append(self._register(f"block{k}", Linear(hidden, hidden, rng)))
            # scale head starts at the identity modulation
            self.gammas.append(self._register(f"gamma{k}", Linear(context_dim, hidden, rng, b=np.ones(hidden))))
            self.betas.append(self._register(f"beta{k}", Linear(context_dim, hidden, rng)))
        self.out = self._register("out", Linear(hidden, data_dim, rng))
        self._cache = None

    def forward(self, z, t):
        z = np.asarray(z, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if z.ndim != 2 or t.ndim != 2 or z.shape[0] != t.shape[0]:
            raise DimensionError(f"z {z.shape} and t {t.shape} must be 2-D with equal rows")
        if z.shape[1] != self.z_dim or t.shape[1] != self.caption_dim:
            raise DimensionError(f"expected z_dim={self.z_dim}, caption_dim={self.caption_dim}")
        pre0 = self.inp.forward(np.concatenate([z, t], axis=1))
        a = activation(pre0, "leaky_relu")
        c = self.ctx_in.forward(t)
        h = np.zeros((z.shape[0], self.context_dim))
        hs, us, gs, ms = [h], [], [], []
        for k in range(self.n_blocks):
            h = np.tanh(h @ self.W_h.T + c)
            gamma = self.gammas[k].forward(h)
            beta = self.betas[k].forward(h)
            u = self.blocks[k].forward(a)
            m = gamma * u + beta
            a = activation(m, "leaky_relu")
            hs.append(h)
            us.append(u)
            gs.append(gamma)
            ms.append(m)
        y = self.out.forward(a)
        if self.bounded:
            y = 0.5 * (np.tanh(y) + 1.0)
        self._cache = (pre0, hs, us, gs, ms, y)
        return y

    def backward(self, grad_x):
        """Parameter gradients for a cotangent on the generated samples."""
        if self._cache is None:
            raise StateError("generator backward called before forward")
        pre0, hs, us, gs, ms, y = self._cache
        grads = self.zero_grads()
        g = np.asarray(grad_x, dtype=np.float64)
        if g.shape != y.shape:
            raise DimensionError(f"gradient shape {g.shape} != output shape {y.shape}")
        if self.bounded:
            # y = (tanh(o) + 1) / 2  =>  dy/do = 2 y (1 - y)
            g = g * 2.0 * y * (1.0 - y)
        g_a, gW, gb = self.out.backward(g)
        _put(grads, "out", gW, gb)
        g_h_next = np.zeros_like(hs[0])
        g_c = np.zeros_like(hs[0])
        for k in reversed(range(self.n_blocks)):
            g_m = activation_backward(ms[k], g_a, "leaky_relu")
            g_h, gW, gb = self.gammas[k].backward(g_m * us[k])
            _put(grads, f"gamma{k}", gW, gb)
            g_hb, gW, gb = self.betas[k].backward(g_m)
            _put(grads, f"beta{k}", gW, gb)
            g_a, gW, gb = self.blocks[k].backward(g_m * gs[k])
            _put(grads, f"block{k}", gW, gb)
            h = hs[k + 1]
            g_pre = (g_h + g_hb + g_h_next) * (1.0 - h * h)
            grads["ctx_h.W"] += g_pre.T @ hs[k]
            g_h_next = g_pre @ self.W_h
            g_c += g_pre
        _, gW, gb = self.ctx_in.backward(g_c)
        _put(grads, "ctx_c", gW, gb)
        g_pre0 = activation_backward(pre0, g_a, "leaky_relu")
        _, gW, gb = self.inp.backward(g_pre0)
        _put(grads, "in", gW, gb)
        return grads

    def sample(self, captions, labels, rng):
        """Draw one sample per caption row with fresh standard-normal latents."""
        z = rng.standard_normal((captions.shape[0], self.z_dim))
        return self.forward(z, captions)


@dataclass
class DiscriminatorOutput:
    scores: np.ndarray       # [N]
    embeddings: np.ndarray   # [N x embed_dim], unit rows
    probs: np.ndarray        # [N x n_labels], rows sum to 1
    logits: np.ndarray


class Discriminator(Network):
    def __init__(self, data_dim, caption_dim, n_labels, rng, hidden=64, embed_dim=16):
        super().__init__()
        self.data_dim, self.caption_dim, self.n_labels = data_dim, caption_dim, n_labels
        self.hidden, self.embed_dim = hidden, embed_dim
        self.trunk1 = self._register("trunk1", Linear(data_dim, hidden, rng))
        self.trunk2 = self._register("trunk2", Linear(hidden, hidden, rng))
        self.joint = self._register("joint", Linear(hidden + caption_dim, hidden, rng))
        self.adv = self._register("adv", Linear(hidden, 1, rng))
        self.reduce = self._register("reduce", Linear(hidden, embed_dim, rng))
        self.embed = self._register("embed", Linear(embed_dim, embed_dim, rng))
        self.cls = self._register("cls", Linear(embed_dim, n_labels, rng))
        self._cache = None

    def forward(self, x, t) -> DiscriminatorOutput:
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if x.ndim != 2 or t.ndim != 2 or x.shape[0] != t.shape[0]:
            raise DimensionError(f"x {x.shape} and t {t.shape} must be 2-D with equal rows")
        if x.shape[1] != self.data_dim or t.shape[1] != self.caption_dim:
            raise DimensionError(
                f"expected data dim {self.data_dim} and caption dim {self.caption_dim}, "
                f"got {x.shape[1]} and {t.shape[1]}"
            )
        p1 = self.trunk1.forward(x)
        p2 = self.trunk2.forward(activation(p1, "leaky_relu"))
        f = activation(p2, "leaky_relu")
        pj = self.joint.forward(np.concatenate([f, t], axis=1))
        scores = self.adv.forward(activation(pj, "leaky_relu"))[:, 0]
        pr = self.reduce.forward(f)
        r = activation(pr, "leaky_relu")
        v = self.embed.forward(r)
        e = l2_normalize(v)
        logits = self.cls.forward(r)
        probs = softmax(logits)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        self._cache = (p1, p2, pj, pr, e, norms, probs)
        return DiscriminatorOutput(scores, e, probs, logits)

    def backward(self, grad_scores=None, grad_embeddings=None, grad_probs=None, grad_logits=None):
        """Backpropagate output cotangents; returns ``(param_grads, grad_x)``.

        Any omitted cotangent is treated as zero. ``grad_probs`` is pushed
        through the softmax; ``grad_logits`` (if given) is added after it.
        """
        if self._cache is None:
            raise StateError("discriminator backward called before forward")
        p1, p2, pj, pr, e, norms, probs = self._cache
        n = e.shape[0]
        grads = self.zero_grads()

        g_scores = np.zeros(n) if grad_scores is None else np.asarray(grad_scores, dtype=np.float64)
        g_pj_act, gW, gb = self.adv.backward(g_scores[:, None])
        _put(grads, "adv", gW, gb)
        g_pj = activation_backward(pj, g_pj_act, "leaky_relu")
        g_joint_in, gW, gb = self.joint.backward(g_pj)
        _put(grads, "joint", gW, gb)
        g_f = g_joint_in[:, : self.hidden].copy()

        g_logits = np.zeros_like(probs)
        if grad_probs is not None:
            gp = np.asarray(grad_probs, dtype=np.float64)
            g_logits += probs * (gp - np.sum(probs * gp, axis=1, keepdims=True))
        if grad_logits is not None:
            g_logits += grad_logits
        g_r, gW, gb = self.cls.backward(g_logits)
        _put(grads, "cls", gW, gb)

        g_v = np.zeros_like(e)
        if grad_embeddings is not None:
            ge = np.asarray(grad_embeddings, dtype=np.float64)
            # d normalize(v) = (I - e e^T) / |v|
            g_v = (ge - e * np.sum(e * ge, axis=1, keepdims=True)) / norms
        g_r_emb, gW, gb = self.embed.backward(g_v)
        _put(grads, "embed", gW, gb)
        g_r = g_r + g_r_emb

        g_pr = activation_backward(pr, g_r, "leaky_relu")
        g_f_red, gW, gb = self.reduce.backward(g_pr)
        _put(grads, "reduce", gW, gb)
        g_f += g_f_red

        g_p2 = activation_backward(p2, g_f, "leaky_relu")
        g_a1, gW, gb = self.trunk2.backward(g_p2)
        _put(grads, "trunk2", gW, gb)
        g_p1 = activation_backward(p1, g_a1, "leaky_relu")
        g_x, gW, gb = self.trunk1.backward(g_p1)
        _put(grads, "trunk1", gW, gb)
        return grads, g_x
