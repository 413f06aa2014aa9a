"""Alternating discriminator/generator optimisation with a gated contrastive term."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .data_synth import Batch, Dataset, mismatch
from .errors import (
    ConfigError,
    MagicError,
    TruncatedCheckpointError,
    VersionError,
)
from .losses import LossBreakdown, LossWeights
from .metrics import EvalNets, evaluate
from .models import Discriminator, Generator
from .nn import AdamState, LrSchedule, adam_step, cosine_lr
from .numerics import make_rng
from .xbm import MemoryBank

ABLATIONS = {
    "base": dict(w_ce=0.0, w_cl=0.0),
    "classifier": dict(w_cl=0.0),
    "contrastive": dict(w_ce=0.0),
    "full": dict(),
}

HISTORY_COLUMNS = (
    "epoch", "loss_d_adv", "loss_d_ce", "loss_d_cl",
    "loss_g_adv", "loss_g_ce", "loss_g_cl", "fid", "is",
)


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 300
    steps_per_epoch: int = 10
    batch_size: int = 24
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    lr_min: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    contrastive_warmup_epochs: int | None = None  # None -> 10% of epochs
    contrastive_enabled: bool = True
    margin: float = 0.5
    xbm_capacity: int | None = None  # None -> 8 * batch_size
    w_adv: float = 1.0
    w_ce: float = 1.0
    w_cl: float = 1.0
    reduction: str = "mean"
    literal_signs: bool = False
    d_steps_per_g: int = 1
    z_dim: int = 16
    caption_dim: int = 32
    embed_dim: int = 16
    g_hidden: int = 64
    g_blocks: int = 3
    context_dim: int = 32
    d_hidden: int = 64
    mode: str = "vector"
    eval_every: int = 0
    eval_seed: int = 1234
    eval_samples: int = 2000

    def __post_init__(self):
        if self.contrastive_warmup_epochs is None:
            self.contrastive_warmup_epochs = int(0.1 * self.epochs)
        if self.xbm_capacity is None:
            self.xbm_capacity = 8 * self.batch_size
        self.validate()

    def validate(self):
        def bad(key, why):
            raise ConfigError(f"{key}: {why}", key=key)

        for key in ("lr_g", "lr_d", "lr_min"):
            if not getattr(self, key) > 0:
                bad(key, "learning rates must be > 0")
        for key in ("epochs", "contrastive_warmup_epochs", "eval_every"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        for key in ("steps_per_epoch", "batch_size", "d_steps_per_g", "z_dim", "caption_dim",
                    "embed_dim", "g_hidden", "g_blocks", "context_dim", "d_hidden"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        if self.epochs > 0 and self.contrastive_warmup_epochs >= self.epochs:
            bad("contrastive_warmup_epochs", "warmup must end before the last epoch")
        if self.batch_size > self.xbm_capacity:
            bad("xbm_capacity", "memory must hold at least one batch")
        if not 0.0 <= self.margin < 1.0:
            bad("margin", "must lie in [0, 1)")
        if self.reduction not in ("mean", "sum"):
            bad("reduction", "expected 'mean' or 'sum'")
        if self.mode not in ("vector", "shapes16"):
            bad("mode", "expected 'vector' or 'shapes16'")
        for key in ("w_adv", "w_ce", "w_cl"):
            if getattr(self, key) < 0:
                bad(key, "loss weights must be >= 0")

    @property
    def weights(self):
        return LossWeights(self.w_adv, self.w_ce, self.w_cl)

    @property
    def total_steps(self):
        return self.epochs * self.steps_per_epoch

    def with_ablation(self, name):
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}", key="ablation")
        return dataclasses.replace(self, **ABLATIONS[name])

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}", key=unknown[0])
        for f in dataclasses.fields(cls):
            if f.name in d and not _type_ok(d[f.name], f.type):
                raise ConfigError(f"{f.name}: expected {f.type}, got {d[f.name]!r}", key=f.name)
        return cls(**d)


def _type_ok(value, annotation):
    if value is None:
        return "None" in annotation
    if isinstance(value, bool):
        return annotation == "bool"
    if isinstance(value, int):
        return annotation.startswith(("int", "float"))
    if isinstance(value, float):
        return annotation == "float"
    return isinstance(value, str) and annotation == "str"


@dataclass
class EpochRecord:
    epoch: int
    d: LossBreakdown
    g: LossBreakdown
    fid: float = math.nan
    inception_score: float = math.nan

    def row(self):
        return (
            self.epoch, self.d.adv, self.d.ce, self.d.cl,
            self.g.adv, self.g.ce, self.g.cl, self.fid, self.inception_score,
        )


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)  # (iteration, lr_d, lr_g)

    def to_csv(self, path):
        lines = [",".join(HISTORY_COLUMNS)]
        for rec in self.records:
            vals = rec.row()
            lines.append(",".join([str(vals[0])] + ["%.10g" % v for v in vals[1:]]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def as_array(self):
        return np.array([r.row() for r in self.records], dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))

    @classmethod
    def from_array(cls, arr):
        hist = cls()
        for row in np.asarray(arr).reshape(-1, len(HISTORY_COLUMNS)):
            hist.records.append(EpochRecord(
                int(row[0]), LossBreakdown(*row[1:4], row[1] + row[2] + row[3]),
                LossBreakdown(*row[4:7], row[4] + row[5] + row[6]), row[7], row[8],
            ))
        return hist


# --------------------------------------------------------------------------
# training state


class TrainState:
    """Everything that evolves during training: networks, optimisers, memory, RNGs."""

    def __init__(self, cfg: TrainConfig, data_dim, n_labels):
        self.cfg = cfg
        init_rng, self.data_rng, self.model_rng = (make_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
        self.G = Generator(cfg.z_dim, cfg.caption_dim, data_dim, init_rng, hidden=cfg.g_hidden,
                           n_blocks=cfg.g_blocks, context_dim=cfg.context_dim, bounded=cfg.mode == "shapes16")
        self.D = Discriminator(data_dim, cfg.caption_dim, n_labels, init_rng, hidden=cfg.d_hidden,
                               embed_dim=cfg.embed_dim)
        self.opt_g = AdamState(cfg.adam_beta1, cfg.adam_beta2)
        self.opt_d = AdamState(cfg.adam_beta1, cfg.adam_beta2)
        self.bank = MemoryBank(cfg.xbm_capacity, cfg.embed_dim)
        self.iteration = 0
        self.epoch = 0
        self.d_updates = 0
        self.g_updates = 0
        self.history = TrainHistory()
        self.sched_d = LrSchedule(cfg.lr_d, cfg.total_steps, cfg.lr_min)
        self.sched_g = LrSchedule(cfg.lr_g, cfg.total_steps, cfg.lr_min)

    def gate_open(self, epoch=None):
        epoch = self.epoch if epoch is None else epoch
        return self.cfg.contrastive_enabled and epoch >= self.cfg.contrastive_warmup_epochs


class BatchSource:
    """Uniform row sampling from a dataset, with mismatched captions."""

    def __init__(self, dataset: Dataset, caption_dim):
        self.dataset = dataset
        self.captions = dataset.caption_vectors(caption_dim)
        self.pool = dataset.caption_pool(caption_dim)
        self.labels = dataset.labels

    def sample(self, n, rng) -> Batch:
        rows = rng.integers(0, len(self.dataset), size=n)
        labels = self.labels[rows]
        mis, mis_labels = mismatch(labels, self.pool, rng)
        return Batch(self.dataset.x[rows], self.captions[rows], mis, labels, mis_labels)


def train_step_d(batch: Batch, state: TrainState, lr, gate_open) -> LossBreakdown:
    """One discriminator update; fake samples are treated as constants.

    Real embeddings are enqueued before the contrastive term is evaluated,
    so the current batch is part of the memory it is compared against.
    """
    cfg, G, D = state.cfg, state.G, state.D
    w = cfg.weights
    n = batch.labels.shape[0]
    z = state.model_rng.standard_normal((n, cfg.z_dim))
    fake = G.forward(z, batch.captions)
    x = np.concatenate([batch.x_real, fake, batch.x_real])
    t = np.concatenate([batch.captions, batch.captions, batch.captions_mismatched])
    out = D.forward(x, t)
    real, fk, mis = slice(0, n), slice(n, 2 * n), slice(2 * n, 3 * n)

    state.bank.enqueue_batch(out.embeddings[real].copy(), batch.labels)

    adv, (g_r, g_f, g_m) = losses.hinge_d(out.scores[real], out.scores[fk], out.scores[mis])
    grad_scores = w.adv * np.concatenate([g_r, g_f, g_m])
    grad_probs = grad_emb = None
    ce = cl = 0.0
    if w.ce > 0:
        ce, (g_pf, g_pr) = losses.ce_d(out.probs[fk], out.probs[real], batch.labels,
                                      cfg.reduction, cfg.literal_signs)
        grad_probs = np.zeros_like(out.probs)
        grad_probs[real] = w.ce * g_pr
        grad_probs[fk] = w.ce * g_pf
    if gate_open and w.cl > 0:
        cl, g_e = losses.contrastive(out.embeddings[real], batch.labels, state.bank.contents(),
                                     cfg.margin, cfg.literal_signs)
        grad_emb = np.zeros_like(out.embeddings)
        grad_emb[real] = w.cl * g_e
    parts = losses.total_d(adv, ce, cl, w, gate_open)
    grads, _ = D.backward(grad_scores, grad_emb, grad_probs)
    adam_step(D.params(), grads, state.opt_d, lr)
    state.d_updates += 1
    return parts


def train_step_g(batch: Batch, state: TrainState, lr, gate_open) -> LossBreakdown:
    """One generator update through a frozen discriminator; the bank is only read."""
    cfg, G, D = state.cfg, state.G, state.D
    w = cfg.weights
    n = batch.labels.shape[0]
    z = state.model_rng.standard_normal((n, cfg.z_dim))
    fake = G.forward(z, batch.captions)
    out = D.forward(fake, batch.captions)
    adv, g_s = losses.hinge_g(out.scores)
    grad_probs = grad_emb = None
    ce = cl = 0.0
    if w.ce > 0:
        ce, g_p = losses.ce_g(out.probs, batch.labels, cfg.reduction)
        grad_probs = w.ce * g_p
    if gate_open and w.cl > 0:
        cl, g_e = losses.contrastive(out.embeddings, batch.labels, state.bank.contents(),
                                     cfg.margin, cfg.literal_signs)
        grad_emb = w.cl * g_e
    parts = losses.total_g(adv, ce, cl, w, gate_open)
    _, grad_x = D.backward(w.adv * g_s, grad_emb, grad_probs)
    adam_step(G.params(), G.backward(grad_x), state.opt_g, lr)
    state.g_updates += 1
    return parts


def _mean_breakdown(items):
    if not items:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0)
    arr = np.array([(b.adv, b.ce, b.cl, b.total) for b in items])
    return LossBreakdown(*(float(v) for v in arr.mean(axis=0)))


def run_epoch(state: TrainState, source: BatchSource):
    cfg = state.cfg
    gate = state.gate_open()
    d_parts, g_parts = [], []
    for _ in range(cfg.steps_per_epoch):
        lr_d = cosine_lr(state.sched_d, state.iteration)
        lr_g = cosine_lr(state.sched_g, state.iteration)
        state.history.lr_trace.append((state.iteration, lr_d, lr_g))
        for _ in range(cfg.d_steps_per_g):
            batch = source.sample(cfg.batch_size, state.data_rng)
            d_parts.append(train_step_d(batch, state, lr_d, gate))
        g_parts.append(train_step_g(batch, state, lr_g, gate))
        state.iteration += 1
    rec = EpochRecord(state.epoch, _mean_breakdown(d_parts), _mean_breakdown(g_parts))
    state.epoch += 1
    return rec


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None, resume=None, progress=None, eval_nets=None):
    """Run (or continue) training; returns ``(history, final_checkpoint)``.

    With ``out_dir`` set, ``history.csv`` is rewritten after every epoch and
    checkpoints are written at evaluation epochs and at the end.
    """
    if len(np.unique(dataset.labels)) < 2:
        raise ConfigError("training needs at least two subclasses", key="data")
    if resume is not None:
        state = restore_state(resume, dataset)
    else:
        state = TrainState(cfg, dataset.dim, dataset.n_labels)
    cfg = state.cfg
    source = BatchSource(dataset, cfg.caption_dim)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if cfg.eval_every and eval_nets is None:
        eval_nets = EvalNets.from_dataset(dataset, cfg.eval_seed)

    try:
        while state.epoch < cfg.epochs:
            rec = run_epoch(state, source)
            done = rec.epoch + 1
            evaluated = cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.epochs)
            if evaluated:
                rep = evaluate(state.G, dataset, eval_nets, cfg.eval_samples,
                               make_rng([cfg.eval_seed, rec.epoch]), cfg.caption_dim)
                rec.fid, rec.inception_score = rep.fid, rep.inception_score
            state.history.records.append(rec)
            if progress is not None:
                progress(f"epoch={rec.epoch} ld={rec.d.total:.6g} lg={rec.g.total:.6g} fid={rec.fid:.6g}")
            if out is not None:
                state.history.to_csv(out / "history.csv")
                if evaluated:
                    save_checkpoint(make_checkpoint(state), out / f"checkpoint_epoch{done}.fggn")
    finally:
        if out is not None:
            state.history.to_csv(out / "history.csv")
    ckpt = make_checkpoint(state)
    if out is not None:
        save_checkpoint(ckpt, out / "checkpoint.fggn")
    return state.history, ckpt


# --------------------------------------------------------------------------
# diagnostics used by the acceptance runs


def classifier_accuracy(D: Discriminator, dataset: Dataset, caption_dim=32):
    out = D.forward(dataset.x, dataset.caption_vectors(caption_dim))
    return float(np.mean(np.argmax(out.probs, axis=1) == dataset.labels))


def embedding_similarity_gap(G: Generator, D: Discriminator, dataset: Dataset, per_label, rng, caption_dim=32):
    """Mean same-subclass minus mean cross-subclass cosine of generated embeddings."""
    pool = dataset.caption_pool(caption_dim)
    labels = np.repeat(np.array(sorted(pool)), per_label)
    caps = np.stack([pool[int(k)] for k in labels])
    x = G.sample(caps, labels, rng)
    e = D.forward(x, caps).embeddings
    cos = e @ e.T
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    intra = cos[same & off_diag].mean()
    inter = cos[~same].mean()
    return float(intra), float(inter)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"FGGN"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict

    @property
    def config(self):
        return TrainConfig.from_dict(self.meta["config"])

    def generator(self):
        cfg = self.config
        G = Generator(cfg.z_dim, cfg.caption_dim, self.meta["data_dim"], make_rng(0), hidden=cfg.g_hidden,
                      n_blocks=cfg.g_blocks, context_dim=cfg.context_dim, bounded=cfg.mode == "shapes16")
        G.load_params({k[2:]: v for k, v in self.tensors.items() if k.startswith("G/")})
        return G

    def discriminator(self):
        cfg = self.config
        D = Discriminator(self.meta["data_dim"], cfg.caption_dim, self.meta["n_labels"], make_rng(0),
                          hidden=cfg.d_hidden, embed_dim=cfg.embed_dim)
        D.load_params({k[2:]: v for k, v in self.tensors.items() if k.startswith("D/")})
        return D


def _rng_state(rng):
    return rng.bit_generator.state


def _set_rng_state(state):
    rng = make_rng(0)
    rng.bit_generator.state = state
    return rng


def make_checkpoint(state: TrainState) -> Checkpoint:
    t = {}
    for prefix, net in (("G/", state.G), ("D/", state.D)):
        for k, v in net.params().items():
            t[prefix + k] = v.copy()
    for prefix, opt in (("adam_g/", state.opt_g), ("adam_d/", state.opt_d)):
        for k in opt.m:
            t[f"{prefix}m/{k}"] = opt.m[k].copy()
            t[f"{prefix}v/{k}"] = opt.v[k].copy()
    E, labels = state.bank.contents()
    t["xbm/E"] = E.reshape(-1, state.cfg.embed_dim)
    t["xbm/labels"] = labels.astype(np.float64)
    t["history"] = state.history.as_array()
    t["lr_trace"] = np.array(state.history.lr_trace, dtype=np.float64).reshape(-1, 3)
    meta = {
        "config": state.cfg.to_dict(),
        "data_dim": state.G.data_dim,
        "n_labels": state.D.n_labels,
        "iteration": state.iteration,
        "epoch": state.epoch,
        "d_updates": state.d_updates,
        "g_updates": state.g_updates,
        "adam_g_steps": state.opt_g.step_count,
        "adam_d_steps": state.opt_d.step_count,
        "data_rng": _rng_state(state.data_rng),
        "model_rng": _rng_state(state.model_rng),
    }
    return Checkpoint(t, meta)


def restore_state(ckpt: Checkpoint, dataset: Dataset = None) -> TrainState:
    cfg = ckpt.config
    meta = ckpt.meta
    if dataset is not None and (dataset.dim != meta["data_dim"] or dataset.n_labels != meta["n_labels"]):
        raise ConfigError(
            f"checkpoint expects data dim {meta['data_dim']} with {meta['n_labels']} labels, "
            f"dataset has dim {dataset.dim} with {dataset.n_labels} labels", key="data")
    state = TrainState(cfg, meta["data_dim"], meta["n_labels"])
    state.G.load_params({k[2:]: v for k, v in ckpt.tensors.items() if k.startswith("G/")})
    state.D.load_params({k[2:]: v for k, v in ckpt.tensors.items() if k.startswith("D/")})
    for prefix, opt in (("adam_g/", state.opt_g), ("adam_d/", state.opt_d)):
        for k, v in ckpt.tensors.items():
            if k.startswith(prefix + "m/"):
                opt.m[k[len(prefix) + 2:]] = v.copy()
            elif k.startswith(prefix + "v/"):
                opt.v[k[len(prefix) + 2:]] = v.copy()
    state.opt_g.step_count = meta["adam_g_steps"]
    state.opt_d.step_count = meta["adam_d_steps"]
    E = ckpt.tensors["xbm/E"]
    if E.shape[0]:
        state.bank.enqueue_batch(E, ckpt.tensors["xbm/labels"].astype(np.int64))
    state.history = TrainHistory.from_array(ckpt.tensors["history"])
    state.history.lr_trace = [(int(i), a, b) for i, a, b in ckpt.tensors["lr_trace"]]
    state.iteration = meta["iteration"]
    state.epoch = meta["epoch"]
    state.d_updates = meta["d_updates"]
    state.g_updates = meta["g_updates"]
    state.data_rng = _set_rng_state(meta["data_rng"])
    state.model_rng = _set_rng_state(meta["model_rng"])
    return state


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path):
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count != 1 else vals[0]


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicError(f"bad magic bytes {bytes(buf[:4])!r}; expected {MAGIC!r}")
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION)
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = r.u32(rank) if rank != 1 else (r.u32(),)
        dims = tuple(dims) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    return Checkpoint(tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
