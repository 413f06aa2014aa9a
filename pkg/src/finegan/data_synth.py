"""Synthetic fine-grained datasets: classes split into look-alike subclasses.

Two renderings are supported. ``vector`` samples are a subclass prototype
plus Gaussian jitter in R^D. ``shapes16`` samples are 16x16 grayscale glyphs
whose shape encodes the class and whose intensity band encodes the
subclass, flattened to 256 values in [0, 1].
"""

from __future__ import annotations

import csv
import hashlib
import io
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, PreconditionError
from .numerics import l2_normalize

MODES = ("vector", "shapes16")
GLYPH = 16

COLORS = (
    "crimson", "azure", "golden", "olive", "violet", "amber",
    "teal", "scarlet", "ivory", "slate", "copper", "jade",
)
PARTS = (
    "crest", "wingbars", "tail", "breast", "nape", "bill",
    "throat", "mantle", "rump", "eyering", "flanks", "crown",
)


@dataclass
class Taxonomy:
    n_classes: int
    n_subclasses: int
    prototypes: np.ndarray  # [C*S x D], row index = class * S + subclass
    class_centers: np.ndarray
    sigma_within: float
    sigma_between: float

    @property
    def dim(self):
        return self.prototypes.shape[1]

    @property
    def n_labels(self):
        return self.n_classes * self.n_subclasses

    def caption(self, label):
        c, s = divmod(int(label), self.n_subclasses)
        return caption_text(c, s)


@dataclass
class Batch:
    x_real: np.ndarray
    captions: np.ndarray
    captions_mismatched: np.ndarray
    labels: np.ndarray
    mismatched_labels: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.x_real.shape[0]
        if not (self.captions.shape[0] == self.captions_mismatched.shape[0] == self.labels.shape[0] == n):
            raise PreconditionError("batch arrays disagree on the number of rows")


def caption_text(c, s):
    return f"class {c} variant {s} with {COLORS[s % len(COLORS)]} {PARTS[c % len(PARTS)]}"


def make_taxonomy(n_classes, n_subclasses, dim, sigma_between, sigma_within, rng) -> Taxonomy:
    if n_classes < 1 or n_subclasses < 1:
        raise PreconditionError("need at least one class and one subclass")
    if dim < 2:
        raise PreconditionError("data dimension must be >= 2")
    if not sigma_between > sigma_within > 0:
        raise PreconditionError("require sigma_between > sigma_within > 0")
    centers = rng.normal(0.0, 1.0, size=(n_classes, dim))
    offsets = rng.normal(0.0, sigma_between, size=(n_classes, n_subclasses, dim))
    protos = (centers[:, None, :] + offsets).reshape(n_classes * n_subclasses, dim)
    if protos.shape[0] > 1:
        d2 = np.sum((protos[:, None, :] - protos[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        if d2.min() <= 0.0:
            raise PreconditionError("generated prototypes are not distinct")
    return Taxonomy(n_classes, n_subclasses, protos, centers, float(sigma_within), float(sigma_between))


# --------------------------------------------------------------------------
# glyphs


def _glyph_mask(c):
    yy, xx = np.mgrid[0:GLYPH, 0:GLYPH] + 0.5
    cy = cx = GLYPH / 2
    # larger class indices reuse a shape at a smaller scale
    r = 6.0 - 1.5 * ((c // 6) % 3)
    dy, dx = yy - cy, xx - cx
    kind = c % 6
    if kind == 0:
        m = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif kind == 1:
        m = dy**2 + dx**2 <= r**2
    elif kind == 2:
        m = ((np.abs(dy) <= 1.5) & (np.abs(dx) <= r)) | ((np.abs(dx) <= 1.5) & (np.abs(dy) <= r))
    elif kind == 3:
        m = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    elif kind == 4:
        rr = np.sqrt(dy**2 + dx**2)
        m = (rr <= r) & (rr >= r - 2.0)
    else:
        m = ((np.abs(dy - dx) <= 1.5) | (np.abs(dy + dx) <= 1.5)) & (np.abs(dy) <= r)
    return m.astype(np.float64).reshape(-1)


def glyph_intensity(s, n_subclasses):
    """Foreground intensity band for subclass ``s``, within [0.3, 0.9]."""
    if n_subclasses == 1:
        return 0.6
    return 0.3 + 0.6 * s / (n_subclasses - 1)


def render_glyph(c, s, n_subclasses):
    return _glyph_mask(c) * glyph_intensity(s, n_subclasses)


# --------------------------------------------------------------------------
# captions


def _tokens(text):
    return re.findall(r"[a-z0-9]+", text.lower())


def embed_caption(text, dim=32):
    """Hashed bag-of-tokens caption vector with unit L2 norm.

    Each lowercase token is hashed (BLAKE2b) to a slot and a sign; the
    signed counts are normalised. Token order does not matter.
    """
    if not text or not text.strip():
        raise PreconditionError("caption text is empty")
    toks = _tokens(text)
    if not toks:
        raise PreconditionError(f"caption {text!r} has no tokens")
    v = np.zeros(dim)
    for tok in toks:
        h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "little")
        v[(h >> 1) % dim] += 1.0 if h & 1 else -1.0
    return l2_normalize(v)


def caption_pool(tax: Taxonomy, dim=32):
    """Caption vector for every subclass label, as a ``label -> vector`` dict."""
    return {k: embed_caption(tax.caption(k), dim) for k in range(tax.n_labels)}


def mismatch(labels, pool, rng):
    """Draw, for each row, a caption from a uniformly chosen *other* subclass.

    Returns ``(caption_vectors, mismatched_labels)``.
    """
    keys = np.array(sorted(pool), dtype=np.int64)
    if keys.size < 2:
        raise PreconditionError("cannot mismatch captions with fewer than two subclasses")
    labels = np.asarray(labels, dtype=np.int64)
    pos = np.searchsorted(keys, labels)
    if np.any(pos >= keys.size) or np.any(keys[np.minimum(pos, keys.size - 1)] != labels):
        raise PreconditionError("every label must have a caption in the pool")
    r = rng.integers(0, keys.size - 1, size=labels.shape[0])
    out_labels = keys[r + (r >= pos)]
    dim = len(next(iter(pool.values())))
    vectors = np.stack([pool[int(k)] for k in out_labels]) if labels.size else np.zeros((0, dim))
    return vectors, out_labels


# --------------------------------------------------------------------------
# sampling


def sample_x(tax: Taxonomy, labels, rng, mode="vector"):
    labels = np.asarray(labels, dtype=np.int64)
    if mode == "vector":
        noise = rng.normal(0.0, 1.0, size=(labels.shape[0], tax.dim))
        return tax.prototypes[labels] + tax.sigma_within * noise
    if mode == "shapes16":
        c, s = np.divmod(labels, tax.n_subclasses)
        base = np.stack([render_glyph(ci, si, tax.n_subclasses) for ci, si in zip(c, s)]) if labels.size else np.zeros((0, GLYPH * GLYPH))
        noise = rng.normal(0.0, 1.0, size=base.shape)
        return np.clip(base + tax.sigma_within * noise, 0.0, 1.0)
    raise PreconditionError(f"unknown mode {mode!r}; expected one of {MODES}")


def sample_batch(tax: Taxonomy, n, rng, mode="vector", caption_dim=32, pool=None) -> Batch:
    if n < 1:
        raise PreconditionError("batch size must be >= 1")
    if mode not in MODES:
        raise PreconditionError(f"unknown mode {mode!r}; expected one of {MODES}")
    pool = pool if pool is not None else caption_pool(tax, caption_dim)
    labels = rng.integers(0, tax.n_labels, size=n)
    x = sample_x(tax, labels, rng, mode)
    captions = np.stack([pool[int(k)] for k in labels])
    mis, mis_labels = mismatch(labels, pool, rng)
    return Batch(x, captions, mis, labels, mis_labels)


def split_classes(tax: Taxonomy, train_fraction, rng):
    """Class-level split; returns (train subclass labels, test subclass labels) as sets."""
    if not 0.0 < train_fraction < 1.0:
        raise PreconditionError("train fraction must lie strictly between 0 and 1")
    n_train = int(round(tax.n_classes * train_fraction))
    if n_train == 0 or n_train == tax.n_classes:
        raise PreconditionError(f"fraction {train_fraction} leaves one side of the split empty")
    perm = rng.permutation(tax.n_classes)
    S = tax.n_subclasses

    def labels_of(classes):
        return {int(c) * S + s for c in classes for s in range(S)}

    return labels_of(perm[:n_train]), labels_of(perm[n_train:])


# --------------------------------------------------------------------------
# on-disk datasets


@dataclass
class Dataset:
    ids: np.ndarray
    classes: np.ndarray
    subclasses: np.ndarray
    captions: list
    x: np.ndarray
    n_subclasses: int = None
    n_classes: int = None

    def __post_init__(self):
        if self.n_subclasses is None:
            self.n_subclasses = int(self.subclasses.max()) + 1 if len(self) else 0
        if self.n_classes is None:
            self.n_classes = int(self.classes.max()) + 1 if len(self) else 0

    def __len__(self):
        return int(self.ids.shape[0])

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def labels(self):
        return self.classes * self.n_subclasses + self.subclasses

    @property
    def n_labels(self):
        return self.n_classes * self.n_subclasses

    def caption_vectors(self, dim=32):
        """Per-row caption vectors, embedding each distinct caption once."""
        cache = {}
        for t in self.captions:
            if t not in cache:
                cache[t] = embed_caption(t, dim)
        if not self.captions:
            return np.zeros((0, dim))
        return np.stack([cache[t] for t in self.captions])

    def caption_pool(self, dim=32):
        """First caption seen for each subclass label, embedded."""
        pool = {}
        for k, text in zip(self.labels, self.captions):
            if int(k) not in pool:
                pool[int(k)] = embed_caption(text, dim)
        return pool

    def subset(self, rows):
        rows = np.asarray(rows)
        return Dataset(
            self.ids[rows], self.classes[rows], self.subclasses[rows],
            [self.captions[i] for i in rows], self.x[rows],
            n_subclasses=self.n_subclasses, n_classes=self.n_classes,
        )


def make_dataset(tax: Taxonomy, per_subclass, rng, mode="vector") -> Dataset:
    """``per_subclass`` samples of every subclass, grouped by label."""
    labels = np.repeat(np.arange(tax.n_labels), per_subclass)
    x = sample_x(tax, labels, rng, mode)
    c, s = np.divmod(labels, tax.n_subclasses)
    return Dataset(
        np.arange(labels.size), c, s, [tax.caption(k) for k in labels], x,
        n_subclasses=tax.n_subclasses, n_classes=tax.n_classes,
    )


def _quote(text):
    return '"' + text.replace('"', '""') + '"'


def save_csv(dataset: Dataset, path):
    buf = io.StringIO()
    buf.write(",".join(["id", "class", "subclass", "caption"] + [f"x{j}" for j in range(dataset.dim)]) + "\n")
    for i in range(len(dataset)):
        vals = ",".join("%.17g" % v for v in dataset.x[i])
        buf.write(f"{dataset.ids[i]},{dataset.classes[i]},{dataset.subclasses[i]},{_quote(dataset.captions[i])},{vals}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def load_csv(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError("file is empty; expected a header row", line=1) from None
    if header[:4] != ["id", "class", "subclass", "caption"]:
        raise DataFormatError("header must start with id,class,subclass,caption", line=1)
    dim = len(header) - 4
    if header[4:] != [f"x{j}" for j in range(dim)]:
        raise DataFormatError("data columns must be named x0..x{D-1}", line=1)
    ids, cls, sub, caps, rows = [], [], [], [], []
    for rec in reader:
        line = reader.line_num
        if not rec:
            continue
        if len(rec) != dim + 4:
            raise DataFormatError(f"expected {dim + 4} fields, found {len(rec)}", line=line)
        try:
            ids.append(int(rec[0]))
            cls.append(int(rec[1]))
            sub.append(int(rec[2]))
            rows.append([float(v) for v in rec[4:]])
        except ValueError as exc:
            raise DataFormatError(f"unparseable value ({exc})", line=line) from None
        if cls[-1] < 0 or sub[-1] < 0:
            raise DataFormatError("class and subclass must be non-negative", line=line)
        caps.append(rec[3])
    x = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return Dataset(np.array(ids, dtype=np.int64), np.array(cls, dtype=np.int64), np.array(sub, dtype=np.int64), caps, x)
