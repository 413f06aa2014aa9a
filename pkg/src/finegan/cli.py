"""Command-line entry point: gen-data, train, eval, sample, gradcheck.

Exit codes: 0 success, 1 I/O, 2 validation, 3 numeric abort, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np

from .data_synth import GLYPH, MODES, embed_caption, load_csv, make_dataset, make_taxonomy, save_csv
from .errors import CheckpointError, ConfigError, DataFormatError, DimensionError, NumericError, PreconditionError
from .gradcheck import run_gradcheck
from .metrics import EvalNets, evaluate
from .numerics import make_rng
from .trainer import ABLATIONS, TrainConfig, load_checkpoint, train

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4
RUN_KEYS = ("data", "out")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _key_line(text, key):
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def read_config(path):
    """Parse a flat JSON config; returns ``(train_fields, run_fields)``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INVALID, f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise CliError(EXIT_INVALID, f"{path}: line 1: expected a JSON object")
    run = {k: raw.pop(k) for k in RUN_KEYS if k in raw}
    try:
        TrainConfig.from_dict(raw)
    except ConfigError as exc:
        line = _key_line(text, exc.key) if exc.key else None
        where = f"line {line}: " if line else ""
        raise CliError(EXIT_INVALID, f"{path}: {where}config key '{exc.key}': {exc}") from exc
    return raw, run


def _load_data(path):
    try:
        return load_csv(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read data {path}: {exc.strerror or exc}") from exc
    except DataFormatError as exc:
        raise CliError(EXIT_INVALID, f"{path}: {exc}") from exc


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    except CheckpointError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    dim = args.dim
    if args.mode == "shapes16":
        if dim not in (None, GLYPH * GLYPH):
            raise CliError(EXIT_INVALID, f"shapes16 samples have {GLYPH * GLYPH} values; got --dim {dim}")
        dim = GLYPH * GLYPH
    dim = 64 if dim is None else dim
    if args.per_subclass < 1:
        raise CliError(EXIT_INVALID, "--per-subclass must be >= 1")
    tax_rng, data_rng = (make_rng(s) for s in np.random.SeedSequence(args.seed).spawn(2))
    tax = make_taxonomy(args.classes, args.subclasses, dim, args.sigma_between, args.sigma_within, tax_rng)
    ds = make_dataset(tax, args.per_subclass, data_rng, mode=args.mode)
    try:
        save_csv(ds, args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc.strerror or exc}") from exc
    print(f"classes={args.classes} subclasses={args.subclasses} samples={len(ds)}")


def cmd_train(args):
    fields, run = read_config(args.config) if args.config else ({}, {})
    data_path = args.data or run.get("data")
    out_dir = args.out or run.get("out")
    if not data_path or not out_dir:
        raise CliError(EXIT_INVALID, "both a data file and an output directory are required")
    dataset = _load_data(data_path)
    resume = _load_ckpt(args.resume) if args.resume else None
    cfg = TrainConfig.from_dict(fields)
    if args.ablation:
        cfg = cfg.with_ablation(args.ablation)
    if resume is not None:
        cfg = resume.config
        if dataset.dim != resume.meta["data_dim"]:
            raise CliError(EXIT_INVALID,
                           f"checkpoint data dim {resume.meta['data_dim']} != dataset dim {dataset.dim}")

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        effective = dict(cfg.to_dict(), data=str(data_path), out=str(out_dir), ablation=args.ablation)
        (out / "effective_config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc.strerror or exc}") from exc
    try:
        train(cfg, dataset, out, resume=resume, progress=lambda line: print(line, flush=True))
    except NumericError as exc:
        where = f" in {exc.component}" if exc.component else ""
        raise CliError(EXIT_NUMERIC, f"training aborted{where}: {exc}") from exc


def cmd_eval(args):
    ckpt = _load_ckpt(args.checkpoint)
    dataset = _load_data(args.data)
    cfg = ckpt.config
    if dataset.dim != ckpt.meta["data_dim"]:
        raise CliError(EXIT_INVALID,
                       f"checkpoint data dim {ckpt.meta['data_dim']} != dataset dim {dataset.dim}")
    n = args.n_samples or cfg.eval_samples
    nets = EvalNets.from_dataset(dataset, cfg.eval_seed)
    rep = evaluate(ckpt.generator(), dataset, nets, n, make_rng([cfg.eval_seed, 0xE]), cfg.caption_dim)
    row = rep.as_row()
    lines = [",".join(row), ",".join(v if isinstance(v, str) else "%.10g" % v for v in row.values())]
    try:
        Path(args.out).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc.strerror or exc}") from exc
    print(" ".join(f"{k}={v:.6g}" for k, v in row.items()))


def write_pgm(path, pixels):
    img = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8).reshape(GLYPH, GLYPH)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (GLYPH, GLYPH) + img.tobytes())


def cmd_sample(args):
    if not args.caption.strip():
        raise CliError(EXIT_INVALID, "--caption must not be empty")
    if args.n < 1:
        raise CliError(EXIT_INVALID, "--n must be >= 1")
    ckpt = _load_ckpt(args.checkpoint)
    cfg = ckpt.config
    t = np.tile(embed_caption(args.caption, cfg.caption_dim), (args.n, 1))
    x = ckpt.generator().sample(t, np.zeros(args.n, dtype=np.int64), make_rng(args.seed))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if cfg.mode == "shapes16":
            for i, row in enumerate(x):
                write_pgm(out / f"sample_{i:03d}.pgm", row)
        else:
            header = ",".join(f"x{j}" for j in range(x.shape[1]))
            body = "\n".join(",".join("%.17g" % v for v in row) for row in x)
            (out / "samples.csv").write_text(header + "\n" + body + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc.strerror or exc}") from exc
    print(f"wrote {args.n} samples to {out}")


def cmd_gradcheck(args):
    results = run_gradcheck(args.seed, args.n_seeds, flip=args.flip)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<12} worst_rel={r.worst_rel:.3e} tol={r.tolerance:.0e} checked={r.n_checked} {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError(EXIT_VERIFY, "gradient check failed: " + ", ".join(failed))


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="finegan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic two-level taxonomy dataset as CSV")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--subclasses", type=int, required=True)
    g.add_argument("--per-subclass", type=int, required=True)
    g.add_argument("--mode", choices=MODES, default="vector")
    g.add_argument("--dim", type=int, default=None, help="vector dimension (default 64; shapes16 is 256)")
    g.add_argument("--sigma-between", type=float, default=0.3)
    g.add_argument("--sigma-within", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train generator and discriminator")
    t.add_argument("--config", help="flat JSON of training fields (plus optional data/out)")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--ablation", choices=sorted(ABLATIONS))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint with FID and IS")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report CSV path")
    e.add_argument("--n-samples", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="generate samples for one caption")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--caption", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    c = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-seeds", type=int, default=20)
    c.add_argument("--flip", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (PreconditionError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
