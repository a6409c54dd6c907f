"""Command-line pipeline: synth, train, baseline, encode, eval, gradcheck.

Option precedence: built-in desk-scale defaults < ``key = value`` config
file (--config) < explicit command-line flags. Every subcommand is
deterministic given --seed and --threads. Exit codes: 0 ok, 1 runtime
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np
import torch

from . import catalog as cat
from .encoder import SemanticId
from .errors import VarsidError

# Desk-scale training defaults (the library-level TrainConfig carries the
# reference large-scale values instead).
DESK_DEFAULTS = {
    "batch": 256,
    "epochs": 1,
    "steps": None,
    "lr": 1e-3,
    "weight_decay": 1e-5,
    "maxlen": 5,
    "vocab": 64,
    "hidden": 64,
    "model_dim": 64,
    "n_layers": 2,
    "tau_min": 0.5,
    "beta_max": 0.02,
    "warmup_frac": 0.2,
    "lam": 2.0,
    "free_bits": 0.0,
    "sampling": "data-unigram",
    "seed": 0,
    "threads": 1,
}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = value
    return out


def _coerce(value: str, like):
    if like is None or isinstance(like, bool):
        return value
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def merge_options(args: argparse.Namespace) -> dict:
    opts = dict(DESK_DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in read_config_file(config_path).items():
            if key not in opts:
                raise ValueError(f"unknown config key {key!r}")
            like = DESK_DEFAULTS[key]
            opts[key] = _coerce(value, like if like is not None else 1)
    for key in opts:
        flag = getattr(args, key, None)
        if flag is not None:
            opts[key] = flag
    return opts


def train_config_from(opts: dict):
    from .trainer import TrainConfig

    return TrainConfig(
        batch_size=opts["batch"], epochs=opts["epochs"],
        learning_rate=opts["lr"], weight_decay=opts["weight_decay"],
        max_len=opts["maxlen"], vocab=opts["vocab"], hidden=opts["hidden"],
        model_dim=opts["model_dim"], n_layers=opts["n_layers"],
        tau_min=opts["tau_min"], beta_max=opts["beta_max"],
        warmup_frac=opts["warmup_frac"], lam=opts["lam"],
        free_bits=opts["free_bits"], seed=opts["seed"],
        sampling=opts["sampling"], max_steps=opts["steps"],
    )


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="override the epoch-derived step count")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--maxlen", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--model-dim", dest="model_dim", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--tau-min", dest="tau_min", type=float)
    p.add_argument("--beta-max", dest="beta_max", type=float)
    p.add_argument("--warmup-frac", dest="warmup_frac", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--free-bits", dest="free_bits", type=float)
    p.add_argument("--sampling", choices=["data-unigram", "catalog-uniform"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varsid",
                                     description="variable-length semantic IDs")
    parser.add_argument("--seed", type=int, help=f"RNG seed (default {DESK_DEFAULTS['seed']})")
    parser.add_argument("--threads", type=int,
                        help=f"torch thread count (default {DESK_DEFAULTS['threads']})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic Zipfian catalog")
    p.add_argument("--items", type=int, default=5000)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--zipf", type=float, default=1.1)
    p.add_argument("--clusters", type=int, default=200)
    p.add_argument("--cold-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the variable-length dVAE")
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="metrics log path (tab-separated, one line per step)")
    _add_train_flags(p)

    p = sub.add_parser("baseline", help="fit a baseline model")
    p.add_argument("kind", choices=["rkmeans", "reinforce"])
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--iters", type=int, default=25, help="rkmeans Lloyd sweeps")
    p.add_argument("--varlen", action="store_true", help="reinforce: EOS-based lengths")
    _add_train_flags(p)

    p = sub.add_parser("encode", help="emit semantic IDs as TSV")
    p.add_argument("--catalog", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", help="dVAE or reinforce checkpoint")
    group.add_argument("--rkmeans", help="R-KMeans model file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="write the metric report")
    p.add_argument("--catalog", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--rkmeans")
    p.add_argument("--budget", type=int, default=512)
    p.add_argument("--out", required=True, help="report path; buckets go to <out>.buckets.tsv")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--vocab", type=int, default=5)
    p.add_argument("--maxlen", type=int, default=3)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--hidden", type=int, default=8)

    return parser


def _load_model(args):
    from .baselines import load_rkmeans, load_reinforce
    from .errors import CorruptCheckpoint
    from .trainer import load_checkpoint

    if args.rkmeans:
        return load_rkmeans(args.rkmeans)
    try:
        return load_checkpoint(args.checkpoint)
    except CorruptCheckpoint:
        return load_reinforce(args.checkpoint)


def write_ids_tsv(ids: list[SemanticId], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, sid in enumerate(ids):
            f.write(f"{i}\t{sid.length}\t{' '.join(str(t) for t in sid.tokens)}\n")


def read_ids_tsv(path) -> list[SemanticId]:
    ids = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            _, length, toks = line.rstrip("\n").split("\t")
            ids.append(SemanticId(tokens=tuple(int(t) for t in toks.split()),
                                  length=int(length)))
    return ids


def cmd_synth(args, opts) -> int:
    c = cat.synth_zipf_catalog(args.items, args.dim, args.zipf, args.clusters,
                               args.cold_fraction, opts["seed"])
    cat.save_catalog(c, args.out)
    print(f"wrote {args.out}: {c.n_items} items, dim {c.dim}, "
          f"{int(c.cold_flags.sum())} cold")
    return 0


def cmd_train(args, opts) -> int:
    from .trainer import save_checkpoint, train

    catalog = cat.normalize_embeddings(cat.load_catalog(args.catalog))
    cfg = train_config_from(opts)
    log = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        state = train(catalog, cfg, log=log)
    finally:
        if log:
            log.close()
    save_checkpoint(state, args.out)
    print(f"wrote {args.out} after {state.step} steps")
    return 0


def cmd_baseline(args, opts) -> int:
    catalog = cat.normalize_embeddings(cat.load_catalog(args.catalog))
    if args.kind == "rkmeans":
        from .baselines import rkmeans_fit, save_rkmeans

        model = rkmeans_fit(catalog, opts["maxlen"], opts["vocab"], args.iters,
                            opts["seed"])
        save_rkmeans(model, args.out)
    else:
        from .baselines import reinforce_train, save_reinforce

        cfg = train_config_from(opts)
        log = open(args.log, "w", encoding="utf-8") if args.log else None
        try:
            state = reinforce_train(catalog, cfg, varlen=args.varlen, log=log)
        finally:
            if log:
                log.close()
        save_reinforce(state, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_encode(args, opts) -> int:
    from .evaluation import encode_catalog

    catalog = cat.normalize_embeddings(cat.load_catalog(args.catalog))
    model = _load_model(args)
    from .baselines import ReinforceState, reinforce_encode_batch

    if isinstance(model, ReinforceState):
        x = torch.from_numpy(catalog.embeddings).to(torch.float32)
        ids = reinforce_encode_batch(x, model)
    else:
        ids = encode_catalog(model, catalog)
    write_ids_tsv(ids, args.out)
    print(f"wrote {args.out}: {len(ids)} ids")
    return 0


def cmd_eval(args, opts) -> int:
    from .evaluation import evaluate, write_buckets, write_report

    catalog = cat.normalize_embeddings(cat.load_catalog(args.catalog))
    model = _load_model(args)
    report = evaluate(model, catalog, budget=args.budget, seed=opts["seed"])
    write_report(report, args.out)
    write_buckets(report.length_buckets, f"{args.out}.buckets.tsv")
    print(f"wrote {args.out} and {args.out}.buckets.tsv")
    return 0


def cmd_gradcheck(args, opts) -> int:
    from .trainer import ModelState, TrainConfig, grad_check, init_state

    cfg = TrainConfig(vocab=args.vocab, max_len=args.maxlen, hidden=args.hidden,
                      model_dim=16, n_layers=1, ff_mult=2, batch_size=1,
                      seed=opts["seed"], max_steps=1)
    rng = np.random.default_rng(opts["seed"])
    emb = rng.standard_normal((4, args.dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    catalog = cat.Catalog(embeddings=emb.astype(np.float32),
                          popularity=np.ones(4, dtype=np.uint64),
                          cold_flags=np.zeros(4, dtype=bool))
    state = init_state(catalog, cfg, dtype=torch.float64)
    x = torch.from_numpy(emb[:1])
    err = grad_check(state, x, eps=args.eps)
    print(f"max relative gradient error: {err:.3e} (threshold {args.threshold:.1e})")
    return 0 if err <= args.threshold else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "baseline": cmd_baseline,
    "encode": cmd_encode,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        opts = merge_options(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    torch.set_num_threads(opts["threads"])
    try:
        return COMMANDS[args.command](args, opts)
    except (VarsidError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
