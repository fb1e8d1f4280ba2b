"""Command-line pipeline: gen-synth, train-kmeans, train-net, encode, classify, eval.

Settings come from flags, then a ``key = value`` config file (``--config``),
then built-in defaults. Exit status is 2 for bad flags and 1 for failures
while running a stage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import bownet, codebook, data, kernels, optim
from .featmap import FeatureMapSpec

log = logging.getLogger("bowrnn")

DEFAULTS = {
    "seed": 0,
    "channels": "concat",
    "codewords": 32,
    "assignment": "soft",
    "feature_map": "none",
    "map_samples": 2,
    "map_period": 0.5,
    "kernel": "none",
    "strategy": "scratch",
    "subsample": 0,
    "restarts": 8,
    "max_iterations": 100,
    "tolerance": 1e-6,
    "optimizer": "rprop",
    "learning_rate": 0.1,
    "batch_size": 0,
    "epochs": 500,
    # gen-synth
    "classes": 3,
    "dim": 8,
    "sequences": 200,
    "frames": 100,
    "rho": 0.3,
    "rare_per_class": 2,
    "spread": 5.0,
    "noise": 1.0,
    "rare_offset": 1.5,
    "test_fraction": 0.3,
}

_INT_KEYS = {"seed", "codewords", "map_samples", "subsample", "restarts",
             "max_iterations", "batch_size", "epochs", "classes", "dim",
             "sequences", "frames", "rare_per_class"}
_FLOAT_KEYS = {"map_period", "tolerance", "learning_rate", "rho", "spread",
               "noise", "rare_offset", "test_fraction"}


def _shared(p):
    g = p.add_argument_group("shared")
    g.add_argument("--seed", type=int)
    g.add_argument("--config", help="key = value settings file")
    g.add_argument("--channels", choices=["concat", "separate"])
    g.add_argument("--codewords", type=int)
    g.add_argument("--assignment", choices=["soft", "hard"])
    g.add_argument("--feature-map", choices=["none", "hellinger", "chi2", "intersection"])
    g.add_argument("--map-samples", type=int)
    g.add_argument("--map-period", type=float)
    g.add_argument("--kernel", choices=["none", "hellinger", "chi2", "intersection"])
    g.add_argument("--strategy", choices=["scratch", "init-linear", "retrain-top"])
    g.add_argument("--subsample", type=int, help="max frames per sequence (0: all)")
    g.add_argument("--out")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="bowrnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic rare-word dataset")
    _shared(p)
    for name, typ in [("classes", int), ("dim", int), ("sequences", int),
                      ("frames", int), ("rho", float), ("rare-per-class", int),
                      ("spread", float), ("noise", float), ("rare-offset", float),
                      ("test-fraction", float)]:
        p.add_argument(f"--{name}", type=typ)

    p = sub.add_parser("train-kmeans", help="fit a kMeans codebook")
    _shared(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--restarts", type=int)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--tolerance", type=float)
    _stats_flags(p, fit=True)

    p = sub.add_parser("train-net", help="train the recurrent bag-of-words network")
    _shared(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--init-codebook", "--codebook", dest="init_codebook",
                   help="codebook for init-linear / retrain-top")
    p.add_argument("--init-model", "--model", dest="init_model",
                   help="model for init-linear / retrain-top")
    p.add_argument("--optimizer", choices=["rprop", "sgd"])
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int, help="0: full batch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--log", help="training log file")
    _stats_flags(p, fit=True)

    p = sub.add_parser("encode", help="write visual-word histograms")
    _shared(p)
    p.add_argument("--manifest", required=True)
    _source_flags(p)
    _stats_flags(p)

    p = sub.add_parser("classify", help="predict labels for a manifest")
    _shared(p)
    p.add_argument("--manifest", required=True)
    _source_flags(p)
    p.add_argument("--expansion", help="BOWSVM1 one-vs-rest expansions (kernel mode)")
    _stats_flags(p)

    p = sub.add_parser("eval", help="accuracy and mAP of a predictions file")
    _shared(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True)
    return parser


def _stats_flags(p, fit=False):
    p.add_argument("--stats", help="apply z-score statistics from this file")
    if fit:
        p.add_argument("--save-stats", help="fit z-score statistics on the input and save them")


def _source_flags(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--codebook")


def read_config(path) -> dict:
    out = {}
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{i}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def resolve(args, parser) -> argparse.Namespace:
    """Fill unset flags from the config file, then from DEFAULTS."""
    conf = {}
    if getattr(args, "config", None):
        try:
            conf = read_config(args.config)
        except (OSError, ValueError) as exc:
            parser.error(str(exc))
    for key, default in DEFAULTS.items():
        if not hasattr(args, key) or getattr(args, key) is not None:
            continue
        value = conf.get(key, default)
        try:
            if key in _INT_KEYS:
                value = int(value)
            elif key in _FLOAT_KEYS:
                value = float(value)
        except ValueError:
            parser.error(f"config value for {key} is not a number: {value!r}")
        setattr(args, key, value)
    return args


def validate(args, parser):
    if args.command == "gen-synth":
        if not 0.0 <= args.rho <= 1.0:
            parser.error("--rho must lie in [0, 1]")
        for key in ("classes", "dim", "sequences", "frames", "codewords", "rare_per_class"):
            if getattr(args, key) < 1:
                parser.error(f"--{key.replace('_', '-')} must be positive")
        if not 0.0 <= args.test_fraction < 1.0:
            parser.error("--test-fraction must lie in [0, 1)")
    if getattr(args, "codewords", 1) < 1:
        parser.error("--codewords must be positive")
    if getattr(args, "subsample", 0) < 0:
        parser.error("--subsample must be non-negative")
    if getattr(args, "map_samples", 0) < 0 or getattr(args, "map_period", 1.0) <= 0:
        parser.error("--map-samples must be >= 0 and --map-period > 0")
    if args.command == "train-net":
        if args.epochs < 1:
            parser.error("--epochs must be positive")
        if args.strategy != "scratch" and not (args.init_codebook or args.init_model):
            parser.error(f"--strategy {args.strategy} needs --init-codebook or --init-model")
        if args.assignment == "hard" and args.strategy != "retrain-top":
            parser.error("--assignment hard can only be trained with --strategy retrain-top")
    if args.command == "classify" and args.kernel != "none" and not args.expansion:
        parser.error("--kernel needs --expansion")
    if args.command != "gen-synth" and args.command != "eval" and not args.out:
        parser.error("--out is required")


# -- helpers ---------------------------------------------------------------

def _map_spec(args):
    if args.feature_map == "none":
        return None
    return FeatureMapSpec(args.feature_map, args.map_samples, args.map_period)


def _channel_paths(path, k):
    return [path] if k == 1 else [f"{path}.ch{c}" for c in range(k)]


def _load(args, fit_stats=False):
    """Sequences and labels of ``--manifest`` after channel mode, subsampling
    and z-scoring."""
    manifest = data.read_manifest(args.manifest)
    if args.channels == "separate" and manifest.num_channels == 1:
        raise ValueError("--channels separate needs a multi-channel manifest")
    seqs, labels = data.load_dataset(manifest)
    if args.channels == "concat" and manifest.num_channels > 1:
        seqs = [s.concatenated() for s in seqs]
    if args.subsample:
        seqs = [data.subsample_uniform(s, args.subsample) for s in seqs]
    stats = None
    if getattr(args, "stats", None):
        stats = data.load_stats(args.stats)
    elif fit_stats and getattr(args, "save_stats", None):
        stats = data.zscore_fit(seqs)
        data.save_stats(stats, args.save_stats)
    if stats is not None:
        seqs = [data.zscore_apply(stats, s) for s in seqs]
    return seqs, labels, manifest


def _source_network(args, num_classes):
    if getattr(args, "model", None):
        return bownet.load_network(args.model)
    return bownet.network_from_codebooks(_read_codebooks(args, args.codebook), num_classes,
                                         _map_spec(args), rng=args.seed)


def _read_codebooks(args, base):
    paths = [base] if args.channels == "concat" else _codebook_paths(base)
    return [codebook.load_codebook(p) for p in paths]


def _codebook_paths(base):
    paths = []
    while os.path.exists(f"{base}.ch{len(paths)}"):
        paths.append(f"{base}.ch{len(paths)}")
    if not paths:
        raise FileNotFoundError(f"no per-channel codebooks {base}.ch0, ...")
    return paths


def _fmt(values):
    return " ".join(f"{v:.17g}" for v in values)


def write_histograms(path, hists):
    with open(path, "w") as f:
        f.write(f"BOWHIST1 {len(hists)} {len(hists[0]) if hists else 0}\n")
        for h in hists:
            f.write(_fmt(h) + "\n")


def read_histograms(path) -> np.ndarray:
    with open(path) as f:
        lines = f.read().splitlines()
    head = lines[0].split()
    if len(head) != 3 or head[0] != "BOWHIST1":
        raise ValueError(f"{path}: not a BOWHIST1 file")
    n, m = int(head[1]), int(head[2])
    arr = np.array([ln.split() for ln in lines[1:1 + n]], dtype=np.float64).reshape(n, m)
    return arr


def write_predictions(path, preds, scores):
    with open(path, "w") as f:
        f.write(f"BOWPRED1 {len(preds)} {scores.shape[1]}\n")
        for y, row in zip(preds, scores):
            f.write(f"{y} {_fmt(row)}\n")


def read_predictions(path):
    with open(path) as f:
        lines = f.read().splitlines()
    head = lines[0].split()
    if len(head) != 3 or head[0] != "BOWPRED1":
        raise ValueError(f"{path}: not a BOWPRED1 file")
    n, c = int(head[1]), int(head[2])
    rows = [ln.split() for ln in lines[1:1 + n]]
    if len(rows) != n or any(len(r) != c + 1 for r in rows):
        raise ValueError(f"{path}: malformed predictions")
    preds = np.array([int(r[0]) for r in rows])
    scores = np.array([r[1:] for r in rows], dtype=np.float64).reshape(n, c)
    return preds, scores


# -- commands --------------------------------------------------------------

def cmd_gen_synth(args):
    spec = data.SyntheticSpec(
        classes=args.classes, codewords=args.codewords, dim=args.dim,
        sequences=args.sequences, frames=args.frames, rho=args.rho, seed=args.seed,
        rare_per_class=args.rare_per_class, spread=args.spread, noise=args.noise,
        rare_offset=args.rare_offset, test_fraction=args.test_fraction)
    out = args.out or "synthetic"
    ds = data.generate_synthetic(spec)
    paths = data.write_synthetic(ds, out)
    n_test = int(ds.is_test.sum())
    print(f"wrote {spec.sequences} sequences ({spec.sequences - n_test} train, "
          f"{n_test} test) to {out}")
    print(f"classes {spec.classes} dim {spec.dim} codewords {spec.codewords} "
          f"frames {spec.frames} rho {spec.rho:g} seed {spec.seed}")
    for split in ("train", "test", "all"):
        print(f"manifest {split} {paths[split]}")


def cmd_train_kmeans(args):
    seqs, _, manifest = _load(args, fit_stats=True)
    k = 1 if args.channels == "concat" else manifest.num_channels
    cfg = codebook.KMeansConfig(args.codewords, args.restarts, args.max_iterations,
                                args.tolerance, args.seed)
    for c, path in enumerate(_channel_paths(args.out, k)):
        pooled = np.vstack([s.channels[c] for s in seqs])
        cb, runs = codebook.kmeans_fit(pooled, cfg, return_runs=True)
        codebook.save_codebook(cb, path)
        best = min(r.sse for r in runs)
        print(f"channel {c}: {pooled.shape[0]} vectors, {cb.size} words, sse {best:.6g} -> {path}")


def cmd_train_net(args):
    seqs, labels, manifest = _load(args, fit_stats=True)
    strategy = args.strategy.replace("-", "_")
    spec = _map_spec(args)
    source = None
    if args.init_model:
        source = bownet.load_network(args.init_model)
    elif args.init_codebook:
        source = _read_codebooks(args, args.init_codebook)
    if isinstance(source, bownet.BowNetwork):
        m = source.num_words
    elif source is not None:
        m = source[0].size
    else:
        m = args.codewords
    dims = seqs[0].dims
    net = optim.initial_network(strategy, dims, m, manifest.num_classes, spec, source, args.seed)
    cfg = optim.TrainConfig(
        strategy=strategy, optimizer=args.optimizer, learning_rate=args.learning_rate,
        batch_size=args.batch_size or None, max_epochs=args.epochs,
        tolerance=args.tolerance, seed=args.seed, assignment=args.assignment)
    net, tlog = optim.train(net, seqs, labels, cfg)
    bownet.save_network(net, args.out)
    if args.log:
        tlog.write(args.log)
    best = tlog.best_epoch
    print(f"trained {strategy}: {len(tlog.losses)} epochs ({tlog.stopped}), "
          f"best epoch {best} loss {tlog.losses[best - 1]:.6g} "
          f"accuracy {tlog.accuracies[best - 1]:.4f} -> {args.out}")


def cmd_encode(args):
    seqs, _, manifest = _load(args)
    net = _source_network(args, manifest.num_classes)
    per_channel = [bownet.encode_channels(net, s, args.assignment) for s in seqs]
    paths = _channel_paths(args.out, net.num_channels)
    for c, path in enumerate(paths):
        write_histograms(path, [np.asarray(h[c]) for h in per_channel])
    print(f"encoded {len(seqs)} sequences ({args.assignment}) -> {', '.join(paths)}")


def cmd_classify(args):
    seqs, _, manifest = _load(args)
    net = _source_network(args, manifest.num_classes)
    if args.kernel == "none":
        if args.codebook:
            raise ValueError("classification without --kernel needs a trained --model")
        scores = np.array([bownet.forward(net, s, args.assignment) for s in seqs])
    else:
        exps = kernels.load_expansions(args.expansion)
        if any(e.kind != args.kernel for e in exps):
            raise ValueError("--kernel does not match the expansion file")
        scores = []
        for s in seqs:
            h = np.concatenate([np.asarray(x) for x in
                                bownet.encode_channels(net, s, args.assignment)])
            scores.append([kernels.svm_decision(e, h) for e in exps])
        scores = np.array(scores)
    preds = np.argmax(scores, axis=1) + 1
    write_predictions(args.out, preds, scores)
    print(f"classified {len(seqs)} sequences -> {args.out}")


def cmd_eval(args):
    manifest = data.read_manifest(args.manifest)
    preds, scores = read_predictions(args.predictions)
    labels = manifest.labels
    if preds.size != labels.size:
        raise ValueError("predictions and manifest differ in length")
    acc = data.accuracy(preds, labels)
    mAP = data.mean_average_precision(scores, labels)
    print(f"accuracy {acc:.6f}")
    print(f"mAP {mAP:.6f}")
    if args.out:
        with open(args.out, "w") as f:
            f.write(json.dumps({"accuracy": acc, "mAP": mAP, "n": int(labels.size)},
                               sort_keys=True) + "\n")


COMMANDS = {
    "gen-synth": ("generate", cmd_gen_synth),
    "train-kmeans": ("kmeans training", cmd_train_kmeans),
    "train-net": ("network training", cmd_train_net),
    "encode": ("encoding", cmd_encode),
    "classify": ("classification", cmd_classify),
    "eval": ("evaluation", cmd_eval),
}


def _limit_threads():
    n = os.environ.get("BOWRNN_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    resolve(args, parser)
    validate(args, parser)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage, fn = COMMANDS[args.command]
    limiter = _limit_threads()
    try:
        fn(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"bowrnn {args.command}: error during {stage}: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()
    return 0


if __name__ == "__main__":
    sys.exit(main())
