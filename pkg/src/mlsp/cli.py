"""``mlsp`` command line: extract, train, evaluate, predict, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Options may also come from ``--config FILE`` (``key = value`` lines, keys
spelled like the long options); flags given on the command line win over
the file, which wins over built-in defaults.
"""
import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .backbone import ActivationFormatError, known_profiles, load_profile_file
from .augment import views
from .heads import ARCHITECTURES, DEFAULT_DROPOUT, FEATURE_KIND, HeadSpec, build_head
from .metrics import MissingLabels, UndefinedCorrelation, evaluate, predict_aggregate_batch
from .nn import CheckpointError, NonFiniteGradientError, load_checkpoint, save_checkpoint
from .pipeline import FilesBackbone, SyntheticBackbone, extract_features
from .pooling import NARROW, WIDE, pool
from .ppm import read_ppm
from .store import FeatureStore, InMemoryFeatures, StoreError, read_manifest, store_validate
from .trainer import LabelTable, NumericError, TrainConfig, TrainingError, train

log = logging.getLogger("mlsp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# Argument parsing ---------------------------------------------------------

def _blocks(text):
    if text in (None, "", "all"):
        return None
    head, _, k = text.partition(":")
    if head != "last" or not k.isdigit() or int(k) < 1:
        raise argparse.ArgumentTypeError(f"block subset must be 'last:K' or 'all', got {text!r}")
    return int(k)


def _dropout(text):
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dropout takes three comma-separated rates")
    return tuple(parts)


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common(p):
    p.add_argument("--config", help="key=value file providing option defaults")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics for bit-reproducible output")
    p.add_argument("--profiles", help="JSON file registering extra backbone profiles")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="mlsp", description="Aesthetic score heads on multi-level "
                     "spatially pooled features.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("extract", help="extract MLSP features into a store")
    _common(p)
    p.add_argument("--manifest", required=True, help="CSV with header image_id,filename")
    p.add_argument("--root", help="directory the manifest filenames are relative to "
                                  "(default: the manifest's directory)")
    p.add_argument("--backbone", default="synthetic:inception-v3:0",
                   help="synthetic[:profile[:seed]] or files:<profile>")
    p.add_argument("--kind", choices=(NARROW, WIDE), default=NARROW)
    p.add_argument("--aug", type=int, choices=(8, 1), default=8)
    p.add_argument("--store", required=True, help="output store path")
    p.add_argument("--failures", help="CSV listing images that were skipped")
    p.add_argument("--workers", type=int, default=1, help="extraction processes")

    p = sub.add_parser("train", help="train a head on a feature store")
    _common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--labels", required=True, help="CSV with header image_id,mos")
    p.add_argument("--arch", choices=ARCHITECTURES[:-1], default="single_3fc")
    p.add_argument("--blocks", type=_blocks, default=None, help="last:K block subset")
    p.add_argument("--x", type=int, default=None, help="first 3FC width")
    p.add_argument("--kernels", type=int, default=1024, help="pool_3fc kernels per column")
    p.add_argument("--dropout", type=_dropout, default=DEFAULT_DROPOUT)
    p.add_argument("--ids", help="file with the image ids to train on (default: all)")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--min-lr", type=float, default=1e-6)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--lr-period", type=int, default=20)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("--init-output-bias", type=_bool, default=True)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--history", help="history CSV (default: <checkpoint>.history.csv)")

    p = sub.add_parser("evaluate", help="score a checkpoint against labels")
    _common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ids", help="file with the image ids to evaluate (default: all)")
    p.add_argument("--threshold", type=float, default=5.0)
    p.add_argument("--sweep", action="store_true", help="also write the threshold sweep CSV")
    p.add_argument("--report", help="output prefix for report files")

    p = sub.add_parser("predict", help="predict scores for a store or an image")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--store")
    src.add_argument("--image", help="PPM image, run through the synthetic backbone")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--backbone", default=None,
                   help="synthetic backbone for --image (default: as recorded at training)")
    p.add_argument("--aug", type=int, choices=(8, 1), default=8)
    p.add_argument("--ids", help="restrict a store prediction to these ids")
    p.add_argument("--out", help="CSV output (default: standard output)")

    p = sub.add_parser("inspect", help="print store header, statistics and defects")
    _common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--sample", type=int, default=256, help="records scanned for stats")

    p = sub.add_parser("synth-corpus", help="write a synthetic image corpus with labels")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=2000)
    return parser


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    return None


def _config_defaults(sub, command, path):
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_config(path).items():
        if key in ("config", "help") or key not in actions:
            raise UsageError(f"{path}: unknown option {key!r} for {command}")
        act = actions[key]
        if isinstance(act, argparse._StoreTrueAction):
            defaults[key] = _bool(raw)
            continue
        try:
            value = act.type(raw) if act.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}: bad value for {key}: {exc}") from None
        if act.choices is not None and value not in act.choices:
            raise UsageError(f"{path}: {key} must be one of {list(act.choices)}")
        defaults[key] = value
    # Options the file supplies are no longer required on the command line.
    for key in defaults:
        actions[key].required = False
    for group in sub._mutually_exclusive_groups:
        if any(a.dest in defaults for a in group._group_actions):
            group.required = False
    return defaults


def parse_args(argv):
    argv = list(argv)
    parser = build_parser()
    command = next((a for a in argv if not a.startswith("-")), None)
    sub = _subparser(parser, command) if command else None
    if sub is not None:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv[argv.index(command) + 1:])
        if known.config:
            sub.set_defaults(**_config_defaults(sub, command, known.config))
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage().strip())
    return args


# Helpers ----------------------------------------------------------------

def _need_file(path, what):
    if not path or not os.path.isfile(path):
        raise DataError(f"{what} not found: {path}")
    return path


def _out_dir_ok(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise DataError(f"output directory does not exist: {parent}")


def read_ids(path):
    """Image ids, one per line; a CSV with an ``image_id`` column also works."""
    _need_file(path, "id list")
    ids = []
    with open(path) as fh:
        for line in fh:
            field = line.split(",", 1)[0].strip()
            if not field or field == "image_id" or field.startswith("#"):
                continue
            ids.append(int(field))
    return ids


def _load_labels(path):
    _need_file(path, "labels")
    return LabelTable.from_csv(path)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 22), b""):
            h.update(chunk)
    return h.hexdigest()


def meta_path(checkpoint):
    return checkpoint + ".meta.json"


def load_model(checkpoint):
    """Rebuild the head recorded next to ``checkpoint`` and load its weights."""
    _need_file(checkpoint, "checkpoint")
    _need_file(meta_path(checkpoint), "checkpoint metadata")
    with open(meta_path(checkpoint)) as fh:
        meta = json.load(fh)
    spec = HeadSpec.from_dict(meta["head"])
    model = build_head(spec)
    weights, _ = load_checkpoint(checkpoint)
    try:
        model.set_weights(weights)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{checkpoint}: weights do not fit the recorded head ({exc})")
    return model, spec, meta


def _check_compatible(spec, store, store_path, model=None):
    kind = FEATURE_KIND[spec.architecture]
    if kind != store.kind:
        raise DataError(f"{spec.architecture} needs {kind} features but {store_path} holds "
                        f"{store.kind} features")
    if spec.profile != store.header.profile and spec.b is None:
        raise DataError(f"head was built for profile {spec.profile!r}, store was extracted "
                        f"with {store.header.profile!r}")
    if model is not None and tuple(store.feature_shape) != model.input_shape:
        raise DataError(f"checkpoint expects inputs {model.input_shape}, {store_path} holds "
                        f"{tuple(store.feature_shape)}")


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


# Subcommands -------------------------------------------------------------

def cmd_extract(args):
    _need_file(args.manifest, "manifest")
    _out_dir_ok(args.store)
    root = args.root or os.path.dirname(os.path.abspath(args.manifest))
    if args.backbone.startswith("files:"):
        backbone = FilesBackbone(args.backbone.split(":", 1)[1], root)
    else:
        try:
            backbone = SyntheticBackbone.parse(args.backbone)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    rows = read_manifest(args.manifest)
    if not rows:
        raise DataError(f"{args.manifest}: no images listed")
    if args.workers < 1:
        raise UsageError(f"--workers must be >= 1, got {args.workers}")
    result = extract_features(rows, backbone, args.kind, args.aug, args.store, root=root,
                              workers=args.workers)
    if args.failures:
        _write(args.failures, "image_id,reason\n" + "".join(
            f"{i},{json.dumps(r)}\n" for i, r in result.failures))
    log.info("wrote %s: %d images, %d records, %d skipped, %d fp16 overflows",
             args.store, result.images, result.records, len(result.failures), result.overflow)
    print(f"{args.store}: {result.images} images, {result.records} records, "
          f"{len(result.failures)} skipped")
    return EXIT_OK


def cmd_train(args):
    _need_file(args.store, "store")
    labels = _load_labels(args.labels)
    _out_dir_ok(args.checkpoint)
    store = FeatureStore(args.store)
    try:
        spec = HeadSpec(architecture=args.arch, profile=store.header.profile or "inception-v3",
                        x=args.x, dropout=args.dropout, blocks=args.blocks,
                        kernels=args.kernels, seed=args.seed)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc).strip("'\"")) from None
    if spec.profile not in known_profiles():
        spec.b = store.header.b
    _check_compatible(spec, store, args.store)
    config = TrainConfig(lr=args.lr, min_lr=args.min_lr, batch_size=args.batch_size,
                         max_epochs=args.max_epochs, patience=args.patience,
                         lr_period=args.lr_period, seed=args.seed,
                         val_fraction=args.val_fraction, init_output_bias=args.init_output_bias)
    ids = read_ids(args.ids) if args.ids else None
    model = build_head(spec)
    best, history = train(model, store, labels, config, ids=ids)
    save_checkpoint(args.checkpoint, best)
    hist_path = args.history or args.checkpoint + ".history.csv"
    history.to_csv(hist_path)
    meta = {"head": spec.to_dict(), "feature_kind": store.kind, "config": vars(config),
            "seed": args.seed, "store": os.path.basename(args.store),
            "store_sha256": file_sha256(args.store), "backbone_profile": store.header.profile,
            "best_epoch": history.best_epoch, "best_val_loss": history.best_val_loss}
    _write(meta_path(args.checkpoint), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"best epoch {history.best_epoch}, validation MSE {history.best_val_loss:.5f}; "
          f"wrote {args.checkpoint}")
    return EXIT_OK


def cmd_evaluate(args):
    _need_file(args.store, "store")
    labels = _load_labels(args.labels)
    model, spec, _ = load_model(args.checkpoint)
    store = FeatureStore(args.store)
    _check_compatible(spec, store, args.store, model)
    ids = read_ids(args.ids) if args.ids else None
    report = evaluate(model, store, labels, threshold=args.threshold, ids=ids)
    print(report.table())
    if args.report:
        _out_dir_ok(args.report)
        _write(args.report + ".txt", report.table() + "\n")
        _write(args.report + ".summary.csv", report.summary_csv())
        _write(args.report + ".images.csv", report.per_image_csv())
        if args.sweep:
            _write(args.report + ".sweep.csv", report.sweep_csv())
    elif args.sweep:
        print(report.sweep_csv(), end="")
    return EXIT_OK


def cmd_predict(args):
    model, spec, meta = load_model(args.checkpoint)
    kind = FEATURE_KIND[spec.architecture]
    if args.store:
        _need_file(args.store, "store")
        source = FeatureStore(args.store)
        _check_compatible(spec, source, args.store, model)
        ids = read_ids(args.ids) if args.ids else [int(i) for i in source.ids]
    else:
        image = read_ppm(_need_file(args.image, "image"))
        backbone_spec = args.backbone or f"synthetic:{meta.get('backbone_profile', spec.profile)}:0"
        try:
            backbone = SyntheticBackbone.parse(backbone_spec)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        feats = [pool(backbone.activations(image, v), kind).values for v in views(args.aug)]
        values = np.stack(feats)
        if kind == NARROW:
            values = values.reshape(len(feats), -1)
        source = InMemoryFeatures([0], values[None], kind)
        ids = [0]
    scores = predict_aggregate_batch(model, source, ids)
    if args.image:
        lines = ["image,prediction", f"{args.image},{float(scores[0])!r}"]
    else:
        lines = ["image_id,prediction"] + [f"{i},{s!r}" for i, s in zip(ids, scores.tolist())]
    text = "\n".join(lines) + "\n"
    if args.out:
        _out_dir_ok(args.out)
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect(args):
    _need_file(args.store, "store")
    defects = store_validate(args.store, sample=args.sample)
    try:
        store = FeatureStore(args.store)
    except StoreError as exc:
        print(f"store unreadable: {exc}")
        store = None
    if store is not None:
        h = store.header
        print(f"store      {args.store}")
        print(f"profile    {h.profile or '-'}")
        print(f"kind       {h.kind} ({h.spatial}x{h.spatial}x{h.b})")
        print(f"images     {h.count}")
        print(f"augs       {h.augs}")
        print(f"records    {h.count * h.augs} x {h.record_values} halfs")
        if h.count:
            rows = np.unique(np.linspace(0, h.count - 1, min(args.sample, h.count)).astype(int))
            ids = store.ids[rows]
            vals = store.read_batch(ids, np.zeros(len(ids), dtype=np.int64))
            finite = vals[np.isfinite(vals)]
            if finite.size:
                print(f"values     min {finite.min():.4g}  max {finite.max():.4g}  "
                      f"mean {finite.mean():.4g}  (aug 0 of {len(ids)} images)")
    print(f"defects    {len(defects)}")
    for d in defects:
        print(f"  {d}")
    return EXIT_DATA if defects else EXIT_OK


def cmd_synth_corpus(args):
    from .synthetic import write_corpus
    rows, _ = write_corpus(args.out, args.n, seed=args.seed)
    print(f"wrote {len(rows)} images, manifest.csv and labels.csv to {args.out}")
    return EXIT_OK


COMMANDS = {"extract": cmd_extract, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "inspect": cmd_inspect, "synth-corpus": cmd_synth_corpus}


def _deterministic(enabled):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"mlsp: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.profiles:
            load_profile_file(_need_file(args.profiles, "profile file"))
        with _deterministic(args.deterministic):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mlsp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, NonFiniteGradientError, UndefinedCorrelation, FloatingPointError) as exc:
        print(f"mlsp {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, StoreError, CheckpointError, ActivationFormatError, TrainingError,
            MissingLabels, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mlsp {args.command}: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
