"""``vizrec`` command line: prepare, synth, train, eval, predict.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 unknown user/item key.
"""

from __future__ import annotations

import argparse
import os
import sys
import types
import typing

from vizrec import checkpoint as ckpt
from vizrec import dataset as ds_mod
from vizrec.evaluation import EvaluationError, compare, format_table, report_json, rmse
from vizrec.models import ModelKind, clamp, predict_batch
from vizrec.synthgen import SynthConfig, generate
from vizrec.training import ConfigError, TrainConfig, TrainingError, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_LOOKUP = 0, 1, 2, 3


class UsageError(Exception):
    pass


class LookupMiss(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration files


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _coerce(text: str, annotation):
    """Convert a config string to the type of a :class:`TrainConfig` field."""
    if typing.get_origin(annotation) in (typing.Union, types.UnionType):
        if text.lower() == "none":
            return None
        annotation = next(a for a in typing.get_args(annotation) if a is not type(None))
    if annotation is ModelKind:
        return ModelKind.parse(text)
    if annotation is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if annotation in (int, float):
        return annotation(text)
    if typing.get_origin(annotation) is tuple:
        return tuple(int(x) for x in text.replace(",", " ").split())
    return text


def build_train_config(file_values: dict, overrides: dict) -> TrainConfig:
    """Flags win over file values, which win over defaults."""
    hints = typing.get_type_hints(TrainConfig)
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(merged) - set(hints)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in merged.items():
        try:
            kwargs[key] = _coerce(str(value), hints[key])
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands


def _require_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _parse_ratios(text):
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"bad ratios {text!r}") from None
    if len(vals) != 3:
        raise UsageError("ratios need three comma-separated fractions")
    return vals


def cmd_prepare(args) -> int:
    _require_file(args.ratings, "ratings file")
    if args.features:
        _require_file(args.features, "feature file")
    raw = ds_mod.load_ratings(args.ratings, header=args.header)
    kept = ds_mod.filter_min_interactions(raw, args.min_count)
    data = ds_mod.build_dataset(kept)
    ratios = _parse_ratios(args.ratios)
    try:
        parts = ds_mod.split(data, ratios, args.seed, by_user=args.by_user)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    features = ds_mod.load_visual_features(args.features) if args.features else None
    meta = {"seed": args.seed, "ratios": list(ratios), "by_user": args.by_user, "min_count": args.min_count}
    ds_mod.save_prepared(args.out, data, parts, meta, features)
    print(f"users={data.n_users:,} items={data.n_items:,} feedback={len(data):,}")
    print(f"train={len(parts.train):,} valid={len(parts.valid):,} test={len(parts.test):,}")
    if features is not None:
        print(f"feature_dim={features.dim_f} covered_items={len(features.coverage(data.item_index)):,}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = SynthConfig(args.n_users, args.n_items, args.k_true, args.d_true, args.f, args.visual_weight,
                      args.noise_std, args.density, args.seed)
    data, store, truth = generate(cfg)
    os.makedirs(args.out, exist_ok=True)
    ds_mod.save_ratings(data.to_raw(), os.path.join(args.out, "ratings.csv"))
    ds_mod.save_visual_features(store, os.path.join(args.out, "features.vfs"), data.item_index.keys)
    with open(os.path.join(args.out, "truth.json"), "w", encoding="utf-8") as fh:
        fh.write(truth.to_json())
    print(f"users={data.n_users:,} items={data.n_items:,} feedback={len(data):,}")
    return EXIT_OK


_TRAIN_FLAGS = {
    "model": "model_kind", "latent_dim": "latent_dim", "visual_dim": "visual_dim",
    "tower_widths": "tower_widths", "lr": "learning_rate", "lambda_u": "lambda_u",
    "lambda_v": "lambda_v", "lambda_net": "lambda_net", "batch_size": "batch_size",
    "max_epochs": "max_epochs", "patience": "patience", "seed": "seed", "optimizer": "optimizer",
    "use_bias": "use_bias", "tower_init": "tower_init", "clamp_eval": "clamp_eval",
    "warm_start_mf": "warm_start_mf", "warm_start_vmlp": "warm_start_vmlp",
}


def cmd_train(args) -> int:
    file_values = {}
    if args.config:
        _require_file(args.config, "config file")
        # config files accept either the flag spelling or the field name
        file_values = {_TRAIN_FLAGS.get(k, k): v for k, v in read_config_file(args.config).items()}
    overrides = {field: getattr(args, flag) for flag, field in _TRAIN_FLAGS.items()}
    config = build_train_config(file_values, overrides)
    if not os.path.isdir(args.data):
        raise UsageError(f"data directory not found: {args.data}")
    _, parts, features = ds_mod.load_prepared(args.data)
    if config.model_kind.visual and features is None:
        raise UsageError(f"{config.model_kind.label} needs {ds_mod.FEATURES_FILE} in {args.data}")
    params, report = train(config, parts, features, progress=print)
    ckpt.save_checkpoint(params, args.out, ds_mod.index_digest(args.data))
    with open(args.out + ".report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    print(f"best_epoch={report.best_epoch} best_valid_rmse={report.best_valid_rmse:.6f}")
    return EXIT_OK


def _load_for_data(path, data, digest):
    _require_file(path, "checkpoint")
    params, ck_digest = ckpt.load_checkpoint_with_digest(path)
    if ck_digest != ckpt.NO_DIGEST and ck_digest != digest:
        raise UsageError(f"{path}: trained against a different index than this data directory")
    if (params.n_users, params.n_items) != (data.n_users, data.n_items):
        raise UsageError(f"{path}: model has {params.n_users} users/{params.n_items} items, "
                         f"data has {data.n_users}/{data.n_items}")
    return params


def cmd_eval(args) -> int:
    data, parts, features = ds_mod.load_prepared(args.data)
    digest = ds_mod.index_digest(args.data)
    scores = {}
    for path in args.checkpoints:
        params = _load_for_data(path, data, digest)
        if params.kind in scores:
            raise UsageError(f"two checkpoints of kind {params.kind.label}")
        if params.kind.visual and features is None:
            raise UsageError(f"{params.kind.label} checkpoint needs {ds_mod.FEATURES_FILE} in {args.data}")
        scores[params.kind] = rmse(params, parts.test, features, args.clamp)
    baseline = ModelKind.MF if ModelKind.MF in scores else min(scores)
    rep = compare(scores, baseline, n_test=len(parts.test))
    rows = [(args.name, rep)]
    sys.stdout.write(format_table(rows))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(report_json(rows))
    return EXIT_OK


def cmd_predict(args) -> int:
    data, _, features = ds_mod.load_prepared(args.data)
    params = _load_for_data(args.checkpoint, data, ds_mod.index_digest(args.data))
    if args.user not in data.user_index:
        raise LookupMiss(f"unknown user: {args.user}")
    if args.item not in data.item_index:
        raise LookupMiss(f"unknown item: {args.item}")
    u, i = data.user_index.idx(args.user), data.item_index.idx(args.item)
    feats = None
    if params.kind.visual:
        if features is None:
            raise UsageError(f"{params.kind.label} checkpoint needs {ds_mod.FEATURES_FILE} in {args.data}")
        feats = features.get(args.item)[None, :]
    y = float(predict_batch(params, [u], [i], feats)[0])
    if args.clamp:
        print(f"{y!r} {float(clamp(y))!r}")
    else:
        print(repr(y))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _bool_flag(text):
    try:
        return _coerce(text, bool)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vizrec", description="Visually-aware rating prediction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter, index and split a ratings file")
    p.add_argument("--ratings", required=True)
    p.add_argument("--features")
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=ds_mod.DEFAULT_MIN_COUNT)
    p.add_argument("--header", action="store_true", help="skip the first line of the ratings file")
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--by-user", action="store_true", help="split within each user's ratings")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate synthetic ratings and features")
    p.add_argument("--out", required=True)
    d = SynthConfig()
    p.add_argument("--n-users", type=int, default=d.n_users)
    p.add_argument("--n-items", type=int, default=d.n_items)
    p.add_argument("--k-true", type=int, default=d.K_true)
    p.add_argument("--d-true", type=int, default=d.D_true)
    p.add_argument("--f", type=int, default=d.F)
    p.add_argument("--visual-weight", type=float, default=d.visual_weight)
    p.add_argument("--noise-std", type=float, default=d.noise_std)
    p.add_argument("--density", type=float, default=d.density)
    p.add_argument("--seed", type=int, default=d.seed)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on a prepared data directory")
    p.add_argument("--config", help="key = value run configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--model")
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--visual-dim", type=int)
    p.add_argument("--tower-widths", help="comma-separated hidden widths")
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-u", type=float)
    p.add_argument("--lambda-v", type=float)
    p.add_argument("--lambda-net", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--optimizer")
    p.add_argument("--use-bias", type=_bool_flag)
    p.add_argument("--tower-init")
    p.add_argument("--clamp-eval", type=_bool_flag)
    p.add_argument("--warm-start-mf")
    p.add_argument("--warm-start-vmlp")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE comparison table over checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--name", default="dataset", help="row label in the table")
    p.add_argument("--json", help="write full-precision results here")
    p.add_argument("--clamp", action="store_true", help="clamp predictions to [1, 5]")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one rating")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    p.add_argument("--clamp", action="store_true")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LookupMiss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOOKUP
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ds_mod.DataError, ckpt.CheckpointError, EvaluationError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
