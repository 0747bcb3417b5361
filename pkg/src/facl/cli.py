"""Command-line front end: ``facl generate | train | eval | attention``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or file-format
error, 4 numeric failure.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import class_counts, generate_center, generate_test_set, read_bags, read_manifest, write_bags, write_manifest
from .errors import ConfigError, FormatError, NumericError, VersionError
from .experiments import TASKS, ExperimentConfig, run_experiment
from .federation import DEFAULT_NOISE_Z, evaluate_server
from .model import attention_scores, load_checkpoint, project

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODE_CHOICES = ("local", "centralized", "fedavg", "fedavg-n", "facl", "facl-n")

def _read_toml(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None


def build_config(args):
    """Config file values with command-line flags layered on top."""
    doc = _read_toml(args.config)
    if getattr(args, "task", None):
        doc["task"] = args.task
    if args.seed is not None:
        doc["seed"] = args.seed
    fed = doc.setdefault("federation", {})
    data = doc.setdefault("data", {})
    mode = getattr(args, "mode", None)
    if mode:
        doc["mode"] = mode.removesuffix("-n")
        doc["noise"] = mode.endswith("-n")
    if getattr(args, "mu", None) is not None:
        fed["mu"] = args.mu
    if getattr(args, "noise_z", None) is not None:
        fed["noise_z"] = args.noise_z
    if doc.get("noise") and "noise_z" not in fed:
        fed["noise_z"] = DEFAULT_NOISE_Z
    if getattr(args, "max_rounds", None) is not None:
        fed["max_rounds"] = args.max_rounds
        fed["min_rounds"] = min(fed.get("min_rounds", 40), args.max_rounds)
    if getattr(args, "manifest", None):
        data.pop("synthetic", None)
        data["manifest"] = args.manifest
    if args.alpha is not None:
        if "manifest" in data:
            raise ConfigError("--alpha applies to synthetic data, not a manifest")
        data.setdefault("synthetic", {})["alpha"] = args.alpha
    return ExperimentConfig.from_dict(doc).validate()


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_class_table(rows, num_classes):
    header = f"{'center':<12}{'bags':>7}" + "".join(f"{'class ' + str(c):>16}" for c in range(num_classes))
    print(header)
    for name, counts in rows:
        total = sum(counts)
        cells = "".join(f"{f'{n} ({100 * n / total:.1f}%)':>16}" for n in counts)
        print(f"{name:<12}{total:>7}{cells}")


def cmd_generate(args):
    config = build_config(args)
    if config.synthetic is None:
        raise ConfigError("generate needs a synthetic data spec, not a manifest")
    spec = config.synthetic
    out = _prepare_out(args.out, args.force)
    centers, rows = [], []
    for c in range(spec.n_centers):
        bags = generate_center(spec, c)
        name = f"center{c}"
        write_bags(bags, out / f"{name}.fbag")
        counts = class_counts(spec.center_sizes[c], spec.class_proportions[c])
        centers.append({"name": name, "path": f"{name}.fbag", "class_counts": counts})
        rows.append((name, counts))
    test = None
    if spec.test_size:
        test_bags = generate_test_set(spec)
        write_bags(test_bags, out / "test.fbag")
        counts = np.bincount([b.label for b in test_bags], minlength=spec.num_classes).tolist()
        test = {"name": "test", "path": "test.fbag", "class_counts": counts}
        rows.append(("test", counts))
    write_manifest(
        out / "manifest.json",
        centers,
        config.task,
        spec.num_classes,
        spec.feature_dim,
        test=test,
        spec=ExperimentConfig.to_dict(config)["data"]["synthetic"] | {"seed": spec.seed},
    )
    _print_class_table(rows, spec.num_classes)
    return EXIT_OK


def cmd_train(args):
    config = build_config(args)
    out = _prepare_out(args.out, args.force)
    report = run_experiment(config, out)
    for setting in report["settings"]:
        part = setting["test"] or setting["validation"]
        label = "test" if setting["test"] else "validation"
        metrics = "  ".join(f"{k}={v:.4f}" for k, v in part.items() if v is not None)
        print(f"{setting['setting']:<20} {label}: {metrics}")
    print(f"run written to {out}")
    return EXIT_OK


def _load_eval_bags(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"bag file not found: {path}")
    if path.suffix == ".json":
        doc = read_manifest(path)
        return [b for entry in doc["centers"] for b in read_bags(entry["path"])]
    return read_bags(path)


def _check_dims(params, bags):
    dim = params.config.feature_dim
    for bag in bags:
        if bag.features.shape[1] != dim:
            raise VersionError(
                f"bag {bag.slide_id!r} has {bag.features.shape[1]} features but the checkpoint expects {dim}"
            )


def cmd_eval(args):
    params = load_checkpoint(args.checkpoint)
    bags = _load_eval_bags(args.bags)
    _check_dims(params, bags)
    num_classes = params.config.num_classes
    task = args.task or ("diagnosis" if num_classes == 2 else "grading")
    if TASKS[task] != num_classes:
        raise VersionError(f"checkpoint has {num_classes} classes but task {task!r} needs {TASKS[task]}")
    metrics = evaluate_server(params, bags)
    doc = {"task": task, "n_bags": len(bags), **{k: (None if np.isnan(v) else v) for k, v in metrics.as_dict().items()}}
    text = json.dumps(doc, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def normalized_attention(scores):
    """Min-max scale to [0, 1]; a constant row maps to 1.0."""
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.ones_like(scores)
    return (scores - lo) / (hi - lo)


def export_attention(params, bags, class_index, path):
    if not 0 <= class_index < params.config.num_classes:
        raise ValueError(f"class index {class_index} out of range for {params.config.num_classes} classes")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["slide_id", "x", "y", "score", "normalized"])
        for bag in bags:
            _, att = attention_scores(params, project(params, bag))
            raw = att[class_index]
            for (x, y), s, n in zip(bag.coords, raw, normalized_attention(raw)):
                writer.writerow([bag.slide_id, int(x), int(y), repr(float(s)), repr(float(n))])


def cmd_attention(args):
    params = load_checkpoint(args.checkpoint)
    bags = _load_eval_bags(args.bags)
    _check_dims(params, bags)
    if not 0 <= args.class_index < params.config.num_classes:
        raise ConfigError(f"--class {args.class_index} out of range for {params.config.num_classes} classes")
    export_attention(params, bags, args.class_index, args.out)
    print(f"attention for {len(bags)} slides written to {args.out}")
    return EXIT_OK


def make_parser():
    parser = argparse.ArgumentParser(prog="facl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="TOML experiment config")
        p.add_argument("--task", choices=sorted(TASKS))
        p.add_argument("--seed", type=int, metavar="U64")
        p.add_argument("--alpha", type=float, help="positive fraction of the three minority centers")
        p.add_argument("--out", metavar="DIR", required=True)
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    gen = sub.add_parser("generate", help="write synthetic bag files and a manifest")
    common(gen)
    gen.set_defaults(func=cmd_generate)

    train = sub.add_parser("train", help="run local, centralized or federated training")
    common(train)
    train.add_argument("--mode", choices=MODE_CHOICES)
    train.add_argument("--mu", type=float, help="weight of the attention-consistency loss")
    train.add_argument("--noise-z", type=float, dest="noise_z", help="noise level for the -n modes")
    train.add_argument("--max-rounds", type=int, dest="max_rounds")
    train.add_argument("--manifest", metavar="PATH", help="train on bag files listed in a manifest")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on bags")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--bags", required=True, help=".fbag file or manifest.json")
    ev.add_argument("--task", choices=sorted(TASKS))
    ev.add_argument("--out", metavar="PATH", help="also write the metrics JSON here")
    ev.set_defaults(func=cmd_eval)

    att = sub.add_parser("attention", help="export per-patch attention scores as CSV")
    att.add_argument("--checkpoint", required=True)
    att.add_argument("--bags", required=True)
    att.add_argument("--class", type=int, dest="class_index", required=True)
    att.add_argument("--out", metavar="PATH", required=True)
    att.set_defaults(func=cmd_attention)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"facl: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"facl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        print(f"facl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
