"""Experiment configuration and run-directory output.

A run directory holds ``config.toml`` (full snapshot, enough to rerun
bit-for-bit), ``rounds.csv``, one or more ``*.ckpt`` files and
``report.json``.
"""

import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli_w

from .data import (
    TABLE4_SIZES,
    SyntheticSpec,
    generate_center,
    generate_test_set,
    read_bags,
    read_manifest,
    stratified_split,
)
from .errors import ConfigError
from .federation import DEFAULT_NOISE_Z, Client, FederationConfig, evaluate_server, run_federation
from .model import ModelConfig, save_checkpoint
from .tensor import derive_rng

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "ExperimentConfig",
    "MODES",
    "TASKS",
    "load_config",
    "save_config",
    "reference_spec",
    "load_centers",
    "run_experiment",
]

logger = logging.getLogger(__name__)

TASKS = {"diagnosis": 2, "grading": 6}
MODES = ("local", "centralized", "fedavg", "facl")
_SPLIT_STREAM = 30

# Desk-scale defaults: real patch embeddings are 768-d with thousands of
# patches per slide; synthetic runs use smaller bags so a round takes seconds.
REFERENCE_FEATURE_DIM = 64
REFERENCE_MODEL = {"proj_dim": 32, "attn_dim": 16}
REFERENCE_PATCHES = (16, 64)


def reference_spec(task="diagnosis", seed=0, alpha=0.1, bags_per_center=400, test_size=400, **overrides):
    """The synthetic grid used for the local-versus-federated comparison."""
    common = dict(
        feature_dim=REFERENCE_FEATURE_DIM,
        n_patches=REFERENCE_PATCHES,
        seed=seed,
        test_size=test_size,
    )
    common.update(overrides)
    if task == "diagnosis":
        return SyntheticSpec.table4(alpha, sizes=(bags_per_center,) * 4, **common)
    if task == "grading":
        return SyntheticSpec.grading(sizes=(bags_per_center,) * 6, **common)
    raise ConfigError(f"unknown task {task!r}")


@dataclass
class ExperimentConfig:
    task: str = "diagnosis"
    mode: str = "facl"
    noise: bool = False
    seed: int = 0
    train_fraction: float = 0.8
    model: ModelConfig = field(default_factory=lambda: ModelConfig(REFERENCE_FEATURE_DIM, **REFERENCE_MODEL))
    federation: FederationConfig = field(default_factory=FederationConfig)
    synthetic: SyntheticSpec = None
    manifest: str = None

    @property
    def num_classes(self):
        return TASKS[self.task]

    def validate(self):
        """Check cross-field invariants; raises ConfigError."""
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {sorted(TASKS)}, got {self.task!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "facl" and not self.federation.mu > 0:
            raise ConfigError("mode 'facl' requires mu > 0")
        if self.noise and not self.federation.noise_z > 0:
            raise ConfigError("noise requires noise_z > 0")
        if self.noise and self.mode in ("local", "centralized"):
            raise ConfigError(f"noise applies to federated modes only, not {self.mode!r}")
        if self.model.num_classes != self.num_classes:
            raise ConfigError(f"task {self.task!r} needs num_classes={self.num_classes}")
        if (self.synthetic is None) == (self.manifest is None):
            raise ConfigError("give exactly one of a synthetic spec or a manifest path")
        if self.manifest is not None and not Path(self.manifest).is_file():
            raise ConfigError(f"manifest not found: {self.manifest}")
        if self.synthetic is not None:
            if self.synthetic.num_classes != self.num_classes:
                raise ConfigError("synthetic spec class count does not match the task")
            if self.synthetic.feature_dim != self.model.feature_dim:
                raise ConfigError("synthetic feature_dim does not match model feature_dim")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        return self

    def federation_for_mode(self):
        """FederationConfig actually used for training in this mode."""
        fed = replace(self.federation, seed=self.seed)
        z = fed.noise_z if self.noise else 0.0
        if self.mode == "facl":
            return replace(fed, algorithm="facl", noise_z=z)
        return replace(fed, algorithm="fedavg", mu=0.0, noise_z=z)

    def to_dict(self):
        d = {
            "task": self.task,
            "mode": self.mode,
            "noise": self.noise,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "model": asdict(self.model),
            "federation": {k: v for k, v in asdict(self.federation).items() if k != "seed"},
        }
        if self.manifest is not None:
            d["data"] = {"manifest": str(Path(self.manifest).resolve())}
        else:
            spec = asdict(self.synthetic)
            spec["class_proportions"] = [list(r) for r in spec["class_proportions"]]
            for key in ("center_sizes", "n_patches", "lesion_fraction"):
                spec[key] = list(spec[key])
            spec.pop("seed")
            d["data"] = {"synthetic": spec}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"task", "mode", "noise", "seed", "train_fraction", "model", "federation", "data"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        task = d.get("task", "diagnosis")
        if task not in TASKS:
            raise ConfigError(f"task must be one of {sorted(TASKS)}, got {task!r}")
        seed = int(d.get("seed", 0))
        try:
            fed = FederationConfig(**{**d.get("federation", {}), "seed": seed})
        except TypeError as exc:
            raise ConfigError(f"bad [federation] table: {exc}") from None
        if bool(d.get("noise", False)) and "noise_z" not in d.get("federation", {}):
            fed = replace(fed, noise_z=DEFAULT_NOISE_Z)
        if "selection_metric" not in d.get("federation", {}):
            fed = replace(fed, selection_metric="auc" if task == "diagnosis" else "kappa")
        data = d.get("data", {})
        manifest = data.get("manifest")
        synthetic = None
        if manifest is None:
            synthetic = _synthetic_from_table(task, seed, data.get("synthetic", {}))
        model_table = dict(d.get("model", {}))
        model_table.setdefault("feature_dim", synthetic.feature_dim if synthetic else _manifest_feature_dim(manifest))
        for key, value in REFERENCE_MODEL.items():
            model_table.setdefault(key, value)
        model_table["num_classes"] = TASKS[task]
        try:
            model = ModelConfig(**model_table)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad [model] table: {exc}") from None
        return cls(
            task=task,
            mode=d.get("mode", "facl"),
            noise=bool(d.get("noise", False)),
            seed=seed,
            train_fraction=float(d.get("train_fraction", 0.8)),
            model=model,
            federation=fed,
            synthetic=synthetic,
            manifest=manifest,
        )


def _manifest_feature_dim(path):
    # a missing manifest is reported by validate(); fall back quietly here
    try:
        return int(read_manifest(path)["feature_dim"])
    except (OSError, KeyError, ValueError):
        return REFERENCE_FEATURE_DIM


def _synthetic_from_table(task, seed, table):
    table = dict(table)
    alpha = table.pop("alpha", None)
    if table.pop("num_classes", TASKS[task]) != TASKS[task]:
        raise ConfigError(f"[data.synthetic] num_classes does not match task {task!r}")
    table.setdefault("feature_dim", REFERENCE_FEATURE_DIM)
    table.setdefault("n_patches", REFERENCE_PATCHES)
    table.setdefault("test_size", 400)
    try:
        if task == "diagnosis" and "class_proportions" not in table:
            sizes = table.pop("center_sizes", TABLE4_SIZES)
            return SyntheticSpec.table4(0.1 if alpha is None else alpha, sizes=sizes, seed=seed, **table)
        if task == "grading" and "class_proportions" not in table:
            sizes = table.pop("center_sizes", (400,) * 6)
            return SyntheticSpec.grading(sizes=sizes, seed=seed, **table)
        return SyntheticSpec(num_classes=TASKS[task], seed=seed, **table)
    except TypeError as exc:
        raise ConfigError(f"bad [data.synthetic] table: {exc}") from None


def load_config(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return ExperimentConfig.from_dict(doc)


def save_config(config, path):
    Path(path).write_text(tomli_w.dumps(config.to_dict()), encoding="utf-8")


def load_centers(config):
    """Return ``(centers, test_bags, names)``; ``test_bags`` may be empty."""
    if config.synthetic is not None:
        spec = config.synthetic
        centers = [generate_center(spec, c) for c in range(spec.n_centers)]
        test = generate_test_set(spec) if spec.test_size else []
        names = [f"center{c}" for c in range(spec.n_centers)]
        return centers, test, names
    path = Path(config.manifest)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    doc = read_manifest(path)
    if int(doc["num_classes"]) != config.num_classes:
        raise ConfigError(f"manifest has {doc['num_classes']} classes, task needs {config.num_classes}")
    centers = [read_bags(entry["path"]) for entry in doc["centers"]]
    names = [entry.get("name", f"center{i}") for i, entry in enumerate(doc["centers"])]
    test = read_bags(doc["test"]["path"]) if "test" in doc else []
    return centers, test, names


def _metrics_dict(m):
    return None if m is None else {k: (None if np.isnan(v) else v) for k, v in m.as_dict().items()}


def _run(clients, fed, config, run_name, rows, n_jobs):
    best, reports = run_federation(clients, fed, config.model, n_jobs=n_jobs)
    for r in reports:
        rows.append({"run": run_name, **r.as_row()})
    best_report = next(r for r in reversed(reports) if r.is_best)
    logger.info("%s: best round %d (%s=%.4f)", run_name, best_report.round, fed.selection_metric, best_report.score)
    return best, best_report


def run_experiment(config, out_dir, n_jobs=None):
    """Train according to ``config.mode`` and write the run directory.

    Cross-field checks live in :meth:`ExperimentConfig.validate`; callers
    that accept user input should call it first.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.toml")
    centers, test, names = load_centers(config)
    fed = config.federation_for_mode()

    splits = []
    for i, bags in enumerate(centers):
        rng = derive_rng(config.seed, _SPLIT_STREAM, i)
        splits.append(stratified_split(bags, config.train_fraction, rng))

    rows, settings = [], []
    report = {"task": config.task, "mode": config.mode, "noise": config.noise, "seed": config.seed}
    if config.mode == "local":
        for i, (train, val) in enumerate(splits):
            client = Client(0, train, val, config.model, fed)
            best, best_report = _run([client], fed, config, names[i], rows, n_jobs)
            save_checkpoint(best, out / f"best_{names[i]}.ckpt")
            settings.append(_setting(names[i], best_report, best, test))
        avg = {part: _mean_metrics([s[part] for s in settings if s[part] is not None]) for part in ("validation", "test")}
        settings.append({"setting": f"Avg. ({len(splits)} centers)", "best_round": None, **avg})
    else:
        if config.mode == "centralized":
            train = [b for tr, _ in splits for b in tr]
            val = [b for _, va in splits for b in va]
            clients = [Client(0, train, val, config.model, fed)]
        else:
            clients = [Client(i, tr, va, config.model, fed) for i, (tr, va) in enumerate(splits)]
        best, best_report = _run(clients, fed, config, config.mode, rows, n_jobs)
        save_checkpoint(best, out / "best.ckpt")
        settings.append(_setting(config.mode, best_report, best, test))

    _write_rounds(rows, out / "rounds.csv")
    report["settings"] = settings
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report


def _setting(name, best_report, best, test):
    test_metrics = evaluate_server(best, test) if test else None
    return {
        "setting": name,
        "best_round": best_report.round,
        "validation": _metrics_dict(best_report.server_metrics),
        "test": _metrics_dict(test_metrics),
    }


def _write_rounds(rows, path):
    header = []
    for row in rows:
        for key in row:
            if key not in header:
                header.append(key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, restval="", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _mean_metrics(dicts):
    if not dicts:
        return None
    out = {}
    for key in dicts[0]:
        vals = [d[key] for d in dicts if d[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out
