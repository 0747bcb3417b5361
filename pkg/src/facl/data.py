"""Feature bags: synthetic generation, center partitioning, splitting, file I/O.

Synthetic patches are spherical unit-variance Gaussians. Background patches
are centred at the origin; each lesion component ``j`` is offset by
``separation`` noise standard deviations along ``n_informative`` coordinates
(with random signs). Every center additionally shifts all of its patches by
a fixed vector of norm ``center_shift`` to imitate site-specific staining.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, VersionError
from .tensor import derive_rng

__all__ = [
    "FeatureBag",
    "SyntheticSpec",
    "class_counts",
    "generate_center",
    "generate_test_set",
    "partition_table4",
    "stratified_split",
    "read_bags",
    "write_bags",
    "read_manifest",
    "write_manifest",
]

# Slide counts per ISUP grade (0-5) of the six grading centers in the
# clinical cohort; used as class mixes for synthetic grading centers.
GRADING_COUNTS = (
    (952, 18, 17, 42, 72, 100),
    (220, 169, 88, 108, 125, 134),
    (962, 906, 334, 159, 241, 125),
    (962, 907, 334, 158, 240, 126),
    (484, 426, 338, 462, 384, 486),
    (483, 426, 337, 462, 384, 487),
)
GRADING_PROPORTIONS = tuple(tuple(n / sum(row) for n in row) for row in GRADING_COUNTS)

TABLE4_SIZES = (1000, 1000, 1500, 1500)


@dataclass
class FeatureBag:
    slide_id: str
    features: np.ndarray
    label: int
    coords: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"bag {self.slide_id!r} needs an N x D feature matrix with N >= 1")
        n = self.features.shape[0]
        if self.coords is None:
            self.coords = np.stack([np.arange(n), np.zeros(n, dtype=int)], axis=1)
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 2)
        if self.coords.shape[0] != n:
            raise ValueError(f"bag {self.slide_id!r} has {n} patches but {self.coords.shape[0]} coords")
        self.label = int(self.label)

    @property
    def n_patches(self):
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FeatureBag):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.label == other.label
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.coords, other.coords)
        )


@dataclass
class SyntheticSpec:
    num_classes: int = 2
    center_sizes: tuple = (400, 400, 400, 400)
    class_proportions: tuple = ((0.5, 0.5),) * 4
    n_patches: tuple = (32, 256)
    lesion_fraction: tuple = (0.1, 0.5)
    center_shift: float = 1.0
    separation: float = 2.0
    n_informative: int = 8
    feature_dim: int = 768
    seed: int = 0
    test_size: int = 0

    def __post_init__(self):
        self.center_sizes = tuple(int(s) for s in self.center_sizes)
        self.class_proportions = tuple(tuple(float(p) for p in row) for row in self.class_proportions)
        self.n_patches = tuple(int(n) for n in self.n_patches)
        self.lesion_fraction = tuple(float(f) for f in self.lesion_fraction)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.class_proportions) != len(self.center_sizes):
            raise ConfigError("need one class-proportion row per center")
        for row in self.class_proportions:
            if len(row) != self.num_classes:
                raise ConfigError(f"class proportions {row} do not have {self.num_classes} entries")
            if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-6:
                raise ConfigError(f"class proportions {row} must be non-negative and sum to 1")
        lo, hi = self.n_patches
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid patch-count range {self.n_patches}")
        flo, fhi = self.lesion_fraction
        if not 0 < flo <= fhi <= 1:
            raise ConfigError(f"invalid lesion fraction range {self.lesion_fraction}")
        if not 1 <= self.n_informative <= self.feature_dim:
            raise ConfigError("n_informative must lie in [1, feature_dim]")
        if self.center_shift < 0 or self.separation < 0:
            raise ConfigError("center_shift and separation must be non-negative")

    @property
    def n_centers(self):
        return len(self.center_sizes)

    @classmethod
    def table4(cls, alpha, sizes=TABLE4_SIZES, **kwargs):
        """Three centers at positive fraction ``alpha``, the last at ``1 - alpha``."""
        if not 0 < alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
        props = [(1 - alpha, alpha)] * (len(sizes) - 1) + [(alpha, 1 - alpha)]
        return cls(num_classes=2, center_sizes=tuple(sizes), class_proportions=tuple(props), **kwargs)

    @classmethod
    def grading(cls, sizes=(400,) * 6, proportions=GRADING_PROPORTIONS, **kwargs):
        return cls(num_classes=6, center_sizes=tuple(sizes), class_proportions=tuple(proportions[: len(sizes)]), **kwargs)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def class_counts(size, proportions):
    """Integer per-class counts summing to ``size`` (largest remainder)."""
    exact = [Fraction(str(p)) * size for p in proportions]
    counts = [math.floor(e) for e in exact]
    remainder = size - sum(counts)
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def _geometry(spec):
    """Lesion component means (shared by all centers) and per-center shifts."""
    rng = derive_rng(spec.seed, 0)
    means = np.zeros((spec.num_classes, spec.feature_dim))
    for j in range(1, spec.num_classes):
        dims = rng.choice(spec.feature_dim, size=spec.n_informative, replace=False)
        means[j, dims] = spec.separation * rng.choice([-1.0, 1.0], size=spec.n_informative)
    shifts = np.zeros((spec.n_centers + 1, spec.feature_dim))
    for c in range(spec.n_centers + 1):
        direction = rng.normal(size=spec.feature_dim)
        shifts[c] = spec.center_shift * direction / np.linalg.norm(direction)
    return means, shifts


def _make_bag(rng, spec, means, shift, label, slide_id):
    lo, hi = spec.n_patches
    n = int(rng.integers(lo, hi + 1))
    component = np.zeros(n, dtype=int)
    if label > 0:
        frac = rng.uniform(*spec.lesion_fraction)
        n_lesion = min(n, max(1, round(frac * n)))
        # the bag's own grade holds at least half of the lesion patches
        n_top = max(1, math.ceil(n_lesion / 2))
        lesion = np.full(n_lesion, label)
        if label > 1:
            lesion[n_top:] = rng.integers(1, label, size=n_lesion - n_top)
        else:
            lesion[:] = 1
        component[rng.choice(n, size=n_lesion, replace=False)] = lesion
    features = means[component] + shift + rng.normal(size=(n, spec.feature_dim))
    side = math.ceil(math.sqrt(2 * n))
    cells = rng.choice(side * side, size=n, replace=False)
    coords = np.stack([cells % side, cells // side], axis=1)
    return FeatureBag(slide_id, features.astype(np.float32), label, coords)


def _generate(spec, counts, stream, shift, prefix):
    means, _ = _geometry(spec)
    rng = derive_rng(spec.seed, *stream)
    labels = np.concatenate([np.full(k, c, dtype=int) for c, k in enumerate(counts)])
    labels = labels[rng.permutation(labels.size)]
    return [_make_bag(rng, spec, means, shift, int(y), f"{prefix}_{i:05d}") for i, y in enumerate(labels)]


def generate_center(spec, center_id):
    """Bags for one center; a pure function of ``(spec, center_id)``."""
    if not 0 <= center_id < spec.n_centers:
        raise ConfigError(f"center id {center_id} out of range for {spec.n_centers} centers")
    counts = class_counts(spec.center_sizes[center_id], spec.class_proportions[center_id])
    _, shifts = _geometry(spec)
    return _generate(spec, counts, (1, center_id), shifts[center_id], f"c{center_id}")


def generate_test_set(spec, size=None, per_center=True):
    """Held-out bags with balanced classes.

    With ``per_center`` the bags are spread evenly over the training centers'
    shifts; otherwise they use an unseen extra shift.
    """
    size = spec.test_size if size is None else size
    if size < spec.num_classes:
        raise ConfigError("test set needs at least one bag per class")
    counts = class_counts(size, [1.0 / spec.num_classes] * spec.num_classes)
    means, shifts = _geometry(spec)
    rng = derive_rng(spec.seed, 2)
    labels = np.concatenate([np.full(k, c, dtype=int) for c, k in enumerate(counts)])
    labels = labels[rng.permutation(labels.size)]
    bags = []
    for i, y in enumerate(labels):
        shift = shifts[i % spec.n_centers] if per_center else shifts[spec.n_centers]
        bags.append(_make_bag(rng, spec, means, shift, int(y), f"test_{i:05d}"))
    return bags


def partition_table4(bags, alpha, rng, sizes=TABLE4_SIZES):
    """Split a binary pool into centers with positive counts alpha*size (last: (1-alpha)*size).

    Bags beyond the requested sizes are left unassigned.
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    labels = np.array([b.label for b in bags])
    pos_idx = rng.permutation(np.flatnonzero(labels == 1))
    neg_idx = rng.permutation(np.flatnonzero(labels == 0))
    n_pos = [round(Fraction(str(alpha)) * s) for s in sizes[:-1]]
    n_pos.append(round((1 - Fraction(str(alpha))) * sizes[-1]))
    n_neg = [s - p for s, p in zip(sizes, n_pos)]
    if sum(n_pos) > pos_idx.size or sum(n_neg) > neg_idx.size:
        raise ConfigError(
            f"need {sum(n_pos)} positive and {sum(n_neg)} negative bags, "
            f"have {pos_idx.size} and {neg_idx.size}"
        )
    centers, p0, n0 = [], 0, 0
    for p, q in zip(n_pos, n_neg):
        idx = np.sort(np.concatenate([pos_idx[p0:p0 + p], neg_idx[n0:n0 + q]]))
        centers.append([bags[i] for i in idx])
        p0, n0 = p0 + p, n0 + q
    return centers


def stratified_split(bags, train_fraction=0.8, rng=None, num_classes=None):
    """Per-class split: floor((1 - train_fraction) * n_c) to validation, rest to train."""
    if not 0 < train_fraction <= 1:
        raise ConfigError("train_fraction must lie in (0, 1]")
    rng = np.random.default_rng(0) if rng is None else rng
    labels = np.array([b.label for b in bags], dtype=int)
    classes = range(num_classes) if num_classes is not None else np.unique(labels)
    val_fraction = 1 - Fraction(str(train_fraction))
    val_idx = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ConfigError(f"class {c} has no bags to split")
        n_val = math.floor(val_fraction * idx.size)
        val_idx.extend(rng.permutation(idx)[:n_val].tolist())
    in_val = np.zeros(len(bags), dtype=bool)
    in_val[val_idx] = True
    train = [b for b, v in zip(bags, in_val) if not v]
    val = [b for b, v in zip(bags, in_val) if v]
    return train, val


_MAGIC = b"FBAG"
_VERSION = 1


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated while reading {what}", offset=self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def write_bags(bags, path):
    out = [_MAGIC, struct.pack("<II", _VERSION, len(bags))]
    for bag in bags:
        sid = bag.slide_id.encode("utf-8")
        n, d = bag.features.shape
        out.append(struct.pack("<I", len(sid)))
        out.append(sid)
        out.append(struct.pack("<III", n, d, bag.label))
        out.append(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(bag.coords, dtype="<i4").tobytes())
    Path(path).write_bytes(b"".join(out))


def read_bags(path):
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != _MAGIC:
        raise FormatError("not a bag file: bad magic", offset=0)
    version = r.u32("version")
    if version != _VERSION:
        raise VersionError(f"unsupported bag file version {version}", offset=4)
    count = r.u32("bag count")
    bags = []
    for _ in range(count):
        start = r.pos
        sid_len = r.u32("slide id length")
        try:
            sid = r.take(sid_len, "slide id").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("slide id is not valid UTF-8", offset=start + 4) from None
        n = r.u32("patch count")
        d = r.u32("feature dim")
        label = r.u32("label")
        if n < 1 or d < 1:
            raise FormatError(f"bag {sid!r} has empty shape {n}x{d}", offset=r.pos - 12)
        feats = np.frombuffer(r.take(4 * n * d, "features"), dtype="<f4").reshape(n, d)
        coords = np.frombuffer(r.take(8 * n, "coords"), dtype="<i4").reshape(n, 2)
        bags.append(FeatureBag(sid, feats.astype(np.float32), label, coords.astype(np.int32)))
    if r.pos != len(r.raw):
        raise FormatError("trailing bytes after last bag", offset=r.pos)
    return bags


def write_manifest(path, centers, task, num_classes, feature_dim, test=None, spec=None):
    """``centers``: list of dicts with ``name``, ``path`` and ``class_counts``."""
    doc = {
        "version": 1,
        "task": task,
        "num_classes": num_classes,
        "feature_dim": feature_dim,
        "centers": centers,
    }
    if test is not None:
        doc["test"] = test
    if spec is not None:
        doc["synthetic_spec"] = spec
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_manifest(path):
    """Return the manifest dict with center/test paths resolved relative to it."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", offset=exc.pos) from None
    for key in ("centers", "num_classes", "task"):
        if key not in doc:
            raise FormatError(f"manifest missing {key!r}")
    for entry in doc["centers"] + ([doc["test"]] if "test" in doc else []):
        entry["path"] = str((path.parent / entry["path"]).resolve())
    return doc
