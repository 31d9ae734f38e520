"""Desk-scale data: 2-D Gaussian mixtures, parametric stroke sketches with a
distortion knob, label-noise injection, k-means pseudo-labels, and rating
discretization for quality-rated corpora.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DomainError

SKETCH_CLASSES = ("circle", "square", "triangle", "star")

COORD_TOL = 1e-9


# ---------------------------------------------------------------------------
# Types

@dataclass
class SketchSequence:
    """A sketch as a list of polyline strokes with coordinates in [0, 1]."""

    strokes: list[np.ndarray]  # each (k_i, 2)
    label: int | None = None
    distortion: float | None = None

    def __post_init__(self):
        if not self.strokes:
            raise DataError("sketch needs at least one stroke")
        clean = []
        for s in self.strokes:
            s = np.asarray(s, dtype=np.float64)
            if s.ndim != 2 or s.shape[1] != 2 or s.shape[0] < 1:
                raise DataError(f"stroke must be (k, 2) with k >= 1, got {s.shape}")
            if not np.isfinite(s).all():
                raise DataError("stroke contains non-finite coordinates")
            if s.min() < -COORD_TOL or s.max() > 1.0 + COORD_TOL:
                raise DataError("stroke coordinates must lie in [0, 1]")
            clean.append(s)
        self.strokes = clean

    @property
    def total_points(self) -> int:
        return sum(s.shape[0] for s in self.strokes)

    def drop_strokes(self, drop: set[int]) -> "SketchSequence":
        kept = [s.copy() for i, s in enumerate(self.strokes) if i not in drop]
        if not kept:
            raise DataError("cannot drop every stroke")
        return SketchSequence(kept, self.label, self.distortion)

    def to_record(self) -> dict:
        rec = {"strokes": [s.tolist() for s in self.strokes]}
        if self.label is not None:
            rec["label"] = int(self.label)
        if self.distortion is not None:
            rec["distortion"] = float(self.distortion)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "SketchSequence":
        return cls([np.asarray(s, dtype=np.float64) for s in rec["strokes"]],
                   rec.get("label"), rec.get("distortion"))


@dataclass
class LabeledSet:
    """Samples (a point matrix or a sketch list) with labels and the ground
    truth they were generated from (labels may be noisy or pseudo)."""

    samples: np.ndarray | list
    labels: np.ndarray
    truth: np.ndarray
    distortions: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self.truth = np.asarray(self.truth, dtype=np.intp)
        n = len(self.samples)
        if self.labels.shape != (n,) or self.truth.shape != (n,):
            raise DataError("labels and truth must be one per sample")
        if self.distortions is not None:
            self.distortions = np.asarray(self.distortions, dtype=np.float64)
            if self.distortions.shape != (n,):
                raise DataError("distortions must be one per sample")

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def is_points(self) -> bool:
        return isinstance(self.samples, np.ndarray)


# ---------------------------------------------------------------------------
# Gaussian mixtures

@dataclass(frozen=True)
class GaussianMixtureSpec:
    arrangement: str = "circle"  # or "grid"
    components: int = 9
    sigma: float = 0.05
    samples_per_component: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.arrangement not in ("circle", "grid"):
            raise ConfigError(f"unknown arrangement {self.arrangement!r}")
        if self.arrangement == "grid" and self.components != 9:
            raise ConfigError("grid arrangement is a 3x3 lattice; components must be 9")
        if self.components < 2:
            raise ConfigError("need at least 2 components")
        if self.sigma < 0.0:
            raise ConfigError("sigma must be non-negative")
        if self.samples_per_component < 1:
            raise ConfigError("need at least one sample per component")


def mixture_centres(spec: GaussianMixtureSpec) -> np.ndarray:
    if spec.arrangement == "circle":
        ang = 2.0 * math.pi * np.arange(spec.components) / spec.components
        return np.column_stack([np.cos(ang), np.sin(ang)])
    g = np.array([-1.0, 0.0, 1.0])
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def gen_gaussians(spec: GaussianMixtureSpec) -> LabeledSet:
    rng = np.random.default_rng(spec.seed)
    centres = mixture_centres(spec)
    labels = np.repeat(np.arange(spec.components), spec.samples_per_component)
    x = centres[labels] + spec.sigma * rng.standard_normal((labels.size, 2))
    return LabeledSet(x, labels, labels.copy())


# ---------------------------------------------------------------------------
# Sketch shapes

def _poly_points(vertices: np.ndarray, per_side: int, close: bool) -> np.ndarray:
    """Sample points along a polygon path, per_side points per segment."""
    pts = []
    n = len(vertices)
    segs = n if close else n - 1
    for i in range(segs):
        a = vertices[i]
        b = vertices[(i + 1) % n]
        t = np.linspace(0.0, 1.0, per_side, endpoint=False)[:, None]
        pts.append(a + t * (b - a))
    out = np.vstack(pts)
    if not close:
        out = np.vstack([out, vertices[-1]])
    return out


def _arc(cx, cy, rx, ry, a0, a1, n) -> np.ndarray:
    t = np.linspace(a0, a1, n)
    return np.column_stack([cx + rx * np.cos(t), cy + ry * np.sin(t)])


def _star_vertices(points: int, r_out: float, r_in: float) -> np.ndarray:
    ang = math.pi / 2.0 + np.arange(2 * points) * math.pi / points
    r = np.where(np.arange(2 * points) % 2 == 0, r_out, r_in)
    return np.column_stack([0.5 + r * np.cos(ang), 0.5 + r * np.sin(ang)])


def _raw_shape(class_id: int, style: int = 0) -> list[np.ndarray]:
    """Fully distinct multi-stroke polyline for one of the four classes.

    style selects a sub-variant (aspect/orientation/point count) used by the
    mixed-style corpora; it does not change the class.
    """
    if not 0 <= class_id < len(SKETCH_CLASSES):
        raise DomainError(f"class_id must be in [0, {len(SKETCH_CLASSES)}), got {class_id}")
    if style not in (0, 1):
        raise DomainError(f"style must be 0 or 1, got {style}")
    name = SKETCH_CLASSES[class_id]
    if name == "circle":
        rx, ry = (0.32, 0.32) if style == 0 else (0.32, 0.19)
        return [_arc(0.5, 0.5, rx, ry, 0.0, math.pi, 16),
                _arc(0.5, 0.5, rx, ry, math.pi, 2.0 * math.pi, 16)]
    if name == "square":
        if style == 0:
            v = np.array([[0.2, 0.2], [0.8, 0.2], [0.8, 0.8], [0.2, 0.8]])
        else:
            v = np.array([[0.5, 0.2], [0.8, 0.5], [0.5, 0.8], [0.2, 0.5]])
        return [_poly_points(np.array([v[i], v[(i + 1) % 4]]), 8, close=False)
                for i in range(4)]
    if name == "triangle":
        base_ang = math.pi / 2.0 if style == 0 else -math.pi / 2.0
        ang = base_ang + np.arange(3) * 2.0 * math.pi / 3.0
        v = np.column_stack([0.5 + 0.33 * np.cos(ang), 0.5 + 0.33 * np.sin(ang)])
        return [_poly_points(np.array([v[i], v[(i + 1) % 3]]), 9, close=False)
                for i in range(3)]
    # star
    pts = 5 if style == 0 else 6
    v = _star_vertices(pts, 0.33, 0.14 if style == 0 else 0.17)
    half = pts  # outline vertices split into two strokes of equal segment count
    outline = np.vstack([v, v[:1]])
    first = _poly_points(outline[:half + 1], 4, close=False)
    second = _poly_points(outline[half:], 4, close=False)
    return [first, second]


def _stretch(pts: np.ndarray, n: int) -> np.ndarray:
    """Arc-length resample a polyline to exactly n points."""
    if len(pts) == n:
        return pts
    d = np.concatenate([[0.0], np.linalg.norm(np.diff(pts, axis=0), axis=1)])
    s = np.cumsum(d)
    s = s / s[-1] if s[-1] > 0 else np.linspace(0.0, 1.0, len(pts))
    t = np.linspace(0.0, 1.0, n)
    return np.column_stack([np.interp(t, s, pts[:, 0]), np.interp(t, s, pts[:, 1])])


_NEUTRAL_POINTS = 64
_neutral_cache: dict[int, np.ndarray] = {}

# Fraction of a class's raw geometry kept in the clean shape; the rest is the
# shared blob. Classes must start as mild variations of one another so that
# the very first corruption increment already moves real class evidence,
# otherwise small levels are invisible to any classifier-derived score.
IDENTITY_SCALE = 0.55


def neutral_shape(style: int) -> np.ndarray:
    """Pointwise mean of every raw class shape: the class-free blob that
    corruption collapses toward. (_NEUTRAL_POINTS, 2).

    Contraction of the clean shapes toward this blob leaves the mean
    unchanged, so it is also the mean of base_shape outputs.
    """
    if style not in _neutral_cache:
        acc = np.zeros((_NEUTRAL_POINTS, 2))
        for c in range(len(SKETCH_CLASSES)):
            acc += _stretch(np.vstack(_raw_shape(c, style)), _NEUTRAL_POINTS)
        _neutral_cache[style] = acc / len(SKETCH_CLASSES)
    return _neutral_cache[style]


def _blob_segments(style: int, n_seg: int) -> list[np.ndarray]:
    """Split the neutral blob into n_seg consecutive arcs, one per stroke."""
    blob = neutral_shape(style)
    cuts = np.linspace(0, _NEUTRAL_POINTS - 1, n_seg + 1).astype(int)
    return [blob[cuts[i]:cuts[i + 1] + 1] for i in range(n_seg)]


def base_shape(class_id: int, style: int = 0) -> list[np.ndarray]:
    """Clean multi-stroke polyline for one of the four classes: the raw class
    geometry contracted toward the shared blob by IDENTITY_SCALE. Stroke
    count and point counts match the raw shape."""
    shape = _raw_shape(class_id, style)
    segs = _blob_segments(style, len(shape))
    return [IDENTITY_SCALE * s + (1.0 - IDENTITY_SCALE) * _stretch(segs[i], len(s))
            for i, s in enumerate(shape)]


def distort_strokes(strokes: list[np.ndarray], distortion: float,
                    rng: np.random.Generator,
                    pull: list[np.ndarray] | None = None,
                    ) -> tuple[list[np.ndarray], list[int]]:
    """Apply the distortion pipeline: stroke dropout, collapse toward the
    pull geometry if given, a smooth low-frequency warp, then per-point
    jitter, all scaled by the distortion level. Returns the new strokes and
    the kept stroke indices.

    pull is a class-neutral target (see neutral_shape); kept strokes blend
    toward it as distortion rises. Because every class collapses toward the
    same blob, heavy corruption is genuinely ambiguous, not merely noisy,
    and the ambiguity grows continuously with the level.
    """
    if not 0.0 <= distortion <= 1.0:
        raise DomainError(f"distortion must lie in [0, 1], got {distortion}")
    if distortion == 0.0:
        return [s.copy() for s in strokes], list(range(len(strokes)))
    # Slightly superlinear level keeps the displacement-vs-knob ratio well
    # separated between low and high settings.
    lvl = distortion * (0.8 + 0.2 * distortion)
    amp_warp = 0.16 * lvl
    amp_jit = 0.05 * lvl
    beta = 0.85 * lvl if pull else 0.0
    u = rng.uniform(size=len(strokes))
    kept = [i for i in range(len(strokes))
            if len(strokes) == 1 or u[i] >= distortion / 2.0]
    if not kept:
        kept = [int(np.argmax(u))]
    # Random warp field per sample: a fixed field would be invertible and a
    # trained model learns to undo it, which hides the corruption evidence.
    freq = rng.uniform(0.5, 1.5, size=(2, 2))
    phase = rng.uniform(0.0, 2.0 * math.pi, size=2)
    out = []
    for i in kept:
        p = strokes[i]
        if beta > 0.0:
            p = (1.0 - beta) * p + beta * _stretch(pull[i % len(pull)], len(p))
        wx = np.sin(2.0 * math.pi * (p @ freq[0]) + phase[0])
        wy = np.sin(2.0 * math.pi * (p @ freq[1]) + phase[1])
        p2 = p + amp_warp * np.column_stack([wx, wy])
        p2 = p2 + amp_jit * rng.standard_normal(p.shape)
        out.append(np.clip(p2, 0.0, 1.0))
    return out, kept


def gen_sketch(class_id: int, distortion: float, rng: np.random.Generator,
               style: int = 0, classes: int | None = None) -> SketchSequence:
    """One sketch at the given distortion level. Corruption collapses the
    shape toward the style's class-neutral blob, so the level doubles as an
    objective ambiguity ordering. classes is accepted for call-site symmetry
    with gen_sketch_set; the neutral target does not depend on it."""
    del classes
    shape = base_shape(class_id, style)
    pull = _blob_segments(style, len(shape))
    strokes, _ = distort_strokes(shape, distortion, rng, pull=pull)
    return SketchSequence(strokes, class_id, distortion)


def gen_sketch_set(per_class: int, seed: int, distortion: str | float = "uniform",
                   classes: int = 4, styles: tuple[int, ...] = (0,)) -> LabeledSet:
    """Balanced sketch corpus. distortion is either a fixed level or
    "uniform" for U[0, 1] per sample; styles cycle per sample."""
    if not 1 <= classes <= len(SKETCH_CLASSES):
        raise ConfigError(f"classes must be in [1, {len(SKETCH_CLASSES)}]")
    if per_class < 1:
        raise ConfigError("per_class must be positive")
    rng = np.random.default_rng(seed)
    sketches, labels, dist = [], [], []
    for c in range(classes):
        for i in range(per_class):
            d = float(rng.uniform()) if distortion == "uniform" else float(distortion)
            style = styles[i % len(styles)]
            sketches.append(gen_sketch(c, d, rng, style, classes=classes))
            labels.append(c)
            dist.append(d)
    labels = np.asarray(labels)
    return LabeledSet(sketches, labels, labels.copy(), np.asarray(dist))


# ---------------------------------------------------------------------------
# Label noise

def inject_label_noise(data: LabeledSet, rate: float, class_count: int,
                       seed: int) -> LabeledSet:
    """Flip each label to a uniformly drawn other class with probability
    `rate`; truth is preserved on the returned set."""
    if not 0.0 <= rate <= 1.0:
        raise DomainError(f"noise rate must lie in [0, 1], got {rate}")
    if class_count < 2:
        raise ConfigError("need at least 2 classes to flip labels")
    rng = np.random.default_rng(seed)
    y = data.labels.copy()
    flip = rng.uniform(size=y.size) < rate
    offsets = rng.integers(1, class_count, size=y.size)
    y[flip] = (y[flip] + offsets[flip]) % class_count
    return LabeledSet(data.samples, y, data.truth.copy(), data.distortions)


# ---------------------------------------------------------------------------
# Pseudo-labels (k-means in feature space)

def pseudo_label(features: np.ndarray, k: int, seed: int = 0,
                 prev_centres: np.ndarray | None = None,
                 max_iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with farthest-point reseeding of empty clusters.

    Initial centres are k distinct samples unless prev_centres warm-starts
    the run. Returns (labels, centres).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k:
        raise DataError(f"need at least k={k} samples, got shape {x.shape}")
    if k < 2:
        raise ConfigError("need k >= 2 clusters")
    rng = np.random.default_rng(seed)
    if prev_centres is not None:
        centres = np.asarray(prev_centres, dtype=np.float64).copy()
        if centres.shape != (k, x.shape[1]):
            raise DataError(f"prev_centres shape {centres.shape} != ({k}, {x.shape[1]})")
    else:
        centres = x[rng.choice(x.shape[0], size=k, replace=False)].copy()
    labels = np.full(x.shape[0], -1, dtype=np.intp)
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        own = d2[np.arange(x.shape[0]), new_labels]
        for c in range(k):
            if not (new_labels == c).any():
                far = int(np.argmax(own))
                centres[c] = x[far]
                new_labels[far] = c
                own[far] = -1.0  # do not reuse the same point for another empty cluster
        if (new_labels == labels).all():
            break
        labels = new_labels
        for c in range(k):
            sel = labels == c
            if sel.any():  # reassignment during reseeding can empty a cluster
                centres[c] = x[sel].mean(axis=0)
    return labels, centres


# ---------------------------------------------------------------------------
# Rating discretization

def bin_ratings(ratings, n_bins: int, policy: str = "width"
                ) -> tuple[np.ndarray, np.ndarray]:
    """Discretize continuous ratings into n_bins class labels.

    "width" uses equal-width bins over [min, max]; "frequency" uses
    quantile edges. A zero rating range is an error. Returns (labels, edges)
    with len(edges) == n_bins + 1.
    """
    r = np.asarray(ratings, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise DataError("ratings must be a non-empty vector")
    if not np.isfinite(r).all():
        raise DataError("ratings contain non-finite values")
    if n_bins < 2:
        raise ConfigError(f"need at least 2 bins, got {n_bins}")
    lo, hi = float(r.min()), float(r.max())
    if hi == lo:
        raise DataError("rating range is zero; nothing to discretize")
    if policy == "width":
        edges = np.linspace(lo, hi, n_bins + 1)
    elif policy == "frequency":
        edges = np.quantile(r, np.linspace(0.0, 1.0, n_bins + 1))
        if (np.diff(edges) <= 0.0).any():
            raise DataError("ratings too concentrated for equal-frequency bins")
    else:
        raise ConfigError(f"unknown policy {policy!r}")
    labels = np.clip(np.searchsorted(edges, r, side="right") - 1, 0, n_bins - 1)
    return labels.astype(np.intp), edges


def bin_centers(edges: np.ndarray) -> np.ndarray:
    """Map bin labels back to representative scores (interval midpoints)."""
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2:
        raise DataError("edges must have at least two entries")
    return 0.5 * (edges[:-1] + edges[1:])


# ---------------------------------------------------------------------------
# Dataset files (NDJSON, one record per line)

def save_sketches(path: str, data: LabeledSet):
    if data.is_points:
        raise DataError("save_sketches expects a sketch set")
    with open(path, "w") as fh:
        for i, sk in enumerate(data.samples):
            rec = sk.to_record()
            rec["label"] = int(data.labels[i])
            if data.truth is not None:
                rec["truth"] = int(data.truth[i])
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_sketches(path: str) -> LabeledSet:
    sketches, labels, truth, dist = [], [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            sk = SketchSequence.from_record(rec)
            sketches.append(sk)
            labels.append(rec.get("label", 0))
            truth.append(rec.get("truth", rec.get("label", 0)))
            dist.append(rec.get("distortion"))
    if not sketches:
        raise DataError(f"no records in {path}")
    distortions = None
    if all(d is not None for d in dist):
        distortions = np.asarray(dist, dtype=np.float64)
    return LabeledSet(sketches, np.asarray(labels), np.asarray(truth), distortions)


def save_points(path: str, data: LabeledSet):
    if not data.is_points:
        raise DataError("save_points expects a point set")
    with open(path, "w") as fh:
        for i in range(data.n):
            rec = {"point": data.samples[i].tolist(),
                   "label": int(data.labels[i]),
                   "truth": int(data.truth[i])}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_points(path: str) -> LabeledSet:
    pts, labels, truth = [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            pts.append(rec["point"])
            labels.append(rec.get("label", 0))
            truth.append(rec.get("truth", rec.get("label", 0)))
    if not pts:
        raise DataError(f"no records in {path}")
    return LabeledSet(np.asarray(pts, dtype=np.float64),
                      np.asarray(labels), np.asarray(truth))
