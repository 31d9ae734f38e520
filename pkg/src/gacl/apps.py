"""Downstream procedures on top of a trained scorer: quality ranking, pair
comparison, label cleansing, greedy stroke attribution, and the two
appearance-bias metrics with a rasterized stand-in for perceptual features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import features
from .datagen import SketchSequence
from .engine import mlp_forward
from .errors import ConfigError, DataError, DimensionError, DomainError
from .head import COS_CLIP, normalize_quality, scale_quality
from .trainer import TrainedArtifacts

# Cleansing thresholds on (normalized quality, target angle): confidently
# wrong samples sit at high quality with a large angle; hopeless inputs sit at
# very low quality.
NOISY_Q = 0.4
NOISY_THETA = 1.5
TOO_BAD_Q = 0.1

ATTRIB_GAIN = 0.05  # minimum per-step quality gain the greedy removal accepts


@dataclass
class SketchScorer:
    """Callable bundle around trained artifacts: sketch -> quality/angle."""

    art: TrainedArtifacts

    def encode(self, seqs: list[SketchSequence]) -> np.ndarray:
        return features.encode_batch(seqs)

    def score_features(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(q_norm, theta_to_nearest_prototype) for encoded inputs."""
        feats = mlp_forward(self.art.model, x)
        q_raw = np.linalg.norm(feats, axis=1)
        safe = np.where(q_raw == 0.0, 1.0, q_raw)
        unit = feats / safe[:, None]
        cos = np.clip(unit @ self.art.prototypes.w, -COS_CLIP, COS_CLIP)
        q = np.asarray(scale_quality(q_raw, self.art.calib))
        q_norm = np.asarray(normalize_quality(q, self.art.calib.l_q,
                                              self.art.calib.u_q))
        theta = np.arccos(cos.max(axis=1))
        return q_norm, theta

    def score_labeled(self, x: np.ndarray, labels: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
        """(q_norm, theta_to_label_prototype) for encoded inputs."""
        feats = mlp_forward(self.art.model, x)
        q_raw = np.linalg.norm(feats, axis=1)
        safe = np.where(q_raw == 0.0, 1.0, q_raw)
        unit = feats / safe[:, None]
        cos = np.clip(unit @ self.art.prototypes.w, -COS_CLIP, COS_CLIP)
        idx = np.arange(x.shape[0])
        theta = np.arccos(cos[idx, np.asarray(labels, dtype=np.intp)])
        q = np.asarray(scale_quality(q_raw, self.art.calib))
        q_norm = np.asarray(normalize_quality(q, self.art.calib.l_q,
                                              self.art.calib.u_q))
        return q_norm, theta

    def __call__(self, seq: SketchSequence) -> float:
        q_norm, _ = self.score_features(self.encode([seq]))
        return float(q_norm[0])


def score(scorer: SketchScorer, seqs: list[SketchSequence]) -> np.ndarray:
    """Normalized quality in [0, 1] per sketch."""
    q_norm, _ = scorer.score_features(scorer.encode(seqs))
    return q_norm


@dataclass
class PairResult:
    winner: str      # "a" or "b"
    tie: bool
    q_a: float
    q_b: float


def pair_compare(scorer: SketchScorer, a: SketchSequence,
                 b: SketchSequence) -> PairResult:
    """Higher quality wins; an exact tie is flagged and goes to the first."""
    q = score(scorer, [a, b])
    qa, qb = float(q[0]), float(q[1])
    if qa == qb:
        return PairResult("a", True, qa, qb)
    return PairResult("a" if qa > qb else "b", False, qa, qb)


# ---------------------------------------------------------------------------
# Label cleansing

VERDICTS = ("clean", "noisy_label", "too_bad")


def cleanse(q_norm: np.ndarray, theta: np.ndarray, q_hi: float = NOISY_Q,
            theta_hi: float = NOISY_THETA, q_lo: float = TOO_BAD_Q) -> np.ndarray:
    """Verdict per sample: noisy_label iff q > q_hi and theta > theta_hi;
    too_bad iff q < q_lo; clean otherwise. theta is the angle to the
    sample's *assigned* label prototype."""
    q_norm = np.asarray(q_norm, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if q_norm.shape != theta.shape or q_norm.ndim != 1:
        raise DimensionError("q_norm and theta must be equal-length vectors")
    if not (0.0 <= q_lo <= q_hi):
        raise ConfigError("need 0 <= q_lo <= q_hi")
    out = np.full(q_norm.shape, "clean", dtype=object)
    out[(q_norm > q_hi) & (theta > theta_hi)] = "noisy_label"
    out[q_norm < q_lo] = "too_bad"
    return out


# ---------------------------------------------------------------------------
# Stroke attribution

@dataclass
class AttributionResult:
    verdict: str                 # "benign" | "rhs" | "malicious"
    kept_strokes: list[int]      # stroke indices of the best subset found
    q_full: float
    q_best: float
    trace: list[float]           # accepted quality after each greedy removal
    scorer_calls: int


def attribute(seq: SketchSequence, scorer, q_tau: float, q_max: float = 0.7,
              min_gain: float = ATTRIB_GAIN) -> AttributionResult:
    """Decide whether a low-quality sketch is salvageable by stroke removal.

    q >= q_tau up front is benign. Otherwise strokes are removed greedily,
    accepting the best single removal while it gains at least min_gain; if
    any visited subset reaches q_max the sketch is flagged as a right-hand
    side case (bad strokes on a good sketch), else malicious. The scorer is
    called at most (strokes + 1)^2 times.
    """
    if not (0.0 <= q_tau <= 1.0 and 0.0 <= q_max <= 1.0):
        raise DomainError("q_tau and q_max must lie in [0, 1]")
    if min_gain < 0.0:
        raise DomainError("min_gain must be non-negative")
    calls = 0

    def q_of(sub: SketchSequence) -> float:
        nonlocal calls
        calls += 1
        return float(scorer(sub))

    q_full = q_of(seq)
    if q_full >= q_tau:
        return AttributionResult("benign", list(range(len(seq.strokes))),
                                 q_full, q_full, [q_full], calls)
    kept = list(range(len(seq.strokes)))
    current = seq
    q_cur = q_full
    best_q = q_full
    trace = [q_full]
    while len(kept) > 1:
        gains = []
        for pos in range(len(kept)):
            cand = current.drop_strokes({pos})
            qc = q_of(cand)
            best_q = max(best_q, qc)
            gains.append((qc, pos, cand))
        qc, pos, cand = max(gains, key=lambda g: g[0])
        if qc - q_cur < min_gain:
            break
        kept.pop(pos)
        current, q_cur = cand, qc
        trace.append(qc)
        if q_cur >= q_max:
            break
    verdict = "rhs" if best_q >= q_max else "malicious"
    return AttributionResult(verdict, kept, q_full, best_q, trace, calls)


# ---------------------------------------------------------------------------
# Appearance features and bias metrics

def rasterize_sketch(seq: SketchSequence, grid: int = 32) -> np.ndarray:
    """Binary stroke-occupancy raster, flattened to (grid*grid,). Segments are
    sampled densely enough that no crossed cell is skipped."""
    if grid < 2:
        raise ConfigError(f"grid must be at least 2, got {grid}")
    img = np.zeros((grid, grid))
    step = 0.5 / grid
    for s in seq.strokes:
        if s.shape[0] == 1:
            pts = s
        else:
            segs = []
            for a, b in zip(s[:-1], s[1:]):
                n = max(int(np.ceil(np.linalg.norm(b - a) / step)), 1)
                t = np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
                segs.append(a + t * (b - a))
            segs.append(s[-1:])
            pts = np.vstack(segs)
        ij = np.clip((pts * grid).astype(np.intp), 0, grid - 1)
        img[ij[:, 1], ij[:, 0]] = 1.0
    return img.ravel()


def appearance_features(seqs: list[SketchSequence], grid: int = 32) -> np.ndarray:
    return np.vstack([rasterize_sketch(s, grid) for s in seqs])


def pcc_metric(scores: np.ndarray, feats: np.ndarray,
               pairs: int | None = 10000, seed: int = 0) -> float:
    """Pearson correlation between |q_i - q_j| and feature distance over
    sampled index pairs (all pairs when pairs is None)."""
    scores = np.asarray(scores, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    n = scores.size
    if feats.ndim != 2 or feats.shape[0] != n:
        raise DimensionError("features must be one row per score")
    if n < 2:
        raise DataError("need at least two samples")
    if pairs is None:
        ii, jj = np.triu_indices(n, k=1)
    else:
        if pairs < 1:
            raise ConfigError("pairs must be positive")
        rng = np.random.default_rng(seed)
        ii = rng.integers(n, size=pairs)
        jj = rng.integers(n - 1, size=pairs)
        jj = np.where(jj >= ii, jj + 1, jj)  # uniform over j != i
    x = np.abs(scores[ii] - scores[jj])
    y = np.linalg.norm(feats[ii] - feats[jj], axis=1)
    if x.std() == 0.0 or y.std() == 0.0:
        raise DataError("zero variance in pair statistics; correlation undefined")
    return float(np.corrcoef(x, y)[0, 1])


def diversity_metric(scores: np.ndarray, feats: np.ndarray,
                     buckets: int = 10) -> float:
    """Mean over quality buckets of the mean pairwise feature distance inside
    each bucket; buckets with fewer than two members are skipped. Scores are
    expected in [0, 1]."""
    scores = np.asarray(scores, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != scores.size:
        raise DimensionError("features must be one row per score")
    if buckets < 1:
        raise ConfigError("buckets must be positive")
    if scores.size and (scores.min() < -1e-9 or scores.max() > 1.0 + 1e-9):
        raise DomainError("scores must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, buckets + 1)
    which = np.clip(np.searchsorted(edges, scores, side="right") - 1, 0, buckets - 1)
    vals = []
    for m in range(buckets):
        idx = np.nonzero(which == m)[0]
        if idx.size < 2:
            continue
        sub = feats[idx]
        ii, jj = np.triu_indices(idx.size, k=1)
        vals.append(float(np.linalg.norm(sub[ii] - sub[jj], axis=1).mean()))
    if not vals:
        raise DataError("every quality bucket is empty or a singleton")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Rank statistics (no scipy dependency in the library)

def _ranks(v: np.ndarray) -> np.ndarray:
    """Average ranks with tie handling."""
    v = np.asarray(v, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation (Pearson on average ranks)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError("x and y must be equal-length vectors")
    if x.size < 2:
        raise DataError("need at least two observations")
    rx, ry = _ranks(x), _ranks(y)
    if rx.std() == 0.0 or ry.std() == 0.0:
        raise DataError("zero rank variance; correlation undefined")
    return float(np.corrcoef(rx, ry)[0, 1])
