"""Fixed featurization from stroke sketches to backbone inputs.

Each point contributes its coordinates multiplied against a low-order Fourier
basis over its normalized path position (contour descriptors), plus a
stroke-index one-hot; the sketch vector is the mean over points. Three pooled
degree-2 energies (segment length, curvature, centroid spread) round out the
vector. Every term is polynomial in the point coordinates with a closed-form
Jacobian, which keeps the latent-steering chain rule exact.
"""

from __future__ import annotations

import numpy as np

from .datagen import SketchSequence
from .errors import DimensionError

N_FREQ = 3          # Fourier orders over path position
MAX_STROKES = 8     # stroke one-hot width; deeper strokes fold into the last slot
ENC_DIM = 2 * N_FREQ + 1                      # 1, sin/cos per order
N_ENERGY = 3
SKETCH_FEATURE_DIM = 2 * ENC_DIM + MAX_STROKES + N_ENERGY

# Bring the pooled energies onto the same order of magnitude as the contour
# descriptors so the backbone's first layer sees them at comparable scale.
SEG_ENERGY_SCALE = 64.0
CURV_ENERGY_SCALE = 32.0
SPREAD_SCALE = 4.0


def _position_encoding(t: np.ndarray) -> np.ndarray:
    """(len(t), ENC_DIM) basis: constant column then sin/cos pairs."""
    cols = [np.ones_like(t)]
    for k in range(1, N_FREQ + 1):
        cols.append(np.sin(2.0 * np.pi * k * t))
        cols.append(np.cos(2.0 * np.pi * k * t))
    return np.column_stack(cols)


def _flatten(seq: SketchSequence) -> tuple[np.ndarray, np.ndarray]:
    """All points stacked (G, 2) and their stroke ids (G,)."""
    pts = np.vstack(seq.strokes)
    ids = np.concatenate([np.full(s.shape[0], min(i, MAX_STROKES - 1), dtype=np.intp)
                          for i, s in enumerate(seq.strokes)])
    return pts, ids


def _energies(strokes: list[np.ndarray], pts: np.ndarray) -> np.ndarray:
    """Mean segment-length, curvature, and spread energies, scaled.

    Differences are taken within strokes only; the spread centroid is global.
    """
    g = pts.shape[0]
    seg = sum(float(np.sum((s[1:] - s[:-1]) ** 2)) for s in strokes if len(s) >= 2)
    curv = sum(float(np.sum((s[2:] - 2.0 * s[1:-1] + s[:-2]) ** 2))
               for s in strokes if len(s) >= 3)
    spread = float(np.sum((pts - pts.mean(axis=0)) ** 2))
    return np.array([SEG_ENERGY_SCALE * seg / g,
                     CURV_ENERGY_SCALE * curv / g,
                     SPREAD_SCALE * spread / g])


def encode_sketch(seq: SketchSequence) -> np.ndarray:
    """Mean-pooled per-point features, shape (SKETCH_FEATURE_DIM,)."""
    pts, ids = _flatten(seq)
    g = pts.shape[0]
    t = np.arange(g, dtype=np.float64) / max(g - 1, 1)
    enc = _position_encoding(t)
    x_block = (pts[:, 0:1] * enc).mean(axis=0)
    y_block = (pts[:, 1:2] * enc).mean(axis=0)
    hot = np.zeros(MAX_STROKES)
    np.add.at(hot, ids, 1.0 / g)
    return np.concatenate([x_block, y_block, hot, _energies(seq.strokes, pts)])


def encode_batch(seqs: list[SketchSequence]) -> np.ndarray:
    if not seqs:
        raise DimensionError("empty sketch batch")
    return np.vstack([encode_sketch(s) for s in seqs])


# ---------------------------------------------------------------------------
# Single-stroke fast path for gradient-based steering

def single_stroke_encoding(points: np.ndarray) -> np.ndarray:
    """encode_sketch for a raw (T, 2) array treated as one stroke; points may
    lie outside [0, 1] here since no SketchSequence is materialized."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
        raise DimensionError(f"points must be (T, 2), got {pts.shape}")
    g = pts.shape[0]
    t = np.arange(g, dtype=np.float64) / max(g - 1, 1)
    enc = _position_encoding(t)
    x_block = (pts[:, 0:1] * enc).mean(axis=0)
    y_block = (pts[:, 1:2] * enc).mean(axis=0)
    hot = np.zeros(MAX_STROKES)
    hot[0] = 1.0
    return np.concatenate([x_block, y_block, hot, _energies([pts], pts)])


def single_stroke_point_grad(grad_vec: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the encoding back to the points, shape (T, 2).

    points must be the array the encoding was computed from; the energy terms
    are quadratic, so their gradients depend on the evaluation point.
    """
    g = np.asarray(grad_vec, dtype=np.float64)
    if g.shape != (SKETCH_FEATURE_DIM,):
        raise DimensionError(f"grad_vec must be ({SKETCH_FEATURE_DIM},), got {g.shape}")
    pts = np.asarray(points, dtype=np.float64)
    n_points = pts.shape[0]
    t = np.arange(n_points, dtype=np.float64) / max(n_points - 1, 1)
    enc = _position_encoding(t)
    gx = enc @ g[:ENC_DIM] / n_points
    gy = enc @ g[ENC_DIM:2 * ENC_DIM] / n_points
    out = np.column_stack([gx, gy])

    e0 = 2 * ENC_DIM + MAX_STROKES
    g_seg, g_curv, g_spread = g[e0], g[e0 + 1], g[e0 + 2]
    if n_points >= 2:
        d1 = pts[1:] - pts[:-1]
        w = g_seg * SEG_ENERGY_SCALE * 2.0 / n_points
        out[1:] += w * d1
        out[:-1] -= w * d1
    if n_points >= 3:
        d2 = pts[2:] - 2.0 * pts[1:-1] + pts[:-2]
        w = g_curv * CURV_ENERGY_SCALE * 2.0 / n_points
        out[2:] += w * d2
        out[1:-1] -= 2.0 * w * d2
        out[:-2] += w * d2
    out += g_spread * SPREAD_SCALE * 2.0 / n_points * (pts - pts.mean(axis=0))
    return out
