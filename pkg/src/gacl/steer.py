"""Quality steering in the latent space of a small sketch VAE.

The decoder emits, for each of T steps, a mixture of M Gaussians over the
next point. Sampling picks a component with a straight-through Gumbel draw
(hard one-hot forward value) and reparameterizes the point as
mean + scale * standard normal. Gradients follow the soft path: every
backward quantity is the exact derivative of the soft-selected forward with
the Gumbel and Gaussian noise frozen, which is what makes the whole
z -> decode -> encode -> score chain finite-difference checkable.

A steering step descends L(z) = (q_max - q(decode(z))) + alpha ||z - z0||^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import LabeledSet, SketchSequence
from .engine import (MlpModel, OptimizerState, adam_step, mlp_backward,
                     mlp_forward_cached)
from .errors import ConfigError, DataError, DimensionError, DomainError, TrainingDiverged
from .features import (SKETCH_FEATURE_DIM, single_stroke_encoding,
                       single_stroke_point_grad)
from .head import normalize_quality, scale_quality_grad
from .trainer import TrainedArtifacts

DEFAULT_ST_TAU = 0.5
LOG_SCALE_LIMIT = (-20.0, 10.0)  # guards exp under/overflow in pathological runs
GUMBEL_EPS = 1e-12


# ---------------------------------------------------------------------------
# Straight-through Gumbel sampling

def gumbel_st_sample(logits: np.ndarray, tau: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(y_hard, y_soft): one-hot at argmax of (logits + g) / tau and the
    softmax of the same perturbed logits. g = -log(-log u)."""
    logits = np.asarray(logits, dtype=np.float64)
    if tau <= 0.0:
        raise DomainError(f"tau must be positive, got {tau}")
    u = rng.uniform(size=logits.shape)
    g = -np.log(-np.log(np.clip(u, GUMBEL_EPS, 1.0 - GUMBEL_EPS)))
    z = (logits + g) / tau
    z = z - z.max(axis=-1, keepdims=True)
    y_soft = np.exp(z)
    y_soft /= y_soft.sum(axis=-1, keepdims=True)
    k = np.argmax(y_soft, axis=-1)
    y_hard = np.zeros_like(y_soft)
    np.put_along_axis(y_hard, np.expand_dims(k, -1), 1.0, axis=-1)
    return y_hard, y_soft


@dataclass
class SampleCache:
    """Everything sample_sequence_backward needs: frozen noise and soft weights."""

    y_soft: np.ndarray       # (T, M)
    y_hard: np.ndarray       # (T, M)
    eps: np.ndarray          # (T, 2)
    means: np.ndarray        # (T, M, 2)
    scales: np.ndarray       # (T, M, 2)
    tau: float
    points_soft: np.ndarray  # (T, 2)
    points_hard: np.ndarray  # (T, 2)


def sample_sequence(logits: np.ndarray, means: np.ndarray,
                    log_scales: np.ndarray, tau: float,
                    rng: np.random.Generator,
                    noise: tuple[np.ndarray, np.ndarray] | None = None
                    ) -> SampleCache:
    """Draw a T-point sequence from per-step Gaussian mixtures.

    noise, when given, is (gumbels, eps) with shapes (T, M) and (T, 2); the
    rng is then unused. Forward values are the hard selections; the cache
    carries the soft path for gradients.
    """
    logits = np.asarray(logits, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    log_scales = np.asarray(log_scales, dtype=np.float64)
    t, m = logits.shape
    if means.shape != (t, m, 2) or log_scales.shape != (t, m, 2):
        raise DimensionError("means/log_scales must be (T, M, 2)")
    if tau <= 0.0:
        raise DomainError(f"tau must be positive, got {tau}")
    if noise is None:
        u = rng.uniform(size=(t, m))
        gum = -np.log(-np.log(np.clip(u, GUMBEL_EPS, 1.0 - GUMBEL_EPS)))
        eps = rng.standard_normal((t, 2))
    else:
        gum, eps = noise
        if gum.shape != (t, m) or eps.shape != (t, 2):
            raise DimensionError("frozen noise shapes must be (T, M) and (T, 2)")
    z = (logits + gum) / tau
    z = z - z.max(axis=1, keepdims=True)
    y_soft = np.exp(z)
    y_soft /= y_soft.sum(axis=1, keepdims=True)
    k = np.argmax(y_soft, axis=1)
    y_hard = np.zeros_like(y_soft)
    y_hard[np.arange(t), k] = 1.0
    scales = np.exp(np.clip(log_scales, *LOG_SCALE_LIMIT))
    comp_pts = means + scales * eps[:, None, :]          # (T, M, 2)
    points_soft = (y_soft[:, :, None] * comp_pts).sum(axis=1)
    points_hard = comp_pts[np.arange(t), k]
    return SampleCache(y_soft, y_hard, eps, means, scales, tau,
                       points_soft, points_hard)


def sample_sequence_backward(cache: SampleCache, grad_points: np.ndarray
                             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the soft path w.r.t. (logits, means, log_scales) given
    dL/d points_soft."""
    g = np.asarray(grad_points, dtype=np.float64)
    if g.shape != cache.points_soft.shape:
        raise DimensionError("grad_points shape mismatch")
    comp_pts = cache.means + cache.scales * cache.eps[:, None, :]
    c = (comp_pts * g[:, None, :]).sum(axis=2)            # (T, M)
    cbar = (cache.y_soft * c).sum(axis=1, keepdims=True)
    g_logits = cache.y_soft * (c - cbar) / cache.tau
    g_means = cache.y_soft[:, :, None] * g[:, None, :]
    g_log_scales = g_means * cache.scales * cache.eps[:, None, :]
    return g_logits, g_means, g_log_scales


# ---------------------------------------------------------------------------
# Toy VAE

@dataclass(frozen=True)
class VaeConfig:
    z_dim: int = 8
    steps: int = 32
    mixtures: int = 3
    enc_hidden: tuple[int, ...] = (128, 128)
    dec_hidden: tuple[int, ...] = (128, 128)
    epochs: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    kl_weight: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.z_dim < 1 or self.steps < 2 or self.mixtures < 1:
            raise ConfigError("z_dim, steps, mixtures must be positive (steps >= 2)")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0.0:
            raise ConfigError("epochs, batch_size must be positive and lr > 0")
        if self.kl_weight < 0.0:
            raise ConfigError("kl_weight must be non-negative")


@dataclass
class ToyVae:
    encoder: MlpModel  # 2T -> 2 z_dim (mean, log variance)
    decoder: MlpModel  # z_dim -> T * M * 5
    z_dim: int
    steps: int
    mixtures: int

    @classmethod
    def init(cls, cfg: VaeConfig, rng: np.random.Generator) -> "ToyVae":
        enc_dims = [2 * cfg.steps, *cfg.enc_hidden, 2 * cfg.z_dim]
        dec_dims = [cfg.z_dim, *cfg.dec_hidden, cfg.steps * cfg.mixtures * 5]
        return cls(MlpModel.init(enc_dims, rng), MlpModel.init(dec_dims, rng),
                   cfg.z_dim, cfg.steps, cfg.mixtures)

    def split_raw(self, raw: np.ndarray):
        """Reshape decoder output (B, T*M*5) to (logits, means, log_scales)."""
        b = raw.shape[0]
        t, m = self.steps, self.mixtures
        r = raw.reshape(b, t, m * 5)
        logits = r[:, :, :m]
        means = r[:, :, m:3 * m].reshape(b, t, m, 2)
        log_scales = r[:, :, 3 * m:].reshape(b, t, m, 2)
        return logits, means, log_scales

    def encode(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raw, _ = mlp_forward_cached(self.encoder, np.atleast_2d(x))
        return raw[:, :self.z_dim], raw[:, self.z_dim:]


def resample_sketch(seq: SketchSequence, steps: int) -> np.ndarray:
    """Arc-length uniform resampling of the concatenated strokes, (steps, 2)."""
    if steps < 2:
        raise ConfigError("steps must be at least 2")
    pts = np.vstack(seq.strokes)
    if pts.shape[0] == 1:
        return np.tile(pts, (steps, 1))
    d = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate(([0.0], np.cumsum(d)))
    total = s[-1]
    if total == 0.0:
        return np.tile(pts[:1], (steps, 1))
    target = np.linspace(0.0, total, steps)
    x = np.interp(target, s, pts[:, 0])
    y = np.interp(target, s, pts[:, 1])
    return np.column_stack([x, y])


def resample_set(data: LabeledSet, steps: int) -> LabeledSet:
    """Sketch set -> single-stroke resampled sketch set (labels preserved)."""
    if data.is_points:
        raise DataError("resample_set expects sketches")
    out = [SketchSequence([resample_sketch(s, steps)], s.label, s.distortion)
           for s in data.samples]
    return LabeledSet(out, data.labels.copy(), data.truth.copy(),
                      None if data.distortions is None else data.distortions.copy())


def reconstruct_set(vae: ToyVae, data: LabeledSet, seed: int = 0,
                    tau: float = DEFAULT_ST_TAU) -> LabeledSet:
    """Encode each sketch to its posterior mean and decode back through the
    hard sampling path; labels, truth, and distortion levels carry over.

    Decoding smooths stroke-level roughness away, so a scorer retrained on
    the reconstructions grades shape fidelity, the only quality axis the
    decoder can actually move. Steering wants that scorer, not one trained
    on raw strokes.
    """
    if data.is_points:
        raise DataError("reconstruct_set expects sketches")
    rng = np.random.default_rng(seed)
    out = []
    for s in data.samples:
        pts = resample_sketch(s, vae.steps)
        mu, _ = vae.encode(pts.ravel())
        raw, _ = mlp_forward_cached(vae.decoder, mu)
        logits, means, log_scales = vae.split_raw(raw)
        cache = sample_sequence(logits[0], means[0], log_scales[0], tau, rng)
        out.append(SketchSequence([np.clip(cache.points_hard, 0.0, 1.0)],
                                  s.label, s.distortion))
    return LabeledSet(out, data.labels.copy(), data.truth.copy(),
                      None if data.distortions is None else data.distortions.copy())


LOG_2PI = math.log(2.0 * math.pi)


def _gmm_nll_and_grads(x_pts, logits, means, log_scales):
    """Negative log likelihood of (B, T, 2) points under per-step mixtures,
    plus gradients w.r.t. the raw mixture parameters."""
    scales = np.exp(np.clip(log_scales, *LOG_SCALE_LIMIT))
    diff = x_pts[:, :, None, :] - means                     # (B, T, M, 2)
    z2 = (diff / scales) ** 2
    log_n = -0.5 * z2.sum(axis=3) - np.clip(log_scales, *LOG_SCALE_LIMIT).sum(axis=3) - LOG_2PI
    lm = logits - logits.max(axis=2, keepdims=True)
    log_mix = lm - np.log(np.exp(lm).sum(axis=2, keepdims=True))
    joint = log_mix + log_n                                 # (B, T, M)
    mx = joint.max(axis=2, keepdims=True)
    ll = mx[:, :, 0] + np.log(np.exp(joint - mx).sum(axis=2))
    nll = -ll.sum(axis=1)                                   # (B,)
    # responsibilities and mixture-weight softmax
    r = np.exp(joint - ll[:, :, None])
    sm = np.exp(log_mix)
    g_logits = sm - r
    g_means = -r[:, :, :, None] * diff / (scales ** 2)
    g_log_scales = -r[:, :, :, None] * (z2 - 1.0)
    return nll, g_logits, g_means, g_log_scales


def train_vae(cfg: VaeConfig, data: LabeledSet) -> tuple[ToyVae, list[float]]:
    """Fit the VAE on resampled sketches; returns the model and the per-epoch
    mean objective (reconstruction NLL + kl_weight * KL)."""
    rng = np.random.default_rng(cfg.seed)
    vae = ToyVae.init(cfg, rng)
    if data.is_points:
        raise DataError("train_vae expects sketches")
    x = np.vstack([resample_sketch(s, cfg.steps).ravel() for s in data.samples])
    n = x.shape[0]
    params = vae.encoder.params() + vae.decoder.params()
    opt = OptimizerState.for_params(params)
    n_enc = len(vae.encoder.params())
    losses = []
    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for bidx in range(n_batches):
            idx = order[bidx * cfg.batch_size:(bidx + 1) * cfg.batch_size]
            xb = x[idx]
            b = xb.shape[0]
            enc_raw, enc_cache = mlp_forward_cached(vae.encoder, xb)
            mu = enc_raw[:, :cfg.z_dim]
            logvar = enc_raw[:, cfg.z_dim:]
            eps = rng.standard_normal(mu.shape)
            std = np.exp(0.5 * logvar)
            z = mu + std * eps
            dec_raw, dec_cache = mlp_forward_cached(vae.decoder, z)
            logits, means, log_scales = vae.split_raw(dec_raw)
            x_pts = xb.reshape(b, cfg.steps, 2)
            nll, gl, gm, gs = _gmm_nll_and_grads(x_pts, logits, means, log_scales)
            kl = 0.5 * (np.exp(logvar) + mu * mu - 1.0 - logvar).sum(axis=1)
            loss = float((nll + cfg.kl_weight * kl).mean())
            if not np.isfinite(loss):
                raise TrainingDiverged(f"VAE loss non-finite at epoch {epoch}")
            total += loss * b
            # assemble decoder-output gradient in split_raw's layout
            g_raw = np.concatenate([
                gl, gm.reshape(b, cfg.steps, -1), gs.reshape(b, cfg.steps, -1),
            ], axis=2).reshape(b, -1) / b
            dec_grads, gz = mlp_backward(vae.decoder, dec_cache, g_raw)
            g_mu = gz + cfg.kl_weight * mu / b
            g_logvar = gz * (0.5 * std * eps) \
                + cfg.kl_weight * 0.5 * (np.exp(logvar) - 1.0) / b
            enc_grads, _ = mlp_backward(vae.encoder, enc_cache,
                                        np.concatenate([g_mu, g_logvar], axis=1))
            adam_step(opt, params, enc_grads + dec_grads, cfg.lr)
        losses.append(total / n)
    return vae, losses


# ---------------------------------------------------------------------------
# Latent steering

@dataclass
class StepInfo:
    q_soft: float             # unclamped normalized quality on the soft path
    q_hard: float             # clamped normalized quality of the hard decode
    grad_norm: float
    points_hard: np.ndarray   # (T, 2)


def draw_noise(vae: ToyVae, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    u = rng.uniform(size=(vae.steps, vae.mixtures))
    gum = -np.log(-np.log(np.clip(u, GUMBEL_EPS, 1.0 - GUMBEL_EPS)))
    eps = rng.standard_normal((vae.steps, 2))
    return gum, eps


def decode_and_score(vae: ToyVae, art: TrainedArtifacts, z: np.ndarray,
                     noise: tuple[np.ndarray, np.ndarray],
                     tau: float = DEFAULT_ST_TAU
                     ) -> tuple[float, float, np.ndarray, np.ndarray]:
    """(q_soft, q_hard, dq_soft/dz, points_hard) at one frozen noise draw.

    q_soft is the unclamped normalized quality of the soft-path decode; its
    gradient w.r.t. z is exact for the frozen noise.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (vae.z_dim,):
        raise DimensionError(f"z must be ({vae.z_dim},), got {z.shape}")
    calib = art.calib
    dec_raw, dec_cache = mlp_forward_cached(vae.decoder, z[None, :])
    logits, means, log_scales = vae.split_raw(dec_raw)
    cache = sample_sequence(logits[0], means[0], log_scales[0], tau,
                            rng=None, noise=noise)
    span = calib.u_q - calib.l_q

    def q_of(points: np.ndarray):
        vec = single_stroke_encoding(points)
        feats, sc_cache = mlp_forward_cached(art.model, vec[None, :])
        q_raw = float(np.linalg.norm(feats[0]))
        q, dq = scale_quality_grad(np.asarray([q_raw]), calib)
        return feats, sc_cache, q_raw, float(q[0]), float(dq[0])

    feats, sc_cache, q_raw, q, dq_dqraw = q_of(cache.points_soft)
    q_soft = (q - calib.l_q) / span

    # backward: d q_soft / d feats = (dq/dq_raw / span) * unit
    if q_raw == 0.0:
        grad_feats = np.zeros_like(feats)
    else:
        grad_feats = (dq_dqraw / span) * feats / q_raw
    _, g_vec = mlp_backward(art.model, sc_cache, grad_feats)
    g_points = single_stroke_point_grad(g_vec[0], cache.points_soft)
    g_logits, g_means, g_ls = sample_sequence_backward(cache, g_points)
    t, m = vae.steps, vae.mixtures
    g_raw = np.concatenate([
        g_logits, g_means.reshape(t, -1), g_ls.reshape(t, -1),
    ], axis=1).reshape(1, -1)
    _, gz = mlp_backward(vae.decoder, dec_cache, g_raw)

    _, _, _, q_hard_raw, _ = q_of(cache.points_hard)
    q_hard = float(normalize_quality(q_hard_raw, calib.l_q, calib.u_q))
    return float(q_soft), q_hard, gz[0], cache.points_hard


def latent_step(z: np.ndarray, z0: np.ndarray, vae: ToyVae,
                art: TrainedArtifacts, rng: np.random.Generator,
                alpha: float = 0.1, lam: float = 0.01, q_max: float = 1.0,
                tau: float = DEFAULT_ST_TAU) -> tuple[np.ndarray, StepInfo]:
    """One descent step on (q_max - q(decode(z))) + alpha ||z - z0||^2."""
    if alpha < 0.0 or lam < 0.0:
        raise DomainError("alpha and lam must be non-negative")
    z = np.asarray(z, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if z.shape != z0.shape:
        raise DimensionError("z and z0 must have the same shape")
    noise = draw_noise(vae, rng)
    q_soft, q_hard, gz, pts = decode_and_score(vae, art, z, noise, tau)
    grad = -gz + 2.0 * alpha * (z - z0)
    z_new = z - lam * grad
    return z_new, StepInfo(q_soft, q_hard, float(np.linalg.norm(grad)), pts)


@dataclass
class SteerRecord:
    step: int
    z: np.ndarray
    q_hard: float
    points: np.ndarray


@dataclass
class SteerResult:
    records: list[SteerRecord] = field(default_factory=list)

    @property
    def q_trace(self) -> list[float]:
        return [r.q_hard for r in self.records]


def steer(vae: ToyVae, art: TrainedArtifacts, z0: np.ndarray, iters: int = 200,
          stride: int = 50, alpha: float = 0.1, lam: float = 0.01,
          seed: int = 0, tau: float = DEFAULT_ST_TAU) -> SteerResult:
    """Run latent ascent from z0, recording every `stride` steps (and the
    start and end). iters=0 records only the start state."""
    if iters < 0 or stride < 1:
        raise ConfigError("need iters >= 0 and stride >= 1")
    rng = np.random.default_rng(seed)
    z0 = np.asarray(z0, dtype=np.float64)
    z = z0.copy()
    out = SteerResult()

    def record(step, zz):
        noise = draw_noise(vae, rng)
        _, q_hard, _, pts = decode_and_score(vae, art, zz, noise, tau)
        out.records.append(SteerRecord(step, zz.copy(), q_hard, pts))

    record(0, z)
    for it in range(1, iters + 1):
        z, info = latent_step(z, z0, vae, art, rng, alpha, lam, tau=tau)
        if it % stride == 0 or it == iters:
            out.records.append(SteerRecord(it, z.copy(), info.q_hard,
                                           info.points_hard))
    return out
