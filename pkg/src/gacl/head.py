"""Classification head that reads per-sample quality off the feature magnitude.

The target logit couples a quality value q (an affine rescaling of the feature
L2 norm) with the angle theta between the feature and its class prototype.
Four couplings are provided:

    scale:  A = (1 - q) * s * cos(theta)
    mul:    A = s * cos(q * theta)
    add:    A = s * cos(theta + q)
    cos:    A = s * cos(theta) - q

The per-sample loss is -log(e^A / (e^A + R)) with R the sum of e^{s cos} over
non-target classes, plus lambda_g * G(q) with the convex confinement term
G(q) = 1/q + q/u_q^2. lambda_g must exceed a per-coupling lower bound or the
loss can lose its interior optimum in q; configs below the bound are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError, DomainError
from .binning import BinningSpec, soft_bin_grad

INSTANTIATIONS = ("scale", "mul", "add", "cos")

# (l_q, u_q, s) per coupling; working ranges where all three analytic
# constraints hold with margin.
PRESETS = {
    "scale": (0.1, 0.3, 64.0),
    "mul": (1.1, 1.25, 64.0),
    "add": (0.45, 0.65, 64.0),
    "cos": (0.35, 0.8, 64.0),
}

# Safety factor applied to the lambda_g lower bound when no explicit value is given.
LAMBDA_MARGIN = 1.05

COS_CLIP = 1.0 - 1e-7  # keeps arccos and its derivative finite


def theta_cap(instantiation: str, u_q: float) -> float:
    """Largest target angle at which dA/dtheta keeps its sign.

    A is evaluated at min(theta, cap). A smaller cap (pi/2) would leave
    samples initialized past it with no attraction to their prototype at
    all, and training stalls in an everything-orthogonal solution; the
    monotone limit removes that dead zone without giving up the
    sign-stability the clip is for.
    """
    _check_inst(instantiation)
    if instantiation == "mul":
        return math.pi / u_q
    if instantiation == "add":
        return math.pi - u_q
    return math.pi


def lambda_bound(instantiation: str, s: float, l_q: float, u_q: float) -> float:
    """Smallest lambda_g for which the loss keeps an interior optimum in q."""
    _check_inst(instantiation)
    if not (0.0 < l_q < u_q):
        raise ConfigError(f"need 0 < l_q < u_q, got l_q={l_q}, u_q={u_q}")
    if s <= 0.0:
        raise ConfigError(f"scale s must be positive, got {s}")
    core = (l_q * l_q * u_q * u_q) / (u_q * u_q - l_q * l_q)
    if instantiation in ("scale", "add"):
        return s * core
    if instantiation == "mul":
        return s * math.pi * core / 2.0
    return core  # cos


def _check_inst(instantiation: str):
    if instantiation not in INSTANTIATIONS:
        raise ConfigError(
            f"unknown instantiation {instantiation!r}; expected one of {INSTANTIATIONS}")


@dataclass(frozen=True)
class HeadConfig:
    instantiation: str
    l_q: float
    u_q: float
    s: float
    class_count: int
    feature_dim: int
    lambda_g: float | None = None  # None -> LAMBDA_MARGIN * lambda_bound

    def __post_init__(self):
        _check_inst(self.instantiation)
        if not (0.0 < self.l_q < self.u_q):
            raise ConfigError(f"need 0 < l_q < u_q, got {self.l_q}, {self.u_q}")
        if self.s <= 0.0:
            raise ConfigError(f"s must be positive, got {self.s}")
        if self.class_count < 2:
            raise ConfigError(f"need at least 2 classes, got {self.class_count}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be positive, got {self.feature_dim}")
        bound = lambda_bound(self.instantiation, self.s, self.l_q, self.u_q)
        if self.lambda_g is None:
            object.__setattr__(self, "lambda_g", LAMBDA_MARGIN * bound)
        elif self.lambda_g <= bound:
            raise ConfigError(
                f"lambda_g={self.lambda_g} is at or below the stability bound "
                f"{bound:.6g} for {self.instantiation!r}")

    @property
    def q_mid(self) -> float:
        return 0.5 * (self.l_q + self.u_q)


def preset(name: str, class_count: int, feature_dim: int,
           lambda_g: float | None = None) -> HeadConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {tuple(PRESETS)}")
    l_q, u_q, s = PRESETS[name]
    return HeadConfig(name, l_q, u_q, s, class_count, feature_dim, lambda_g)


# ---------------------------------------------------------------------------
# Prototypes

@dataclass
class ClassPrototypes:
    """Unit-norm class directions, one column per class. No bias term."""

    w: np.ndarray  # (feature_dim, class_count)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2:
            raise DimensionError("prototypes must be a 2-D matrix")

    @classmethod
    def init(cls, feature_dim: int, class_count: int,
             rng: np.random.Generator) -> "ClassPrototypes":
        w = rng.standard_normal((feature_dim, class_count))
        w /= np.linalg.norm(w, axis=0, keepdims=True)
        return cls(w)

    def renormalize(self):
        norms = np.linalg.norm(self.w, axis=0, keepdims=True)
        if (norms == 0.0).any():
            raise DomainError("prototype column collapsed to zero norm")
        self.w /= norms

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.w, axis=0)

    def copy(self) -> "ClassPrototypes":
        return ClassPrototypes(self.w.copy())


def project_prototype_grads(grads: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Remove the radial component per column so a step keeps columns near
    unit norm to first order; callers renormalize after the step regardless."""
    if grads.shape != w.shape:
        raise DimensionError("gradient and prototype shapes differ")
    radial = (grads * w).sum(axis=0, keepdims=True)
    return grads - radial * w


# ---------------------------------------------------------------------------
# Calibration: raw magnitude -> working range

@dataclass(frozen=True)
class QualityCalibration:
    """Affine map from raw feature magnitude to [l_q, u_q], frozen from the
    first training batch so +-3 sigma of the initial magnitudes spans the
    working range. Output is floor-clamped at l_q / 2; no upper clamp."""

    mu0: float
    sigma0: float
    l_q: float
    u_q: float

    def __post_init__(self):
        if self.sigma0 <= 0.0:
            raise DataError(f"sigma0 must be positive, got {self.sigma0}")
        if not (0.0 < self.l_q < self.u_q):
            raise ConfigError("calibration needs 0 < l_q < u_q")

    @classmethod
    def from_batch(cls, q_raw: np.ndarray, config: HeadConfig) -> "QualityCalibration":
        q_raw = np.asarray(q_raw, dtype=np.float64)
        if q_raw.size == 0:
            raise DataError("cannot calibrate from an empty batch")
        mu0 = float(q_raw.mean())
        sigma0 = float(q_raw.std())
        if sigma0 <= 0.0:
            raise DataError("first-batch feature magnitudes are constant; "
                            "cannot freeze calibration")
        return cls(mu0, sigma0, config.l_q, config.u_q)

    @property
    def slope(self) -> float:
        return (self.u_q - self.l_q) / (6.0 * self.sigma0)

    @property
    def floor(self) -> float:
        return 0.5 * self.l_q


def scale_quality(q_raw: np.ndarray | float, calib: QualityCalibration):
    """q = mid + (q_raw - mu0) / (6 sigma0) * (u_q - l_q), clamped below at l_q/2."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    mid = 0.5 * (calib.l_q + calib.u_q)
    q = mid + (q_raw - calib.mu0) * calib.slope
    q = np.maximum(q, calib.floor)
    return q if q.ndim else float(q)


def scale_quality_grad(q_raw: np.ndarray, calib: QualityCalibration) -> tuple[np.ndarray, np.ndarray]:
    """(q, dq/dq_raw); the derivative is zero where the floor clamp binds."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    mid = 0.5 * (calib.l_q + calib.u_q)
    raw = mid + (q_raw - calib.mu0) * calib.slope
    q = np.maximum(raw, calib.floor)
    dq = np.where(raw > calib.floor, calib.slope, 0.0)
    return q, dq


def normalize_quality(q: np.ndarray | float, l_q: float, u_q: float):
    """Map working-range quality to [0, 1] with clamping, for reporting."""
    q = np.asarray(q, dtype=np.float64)
    out = np.clip((q - l_q) / (u_q - l_q), 0.0, 1.0)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Target logit family and the confinement term

def a_value(instantiation: str, q, theta, s: float):
    """Target logit A(q, theta). Callers keep theta within [0, pi/2]; the mul
    and add couplings lose monotonicity beyond it."""
    _check_inst(instantiation)
    q = np.asarray(q, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if instantiation == "scale":
        out = (1.0 - q) * s * np.cos(theta)
    elif instantiation == "mul":
        out = s * np.cos(q * theta)
    elif instantiation == "add":
        out = s * np.cos(theta + q)
    else:
        out = s * np.cos(theta) - q
    return out if out.ndim else float(out)


def da_dq(instantiation: str, q, theta, s: float):
    _check_inst(instantiation)
    q = np.asarray(q, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if instantiation == "scale":
        out = -s * np.cos(theta) * np.ones_like(q)
    elif instantiation == "mul":
        out = -s * theta * np.sin(q * theta)
    elif instantiation == "add":
        out = -s * np.sin(theta + q)
    else:
        out = -np.ones(np.broadcast(q, theta).shape)
    return out if out.ndim else float(out)


def da_dtheta(instantiation: str, q, theta, s: float):
    _check_inst(instantiation)
    q = np.asarray(q, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if instantiation == "scale":
        out = -(1.0 - q) * s * np.sin(theta)
    elif instantiation == "mul":
        out = -s * q * np.sin(q * theta)
    elif instantiation == "add":
        out = -s * np.sin(theta + q)
    else:
        out = -s * np.sin(theta) * np.ones_like(q)
    return out if out.ndim else float(out)


def regulariser(q, u_q: float):
    """G(q) = 1/q + q/u_q^2 and its derivative; the minimum sits exactly at u_q."""
    q = np.asarray(q, dtype=np.float64)
    if (q <= 0.0).any():
        raise DomainError("regulariser needs q > 0")
    if u_q <= 0.0:
        raise ConfigError("u_q must be positive")
    g = 1.0 / q + q / (u_q * u_q)
    dg = -1.0 / (q * q) + 1.0 / (u_q * u_q)
    if g.ndim:
        return g, dg
    return float(g), float(dg)


def _sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = np.atleast_1d(x).ravel()
    out = np.empty_like(flat)
    pos = flat >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(x.shape)


def gacl_loss(a, log_r):
    """Stable -log(e^A / (e^A + R)) = softplus(log_R - A)."""
    a = np.asarray(a, dtype=np.float64)
    log_r = np.asarray(log_r, dtype=np.float64)
    out = np.logaddexp(0.0, log_r - a)
    return out if out.ndim else float(out)


def gacl_grad_q(instantiation: str, q, theta, s: float, log_r,
                lambda_g: float, u_q: float):
    """dL/dq = sigmoid(log_R - A) * (-dA/dq) + lambda_g * dG/dq."""
    a = np.asarray(a_value(instantiation, q, theta, s), dtype=np.float64)
    p = _sigmoid(np.asarray(log_r, dtype=np.float64) - a)
    drive = -np.asarray(da_dq(instantiation, q, theta, s))
    _, dg = regulariser(np.asarray(q, dtype=np.float64), u_q)
    out = np.asarray(p * drive + lambda_g * dg)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Reference losses

def normalized_softmax_loss(cosines: np.ndarray, label: int, s: float) -> float:
    """Cross entropy over s * cosines for one sample (unit feature, no bias)."""
    cosines = np.asarray(cosines, dtype=np.float64)
    if cosines.ndim != 1:
        raise DimensionError("cosines must be a vector")
    if not 0 <= label < cosines.size:
        raise DomainError(f"label {label} out of range for {cosines.size} classes")
    if s <= 0.0:
        raise ConfigError("s must be positive")
    logits = s * cosines
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[label])


def softmax_lower_bound(class_count: int, q_raw: float) -> float:
    """Floor of the magnitude-bearing softmax loss for a sample of magnitude
    q_raw under well-separated, equally-sized classes:
    log(1 + (C-1) e^{-C q_raw / (C-1)})."""
    if class_count < 2:
        raise ConfigError("need at least 2 classes")
    if q_raw < 0.0:
        raise DomainError("q_raw is a magnitude; it cannot be negative")
    c = float(class_count)
    return float(np.logaddexp(0.0, math.log(c - 1.0) - c * q_raw / (c - 1.0)))


def margin_form_loss(cosines: np.ndarray, label: int, margin: float) -> float:
    """Additive-margin softmax on raw cosines (scale 1): the cos coupling with
    s = 1 and q = margin reproduces this exactly."""
    cosines = np.asarray(cosines, dtype=np.float64)
    if cosines.ndim != 1:
        raise DimensionError("cosines must be a vector")
    if not 0 <= label < cosines.size:
        raise DomainError(f"label {label} out of range for {cosines.size} classes")
    others = np.delete(cosines, label)
    log_r = _logsumexp(others)
    return float(np.logaddexp(0.0, log_r - (cosines[label] - margin)))


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


# ---------------------------------------------------------------------------
# Batched head forward/backward

@dataclass
class HeadOutput:
    """Per-sample view of a forward pass."""

    q_raw: float
    q: float
    q_used: float
    cosines: np.ndarray
    theta: float
    a: float
    log_r: float
    loss: float
    grad_q: float
    theta_clipped: bool
    zero_feature: bool


@dataclass
class HeadBatch:
    """Vectorized forward results plus everything backward needs."""

    labels: np.ndarray        # (B,) int
    q_raw: np.ndarray         # (B,)
    unit: np.ndarray          # (B, d) normalized features (zero rows stay zero)
    cosines: np.ndarray       # (B, C) clipped
    clip_mask: np.ndarray     # (B, C) True where the cosine clip bound
    theta: np.ndarray         # (B,) target angle before the pi/2 clip
    theta_a: np.ndarray       # (B,) clipped angle used in A
    q: np.ndarray             # (B,) calibrated quality
    dq_dqraw: np.ndarray      # (B,)
    q_used: np.ndarray        # (B,) after binning substitution (== q when off)
    dqused_dq: np.ndarray     # (B,)
    a: np.ndarray             # (B,)
    log_r: np.ndarray         # (B,)
    p: np.ndarray             # (B,) sigmoid(log_R - A)
    loss: np.ndarray          # (B,) includes the lambda_g G(q) term
    grad_q: np.ndarray        # (B,) dL/dq at the continuous q
    zero_feature: np.ndarray  # (B,) bool
    config: HeadConfig
    calib: QualityCalibration

    def sample(self, i: int) -> HeadOutput:
        return HeadOutput(
            q_raw=float(self.q_raw[i]), q=float(self.q[i]),
            q_used=float(self.q_used[i]), cosines=self.cosines[i].copy(),
            theta=float(self.theta[i]), a=float(self.a[i]),
            log_r=float(self.log_r[i]), loss=float(self.loss[i]),
            grad_q=float(self.grad_q[i]),
            theta_clipped=bool(self.theta[i] > self._cap),
            zero_feature=bool(self.zero_feature[i]))

    @property
    def _cap(self) -> float:
        return theta_cap(self.config.instantiation, self.config.u_q)

    @property
    def theta_clip_count(self) -> int:
        return int((self.theta > self._cap).sum())


def head_forward(features: np.ndarray, prototypes: ClassPrototypes,
                 labels: np.ndarray, config: HeadConfig,
                 calib: QualityCalibration,
                 binning: BinningSpec | None = None) -> HeadBatch:
    """Score a batch: magnitudes become quality, directions become cosines.

    When a binning spec is given, the binned quality substitutes into the
    target logit only; the confinement term and all reported qualities stay
    continuous.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != config.feature_dim:
        raise DimensionError(
            f"features shape {f.shape} incompatible with feature_dim {config.feature_dim}")
    y = np.asarray(labels)
    if y.shape != (f.shape[0],):
        raise DimensionError("labels must be one per feature row")
    if not np.issubdtype(y.dtype, np.integer):
        raise DimensionError("labels must be integers")
    if y.size == 0:
        raise DataError("empty batch")
    if y.min() < 0 or y.max() >= config.class_count:
        raise DomainError("label out of range")
    w = prototypes.w
    if w.shape != (config.feature_dim, config.class_count):
        raise DimensionError(
            f"prototypes shape {w.shape} != ({config.feature_dim}, {config.class_count})")
    y = y.astype(np.intp)

    q_raw = np.linalg.norm(f, axis=1)
    zero = q_raw == 0.0
    safe = np.where(zero, 1.0, q_raw)
    unit = f / safe[:, None]

    raw_cos = unit @ w
    cosines = np.clip(raw_cos, -COS_CLIP, COS_CLIP)
    clip_mask = raw_cos != cosines

    idx = np.arange(f.shape[0])
    cos_y = cosines[idx, y]
    theta = np.arccos(cos_y)
    theta_a = np.minimum(theta, theta_cap(config.instantiation, config.u_q))

    q, dq_dqraw = scale_quality_grad(q_raw, calib)
    if binning is not None:
        q_used, dqused_dq = soft_bin_grad(q, binning)
    else:
        q_used, dqused_dq = q, np.ones_like(q)

    a = a_value(config.instantiation, q_used, theta_a, config.s)

    logits = config.s * cosines
    logits[idx, y] = -np.inf  # drop the target column from the competitor sum
    mx = logits.max(axis=1)
    log_r = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1))

    x = log_r - a
    p = _sigmoid(x)
    g, dg = regulariser(q, config.u_q)
    loss = np.logaddexp(0.0, x) + config.lambda_g * g
    grad_q = p * (-da_dq(config.instantiation, q_used, theta_a, config.s)) \
        * dqused_dq + config.lambda_g * dg

    return HeadBatch(labels=y, q_raw=q_raw, unit=unit, cosines=cosines,
                     clip_mask=clip_mask, theta=theta, theta_a=theta_a,
                     q=q, dq_dqraw=dq_dqraw, q_used=q_used,
                     dqused_dq=dqused_dq, a=a, log_r=log_r, p=p, loss=loss,
                     grad_q=grad_q, zero_feature=zero, config=config,
                     calib=calib)


def head_backward(batch: HeadBatch, prototypes: ClassPrototypes
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the summed batch loss.

    Returns (grad_features (B, d), grad_prototypes (d, C)). These are raw
    gradients that match finite differences entry for entry; tangent-space
    projection for the prototype step is a separate concern
    (project_prototype_grads). Zero-magnitude rows get zero gradient.
    """
    cfg = batch.config
    b, c = batch.cosines.shape
    idx = np.arange(b)
    y = batch.labels

    # Competitor side: dL/dcos_j = p * s * softmax over non-target logits.
    logits = cfg.s * batch.cosines
    logits[idx, y] = -np.inf
    sm = np.exp(logits - batch.log_r[:, None])
    g_cos = batch.p[:, None] * cfg.s * sm
    g_cos[idx, y] = 0.0

    # Target side: through A(q_used, theta_a).
    dL_dA = -batch.p
    cap = theta_cap(cfg.instantiation, cfg.u_q)
    dtheta_mask = (batch.theta <= cap).astype(np.float64)
    cos_y = batch.cosines[idx, y]
    # d theta / d cos = -1 / sqrt(1 - cos^2); the clip keeps it finite.
    dtheta_dcos = -1.0 / np.sqrt(1.0 - cos_y * cos_y)
    dA_dtheta = da_dtheta(cfg.instantiation, batch.q_used, batch.theta_a, cfg.s)
    g_cos[idx, y] = dL_dA * dA_dtheta * dtheta_mask * dtheta_dcos

    g_cos[batch.clip_mask] = 0.0  # cosine clip is flat where it binds

    # Through the unit direction: cos = unit @ W.
    g_unit = g_cos @ prototypes.w.T
    grad_w = batch.unit.T @ g_cos

    # Through the normalization unit = f / |f| plus the magnitude path.
    inv = np.where(batch.zero_feature, 0.0, 1.0 / np.where(batch.zero_feature, 1.0, batch.q_raw))
    radial = (g_unit * batch.unit).sum(axis=1, keepdims=True)
    grad_f = (g_unit - radial * batch.unit) * inv[:, None]
    gq_raw = batch.grad_q * batch.dq_dqraw
    grad_f += (gq_raw * ~batch.zero_feature)[:, None] * batch.unit

    return grad_f, grad_w


def softmax_ce_batch(cosines: np.ndarray, labels: np.ndarray, s: float
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Batched cross entropy over s * cosines; returns (loss (B,), dL/dcos (B, C)).

    Baseline head for accuracy comparisons; magnitude carries no signal here.
    """
    z = s * np.asarray(cosines, dtype=np.float64)
    b = z.shape[0]
    idx = np.arange(b)
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - m - np.log(denom)
    loss = -logp[idx, labels]
    grad = s * (ez / denom)
    grad[idx, labels] -= s
    return loss, grad
