"""Training loop: MLP backbone plus the magnitude-quality head, optimized by
Adam under a per-epoch cosine warm-restart schedule.

The magnitude calibration is frozen from the very first batch the untrained
backbone sees. During the binning window the discretized quality substitutes
into the target logit; reported qualities are always the continuous values.
Labels can come from the dataset, or from k-means pseudo-labels on the
evolving features, refreshed every few epochs.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import features
from .binning import BinningSchedule
from .datagen import LabeledSet, pseudo_label
from .engine import (MlpModel, OptimizerState, adam_step, cosine_warm_restart_lr,
                     mlp_backward, mlp_forward, mlp_forward_cached)
from .errors import ConfigError, TrainingDiverged
from .head import (ClassPrototypes, HeadConfig, QualityCalibration, head_backward,
                   head_forward, normalize_quality, project_prototype_grads,
                   scale_quality, softmax_ce_batch, COS_CLIP)

log = logging.getLogger(__name__)

LOSSES = ("gacl", "softmax")


@dataclass(frozen=True)
class TrainConfig:
    head: HeadConfig
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    lr_min: float = 0.0
    lr_decay: float = 1.0     # per-epoch multiplier on the restart peak
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 64, 64)
    loss: str = "gacl"
    binning: BinningSchedule = field(default_factory=BinningSchedule)
    pseudo_refresh: int = 0   # 0 trains on the given labels
    pseudo_k: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.lr_min <= self.lr:
            raise ConfigError("need 0 <= lr_min <= lr")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.pseudo_refresh < 0:
            raise ConfigError("pseudo_refresh must be non-negative")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden_dims must be non-empty positive ints")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    accuracy: float
    lr_first: float
    lr_last: float
    n_cutpoints: int          # 0 when binning is off this epoch
    mean_q_norm: float
    mean_theta: float
    theta_clip_rate: float    # fraction of samples past pi/2 during the epoch
    adam_skips: int           # cumulative skipped updates


CSV_FIELDS = ("epoch", "mean_loss", "accuracy", "lr_first", "lr_last",
              "n_cutpoints", "mean_q_norm", "mean_theta", "theta_clip_rate",
              "adam_skips")


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    snapshots: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(CSV_FIELDS) + "\n")
        for r in self.records:
            vals = [getattr(r, f) for f in CSV_FIELDS]
            out.write(",".join(_fmt(v) for v in vals) + "\n")
        return out.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)  # shortest round-trip text keeps runs byte-comparable
    return str(v)


@dataclass
class TrainedArtifacts:
    model: MlpModel
    prototypes: ClassPrototypes
    calib: QualityCalibration
    head: HeadConfig
    log: TrainLog
    pseudo_labels: np.ndarray | None = None
    pseudo_centres: np.ndarray | None = None


def encode_inputs(data: LabeledSet) -> np.ndarray:
    """Point sets pass through; sketch sets go through the fixed featurizer."""
    if data.is_points:
        return np.asarray(data.samples, dtype=np.float64)
    return features.encode_batch(data.samples)


def train(config: TrainConfig, data: LabeledSet) -> TrainedArtifacts:
    rng = np.random.default_rng(config.seed)
    inputs = encode_inputs(data)
    n = inputs.shape[0]
    head = config.head
    dims = [inputs.shape[1], *config.hidden_dims, head.feature_dim]
    model = MlpModel.init(dims, rng)
    protos = ClassPrototypes.init(head.feature_dim, head.class_count, rng)
    opt_params = model.params() + [protos.w]
    opt = OptimizerState.for_params(opt_params)

    labels = data.labels.copy()
    centres = None
    calib: QualityCalibration | None = None
    trainlog = TrainLog()
    n_batches = (n + config.batch_size - 1) // config.batch_size

    for epoch in range(config.epochs):
        if config.pseudo_refresh and epoch % config.pseudo_refresh == 0:
            feats = mlp_forward(model, inputs)
            k = config.pseudo_k or head.class_count
            km_seed = int(rng.integers(2 ** 31))
            labels, centres = pseudo_label(feats, k, seed=km_seed,
                                           prev_centres=centres)
        spec = None
        if config.loss == "gacl":
            spec = config.binning.spec_for_epoch(epoch, head.l_q, head.u_q)

        order = rng.permutation(n)
        loss_sum = 0.0
        clip_count = 0
        lr_first = lr_last = config.lr
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            xb, yb = inputs[idx], labels[idx]
            feats, cache = mlp_forward_cached(model, xb)
            if calib is None:
                calib = QualityCalibration.from_batch(
                    np.linalg.norm(feats, axis=1), head)
            bsz = xb.shape[0]
            if config.loss == "gacl":
                hb = head_forward(feats, protos, yb, head, calib, spec)
                batch_loss = float(hb.loss.mean())
                clip_count += hb.theta_clip_count
                gf, gw = head_backward(hb, protos)
            else:
                batch_loss, gf, gw = _softmax_step(feats, protos, yb, head.s)
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b}")
            loss_sum += batch_loss * bsz
            pgrads, _ = mlp_backward(model, cache, gf / bsz)
            gw_t = project_prototype_grads(gw / bsz, protos.w)
            peak = config.lr * config.lr_decay ** epoch
            lr_t = cosine_warm_restart_lr(b / n_batches, peak,
                                          min(config.lr_min, peak))
            if b == 0:
                lr_first = lr_t
            lr_last = lr_t
            adam_step(opt, opt_params, pgrads + [gw_t], lr_t)
            protos.renormalize()

        ev = evaluate(model, protos, calib, head, inputs=inputs, labels=labels)
        trainlog.records.append(EpochRecord(
            epoch=epoch, mean_loss=loss_sum / n, accuracy=ev.accuracy,
            lr_first=lr_first, lr_last=lr_last,
            n_cutpoints=spec.n_cutpoints if spec is not None else 0,
            mean_q_norm=float(ev.q_norm.mean()), mean_theta=float(ev.theta.mean()),
            theta_clip_rate=clip_count / n, adam_skips=opt.skipped))
        trainlog.snapshots.append((ev.q_norm.copy(), ev.theta.copy()))

    return TrainedArtifacts(model, protos, calib, head, trainlog,
                            pseudo_labels=labels.copy() if config.pseudo_refresh else None,
                            pseudo_centres=centres)


def _softmax_step(feats, protos, yb, s):
    """Baseline head: plain cross entropy over scaled cosines."""
    q_raw = np.linalg.norm(feats, axis=1)
    zero = q_raw == 0.0
    safe = np.where(zero, 1.0, q_raw)
    unit = feats / safe[:, None]
    cos = unit @ protos.w
    loss_vec, gcos = softmax_ce_batch(cos, yb, s)
    gu = gcos @ protos.w.T
    gw = unit.T @ gcos
    radial = (gu * unit).sum(axis=1, keepdims=True)
    gf = (gu - radial * unit) / safe[:, None]
    gf[zero] = 0.0
    return float(loss_vec.mean()), gf, gw


@dataclass
class EvalResult:
    accuracy: float
    pred: np.ndarray     # (N,) argmax over cosines
    q: np.ndarray        # (N,) calibrated quality
    q_norm: np.ndarray   # (N,) clamped to [0, 1]
    theta: np.ndarray    # (N,) target angle, full [0, pi]
    margin: np.ndarray   # (N,) top-1 minus top-2 cosine
    cosines: np.ndarray  # (N, C)


def evaluate(model: MlpModel, protos: ClassPrototypes,
             calib: QualityCalibration, head: HeadConfig,
             data: LabeledSet | None = None,
             inputs: np.ndarray | None = None,
             labels: np.ndarray | None = None) -> EvalResult:
    """Full-set forward pass; labels are only used for accuracy."""
    if inputs is None:
        if data is None:
            raise ConfigError("evaluate needs either data or inputs")
        inputs = encode_inputs(data)
        labels = data.labels
    feats = mlp_forward(model, inputs)
    q_raw = np.linalg.norm(feats, axis=1)
    zero = q_raw == 0.0
    safe = np.where(zero, 1.0, q_raw)
    unit = feats / safe[:, None]
    cos = np.clip(unit @ protos.w, -COS_CLIP, COS_CLIP)
    pred = cos.argmax(axis=1)
    top2 = np.partition(cos, -2, axis=1)[:, -2:]
    margin = top2[:, 1] - top2[:, 0]
    q = np.asarray(scale_quality(q_raw, calib))
    q_norm = np.asarray(normalize_quality(q, calib.l_q, calib.u_q))
    if labels is not None:
        idx = np.arange(inputs.shape[0])
        theta = np.arccos(cos[idx, np.asarray(labels, dtype=np.intp)])
        accuracy = float((pred == np.asarray(labels)).mean())
    else:
        theta = np.arccos(cos[np.arange(inputs.shape[0]), pred])
        accuracy = float("nan")
    return EvalResult(accuracy, pred, q, q_norm, theta, margin, cos)
