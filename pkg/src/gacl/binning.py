"""Differentiable discretization of the quality value.

A scalar q is routed through a one-layer soft binner: logits
(w * q + b) / tau with w = [1, ..., n+1] and b the negated running sum of the
cut points, so bin k wins exactly when q lies between cut points k and k+1.
The soft output is the expectation of the interval midpoints under the
softmax. Small tau approaches hard binning; large tau washes out toward the
mean midpoint.

During training the binned value substitutes into the target logit only,
which flattens quality resolution early on (few wide bins) and restores it on
a per-epoch ramp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

DEFAULT_TAU = 0.1


@dataclass(frozen=True)
class BinningSpec:
    """n cut points over (lo, hi) and the n+1 interval midpoints they induce."""

    cutpoints: np.ndarray   # (n,), strictly increasing, inside (lo, hi)
    reps: np.ndarray        # (n+1,) interval midpoints
    tau: float
    lo: float
    hi: float
    w: np.ndarray = field(init=False)  # (n+1,) slopes 1..n+1
    b: np.ndarray = field(init=False)  # (n+1,) offsets 0, -c1, -c1-c2, ...

    def __post_init__(self):
        cp = np.asarray(self.cutpoints, dtype=np.float64)
        reps = np.asarray(self.reps, dtype=np.float64)
        if cp.ndim != 1 or cp.size < 1:
            raise ConfigError("need at least one cut point")
        if reps.shape != (cp.size + 1,):
            raise ConfigError("need exactly one representative per interval")
        if (np.diff(cp) <= 0.0).any():
            raise ConfigError("cut points must be strictly increasing")
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not (self.lo < cp[0] and cp[-1] < self.hi):
            raise ConfigError("cut points must lie strictly inside (lo, hi)")
        object.__setattr__(self, "cutpoints", cp)
        object.__setattr__(self, "reps", reps)
        object.__setattr__(self, "w", np.arange(1.0, cp.size + 2.0))
        object.__setattr__(self, "b", -np.concatenate(([0.0], np.cumsum(cp))))

    @property
    def n_cutpoints(self) -> int:
        return int(self.cutpoints.size)


def make_cutpoints(n: int, lo: float, hi: float, tau: float = DEFAULT_TAU) -> BinningSpec:
    """Equally spaced cut points: c_k = lo + k (hi - lo) / (n + 1), k = 1..n."""
    if n < 1:
        raise ConfigError(f"need n >= 1 cut points, got {n}")
    if not lo < hi:
        raise ConfigError(f"need lo < hi, got {lo}, {hi}")
    step = (hi - lo) / (n + 1)
    cp = lo + step * np.arange(1, n + 1, dtype=np.float64)
    edges = np.concatenate(([lo], cp, [hi]))
    reps = 0.5 * (edges[:-1] + edges[1:])
    return BinningSpec(cp, reps, tau, lo, hi)


def soft_bin(q, spec: BinningSpec):
    """Soft-binned value: sum_k softmax((w q + b)/tau)_k * rep_k."""
    out, _ = soft_bin_grad(q, spec)
    return out


def soft_bin_grad(q, spec: BinningSpec) -> tuple[np.ndarray, np.ndarray]:
    """(q_hat, dq_hat/dq), vectorized over q."""
    q_arr = np.asarray(q, dtype=np.float64)
    if not np.isfinite(q_arr).all():
        raise DomainError("q contains non-finite values")
    flat = np.atleast_1d(q_arr).astype(np.float64).ravel()
    z = (flat[:, None] * spec.w[None, :] + spec.b[None, :]) / spec.tau
    z -= z.max(axis=1, keepdims=True)
    o = np.exp(z)
    o /= o.sum(axis=1, keepdims=True)
    qhat = o @ spec.reps
    wbar = o @ spec.w
    # d qhat / dq = sum_k rep_k o_k (w_k - wbar) / tau
    dq = ((o * (spec.w[None, :] - wbar[:, None])) @ spec.reps) / spec.tau
    qhat = qhat.reshape(q_arr.shape)
    dq = dq.reshape(q_arr.shape)
    if q_arr.ndim:
        return qhat, dq
    return float(qhat), float(dq)


def schedule_cutpoints(epoch: int, n_start: int = 5, n_end: int = 20,
                       hold_epochs: int = 5, ramp_epochs: int = 15,
                       active_epochs: int | None = 20) -> int | None:
    """Cut-point count for an epoch: n_start held, then a rounded linear ramp
    to n_end, then None (binning off) once active_epochs is reached. Pass
    active_epochs=None to keep n_end indefinitely."""
    if epoch < 0:
        raise DomainError(f"epoch must be non-negative, got {epoch}")
    if n_start < 1 or n_end < n_start:
        raise ConfigError("need 1 <= n_start <= n_end")
    if hold_epochs < 1 or ramp_epochs < 1:
        raise ConfigError("hold_epochs and ramp_epochs must be positive")
    if active_epochs is not None and epoch >= active_epochs:
        return None
    if epoch < hold_epochs:
        return n_start
    ramp_pos = epoch - (hold_epochs - 1)
    if ramp_pos >= ramp_epochs:
        return n_end
    return int(round(n_start + ramp_pos * (n_end - n_start) / ramp_epochs))


@dataclass(frozen=True)
class BinningSchedule:
    """Trainer-facing schedule; disabled entirely with enabled=False."""

    enabled: bool = True
    n_start: int = 5
    n_end: int = 20
    hold_epochs: int = 5
    ramp_epochs: int = 15
    active_epochs: int | None = 20
    tau: float = DEFAULT_TAU

    def spec_for_epoch(self, epoch: int, lo: float, hi: float) -> BinningSpec | None:
        if not self.enabled:
            return None
        n = schedule_cutpoints(epoch, self.n_start, self.n_end,
                               self.hold_epochs, self.ramp_epochs,
                               self.active_epochs)
        if n is None:
            return None
        return make_cutpoints(n, lo, hi, self.tau)
