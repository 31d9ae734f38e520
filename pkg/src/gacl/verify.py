"""Numerical verification of the head's design conditions on dense grids.

Three checks, each over the working box q in [l_q, u_q], theta in
[0.05, pi/2 - 0.05]:

  geometry         dA/dq and dA/dtheta share their sign (their ratio is
                   positive), so better-aligned samples carry larger quality
                   at stationarity.
  co-optimisation  after a small quality step q' = q - xi * dL/dq, the target
                   logit still pushes theta down: dA/dtheta(q') <= 0.
  optimality       dL/dq is negative at l_q, positive at u_q, and crosses
                   zero exactly once, so the loss keeps one interior optimum.

The competitor mass R enters dL/dq only through p = sigmoid(log R - A), a
number in (0, 1), so sweeping p (or a few log R levels) covers every
possible R.

finite_diff_suite cross-checks every analytic gradient in the head against
central differences on random instances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .binning import make_cutpoints
from .errors import ConfigError, DomainError
from .head import (COS_CLIP, ClassPrototypes, HeadConfig, QualityCalibration,
                   a_value, da_dq, da_dtheta, gacl_grad_q, head_backward,
                   head_forward, regulariser, theta_cap, _sigmoid)

THETA_LO = 0.05
THETA_HI = math.pi / 2.0 - 0.05


@dataclass
class CheckReport:
    check: str
    instantiation: str
    passed: bool
    violations: int
    worst: float          # tightest margin observed (sign convention per check)
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"check": self.check, "instantiation": self.instantiation,
                "passed": self.passed, "violations": self.violations,
                "worst": self.worst, "detail": self.detail}


def _grids(config: HeadConfig, nq: int, ntheta: int):
    if nq < 2 or ntheta < 2:
        raise ConfigError("grids need at least 2 points per axis")
    q = np.linspace(config.l_q, config.u_q, nq)
    theta = np.linspace(THETA_LO, THETA_HI, ntheta)
    return q, theta


def check_geometry(config: HeadConfig, nq: int = 50, ntheta: int = 50) -> CheckReport:
    """Pass iff dA/dq / dA/dtheta > 0 everywhere on the grid."""
    q, theta = _grids(config, nq, ntheta)
    qq, tt = np.meshgrid(q, theta, indexing="ij")
    gq = np.asarray(da_dq(config.instantiation, qq, tt, config.s))
    gt = np.asarray(da_dtheta(config.instantiation, qq, tt, config.s))
    prod = gq * gt  # same sign <=> positive ratio
    bad = prod <= 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(gt != 0.0, gq / gt, np.inf * np.sign(gq))
    worst = float(ratio.min())
    viol = [{"q": float(qq[i, j]), "theta": float(tt[i, j]),
             "ratio": float(ratio[i, j])}
            for i, j in zip(*np.nonzero(bad))][:20]
    return CheckReport("geometry", config.instantiation, not bad.any(),
                       int(bad.sum()), worst,
                       {"min_ratio": worst, "violating_points": viol})


def _grad_q_at(config: HeadConfig, q: np.ndarray, theta: np.ndarray,
               p: np.ndarray | float) -> np.ndarray:
    """dL/dq with the competitor influence pinned at p."""
    drive = -np.asarray(da_dq(config.instantiation, q, theta, config.s))
    _, dg = regulariser(q, config.u_q)
    return p * drive + config.lambda_g * dg


def check_cooptimisation(config: HeadConfig, xi: float = 1e-3, nq: int = 50,
                         ntheta: int = 50,
                         p_levels=(0.01, 0.25, 0.5, 0.75, 0.99, 1.0)) -> CheckReport:
    """Take one simulated quality step against dL/dq, then require
    dA/dtheta <= 0 at the shifted quality for every drive level."""
    if xi < 0.0:
        raise DomainError(f"xi must be non-negative, got {xi}")
    q, theta = _grids(config, nq, ntheta)
    qq, tt = np.meshgrid(q, theta, indexing="ij")
    worst = -np.inf
    violations = 0
    examples = []
    for p in p_levels:
        gq = _grad_q_at(config, qq, tt, p)
        q_shift = qq - xi * gq
        gt = np.asarray(da_dtheta(config.instantiation, q_shift, tt, config.s))
        worst = max(worst, float(gt.max()))
        bad = gt > 0.0
        violations += int(bad.sum())
        if bad.any() and len(examples) < 20:
            for i, j in zip(*np.nonzero(bad)):
                examples.append({"q": float(qq[i, j]), "theta": float(tt[i, j]),
                                 "p": float(p), "da_dtheta": float(gt[i, j])})
                if len(examples) >= 20:
                    break
    return CheckReport("co-optimisation", config.instantiation, violations == 0,
                       violations, worst,
                       {"xi": xi, "max_da_dtheta_after_step": worst,
                        "violating_points": examples})


def check_optimality(config: HeadConfig, nq: int = 2000, ntheta: int = 50,
                     log_r_offsets=(-16.0, 0.0, 16.0)) -> CheckReport:
    """For each theta and competitor level: dL/dq < 0 at l_q, > 0 at u_q, and
    exactly one sign change across a dense q grid."""
    q, theta = _grids(config, nq, ntheta)
    base = math.log(config.class_count - 1)
    violations = 0
    examples = []
    crossings = []
    worst = math.inf  # smallest |endpoint gradient| margin seen
    for off in log_r_offsets:
        log_r = base + off
        for th in theta:
            a = np.asarray(a_value(config.instantiation, q, np.full_like(q, th),
                                   config.s))
            p = _sigmoid(log_r - a)
            g = _grad_q_at(config, q, np.full_like(q, th), p)
            ok_lo = g[0] < 0.0
            ok_hi = g[-1] > 0.0
            signs = np.sign(g)
            signs = signs[signs != 0.0]
            changes = int((signs[1:] != signs[:-1]).sum())
            worst = min(worst, abs(float(g[0])), abs(float(g[-1])))
            if not (ok_lo and ok_hi and changes == 1):
                violations += 1
                if len(examples) < 20:
                    examples.append({"theta": float(th), "log_r": float(log_r),
                                     "grad_at_l": float(g[0]),
                                     "grad_at_u": float(g[-1]),
                                     "sign_changes": changes})
            else:
                i = int(np.nonzero(np.diff(np.sign(g)) != 0)[0][0])
                crossings.append(0.5 * (q[i] + q[i + 1]))
    detail = {"log_r_offsets": list(log_r_offsets),
              "violating_cases": examples}
    if crossings:
        detail["q_star_min"] = float(min(crossings))
        detail["q_star_max"] = float(max(crossings))
    return CheckReport("optimality", config.instantiation, violations == 0,
                       violations, float(worst), detail)


@dataclass
class VerifyReport:
    config: HeadConfig
    checks: list[CheckReport]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"instantiation": self.config.instantiation,
                "s": self.config.s, "l_q": self.config.l_q,
                "u_q": self.config.u_q, "lambda_g": self.config.lambda_g,
                "passed": self.passed,
                "checks": [c.to_dict() for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def verify_config(config: HeadConfig, xi: float = 1e-3, nq: int = 50,
                  ntheta: int = 50, nq_dense: int = 2000) -> VerifyReport:
    return VerifyReport(config, [
        check_geometry(config, nq, ntheta),
        check_cooptimisation(config, xi, nq, ntheta),
        check_optimality(config, nq_dense, ntheta),
    ])


# ---------------------------------------------------------------------------
# Finite-difference audit of the analytic gradients

@dataclass
class FdReport:
    trials: int
    tol: float
    max_err_features: float
    max_err_prototypes: float
    max_err_grad_q: float
    passed: bool

    def to_dict(self) -> dict:
        return {"trials": self.trials, "tol": self.tol,
                "max_err_features": self.max_err_features,
                "max_err_prototypes": self.max_err_prototypes,
                "max_err_grad_q": self.max_err_grad_q, "passed": self.passed}


def _rel(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-6)


_LD = np.longdouble  # 80-bit on x86; the FD oracle needs the headroom


def _softplus_hp(x):
    if x > 0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


def _loss_hp(f, w, y, cfg: HeadConfig, calib: QualityCalibration, spec,
             include_reg: bool = True):
    """Total loss re-derived in extended precision.

    Central differences of the float64 forward bottom out at
    eps * |loss| / (2h), which with the Mul preset's regularizer term
    (~1e3) exceeds the smallest competitor gradient entries. Recomputing
    the same function in longdouble keeps the quantization three orders
    of magnitude below the 1e-5 tolerance.

    include_reg=False drops the lambda_g * G(q) term. It is exactly
    constant under prototype perturbations, so its only effect there would
    be to raise the quantization floor of the difference.
    """
    fv = np.asarray(f, dtype=_LD)
    wv = np.asarray(w, dtype=_LD)
    s = _LD(cfg.s)
    lam = _LD(cfg.lambda_g)
    u_sq = _LD(cfg.u_q) * _LD(cfg.u_q)
    cap = _LD(theta_cap(cfg.instantiation, cfg.u_q))
    total = _LD(0.0)
    for i in range(fv.shape[0]):
        row = fv[i]
        q_raw = np.sqrt((row * row).sum())
        cos = np.clip((row / q_raw) @ wv, -_LD(COS_CLIP), _LD(COS_CLIP))
        theta = np.arccos(cos[y[i]])
        theta_a = theta if theta <= cap else cap
        q = _LD(0.5) * (_LD(calib.l_q) + _LD(calib.u_q)) \
            + (q_raw - _LD(calib.mu0)) * _LD(calib.slope)
        if q < _LD(calib.floor):
            q = _LD(calib.floor)
        q_used = q
        if spec is not None:
            z = (q * np.asarray(spec.w, dtype=_LD)
                 + np.asarray(spec.b, dtype=_LD)) / _LD(spec.tau)
            z -= z.max()
            o = np.exp(z)
            q_used = (o * np.asarray(spec.reps, dtype=_LD)).sum() / o.sum()
        if cfg.instantiation == "scale":
            a = (_LD(1.0) - q_used) * s * np.cos(theta_a)
        elif cfg.instantiation == "mul":
            a = s * np.cos(q_used * theta_a)
        elif cfg.instantiation == "add":
            a = s * np.cos(theta_a + q_used)
        else:
            a = s * np.cos(theta_a) - q_used
        logits = s * np.delete(cos, y[i])
        m = logits.max()
        log_r = m + np.log(np.exp(logits - m).sum())
        total += _softplus_hp(log_r - a)
        if include_reg:
            total += lam * (1 / q + q / u_sq)
    return total


def finite_diff_suite(config: HeadConfig, trials: int = 200, seed: int = 0,
                      h: float = 1e-6, tol: float = 1e-5) -> FdReport:
    """Central differences against head_backward and gacl_grad_q on random
    instances. Instances sit away from the clip kinks (|cos| large, theta at
    pi/2, the calibration floor), where one-sided flatness would make finite
    differences meaningless; half of the trials run with binning active.

    The step is small because the extended-precision oracle makes roundoff
    a non-issue while the soft-binning chain (curvature ~ 1/tau^3 scaled by
    s) makes truncation the binding error at h = 1e-5.
    """
    rng = np.random.default_rng(seed)
    cfg = config
    err_f = err_w = err_q = 0.0
    done = 0
    while done < trials:
        protos = ClassPrototypes.init(cfg.feature_dim, cfg.class_count, rng)
        f = rng.standard_normal((1, cfg.feature_dim)) * rng.uniform(0.5, 2.0)
        y = np.array([rng.integers(cfg.class_count)])
        norms = np.linalg.norm(f, axis=1)
        calib = QualityCalibration(float(norms.mean()),
                                   float(rng.uniform(0.2, 0.8) * norms.mean()),
                                   cfg.l_q, cfg.u_q)
        spec = None
        if done % 2 == 1:
            spec = make_cutpoints(4, cfg.l_q, cfg.u_q, tau=0.1)
        batch = head_forward(f, protos, y, cfg, calib, spec)
        # keep clear of the kinks: theta cap, cosine clip, calibration floor
        if abs(batch.theta[0] - theta_cap(cfg.instantiation, cfg.u_q)) < 1e-3:
            continue
        if np.abs(batch.cosines).max() > 0.99:
            continue
        if abs(batch.q[0] - calib.floor) < 1e-3:
            continue
        gf, gw = head_backward(batch, protos)
        for i in range(cfg.feature_dim):
            step = h * max(1.0, abs(f[0, i]))
            fp = f.copy(); fp[0, i] += step
            fm = f.copy(); fm[0, i] -= step
            fd = float((_loss_hp(fp, protos.w, y, cfg, calib, spec)
                        - _loss_hp(fm, protos.w, y, cfg, calib, spec))
                       / _LD(2 * step))
            err_f = max(err_f, _rel(gf[0, i], fd))
        for i in range(cfg.feature_dim):
            for j in range(cfg.class_count):
                step = h * max(1.0, abs(protos.w[i, j]))
                wp = protos.w.copy(); wp[i, j] += step
                wm = protos.w.copy(); wm[i, j] -= step
                fd = float((_loss_hp(f, wp, y, cfg, calib, spec, False)
                            - _loss_hp(f, wm, y, cfg, calib, spec, False))
                           / _LD(2 * step))
                err_w = max(err_w, _rel(gw[i, j], fd))
        # scalar quality-gradient path
        qv = rng.uniform(cfg.l_q, cfg.u_q)
        th = rng.uniform(THETA_LO, THETA_HI)
        log_r = math.log(cfg.class_count - 1) + rng.uniform(-10.0, 10.0)
        ga = gacl_grad_q(cfg.instantiation, qv, th, cfg.s, log_r,
                         cfg.lambda_g, cfg.u_q)

        def scalar_loss(qx) -> _LD:
            q = _LD(qx)
            s, th_l = _LD(cfg.s), _LD(th)
            if cfg.instantiation == "scale":
                a = (_LD(1.0) - q) * s * np.cos(th_l)
            elif cfg.instantiation == "mul":
                a = s * np.cos(q * th_l)
            elif cfg.instantiation == "add":
                a = s * np.cos(th_l + q)
            else:
                a = s * np.cos(th_l) - q
            reg = 1 / q + q / (_LD(cfg.u_q) * _LD(cfg.u_q))
            return _softplus_hp(_LD(log_r) - a) + _LD(cfg.lambda_g) * reg

        # smaller step: the Mul drive's third derivative (~s * theta^3 terms)
        # makes h=1e-5 truncation visible near the gradient's zero crossing
        hq = h / 10.0
        fd = float((scalar_loss(qv + hq) - scalar_loss(qv - hq)) / _LD(2 * hq))
        err_q = max(err_q, _rel(ga, fd))
        done += 1
    return FdReport(trials, tol, float(err_f), float(err_w), float(err_q),
                    bool(max(err_f, err_w, err_q) < tol))
