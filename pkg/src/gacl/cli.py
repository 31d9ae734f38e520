"""Command line entry point.

Every subcommand is deterministic given identical inputs and --seed: floats
are printed with repr (shortest round trip), JSON is emitted with sorted
keys, and all randomness flows from the seed. Relative output paths resolve
under $GACL_OUT_DIR (default: current directory).

Exit codes: 0 success, 1 check or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import apps
from .binning import BinningSchedule
from .checkpoint import load_classifier, load_vae, save_classifier, save_vae
from .datagen import (GaussianMixtureSpec, LabeledSet, bin_ratings,
                      gen_gaussians, gen_sketch_set, inject_label_noise,
                      load_points, load_sketches, save_points, save_sketches)
from .errors import DataError, GaclError
from .head import INSTANTIATIONS, HeadConfig, preset
from .steer import VaeConfig, resample_sketch, steer, train_vae
from .trainer import TrainConfig, encode_inputs, evaluate, train
from .verify import finite_diff_suite, verify_config

CSV_HEADER = "id,q,theta,verdict"


def _r(v) -> str:
    return repr(float(v))


def _out_path(p: str) -> Path:
    path = Path(p)
    if not path.is_absolute():
        path = Path(os.environ.get("GACL_OUT_DIR", ".")) / path
    return path


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        _out_path(out).write_text(text, encoding="utf-8")


def _load_any(path: str) -> LabeledSet:
    """Sniff NDJSON kind from the first record."""
    with open(path) as fh:
        first = ""
        for line in fh:
            if line.strip():
                first = line
                break
    if not first:
        raise DataError(f"no records in {path}")
    rec = json.loads(first)
    if "strokes" in rec:
        return load_sketches(path)
    if "point" in rec:
        return load_points(path)
    raise DataError(f"unrecognized record layout in {path}")


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}") from None
    if not dims:
        raise argparse.ArgumentTypeError("hidden dims must be non-empty")
    return dims


def _parse_opt_int(text: str) -> int | None:
    if text.strip().lower() in ("none", "off"):
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected int or 'none', got {text!r}") from None


def parse_config_file(path: str) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; keys use the flag
    names with dashes or underscores."""
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line without '=': {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip().replace("-", "_")] = val.strip()
    return out


# ---------------------------------------------------------------------------
# Subcommands

def _head_from_args(args, class_count: int) -> HeadConfig:
    return preset(args.preset, class_count=class_count,
                  feature_dim=args.feature_dim)


def _train_config(args, head: HeadConfig) -> TrainConfig:
    binning = BinningSchedule(
        enabled=(args.binning == "on"), n_start=args.bin_start,
        n_end=args.bin_end, hold_epochs=args.bin_hold,
        ramp_epochs=args.bin_ramp, active_epochs=args.bin_active,
        tau=args.bin_tau)
    return TrainConfig(head=head, epochs=args.epochs,
                       batch_size=args.batch_size, lr=args.lr,
                       lr_min=args.lr_min, seed=args.seed,
                       hidden_dims=args.hidden, loss=args.loss,
                       binning=binning, pseudo_refresh=args.pseudo_refresh,
                       pseudo_k=args.pseudo_k)


def cmd_train(args) -> int:
    data = _load_any(args.data)
    if args.pseudo_k is not None and args.pseudo_refresh == 0:
        raise DataError("--pseudo-k needs --pseudo-refresh >= 1")
    classes = args.classes or (args.pseudo_k if args.pseudo_k
                               else int(np.max(data.labels)) + 1)
    head = _head_from_args(args, classes)
    art = train(_train_config(args, head), data)
    save_classifier(art, _out_path(args.out))
    if args.log:
        _out_path(args.log).write_text(art.log.to_csv(), encoding="utf-8")
    last = art.log.records[-1]
    print(f"trained loss={args.loss} preset={args.preset} "
          f"epochs={args.epochs} accuracy={_r(last.accuracy)} "
          f"mean_q_norm={_r(last.mean_q_norm)}")
    return 0


def cmd_verify(args) -> int:
    names = INSTANTIATIONS if args.preset == "all" else (args.preset,)
    reports = []
    ok = True
    for name in names:
        cfg = preset(name, class_count=args.classes,
                     feature_dim=args.feature_dim)
        rep = verify_config(cfg)
        ok &= rep.passed
        entry = rep.to_dict()
        if args.fd_trials > 0:
            fd = finite_diff_suite(cfg, trials=args.fd_trials, seed=args.seed)
            ok &= fd.passed
            entry["finite_diff"] = fd.to_dict()
        reports.append(entry)
    _emit(json.dumps({"passed": bool(ok), "reports": reports},
                     sort_keys=True, indent=2) + "\n", args.out)
    return 0 if ok else 1


def _scored_rows(args) -> tuple[np.ndarray, np.ndarray, "object"]:
    art = load_classifier(args.model)
    data = _load_any(args.data)
    inputs = encode_inputs(data)
    ev = evaluate(art.model, art.prototypes, art.calib, art.head,
                  inputs=inputs, labels=data.labels)
    return ev.q_norm, ev.theta, data


def cmd_score(args) -> int:
    q, theta, _ = _scored_rows(args)
    lines = [CSV_HEADER]
    lines += [f"{i},{_r(q[i])},{_r(theta[i])}," for i in range(q.size)]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_rank(args) -> int:
    q, theta, _ = _scored_rows(args)
    order = np.argsort(-q, kind="stable")
    lines = [CSV_HEADER]
    lines += [f"{i},{_r(q[i])},{_r(theta[i])},{rank + 1}"
              for rank, i in enumerate(order)]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_pair(args) -> int:
    art = load_classifier(args.model)
    data = _load_any(args.data)
    if data.is_points:
        raise DataError("pair expects a sketch dataset")
    n = len(data.samples)
    for idx in (args.i, args.j):
        if not 0 <= idx < n:
            raise DataError(f"index {idx} out of range for {n} records")
    res = apps.pair_compare(apps.SketchScorer(art),
                            data.samples[args.i], data.samples[args.j])
    print(json.dumps({"winner": res.winner, "q_a": res.q_a, "q_b": res.q_b,
                      "tie": res.tie}, sort_keys=True))
    return 0


def cmd_cleanse(args) -> int:
    art = load_classifier(args.model)
    data = _load_any(args.data)
    x = encode_inputs(data)
    scorer = apps.SketchScorer(art)
    q, theta = scorer.score_labeled(x, data.labels)
    verdicts = apps.cleanse(q, theta, q_hi=args.q_hi, theta_hi=args.theta_hi,
                            q_lo=args.q_lo)
    lines = [CSV_HEADER]
    lines += [f"{i},{_r(q[i])},{_r(theta[i])},{verdicts[i]}"
              for i in range(q.size)]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_attribute(args) -> int:
    art = load_classifier(args.model)
    data = _load_any(args.data)
    if data.is_points:
        raise DataError("attribute expects a sketch dataset")
    scorer = apps.SketchScorer(art)
    lines = [CSV_HEADER]
    traces = []
    for i, seq in enumerate(data.samples):
        res = apps.attribute(seq, scorer, q_tau=args.q_tau, q_max=args.q_max,
                             min_gain=args.min_gain)
        _, theta = scorer.score_features(scorer.encode([seq]))
        lines.append(f"{i},{_r(res.q_full)},{_r(theta[0])},{res.verdict}")
        traces.append(json.dumps(
            {"id": i, "verdict": res.verdict, "q_full": res.q_full,
             "q_best": res.q_best, "kept_strokes": res.kept_strokes,
             "scorer_calls": res.scorer_calls}, sort_keys=True))
    _emit("\n".join(lines) + "\n", args.out)
    if args.trace:
        _out_path(args.trace).write_text("\n".join(traces) + "\n",
                                         encoding="utf-8")
    return 0


def cmd_steer(args) -> int:
    art = load_classifier(args.model)
    vae = load_vae(args.vae)
    data = _load_any(args.data)
    if data.is_points:
        raise DataError("steer expects a sketch dataset")
    if not 0 <= args.index < len(data.samples):
        raise DataError(f"index {args.index} out of range")
    start = resample_sketch(data.samples[args.index], vae.steps)
    mu, _ = vae.encode(start.ravel())
    result = steer(vae, art, mu[0], iters=args.iters, stride=args.stride,
                   alpha=args.alpha, lam=args.lam, seed=args.seed)
    lines = [json.dumps({"step": r.step, "q": r.q_hard,
                         "strokes": [r.points.tolist()],
                         "z": r.z.tolist()}, sort_keys=True)
             for r in result.records]
    _emit("\n".join(lines) + "\n", args.out)
    first, final = result.records[0], result.records[-1]
    print(f"steer steps={args.iters} q_start={_r(first.q_hard)} "
          f"q_end={_r(final.q_hard)}")
    return 0


def cmd_train_vae(args) -> int:
    data = _load_any(args.data)
    cfg = VaeConfig(epochs=args.epochs, batch_size=args.batch_size,
                    lr=args.lr, kl_weight=args.kl_weight, seed=args.seed)
    vae, losses = train_vae(cfg, data)
    save_vae(vae, _out_path(args.out))
    print(f"vae epochs={args.epochs} loss_first={_r(losses[0])} "
          f"loss_last={_r(losses[-1])}")
    return 0


def cmd_toy(args) -> int:
    if args.refresh < 1:
        raise DataError("toy trains on pseudo labels; --refresh must be >= 1")
    spec = GaussianMixtureSpec(arrangement=args.arrangement,
                               samples_per_component=args.samples,
                               seed=args.seed)
    data = gen_gaussians(spec)
    head = preset(args.preset, class_count=spec.components,
                  feature_dim=args.feature_dim)
    cfg = TrainConfig(head=head, epochs=args.epochs, batch_size=128,
                      lr=1e-3, seed=args.seed, hidden_dims=(64, 64),
                      pseudo_refresh=args.refresh, pseudo_k=spec.components)
    art = train(cfg, data)
    inputs = encode_inputs(data)
    ev = evaluate(art.model, art.prototypes, art.calib, art.head,
                  inputs=inputs, labels=art.pseudo_labels)
    lines = ["x,y,true,pseudo,q_norm,theta,margin"]
    for i in range(data.n):
        lines.append(
            f"{_r(inputs[i, 0])},{_r(inputs[i, 1])},{int(data.truth[i])},"
            f"{int(art.pseudo_labels[i])},{_r(ev.q_norm[i])},"
            f"{_r(ev.theta[i])},{_r(ev.margin[i])}")
    _emit("\n".join(lines) + "\n", args.out)
    if args.checkpoint:
        save_classifier(art, _out_path(args.checkpoint))
    print(f"toy arrangement={args.arrangement} n={data.n} "
          f"acc_vs_pseudo={_r(ev.accuracy)} "
          f"mean_q_norm={_r(float(ev.q_norm.mean()))}")
    return 0


def cmd_gen_data(args) -> int:
    if args.kind == "gaussians":
        spec = GaussianMixtureSpec(arrangement=args.arrangement,
                                   sigma=args.sigma,
                                   samples_per_component=args.samples,
                                   seed=args.seed)
        data = gen_gaussians(spec)
        save_points(_out_path(args.out), data)
    else:
        distortion = "uniform" if args.distortion == "uniform" \
            else float(args.distortion)
        styles = tuple(int(s) for s in args.styles.split(","))
        data = gen_sketch_set(args.per_class, seed=args.seed,
                              distortion=distortion, classes=args.classes,
                              styles=styles)
        if args.noise_rate > 0.0:
            data = inject_label_noise(data, args.noise_rate,
                                      class_count=args.classes,
                                      seed=args.seed + 1)
        save_sketches(_out_path(args.out), data)
    print(f"wrote {data.n} records to {args.out}")
    return 0


def cmd_bin_ratings(args) -> int:
    vals = []
    for raw in Path(args.ratings).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            vals.append(float(line))
    labels, edges = bin_ratings(vals, args.bins, policy=args.policy)
    lines = ["id,rating,label"]
    lines += [f"{i},{_r(vals[i])},{int(labels[i])}" for i in range(len(vals))]
    _emit("\n".join(lines) + "\n", args.out)
    edges_line = json.dumps({"edges": [float(e) for e in edges]},
                            sort_keys=True)
    if args.out is None:
        sys.stderr.write(edges_line + "\n")
    else:
        print(edges_line)
    return 0


def cmd_export(args) -> int:
    art = load_classifier(args.model)
    if args.what == "log":
        _emit(art.log.to_csv(), args.out)
    elif args.what == "config":
        h, c = art.head, art.calib
        _emit(json.dumps({
            "head": {"instantiation": h.instantiation, "l_q": h.l_q,
                     "u_q": h.u_q, "s": h.s, "class_count": h.class_count,
                     "feature_dim": h.feature_dim, "lambda_g": h.lambda_g},
            "calib": {"mu0": c.mu0, "sigma0": c.sigma0, "l_q": c.l_q,
                      "u_q": c.u_q},
        }, sort_keys=True, indent=2) + "\n", args.out)
    else:
        w = art.prototypes.w
        lines = [",".join(_r(w[i, j]) for j in range(w.shape[1]))
                 for i in range(w.shape[0])]
        _emit("\n".join(lines) + "\n", args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="gacl",
        description="Magnitude-as-quality classification layer toolkit.")
    subs = parser.add_subparsers(dest="cmd")
    by_name = {}

    def sub(name, func, **kw):
        p = subs.add_parser(name, **kw)
        p.set_defaults(func=func)
        by_name[name] = p
        return p

    p = sub("train", cmd_train, help="fit a classifier on an NDJSON dataset")
    p.add_argument("--data", required=True, help="NDJSON dataset path")
    p.add_argument("--config", help="flat key=value config file; flags override")
    p.add_argument("--out", default="model.json", help="checkpoint path")
    p.add_argument("--log", default=None, help="write the per-epoch CSV here")
    p.add_argument("--preset", choices=INSTANTIATIONS, default="cos")
    p.add_argument("--loss", choices=("gacl", "softmax"), default="gacl")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-min", type=float, default=0.0)
    p.add_argument("--hidden", type=_parse_hidden, default=(64, 64, 64),
                   help="comma-separated hidden layer widths")
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--classes", type=int, default=None,
                   help="override the class count (default: from labels)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pseudo-refresh", type=int, default=0,
                   help="re-cluster every N epochs (0: use dataset labels)")
    p.add_argument("--pseudo-k", type=int, default=None)
    p.add_argument("--binning", choices=("on", "off"), default="on")
    p.add_argument("--bin-start", type=int, default=5)
    p.add_argument("--bin-end", type=int, default=20)
    p.add_argument("--bin-hold", type=int, default=5)
    p.add_argument("--bin-ramp", type=int, default=15)
    p.add_argument("--bin-active", type=_parse_opt_int, default=20,
                   help="epochs with binning on, or 'none' for no cutoff")
    p.add_argument("--bin-tau", type=float, default=0.1)

    p = sub("verify", cmd_verify,
            help="run the gradient-direction constraint checks")
    p.add_argument("--preset", choices=INSTANTIATIONS + ("all",),
                   default="all")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--fd-trials", type=int, default=0,
                   help="also finite-difference this many random instances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="JSON report path (default stdout)")

    for name, func, extra in (
            ("score", cmd_score, "per-sample quality/angle CSV"),
            ("rank", cmd_rank, "CSV sorted by descending quality"),
            ("cleanse", cmd_cleanse, "flag noisy and hopeless labels")):
        p = sub(name, func, help=extra)
        p.add_argument("--model", required=True, help="classifier checkpoint")
        p.add_argument("--data", required=True)
        p.add_argument("--out", default=None, help="CSV path (default stdout)")
        if name == "cleanse":
            p.add_argument("--q-hi", type=float, default=apps.NOISY_Q)
            p.add_argument("--theta-hi", type=float, default=apps.NOISY_THETA)
            p.add_argument("--q-lo", type=float, default=apps.TOO_BAD_Q)

    p = sub("pair", cmd_pair, help="compare the quality of two sketches")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--i", type=int, required=True)
    p.add_argument("--j", type=int, required=True)

    p = sub("attribute", cmd_attribute,
            help="greedy stroke-removal attribution per sketch")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--q-tau", type=float, default=0.5,
                   help="quality above which a sketch is benign as-is")
    p.add_argument("--q-max", type=float, default=0.7,
                   help="quality that counts as recovered after removal")
    p.add_argument("--min-gain", type=float, default=apps.ATTRIB_GAIN)
    p.add_argument("--out", default=None)
    p.add_argument("--trace", default=None,
                   help="NDJSON with kept strokes per sketch")

    p = sub("train-vae", cmd_train_vae,
            help="fit the sketch VAE used by steer")
    p.add_argument("--data", required=True, help="NDJSON sketch dataset")
    p.add_argument("--out", default="vae.json")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--kl-weight", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)

    p = sub("steer", cmd_steer, help="latent quality ascent from a sketch")
    p.add_argument("--model", required=True, help="classifier checkpoint")
    p.add_argument("--vae", required=True, help="VAE checkpoint")
    p.add_argument("--data", required=True, help="NDJSON sketch dataset")
    p.add_argument("--index", type=int, default=0, help="start sketch index")
    p.add_argument("--alpha", type=float, default=0.1,
                   help="pull toward the start latent")
    p.add_argument("--lam", type=float, default=0.01, help="step size")
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--stride", type=int, default=50,
                   help="record every this many steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="NDJSON trajectory path")

    p = sub("toy", cmd_toy,
            help="end-to-end run on 9 Gaussians with pseudo labels only")
    p.add_argument("--arrangement", choices=("circle", "grid"),
                   default="circle")
    p.add_argument("--samples", type=int, default=100, help="per component")
    p.add_argument("--preset", choices=INSTANTIATIONS, default="cos")
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--refresh", type=int, default=2,
                   help="re-cluster every N epochs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="toy_scatter.csv")
    p.add_argument("--checkpoint", default=None,
                   help="also save the trained model here")

    p = sub("gen-data", cmd_gen_data, help="write a synthetic NDJSON dataset")
    p.add_argument("--kind", choices=("gaussians", "sketches"),
                   required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arrangement", choices=("circle", "grid"),
                   default="circle")
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--samples", type=int, default=100,
                   help="gaussians: per component")
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--styles", default="0",
                   help="comma list of style ids to cycle (sketches)")
    p.add_argument("--distortion", default="uniform",
                   help="'uniform' or a fixed level in [0, 1]")
    p.add_argument("--noise-rate", type=float, default=0.0,
                   help="uniform label-flip rate (sketches)")

    p = sub("bin-ratings", cmd_bin_ratings,
            help="discretize continuous ratings into class labels")
    p.add_argument("--ratings", required=True,
                   help="text file, one rating per line")
    p.add_argument("--bins", type=int, required=True)
    p.add_argument("--policy", choices=("width", "frequency"),
                   default="width")
    p.add_argument("--out", default=None)

    p = sub("export", cmd_export, help="dump parts of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--what", choices=("log", "config", "prototypes"),
                   default="log")
    p.add_argument("--out", default=None)

    return parser, by_name


def dispatch(argv: list[str]) -> int:
    parser, by_name = build_parser()
    if not argv:
        parser.print_help()
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.cmd is None:
        parser.print_help()
        return 2
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            overrides = parse_config_file(cfg_path)
        except (OSError, DataError) as e:
            sys.stderr.write(f"error: {e}\n")
            return 2
        sp = by_name[args.cmd]
        actions = {a.dest: a for a in sp._actions}
        unknown = sorted(set(overrides) - set(actions))
        if unknown:
            sys.stderr.write(f"error: unknown config keys: {', '.join(unknown)}\n")
            return 2
        # set_defaults skips argparse type conversion, so coerce here
        coerced = {}
        for key, raw in overrides.items():
            act = actions[key]
            try:
                val = act.type(raw) if act.type is not None else raw
            except (ValueError, argparse.ArgumentTypeError) as e:
                sys.stderr.write(f"error: bad config value {key} = {raw!r}: {e}\n")
                return 2
            if act.choices is not None and val not in act.choices:
                sys.stderr.write(f"error: config value {key} = {raw!r} not one "
                                 f"of {tuple(act.choices)}\n")
                return 2
            coerced[key] = val
        sp.set_defaults(**coerced)
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return int(e.code or 0)
    try:
        return args.func(args)
    except GaclError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except OSError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
