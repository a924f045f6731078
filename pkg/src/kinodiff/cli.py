"""Operator pipeline: ingest -> synth -> train -> detect -> eval -> report.

Every command validates its inputs before touching outputs and removes
partial outputs on failure. Exit codes: 0 ok, 2 input/config error,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import geodata as gd
from . import scoring as sc
from . import synth as sy
from .config import ConfigError, RunConfig
from .engine import Rng
from .kbm import generate_fleet
from .optim import AdamState

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


class _OutputTracker:
    """Collects written paths so a failing command can clean up after
    itself instead of leaving partial outputs."""

    def __init__(self):
        self.paths = []

    def path(self, *parts):
        p = os.path.join(*parts)
        self.paths.append(p)
        return p

    def cleanup(self):
        for p in self.paths:
            if os.path.isfile(p):
                os.remove(p)


def _cleans_up(fn):
    def wrapper(args):
        out = _OutputTracker()
        try:
            return fn(args, out)
        except BaseException:
            out.cleanup()
            raise
    wrapper.__name__ = fn.__name__
    return wrapper


def _read_file(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _load_config(args):
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig.desk()
    if getattr(args, "seed", None) is not None:
        cfg.set("run", "seed", args.seed)
    for sec, key, attr in (("sampler", "eta", "eta"), ("sampler", "stride", "stride"),
                           ("sampler", "t_star", "t_star"), ("train", "steps", "steps")):
        val = getattr(args, attr, None)
        if val is not None:
            cfg.set(sec, key, val)
    return cfg


def _prepare(trajs, cfg, normalizer=None):
    return gd.canonicalize_dataset(
        trajs, n=cfg.get("data", "input_len"), normalizer=normalizer,
        k=cfg.get("data", "neighbors"), radius_m=cfg.get("data", "radius_m"),
        mode=cfg.get("data", "normalize_mode"))


# -- ingest ------------------------------------------------------------


@_cleans_up
def cmd_ingest(args, out):
    if not os.path.isfile(args.in_path):
        raise CliError(f"input not found: {args.in_path}")
    with open(args.in_path, "rb") as fh:
        data = fh.read()
    try:
        result = gd.parse(args.format, data)
    except gd.ParseError as err:
        raise CliError(f"parse failed: {err}") from None
    trajs = []
    for traj in result:
        trajs.extend(gd.split_on_gaps(traj))
    os.makedirs(args.out, exist_ok=True)
    _write_text(out.path(args.out, "canonical.csv"), gd.write_canonical(trajs))
    durations = sorted(t.duration_s() for t in trajs)
    lengths = sorted(t.length_m() for t in trajs)

    def quantiles(xs):
        return {q: float(np.quantile(xs, q)) for q in (0.1, 0.5, 0.9)}

    stats = {
        "trajectories": len(trajs),
        "dropped_invalid": result.dropped_invalid,
        "dropped_duplicate": result.dropped_duplicate,
        "dropped_short": result.dropped_short,
        "duration_s_quantiles": quantiles(durations),
        "length_m_quantiles": quantiles(lengths),
    }
    _write_text(out.path(args.out, "ingest_stats.json"),
                json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"ingested {len(trajs)} trajectories "
          f"({result.dropped_invalid} invalid rows dropped)")
    return EXIT_OK


# -- synth --------------------------------------------------------------


@_cleans_up
def cmd_synth(args, out):
    cfg = _load_config(args)
    if not (0.0 < args.rate < 1.0):
        raise CliError(f"anomaly rate {args.rate} outside (0, 1)")
    kind_mix = _parse_kind_mix(args.kind_mix)
    seed = cfg.get("run", "seed")
    rng = Rng(seed)
    if args.in_path:
        trajs = _read_canonical(args.in_path)
    else:
        trajs = generate_fleet(rng.derive("fleet"), args.n_normals,
                               n=cfg.get("data", "input_len"), dt=args.dt,
                               routes=args.routes)
    try:
        ds = sy.build_dataset(trajs, rate=args.rate, kind_mix=kind_mix,
                              rng=rng.derive("inject"))
    except sy.SynthError as err:
        raise CliError(str(err)) from None
    os.makedirs(args.out, exist_ok=True)
    _write_text(out.path(args.out, "trajectories.csv"),
                gd.write_canonical(ds.trajectories))
    _write_text(out.path(args.out, "labels.csv"), sy.write_labels(ds))
    manifest = {
        "seed": seed,
        "rate": args.rate,
        "n_normals": len(trajs),
        "kind_mix": kind_mix or {k: 0.25 for k in sy.KINDS},
        "severity_ranges": {k: list(v) for k, v in sy.SEVERITY_RANGES.items()},
        "speed_exclusion": list(sy.SPEED_EXCLUSION),
        "generated": args.in_path is None,
        "routes": args.routes,
        "dt": args.dt,
        "input_len": cfg.get("data", "input_len"),
    }
    _write_text(out.path(args.out, "manifest.json"),
                json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds)} trajectories, {len(ds.anomalous_ids())} anomalous")
    return EXIT_OK


def _parse_kind_mix(text):
    if not text:
        return None
    mix = {}
    for part in text.split(","):
        kind, _, weight = part.partition("=")
        mix[kind.strip()] = float(weight)
    return mix


def _read_canonical(path):
    if not os.path.isfile(path):
        raise CliError(f"input not found: {path}")
    with open(path, "rb") as fh:
        try:
            return list(gd.parse("canonical", fh.read()))
        except gd.ParseError as err:
            raise CliError(f"parse failed: {err}") from None


# -- train --------------------------------------------------------------


@_cleans_up
def cmd_train(args, out):
    cfg = _load_config(args)
    trajs = _read_canonical(args.data)
    rng = Rng(cfg.get("run", "seed"))
    schedule = cfg.schedule()
    model_cfg = cfg.denoiser_config(no_context=args.no_context)
    weights = cfg.loss_weights(no_kbm=args.no_kbm)

    params = opt_state = None
    start_step = 0
    normalizer = None
    if args.init_from:
        ck = dn.load_checkpoint(args.init_from)
        if ck["config"] != model_cfg:
            raise CliError("checkpoint model config does not match run config")
        params = ck["params"]
        normalizer = ck["normalizer"]
        start_step = ck["step"]
        if ck["adam_m"] is not None:
            opt_state = AdamState(params, lr=cfg.get("train", "lr"))
            opt_state.step = ck["adam_step"]
            opt_state.m = ck["adam_m"]
            opt_state.v = ck["adam_v"]

    canons, contexts, normalizer = _prepare(trajs, cfg, normalizer=normalizer)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = out.path(args.out, "checkpoint.ckpt")
    sched_meta = {"T": schedule.T, "beta1": float(schedule.beta[0]),
                  "betaT": float(schedule.beta[-1]), "digest": schedule.digest()}

    def save(step, p, state):
        dn.save_checkpoint(ckpt_path, p, model_cfg, normalizer, sched_meta,
                           step=step, moments=state)

    result = df.train(
        canons, contexts, normalizer, schedule, model_cfg, weights,
        rng.derive("train"), steps=cfg.get("train", "steps"),
        batch_size=cfg.get("train", "batch_size"), lr=cfg.get("train", "lr"),
        lr_final=cfg.get("train", "lr_final") or None,
        trim_frac=cfg.get("train", "trim_frac"), params=params,
        opt_state=opt_state, start_step=start_step,
        checkpoint_every=cfg.get("train", "checkpoint_every"),
        checkpoint_cb=save)

    save(result.step, result.params, result.opt_state)
    trace = io.StringIO()
    w = csv.writer(trace, lineterminator="\n")
    w.writerow(["step", "total", "vlb", "rec", "phy"])
    for row in result.trace:
        w.writerow([row["step"], repr(row["total"]), repr(row["vlb"]),
                    repr(row["rec"]), repr(row["phy"])])
    _write_text(out.path(args.out, "loss_trace.csv"), trace.getvalue())
    _write_text(out.path(args.out, "train_config.ini"), cfg.to_text())
    if result.aborted:
        print(f"training aborted: {result.abort_reason} "
              f"(last good checkpoint at step {result.step})")
        return EXIT_NUMERIC
    print(f"trained to step {result.step}; checkpoint at {ckpt_path}")
    return EXIT_OK


# -- detect --------------------------------------------------------------


@_cleans_up
def cmd_detect(args, out):
    cfg = _load_config(args)
    if (args.lam is None) == (args.lambda_percentile is None):
        raise CliError("give exactly one of --lambda or --lambda-percentile")
    try:
        ck = dn.load_checkpoint(args.checkpoint)
    except (OSError, dn.DenoiserError) as err:
        raise CliError(f"cannot load checkpoint: {err}") from None
    trajs = _read_canonical(args.data)
    schedule = df.linear_schedule(ck["schedule"]["T"], ck["schedule"]["beta1"],
                                  ck["schedule"]["betaT"])
    if schedule.digest() != ck["schedule"]["digest"]:
        raise CliError("schedule digest mismatch in checkpoint")
    model_cfg = ck["config"]
    if args.no_context:
        import dataclasses
        model_cfg = dataclasses.replace(model_cfg, context_gain=0.0)
    sampler = cfg.sampler_config(eta=args.eta, stride=args.stride, t_star=args.t_star)
    if sampler.t_star > schedule.T:
        raise CliError(f"t_star {sampler.t_star} exceeds schedule T {schedule.T}")

    canons, contexts, _ = _prepare(trajs, cfg, normalizer=ck["normalizer"])
    model = dn.as_model(ck["params"], model_cfg)
    seed = cfg.get("run", "seed")
    draws = max(1, cfg.get("run", "score_draws"))
    feats = np.stack([c.features for c in canons])
    scores = np.zeros(len(canons))
    recon_last = None
    for d in range(draws):
        recon = df.reconstruct_dataset(canons, contexts, model, schedule,
                                       sampler, seed=seed + d)
        scores += np.array([sc.reconstruction_error(feats[i], recon[i])
                            for i in range(len(canons))])
        recon_last = recon
    scores /= draws

    lam = args.lam if args.lam is not None else sc.percentile_lambda(
        scores, args.lambda_percentile)
    flags = sc.classify(scores, lam)

    labels = sy.read_labels(_read_file(args.labels)) if args.labels else {}
    os.makedirs(args.out, exist_ok=True)
    rep = io.StringIO()
    w = csv.writer(rep, lineterminator="\n")
    w.writerow(["id", "E_delta", "flag", "label", "kind"])
    for i, c in enumerate(canons):
        spec = labels.get(c.id)
        label = "" if c.id not in labels else ("anomalous" if spec else "normal")
        kind = spec.kind if spec else ""
        w.writerow([c.id, repr(float(scores[i])), "anomalous" if flags[i] else "normal",
                    label, kind])
    _write_text(out.path(args.out, "report.csv"), rep.getvalue())

    recon_trajs = [gd.denormalize(gd.CanonicalTraj(
        id=c.id, features=recon_last[i], dt=c.dt, t0=c.t0, normalizer=c.normalizer))
        for i, c in enumerate(canons)]
    _write_text(out.path(args.out, "reconstructions.csv"),
                gd.write_canonical(recon_trajs))

    summary = {
        "lambda": float(lam),
        "lambda_mode": "explicit" if args.lam is not None else f"percentile:{args.lambda_percentile}",
        "flagged": int(flags.sum()),
        "total": len(canons),
        "seed": seed,
        "score_draws": draws,
        "sampler": {"eta": sampler.eta, "stride": sampler.stride, "t_star": sampler.t_star},
        "schedule_digest": ck["schedule"]["digest"],
    }
    if labels:
        y = np.array([labels.get(c.id) is not None for c in canons])
        m = sc.confusion_metrics(flags, y)
        summary["metrics"] = m.as_dict()
        summary["auc"] = sc.roc_auc(scores, y)
    _write_text(out.path(args.out, "summary.txt"),
                json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"flagged {int(flags.sum())}/{len(canons)} at lambda={lam!r}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------


@_cleans_up
def cmd_eval(args, out):
    report = _read_report(args.report)
    labels = sy.read_labels(_read_file(args.labels))
    if set(report) != set(labels):
        raise CliError("report/label id mismatch")
    ids = sorted(report)
    flags = np.array([report[i]["flag"] == "anomalous" for i in ids])
    y = np.array([labels[i] is not None for i in ids])
    m = sc.confusion_metrics(flags, y)
    scores = np.array([report[i]["score"] for i in ids])
    lines = {"metrics": m.as_dict(), "auc": sc.roc_auc(scores, y), "n": len(ids)}
    os.makedirs(args.out, exist_ok=True)
    _write_text(out.path(args.out, "metrics.txt"),
                json.dumps(lines, indent=2, sort_keys=True) + "\n")
    print(f"ACC={m.accuracy:.4f} P={m.precision:.4f} R={m.recall:.4f} F1={m.f1:.4f}")
    return EXIT_OK


def _read_report(path):
    if not os.path.isfile(path):
        raise CliError(f"report not found: {path}")
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {r["id"]: {"score": float(r["E_delta"]), "flag": r["flag"],
                      "label": r["label"], "kind": r["kind"]} for r in rows}


# -- report ----------------------------------------------------------------


@_cleans_up
def cmd_report(args, out):
    run = args.run_dir
    data_path = os.path.join(run, "trajectories.csv")
    report_path = os.path.join(run, "report.csv")
    recon_path = os.path.join(run, "reconstructions.csv")
    labels_path = os.path.join(run, "labels.csv")
    for p in (data_path, report_path):
        if not os.path.isfile(p):
            raise CliError(f"missing {p}")
    trajs = {t.id: t for t in _read_canonical(data_path)}
    report = _read_report(report_path)

    by_class = {"normal": [], "anomalous": []}
    have_labels = os.path.isfile(labels_path)
    labels = sy.read_labels(_read_file(labels_path)) if have_labels else {}
    for tid, traj in trajs.items():
        if have_labels:
            cls = "anomalous" if labels.get(tid) is not None else "normal"
        else:
            cls = report[tid]["flag"] if tid in report else "normal"
        by_class[cls].append(traj)

    os.makedirs(run, exist_ok=True)
    for cls, members in by_class.items():
        if not members:
            continue
        counts, edges = sc.bearing_change_histogram(members)
        _write_two_col(out.path(run, f"bearing_hist_{cls}.csv"),
                       "bearing_change_deg", "count", edges[:-1], counts)

    scores = [report[t]["score"] for t in sorted(report)]
    counts, edges = np.histogram(scores, bins=32)
    _write_two_col(out.path(run, "score_hist.csv"), "score_bin_lo", "count",
                   edges[:-1], counts)

    summary = {}
    if os.path.isfile(recon_path):
        recons = _read_canonical(recon_path)
        real = [trajs[t.id] for t in recons if t.id in trajs]
        summary["geo_errors"] = {
            k: (float(v) if not isinstance(v, int) else v)
            for k, v in sc.geo_distribution_errors(real, recons).items()}
        ry = np.concatenate([np.column_stack(gd.project_xy(
            t.lat, t.lon, real[0].lat.mean(), real[0].lon.mean())) for t in real])
        gy = np.concatenate([np.column_stack(gd.project_xy(
            t.lat, t.lon, real[0].lat.mean(), real[0].lon.mean())) for t in recons])
        summary["position_regression"] = sc.regression_errors(ry, gy)
    _write_text(out.path(run, "report_summary.txt"),
                json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"report artifacts written to {run}")
    return EXIT_OK


def _write_two_col(path, name_a, name_b, col_a, col_b):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([name_a, name_b])
    for a, b in zip(col_a, col_b):
        w.writerow([repr(float(a)), int(b)])
    _write_text(path, buf.getvalue())


# -- entry point -------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="kinodiff",
                                 description="physics-regularized diffusion "
                                             "for trajectory anomaly detection")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="global random seed")

    p = sub.add_parser("ingest", help="parse raw data into canonical CSV")
    p.add_argument("--format", required=True,
                   choices=["ais-csv", "geolife-plt", "canonical"])
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="build a labeled anomaly dataset")
    common(p)
    p.add_argument("--in", dest="in_path", help="canonical CSV of normals "
                   "(default: generate a synthetic fleet)")
    p.add_argument("--n-normals", type=int, default=200)
    p.add_argument("--routes", type=int, default=4)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--kind-mix", help="e.g. speed=0.25,bearing=0.25,drift=0.25,replay=0.25")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the denoiser")
    common(p)
    p.add_argument("--data", required=True, help="canonical trajectories CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--no-kbm", action="store_true", help="disable the physics loss")
    p.add_argument("--no-context", action="store_true", help="disable neighbor attention")
    p.add_argument("--init-from", help="checkpoint to fine-tune from")

    p = sub.add_parser("detect", help="score trajectories against a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", help="labels CSV to join into the report")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lambda-percentile", type=float)
    p.add_argument("--t-star", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--stride", type=int)
    p.add_argument("--no-context", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="confusion metrics from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="histograms and distribution errors for a run")
    p.add_argument("--run-dir", required=True)

    return ap


_COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (gd.GeoError, sy.SynthError, df.DiffusionError, dn.DenoiserError,
            sc.ScoringError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
