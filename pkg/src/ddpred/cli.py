"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 file or format
error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys

import numpy as np

from . import __version__, baseline, formats, kernels, selfcheck
from . import evaluate as ev
from . import model as cvae
from .channel import Dataset, build_dataset, iter_samples, split_dataset
from .config import ConfigError, RunConfig, load
from .tensor import NumericFailure

EXIT_OK, EXIT_USAGE, EXIT_FILE, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "DDCP_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration ----------------------------------------------------------

def resolve_config(args) -> tuple[RunConfig, str]:
    """Config file (or defaults) with the desk preset, mode and seed overrides applied.

    Seed precedence: ``--seed``, then ``$DDCP_SEED``, then the file. Returns
    ``(config, seed_source)``.
    """
    if args.config:
        cfg = load(args.config, desk=args.desk_scale)
    else:
        cfg = RunConfig().desk() if args.desk_scale else RunConfig()
    if args.mode:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, mode=args.mode))
    source = "config"
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg = cfg.with_seed(int(env))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be a non-negative integer, got {env!r}") from None
        source = "env"
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
        source = "flag"
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg.validate(), source


def _run_meta(cfg: RunConfig, source: str) -> dict:
    return {"seed": cfg.seed, "seed_source": source, SEED_ENV: os.environ.get(SEED_ENV),
            "version": __version__, "backend": kernels.BACKEND}


def _load_data(path, cfg: RunConfig) -> Dataset:
    d = formats.read_ddcp(path)
    want = cfg.grid_config()
    if (d.grid.M, d.grid.N, d.grid.L, d.grid.F) != (want.M, want.N, want.L, want.F):
        raise formats.FormatError(f"{path}: grid {d.grid} does not match the configured grid {want}")
    return d


def _split(d: Dataset, cfg: RunConfig):
    n = len(d)
    train_count = cfg.data.train_count if n == cfg.data.count else round(n * cfg.data.train_count / cfg.data.count)
    if not 0 < train_count < n:
        raise ConfigError(f"cannot split {n} samples into non-empty train and test sets")
    return split_dataset(d, train_count, cfg.seed)


def _params_sha256(params) -> str:
    return hashlib.sha256(np.ascontiguousarray(params.flat, dtype="<f4").tobytes()).hexdigest()


def _horizon(args, cfg: RunConfig) -> int:
    h = cfg.train.horizon if args.horizon is None else args.horizon
    if not 0 <= h < cfg.grid.F:
        raise ConfigError(f"horizon must lie in [0, {cfg.grid.F - 1}]")
    return h


def _progress(enabled):
    if not enabled:
        return None
    return lambda *rec: print(*rec, file=sys.stderr, flush=True)


# -- commands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg, source = resolve_config(args)
    out = args.out or cfg.paths.data
    grid = cfg.grid_config()
    overrides = cfg.data.overrides or None
    with formats.DDCPWriter(out, grid, cfg.seed) as w:
        for s in iter_samples(grid, cfg.data.count, cfg.seed, overrides, args.threads):
            w.write(s)
    formats.verify_ddcp_samples(out, grid, cfg.seed, iter_samples(grid, cfg.data.count, cfg.seed, overrides,
                                                                   args.threads))
    print(f"wrote {cfg.data.count} samples to {out} (seed {cfg.seed} from {source}, verified)")
    return EXIT_OK


def _train_one(kind, train_set, cfg: RunConfig, horizon, progress=None):
    hyper = cfg.train_hyper(horizon)
    if kind == "cvae":
        return cvae.train(train_set, hyper, cfg.model_config(), progress)
    rc = baseline.RecurrentConfig(x_dim=train_set.grid.feature_len, e_dim=train_set.grid.E_dim,
                                  hidden=cfg.model.rnn_hidden, unroll=cfg.model.rnn_unroll)
    return baseline.train_recurrent(train_set, hyper, rc, progress)


def cmd_train(args) -> int:
    cfg, source = resolve_config(args)
    kind = args.predictor or "cvae"
    if kind not in ("cvae", "recurrent"):
        raise UsageError(f"only cvae and recurrent predictors are trainable, got {kind!r}")
    horizon = _horizon(args, cfg)
    train_set, _ = _split(_load_data(args.data or cfg.paths.data, cfg), cfg)
    out = args.out or os.path.join(cfg.paths.models, f"{kind}_h{horizon}.ddck")
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    try:
        model, log = _train_one(kind, train_set, cfg, horizon, _progress(args.verbose))
    except cvae.TrainingFailure as exc:
        exc.last_good.meta.update(_run_meta(cfg, source))
        exc.last_good.save(out + ".last_good.ddck")
        cvae.log_to_csv(exc.log, out + ".log.csv")
        raise
    model.meta.update(_run_meta(cfg, source))
    model.save(out)
    log_path = out + ".log.csv"
    if kind == "cvae":
        cvae.log_to_csv(log, log_path)
    else:
        with open(log_path, "w") as fh:
            fh.write("epoch,loss\n")
            fh.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(log))
    print(f"trained {kind} for horizon {horizon} on {len(train_set)} samples -> {out}")
    return EXIT_OK


def _load_model(path):
    header, _ = formats.read_ddck(path)
    arch = header.get("arch")
    if arch == cvae.ARCH_TAG:
        return "cvae", cvae.CVAE.load(path)
    if arch == baseline.ARCH_TAG:
        return "recurrent", baseline.RecurrentParams.load(path)
    raise formats.FormatError(f"{path}: unknown architecture {arch!r}")


def _predictor(name, horizon, model=None, cfg: RunConfig | None = None):
    if name == "zero":
        return ev.zero_predictor
    if name == "stale":
        return ev.stale_predictor
    if name == "ar1":
        return ev.ar1_predictor
    if model is None:
        raise UsageError(f"predictor {name!r} needs --model")
    if name == "cvae":
        return ev.cvae_predictor({horizon: model}, cfg.model.n_samples, cfg.seed)
    return ev.recurrent_predictor({horizon: model})


def cmd_predict(args) -> int:
    cfg, source = resolve_config(args)
    if not args.model:
        raise UsageError("predict needs --model")
    kind, model = _load_model(args.model)
    horizon = _horizon(args, cfg)
    _, test_set = _split(_load_data(args.data or cfg.paths.data, cfg), cfg)
    t = cfg.grid.F - 1 - horizon
    target = test_set.features()[:, t + horizon]
    pred = _predictor(kind, horizon, model, cfg)(test_set, t, horizon)
    per, _, _ = ev.nmse_rows(target, pred)
    stale, _, _ = ev.nmse_rows(target, test_set.features()[:, t])
    out = args.out or "predictions.csv"
    with open(out, "w") as fh:
        fh.write("sample,horizon,nmse,nmse_stale\n")
        for i, (a, b) in zip(test_set.indices, zip(per, stale)):
            fh.write(f"{i},{horizon},{float(a)!r},{float(b)!r}\n")
    np.save(out + ".npy", pred.astype(np.float32))
    print(f"{len(per)} predictions -> {out}; mean NMSE {np.nanmean(per):.4g} (stale {np.nanmean(stale):.4g})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, source = resolve_config(args)
    name = args.predictor or "stale"
    horizon = _horizon(args, cfg)
    model = None
    checksums = {}
    if args.model:
        kind, model = _load_model(args.model)
        if kind != name:
            raise UsageError(f"--model holds a {kind} checkpoint but --predictor is {name}")
        checksums[name] = formats.file_sha256(args.model)
    _, test_set = _split(_load_data(args.data or cfg.paths.data, cfg), cfg)
    row = ev.evaluate(_predictor(name, horizon, model, cfg), name, test_set, horizon,
                      axis_value=horizon, seed=cfg.seed)
    report = ev.EvalReport("none", [row], {"horizon": horizon})
    out = args.out or cfg.paths.report
    ev.emit_report(report, out, {"grid": dataclasses.asdict(cfg.grid), "model_sha256": checksums, **_run_meta(cfg, source)})
    print(f"{name} horizon {horizon}: NMSE {row.nmse_mean:.4g} +- {row.nmse_stderr:.2g} (n={row.n}) -> {out}")
    return EXIT_OK


def sweep_models(cfg: RunConfig, train_set: Dataset, names, horizons, progress=None):
    """Train the learned predictors needed for ``horizons``; returns ``(models, checksums)``."""
    models = {k: {} for k in ("cvae", "recurrent") if k in names}
    checksums = {}
    for kind in models:
        for h in horizons:
            m, _ = _train_one(kind, train_set, cfg, h)
            models[kind][h] = m
            checksums[f"{kind}_h{h}"] = _params_sha256(m.params)
            if progress:
                progress(f"trained {kind} horizon {h}")
    return models, checksums


def run_sweep(cfg: RunConfig, axis: str, names, train_set: Dataset, threads: int = 1, progress=None):
    horizons = (cfg.sweep.horizon,) if axis == "doppler" else tuple(cfg.sweep.horizons)
    models, checksums = sweep_models(cfg, train_set, names, horizons, progress)
    preds = {}
    for name in names:
        if name == "cvae":
            preds[name] = ev.cvae_predictor(models["cvae"], cfg.model.n_samples, cfg.seed)
        elif name == "recurrent":
            preds[name] = ev.recurrent_predictor(models["recurrent"])
        else:
            preds[name] = _predictor(name, None)
    grid = cfg.grid_config()
    if axis == "doppler":
        report = ev.sweep_doppler(grid, preds, cfg.sweep.test_count, cfg.sweep_seed, cfg.sweep.dopplers_hz,
                                  cfg.sweep.horizon, threads)
    else:
        report = ev.sweep_horizon(grid, preds, cfg.sweep.test_count, cfg.sweep_seed, cfg.sweep.horizons,
                                  cfg.sweep.doppler_hz, threads)
    return report, checksums


def cmd_sweep(args) -> int:
    cfg, source = resolve_config(args)
    axis = args.axis or cfg.sweep.axis
    if axis not in ("doppler", "horizon"):
        raise UsageError(f"unknown sweep axis {axis!r}")
    names = (args.predictor,) if args.predictor else tuple(cfg.sweep.predictors)
    if args.data:
        train_set, _ = _split(_load_data(args.data, cfg), cfg)
    else:
        d = build_dataset(cfg.grid_config(), cfg.data.count, cfg.seed, cfg.data.overrides or None, args.threads)
        train_set, _ = _split(d, cfg)
    report, checksums = run_sweep(cfg, axis, names, train_set, args.threads, _progress(args.verbose))
    out = args.out or cfg.paths.report
    ev.emit_report(report, out, {"grid": dataclasses.asdict(cfg.grid), "test_seed": cfg.sweep_seed,
                                 "train_samples": len(train_set), "model_sha256": checksums,
                                 **_run_meta(cfg, source)})
    print(f"{axis} sweep: {len(report.rows)} rows -> {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = selfcheck.run_all(args.seed or 0)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help=f"run seed (overrides ${SEED_ENV} and the config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    common.add_argument("--desk-scale", action="store_true", help="8x8x4 grid with halved network widths")
    common.add_argument("--mode", choices=cvae.MODES, help="conditioning mode")
    common.add_argument("--predictor", choices=ev.PREDICTORS)
    common.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")

    p = _Parser(prog="ddpred", description="Delay-Doppler channel prediction toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({kernels.BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="generate a DDCP dataset")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a cvae or recurrent predictor")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--horizon", type=int)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="predict the test split with a checkpoint")
    pr.add_argument("--model")
    pr.add_argument("--data")
    pr.add_argument("--horizon", type=int)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", parents=[common], help="NMSE of one predictor on the test split")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--horizon", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="Doppler or horizon sweep report")
    s.add_argument("--axis")
    s.add_argument("--data", help="training data (generated from the config when omitted)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("selfcheck", parents=[common], help="gradient, flow, KL and fading checks")
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"ddpred: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (formats.FormatError, OSError) as exc:
        print(f"ddpred: {exc}", file=sys.stderr)
        return EXIT_FILE
    except NumericFailure as exc:
        print(f"ddpred: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ddpred: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
