"""Command-line entry point: ``herdcast <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
Failures print one line ``herdcast: error[CODE]: message`` on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, evaluation, explain, pipeline
from .dataset import (ALLOWED_STRIDES, InsufficientSamplesError, SplitConfig, assemble_split, build_pool, read_hxs,
                      write_hxs)
from .features import trial_features, write_hxf
from .formats import FormatError
from .ingest import EXPERTISE, TrialFormatError, auto_label, read_trials, write_trials
from .sim import WorldConfig, simulate_batch
from .train import LSTMClassifier, TrainingDivergedError

log = logging.getLogger("herdcast")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    code = "E_USAGE"


def _out(text: str, path) -> None:
    if path is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _load_trials(paths) -> list:
    trials = [t for p in paths for t in read_trials(p)]
    return [t if t.is_labeled else auto_label(t) for t in trials]


def cmd_simulate(a) -> int:
    trials = simulate_batch(a.policy, a.pairs, a.trials_per_pair, a.seed, WorldConfig(max_duration=a.max_duration),
                            pipeline.resolve_threads(a.jobs))
    write_trials(trials, a.output)
    log.info("wrote %d trials (%d successful) to %s", len(trials), sum(t.success for t in trials), a.output)
    return EXIT_OK


def cmd_featurize(a) -> int:
    trials = read_trials(a.trials)
    if a.trial_id is not None:
        trials = [t for t in trials if t.trial_id == a.trial_id]
        if not trials:
            raise UsageError(f"no trial with id {a.trial_id!r} in {a.trials}")
    focals = [a.focal] if a.focal is not None else [0, 1]
    out = Path(a.output)
    single = len(trials) == 1 and len(focals) == 1 and out.suffix == ".hxf"
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for t in trials:
        for f in focals:
            write_hxf(out if single else out / f"{t.trial_id}_h{f}.hxf", trial_features(t, f))
    log.info("featurized %d trial(s) x %d focal herder(s)", len(trials), len(focals))
    return EXIT_OK


def cmd_build_samples(a) -> int:
    trials = _load_trials(a.trials)
    pool = build_pool(trials, a.stride, a.t_hor, successful_only=not a.include_failed)
    split = assemble_split(pool, SplitConfig(a.n_train, a.n_test, a.n_test_sets,
                                             "balanced" if a.balanced else "representative",
                                             a.validation_fraction, False, a.seed))
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    exp = sorted({t.expertise for t in trials})
    sets = [("train", split.train), ("val", split.validation)] + [(f"test_{j:02d}", s)
                                                                  for j, s in enumerate(split.tests)]
    for name, s in sets:
        s.meta.update({"expertise": ",".join(exp), "seed": a.seed})
        write_hxs(out / f"{name}.hxs", s)
    log.info("pool %s -> %s", pool.subclass_counts().tolist(), ", ".join(f"{n}={len(s)}" for n, s in sets))
    return EXIT_OK


def cmd_train(a) -> int:
    train = read_hxs(a.samples)
    if a.t_hor is not None and a.t_hor != train.horizon:
        raise UsageError(f"--t-hor {a.t_hor} does not match the sample file's horizon {train.horizon}")
    val = read_hxs(a.validation) if a.validation else None
    clf = LSTMClassifier(scale=a.scale, max_epochs=a.max_epochs, patience=a.patience, batch_size=a.batch_size,
                         learning_rate=a.learning_rate, loss_steps=a.loss_steps, random_state=a.seed)
    clf.fit_samples(train, val)
    clf.save(a.output)
    h = clf.history_
    log.info("trained %d epochs (best %d); saved %s", h.epochs, h.best_epoch, a.output)
    return EXIT_OK


def _eval_pair(model_path, test_paths):
    clf = LSTMClassifier.load(model_path)
    sets = [read_hxs(p) for p in test_paths]
    for s in sets:
        evaluation.check_layout(dict(clf.model_.metadata, n_features=clf.model_.n_features), s)
    pred = np.concatenate([clf.predict(s.X) for s in sets])
    y = np.concatenate([s.y for s in sets])
    cm = evaluation.confusion_matrix(pred, y)
    return cm, evaluation.classification_metrics(cm)


def cmd_eval(a) -> int:
    pairs = [(a.model, a.test)]
    if a.cross:
        pairs.append((a.cross[0], [a.cross[1]]))
        pairs += [(a.model, [a.cross[1]]), (a.cross[0], a.test)]
    rows, blocks, text = [], [], []
    for model, tests in pairs:
        cm, rep = _eval_pair(model, tests)
        name = f"{Path(model).name} on {', '.join(Path(t).name for t in tests)}"
        rows.append((Path(model).name, ";".join(Path(t).name for t in tests), rep))
        blocks.append(evaluation.confusion_csv(name, cm))
        text.append(evaluation.format_report(name, cm, rep))
    print("\n\n".join(text))
    if a.output:
        out = Path(a.output)
        _out(evaluation.metrics_csv(rows), out / "metrics.csv")
        _out("\n".join(blocks), out / "confusion.csv")
    return EXIT_OK


def cmd_explain(a) -> int:
    clf = LSTMClassifier.load(a.model)
    test = read_hxs(a.test)
    background = read_hxs(a.background)
    run = pipeline.ShapleyRun(clf, {"background": a.background_size, "perms": a.perms, "n": a.n}, a.seed,
                              pipeline.resolve_threads(a.jobs))
    rep = run.run(background, test)
    out = Path(a.output)
    _out(rep.to_csv(), out / "shap.csv")
    _out(rep.top_table(10), out / "top10.csv")
    log.info("explained %d windows; wrote %s", len(rep.sample_ids), out)
    return EXIT_OK


def cmd_analyze(a) -> int:
    trials = _load_trials([a.trials])
    do_times = a.movement_times or not a.measures
    do_measures = a.measures or not a.movement_times
    parts = []
    if do_measures:
        parts.append(analysis.measures_csv(trials, a.containment_radius))
    if do_times:
        times = analysis.batch_movement_times(trials, a.repulsion_radius)
        parts.append(analysis.histogram_csv({k: v.durations_ms for k, v in times.items()}))
        for k, v in times.items():
            mean = np.mean(v.durations_ms) if len(v) else float("nan")
            log.info("%s: %d movement times, mean %.1f ms, skipped %s", k, len(v), mean, dict(v.diagnostics))
    _out("\n".join(parts), a.output)
    return EXIT_OK


def cmd_report(a) -> int:
    if a.compare:
        ra, rb = (explain.read_shap_csv(p) for p in a.compare)
        rows = explain.compare_rankings(ra, rb, a.depths, a.restrict)
        _out(explain.rank_comparison_csv(rows), a.output)
        return EXIT_OK
    if not a.run_dir:
        raise UsageError("report needs --run-dir or --compare")
    summary = Path(a.run_dir) / "report" / "summary.txt"
    if not summary.exists():
        raise pipeline.MissingInputError(f"missing input {summary}; run the pipeline's report stage first")
    _out(summary.read_text(encoding="utf-8"), a.output)
    return EXIT_OK


def cmd_run(a) -> int:
    cfg = pipeline.load_config(a.config)
    if a.out_dir:
        cfg.with_out_dir(a.out_dir)
    threads = a.threads if a.threads is not None else pipeline.resolve_threads(cfg["run"]["threads"])
    ctx = pipeline.run_pipeline(cfg, threads, a.force)
    log.info("ran %s; skipped %s; config hash %s", ctx.ran or "nothing", ctx.skipped or "nothing", cfg.config_hash)
    return EXIT_OK


def _depth(s: str):
    return s if s == "all" else int(s)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="herdcast", description="Simulate herding trials, train target-selection "
                                "predictors and explain them.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate trials with a scripted herder policy")
    s.add_argument("--policy", choices=EXPERTISE, required=True)
    s.add_argument("--pairs", type=int, default=8)
    s.add_argument("--trials-per-pair", type=int, default=8)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--max-duration", type=float, default=120.0)
    s.add_argument("--jobs", type=int, default=1, help="worker processes (HERDCAST_THREADS overrides)")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("featurize", help="export per-frame 48-channel feature matrices as .hxf")
    s.add_argument("--trials", required=True)
    s.add_argument("--trial-id")
    s.add_argument("--focal", type=int, choices=(0, 1))
    s.add_argument("-o", "--output", required=True, help="directory, or a .hxf file for one trial and focal")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("build-samples", help="window trials into train/validation/test .hxs files")
    s.add_argument("--trials", nargs="+", required=True)
    s.add_argument("--t-hor", type=int, default=16)
    s.add_argument("--stride", type=int, choices=ALLOWED_STRIDES, default=2)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--balanced", dest="balanced", action="store_true", default=True)
    g.add_argument("--representative", dest="balanced", action="store_false")
    s.add_argument("--n-train", type=int, default=8000)
    s.add_argument("--n-test", type=int, default=2000)
    s.add_argument("--n-test-sets", type=int, default=1)
    s.add_argument("--validation-fraction", type=float, default=0.1)
    s.add_argument("--include-failed", action="store_true", help="also window unsuccessful trials")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(func=cmd_build_samples)

    s = sub.add_parser("train", help="train an LSTM classifier and save a .hxm checkpoint")
    s.add_argument("--samples", required=True)
    s.add_argument("--validation")
    s.add_argument("--t-hor", type=int)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--scale", type=float, default=0.25)
    s.add_argument("--max-epochs", type=int, default=40)
    s.add_argument("--patience", type=int, default=5)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--learning-rate", type=float, default=0.0018)
    s.add_argument("--loss-steps", choices=("final", "all"), default="final")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a model on test sets, optionally crossed with a second model")
    s.add_argument("--model", required=True)
    s.add_argument("--test", nargs="+", required=True)
    s.add_argument("--cross", nargs=2, metavar=("MODEL", "TEST"))
    s.add_argument("-o", "--output", help="directory for metrics.csv and confusion.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("explain", help="Shapley attributions for test windows")
    s.add_argument("--model", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--background", required=True, help=".hxs file the background windows are drawn from")
    s.add_argument("--background-size", type=int, default=200)
    s.add_argument("--n", type=int, default=6000, help="number of test windows to explain")
    s.add_argument("--perms", type=int, default=200)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("analyze", help="herding measures and inter-target movement times")
    s.add_argument("--trials", required=True)
    s.add_argument("--movement-times", action="store_true")
    s.add_argument("--measures", action="store_true")
    s.add_argument("--repulsion-radius", type=float, default=0.12)
    s.add_argument("--containment-radius", type=float, default=0.3)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("report", help="print a run's summary, or compare two Shapley tables")
    s.add_argument("--run-dir")
    s.add_argument("--compare", nargs=2, metavar=("SHAP_A", "SHAP_B"))
    s.add_argument("--depths", nargs="+", type=_depth, default=["all", 10, 5])
    s.add_argument("--restrict", choices=("union", "first"), default="union")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="run the pipeline described by a config file")
    s.add_argument("config")
    s.add_argument("--out-dir")
    s.add_argument("--threads", type=int)
    s.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    s.set_defaults(func=cmd_run)
    return p


def _fail(code: str, message: str, status: int) -> int:
    print(f"herdcast: error[{code}]: {message}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except pipeline.ConfigError as exc:
        return _fail(exc.code, str(exc), EXIT_CONFIG)
    except UsageError as exc:
        return _fail(exc.code, str(exc), EXIT_CONFIG)
    except pipeline.MissingInputError as exc:
        return _fail(exc.code, str(exc), EXIT_RUNTIME)
    except FileNotFoundError as exc:
        return _fail("E_MISSING_INPUT", f"{exc.filename}: no such file", EXIT_RUNTIME)
    except InsufficientSamplesError as exc:
        return _fail("E_INSUFFICIENT_SAMPLES", str(exc), EXIT_RUNTIME)
    except evaluation.LayoutMismatchError as exc:
        return _fail("E_LAYOUT_MISMATCH", str(exc), EXIT_RUNTIME)
    except (FormatError, TrialFormatError) as exc:
        return _fail("E_FORMAT", str(exc), EXIT_RUNTIME)
    except TrainingDivergedError as exc:
        return _fail("E_DIVERGED", str(exc), EXIT_RUNTIME)
    except (ValueError, RuntimeError, OSError) as exc:
        return _fail("E_RUNTIME", str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
