"""Config-driven end-to-end runs: simulate -> build-samples -> train -> eval -> explain -> analyze -> report.

The config is an INI file with one section per stage. Every stochastic stage
draws its seed from the global ``[run] seed`` via :func:`stage_seed`. Each
stage writes a ``stage.json`` next to its outputs recording the config hash,
the seed, a key over its parameters and input contents, and the SHA-256 of
every output; a rerun whose key and outputs still match is skipped.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
import shutil
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import analysis, evaluation, explain
from .dataset import SplitConfig, assemble_split, build_pool, read_hxs, write_hxs
from .features import FEATURE_NAMES
from .ingest import EXPERTISE, read_trials, write_trials
from .sim import WorldConfig, simulate_batch
from .train import LSTMClassifier

log = logging.getLogger(__name__)

STAGES = ("simulate", "build-samples", "train", "eval", "explain", "analyze", "report")
THREADS_ENV = "HERDCAST_THREADS"


class ConfigError(ValueError):
    """A config file problem; ``code`` is a stable machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class MissingInputError(RuntimeError):
    code = "E_MISSING_INPUT"


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _strings(s: str) -> list:
    return [p.strip() for p in s.split(",") if p.strip()]


def _depths(s: str) -> list:
    return [p if p == "all" else int(p) for p in _strings(s)]


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "herdcast-run"),
        "scale": (float, 0.25),
        "threads": (int, 1),
        "stages": (_strings, list(STAGES)),
        "expertise": (_strings, list(EXPERTISE)),
    },
    "simulate": {
        "pairs": (int, 8),
        "trials_per_pair": (int, 8),
        "max_duration": (float, 120.0),
    },
    "samples": {
        "horizon": (int, 16),
        "stride": (int, 2),
        "balance": (str, "balanced"),
        "n_train": (int, 8000),
        "n_test": (int, 2000),
        "n_test_sets": (int, 1),
        "validation_fraction": (float, 0.1),
        "successful_only": (_bool, True),
    },
    "train": {
        "learning_rate": (float, 0.0018),
        "batch_size": (int, 64),
        "max_epochs": (int, 40),
        "patience": (int, 5),
        "min_delta": (float, 1e-4),
        "loss_steps": (str, "final"),
    },
    "explain": {
        "n": (int, 40),
        "perms": (int, 20),
        "background": (int, 50),
        "depths": (_depths, ["all", 10, 5]),
        "restrict": (str, "union"),
    },
    "analyze": {
        "repulsion_radius": (float, 0.12),
        "containment_radius": (float, 0.3),
    },
}

CHOICES = {("samples", "balance"): ("balanced", "representative"), ("train", "loss_steps"): ("final", "all"),
           ("explain", "restrict"): ("union", "first")}


@dataclass
class PipelineConfig:
    sections: dict
    source: str = ""

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    @property
    def seed(self) -> int:
        return self.sections["run"]["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.sections["run"]["out_dir"])

    def with_out_dir(self, out_dir) -> "PipelineConfig":
        self.sections["run"]["out_dir"] = str(out_dir)
        return self

    def canonical(self) -> dict:
        # output location and parallelism do not change artifact contents
        out = {s: dict(v) for s, v in self.sections.items()}
        out["run"] = {k: v for k, v in out["run"].items() if k not in ("out_dir", "threads")}
        return out

    @property
    def config_hash(self) -> str:
        return _hash_json(self.canonical())[:16]


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


def default_sections() -> dict:
    return {s: {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in keys.items()}
            for s, keys in SCHEMA.items()}


def parse_config(text: str, source: str = "<string>") -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("E_CONFIG_SYNTAX", f"{source}: {exc.message if hasattr(exc, 'message') else exc}") from None
    sections = default_sections()
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError("E_CONFIG_UNKNOWN_SECTION", f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError("E_CONFIG_UNKNOWN_KEY", f"unknown key '{key}' in section [{sec}]")
            parser = SCHEMA[sec][key][0]
            try:
                value = parser(raw)
            except ValueError:
                raise ConfigError("E_CONFIG_BAD_VALUE", f"bad value {raw!r} for key '{key}' in [{sec}]") from None
            choices = CHOICES.get((sec, key))
            if choices and value not in choices:
                raise ConfigError("E_CONFIG_BAD_VALUE", f"key '{key}' in [{sec}] must be one of {', '.join(choices)}")
            sections[sec][key] = value
    for st in sections["run"]["stages"]:
        if st not in STAGES:
            raise ConfigError("E_CONFIG_UNKNOWN_STAGE", f"unknown stage '{st}'")
    for e in sections["run"]["expertise"]:
        if e not in EXPERTISE:
            raise ConfigError("E_CONFIG_BAD_VALUE", f"unknown expertise '{e}'")
    return PipelineConfig(sections, source)


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("E_CONFIG_UNREADABLE", f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def resolve_threads(configured: int = 1) -> int:
    """Parallelism degree: HERDCAST_THREADS wins over the configured value."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return max(1, int(configured))
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("E_CONFIG_BAD_VALUE", f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("E_CONFIG_BAD_VALUE", f"{THREADS_ENV} must be at least 1")
    return n


def stage_seed(seed: int, name: str) -> int:
    """Seed for a named unit of work, derived from the global seed and a CRC-32 of the name."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]).generate_state(1, np.uint32)[0])


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stamp(cfg: PipelineConfig) -> str:
    return f"# config_hash={cfg.config_hash} seed={cfg.seed}\n"


@dataclass
class StageContext:
    cfg: PipelineConfig
    threads: int
    force: bool = False
    ran: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def root(self) -> Path:
        return self.cfg.out_dir


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _inputs_exist(paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise MissingInputError(f"missing input {p}; run the stage that produces it first")


def _run_stage(ctx: StageContext, name: str, params: dict, inputs: list, body: Callable[[Path], list]) -> None:
    """Run ``body`` unless ``stage.json`` shows identical config, inputs and outputs.

    The key includes the config hash because stamped outputs embed it.
    """
    _inputs_exist(inputs)
    stage_dir = ctx.root / name
    key = _hash_json({"stage": name, "config_hash": ctx.cfg.config_hash, "params": params,
                      "inputs": {str(Path(p).relative_to(ctx.root)): file_hash(p) for p in inputs}})
    record_path = stage_dir / "stage.json"
    if not ctx.force and record_path.exists():
        try:
            rec = json.loads(record_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            rec = {}
        outs = rec.get("outputs", {})
        if rec.get("key") == key and outs and all(
                (stage_dir / o).exists() and file_hash(stage_dir / o) == h for o, h in outs.items()):
            log.info("%s: up to date, skipping", name)
            ctx.skipped.append(name)
            return
    if stage_dir.exists():
        shutil.rmtree(stage_dir)
    stage_dir.mkdir(parents=True)
    log.info("%s: running", name)
    outputs = body(stage_dir)
    record = {"stage": name, "config_hash": ctx.cfg.config_hash, "seed": ctx.cfg.seed, "key": key,
              "params": params,
              "outputs": {str(Path(o).relative_to(stage_dir)): file_hash(o) for o in sorted(outputs)}}
    record_path.write_text(json.dumps(record, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    ctx.ran.append(name)


def _trials_path(ctx, e):
    return ctx.root / "simulate" / f"trials_{e}.jsonl"


def _sample_paths(ctx, e, n_test_sets):
    d = ctx.root / "build-samples" / e
    return d / "train.hxs", d / "val.hxs", [d / f"test_{j:02d}.hxs" for j in range(n_test_sets)]


def _model_path(ctx, e):
    return ctx.root / "train" / f"{e}.hxm"


def stage_simulate(ctx: StageContext) -> None:
    cfg = ctx.cfg
    params = {"seed": cfg.seed, "expertise": cfg["run"]["expertise"], **cfg["simulate"]}

    def body(d: Path):
        world = WorldConfig(max_duration=cfg["simulate"]["max_duration"])
        outs = []
        for e in cfg["run"]["expertise"]:
            trials = simulate_batch(e, cfg["simulate"]["pairs"], cfg["simulate"]["trials_per_pair"],
                                    stage_seed(cfg.seed, f"simulate:{e}"), world, ctx.threads)
            log.info("simulate: %s %d/%d successful", e, sum(t.success for t in trials), len(trials))
            write_trials(trials, d / f"trials_{e}.jsonl")
            outs.append(d / f"trials_{e}.jsonl")
        return outs

    _run_stage(ctx, "simulate", params, [], body)


def stage_build_samples(ctx: StageContext) -> None:
    cfg = ctx.cfg
    s = cfg["samples"]
    params = {"seed": cfg.seed, **s}
    inputs = [_trials_path(ctx, e) for e in cfg["run"]["expertise"]]

    def body(d: Path):
        outs = []
        for e in cfg["run"]["expertise"]:
            trials = read_trials(_trials_path(ctx, e))
            pool = build_pool(trials, s["stride"], s["horizon"], successful_only=s["successful_only"])
            split = assemble_split(pool, SplitConfig(s["n_train"], s["n_test"], s["n_test_sets"], s["balance"],
                                                     s["validation_fraction"], False,
                                                     stage_seed(cfg.seed, f"samples:{e}")))
            tr, va, tests = _sample_paths(ctx, e, s["n_test_sets"])
            tr.parent.mkdir(parents=True, exist_ok=True)
            for ss, path in [(split.train, tr), (split.validation, va), *zip(split.tests, tests)]:
                ss.meta.update({"expertise": e, "config_hash": cfg.config_hash, "seed": cfg.seed})
                write_hxs(path, ss)
                outs.append(path)
        return outs

    _run_stage(ctx, "build-samples", params, inputs, body)


def stage_train(ctx: StageContext) -> None:
    cfg = ctx.cfg
    t = cfg["train"]
    params = {"seed": cfg.seed, "scale": cfg["run"]["scale"], **t}
    n_sets = cfg["samples"]["n_test_sets"]
    inputs = []
    for e in cfg["run"]["expertise"]:
        tr, va, _ = _sample_paths(ctx, e, n_sets)
        inputs += [tr, va]

    def body(d: Path):
        outs = []
        for e in cfg["run"]["expertise"]:
            tr, va, _ = _sample_paths(ctx, e, n_sets)
            clf = LSTMClassifier(scale=cfg["run"]["scale"], learning_rate=t["learning_rate"],
                                 batch_size=t["batch_size"], max_epochs=t["max_epochs"], patience=t["patience"],
                                 min_delta=t["min_delta"], loss_steps=t["loss_steps"],
                                 random_state=stage_seed(cfg.seed, f"train:{e}"))
            clf.fit_samples(read_hxs(tr), read_hxs(va), config_hash=cfg.config_hash, run_seed=cfg.seed)
            h = clf.history_
            log.info("train: %s stopped after %d epochs (best %d, val acc %.4f)", e, h.epochs, h.best_epoch,
                     h.val_accuracy[h.best_epoch - 1] if h.best_epoch else float("nan"))
            clf.save(_model_path(ctx, e))
            outs.append(_model_path(ctx, e))
        return outs

    _run_stage(ctx, "train", params, inputs, body)


def stage_eval(ctx: StageContext) -> None:
    cfg = ctx.cfg
    exps = cfg["run"]["expertise"]
    n_sets = cfg["samples"]["n_test_sets"]
    inputs = [_model_path(ctx, e) for e in exps] + [p for e in exps for p in _sample_paths(ctx, e, n_sets)[2]]

    def body(d: Path):
        models = {e: LSTMClassifier.load(_model_path(ctx, e)) for e in exps}
        tests = {e: [read_hxs(p) for p in _sample_paths(ctx, e, n_sets)[2]] for e in exps}
        rows, blocks, text = [], [], []
        for e in exps:
            pred = np.concatenate([models[e].predict(s.X) for s in tests[e]])
            y = np.concatenate([s.y for s in tests[e]])
            cm = evaluation.confusion_matrix(pred, y)
            rep = evaluation.classification_metrics(cm)
            rows.append((e, e, rep))
            blocks.append(evaluation.confusion_csv(f"{e} model on {e} test data", cm))
            text.append(evaluation.format_report(f"{e} model on {e} test data", cm, rep))
        ce = evaluation.cross_evaluate(models, tests)
        for m in exps:
            for dname in exps:
                if m != dname:
                    pred = np.concatenate([models[m].predict(s.X) for s in tests[dname]])
                    y = np.concatenate([s.y for s in tests[dname]])
                    rows.append((m, dname, evaluation.classification_metrics(evaluation.confusion_matrix(pred, y))))
        _write_text(d / "metrics.csv", _stamp(cfg) + evaluation.metrics_csv(rows))
        _write_text(d / "confusion.csv", _stamp(cfg) + "\n".join(blocks))
        _write_text(d / "cross_expertise.txt", _stamp(cfg) + ce.table() + "\n")
        _write_text(d / "report.txt", _stamp(cfg) + "\n\n".join(text) + "\n")
        return [d / "metrics.csv", d / "confusion.csv", d / "cross_expertise.txt", d / "report.txt"]

    _run_stage(ctx, "eval", {}, inputs, body)


def stage_explain(ctx: StageContext) -> None:
    cfg = ctx.cfg
    x = cfg["explain"]
    exps = cfg["run"]["expertise"]
    n_sets = cfg["samples"]["n_test_sets"]
    params = {"seed": cfg.seed, **x}
    inputs = []
    for e in exps:
        tr, _, tests = _sample_paths(ctx, e, n_sets)
        inputs += [_model_path(ctx, e), tr, tests[0]]

    def body(d: Path):
        reports, outs = {}, []
        for e in exps:
            tr, _, tests = _sample_paths(ctx, e, n_sets)
            clf = LSTMClassifier.load(_model_path(ctx, e))
            expl = ShapleyRun(clf, x, stage_seed(cfg.seed, f"explain:{e}"), ctx.threads)
            rep = expl.run(read_hxs(tr), read_hxs(tests[0]))
            reports[e] = rep
            _write_text(d / f"shap_{e}.csv", _stamp(cfg) + rep.to_csv())
            _write_text(d / f"top10_{e}.csv", _stamp(cfg) + rep.top_table(10))
            outs += [d / f"shap_{e}.csv", d / f"top10_{e}.csv"]
        if len(exps) == 2:
            rows = explain.compare_rankings(reports[exps[0]], reports[exps[1]], x["depths"], x["restrict"])
            _write_text(d / "kendall.csv", _stamp(cfg) + explain.rank_comparison_csv(rows))
            outs.append(d / "kendall.csv")
        return outs

    _run_stage(ctx, "explain", params, inputs, body)


@dataclass
class ShapleyRun:
    """Explain the first ``n`` test windows against a background drawn from the training windows."""

    clf: LSTMClassifier
    params: dict
    seed: int
    threads: int = 1

    def run(self, train, test) -> explain.ShapReport:
        ex = explain.ShapleyExplainer(self.clf, self.params["background"], self.params["perms"],
                                      random_state=self.seed, n_jobs=self.threads).fit(train.X)
        n = min(self.params["n"], len(test))
        ids = [f"{tid}:{f}:{t}" for tid, f, t in test.keys()[:n]]
        rep = ex.explain(test.X[:n], ids)
        rep.feature_names = list(FEATURE_NAMES)
        return rep


def stage_analyze(ctx: StageContext) -> None:
    cfg = ctx.cfg
    a = cfg["analyze"]
    inputs = [_trials_path(ctx, e) for e in cfg["run"]["expertise"]]

    def body(d: Path):
        trials = [t for e in cfg["run"]["expertise"] for t in read_trials(_trials_path(ctx, e))]
        _write_text(d / "measures.csv",
                    _stamp(cfg) + analysis.measures_csv(trials, a["containment_radius"]))
        times = analysis.batch_movement_times(trials, a["repulsion_radius"])
        _write_text(d / "movement_hist.csv",
                    _stamp(cfg) + analysis.histogram_csv({k: v.durations_ms for k, v in times.items()}))
        lines = [f"{k}: n={len(v)} mean={np.mean(v.durations_ms) if len(v) else float('nan'):.1f} ms "
                 f"skipped={dict(sorted(v.diagnostics.items()))}" for k, v in times.items()]
        _write_text(d / "movement_summary.txt", _stamp(cfg) + "\n".join(lines) + "\n")
        return [d / "measures.csv", d / "movement_hist.csv", d / "movement_summary.txt"]

    _run_stage(ctx, "analyze", dict(a), inputs, body)


REPORT_FILES = [("eval", "confusion.csv"), ("eval", "metrics.csv"), ("eval", "cross_expertise.txt"),
                ("eval", "report.txt"), ("explain", "kendall.csv"), ("analyze", "measures.csv"),
                ("analyze", "movement_hist.csv"), ("analyze", "movement_summary.txt")]


def stage_report(ctx: StageContext) -> None:
    cfg = ctx.cfg
    wanted = list(REPORT_FILES) + [("explain", f"top10_{e}.csv") for e in cfg["run"]["expertise"]]
    inputs = [ctx.root / s / f for s, f in wanted if (ctx.root / s / f).exists()]
    if not inputs:
        raise MissingInputError(f"nothing to report under {ctx.root}")

    def body(d: Path):
        outs = []
        for p in inputs:
            dst = d / p.name
            shutil.copyfile(p, dst)
            outs.append(dst)
        summary = [f"config_hash {cfg.config_hash}", f"seed {cfg.seed}", ""]
        for p in inputs:
            if p.suffix == ".txt":
                summary += [f"== {p.parent.name}/{p.name}", p.read_text(encoding="utf-8").rstrip(), ""]
        _write_text(d / "summary.txt", "\n".join(summary) + "\n")
        outs.append(d / "summary.txt")
        return outs

    _run_stage(ctx, "report", {}, inputs, body)


STAGE_FUNCS = {"simulate": stage_simulate, "build-samples": stage_build_samples, "train": stage_train,
               "eval": stage_eval, "explain": stage_explain, "analyze": stage_analyze, "report": stage_report}


def run_pipeline(cfg: PipelineConfig, threads: int | None = None, force: bool = False) -> StageContext:
    """Run the configured stages in canonical order and return what ran and what was skipped."""
    ctx = StageContext(cfg, threads if threads is not None else resolve_threads(cfg["run"]["threads"]), force)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "config.json").write_text(
        json.dumps({"config_hash": cfg.config_hash, "config": cfg.canonical()}, sort_keys=True, indent=1) + "\n",
        encoding="utf-8")
    wanted = set(cfg["run"]["stages"])
    for name in STAGES:
        if name in wanted:
            STAGE_FUNCS[name](ctx)
    return ctx
