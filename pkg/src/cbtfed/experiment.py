"""Experiment orchestration: data → sites → folds → training → metrics → report.

Seeds are derived from the master seed with
``SeedSequence([master, stream, *counters])``; streams are fixed integers:

============  =====================================
stream         used for
============  =====================================
1              synthesis of class ``c``
2              site partition of class ``c``
3              fold split of class ``c``
4              training of class ``c`` fold ``f``
============  =====================================

A run directory holds ``manifest.json``, ``config.yaml``, one
``metrics_<class>.csv`` per class, round histories under ``history/`` and
per-site checkpoints under ``checkpoints/``.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import dump_config, parse_config
from .data import SynthesisSpec, fold_split, partition_sites, read_population, synthesize_population
from .dgn import DgnConfig, global_cbt, subject_cbts
from .evaluation import (
    centeredness, ground_truth_distribution, kl_divergence, one_shot_svm, paired_ttest,
    significance_stars, topology_distribution,
)
from .exceptions import CbtError, ComparisonError, DegenerateError, StageError
from .federation import AUGMENTED, RANDOM, prepare_meta, run_ablation
from .params import load_checkpoint, save_checkpoint

METRIC_COLUMNS = ("fold", "site", "model", "centeredness", "kl_pagerank", "kl_effsize",
                  "acc", "prec", "rec", "f1")
METRICS = METRIC_COLUMNS[3:]
_SYNTH, _PARTITION, _FOLDS, _TRAIN = 1, 2, 3, 4


def derive_seed(master, stream, *counters):
    """Counter-based 32-bit seed for one stream of a run."""
    ss = np.random.SeedSequence([int(master), int(stream), *(int(c) for c in counters)])
    return int(ss.generate_state(1)[0])


def dataset_fingerprint(pops):
    h = hashlib.sha256()
    for p in pops:
        h.update(p.label.encode())
        h.update(np.ascontiguousarray(p.tensors, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# stages

def load_populations(cfg):
    """One :class:`Population` per class."""
    d = cfg.data
    if d.paths:
        return [read_population(p, label) for p, label in zip(d.paths, d.class_labels)]
    s = d.synthesis
    pops = []
    for c, label in enumerate(s.labels):
        modes = tuple((tuple(m + c * s.class_shift for m in means), spread) for means, spread in s.modes)
        spec = SynthesisSpec(s.r, s.v, s.n_per_mode, modes, derive_seed(cfg.seed, _SYNTH, c), label)
        pops.append(synthesize_population(spec))
    return pops


def split_population(pop, cfg, class_index):
    part = partition_sites(pop, cfg.fed.k, derive_seed(cfg.seed, _PARTITION, class_index))
    folds = fold_split(part, cfg.folds, derive_seed(cfg.seed, _FOLDS, class_index))
    return part, folds


def fold_seeds(cfg, n_classes):
    return [[derive_seed(cfg.seed, _TRAIN, c, f) for f in range(cfg.folds)] for c in range(n_classes)]


def dgn_config(cfg, pop):
    return DgnConfig(pop.r, pop.v, cfg.dgn.layer_dims, cfg.dgn.filter_hidden)


def train_fold(cfg, mode, sites, seed, dgn_cfg):
    """All repetitions of ``mode`` on one fold's training sites."""
    fed = dataclasses.replace(cfg.fed, mode=mode, seed=seed)
    site_meta = None
    if mode in AUGMENTED:
        try:
            site_meta = prepare_meta(sites, dgn_cfg, cfg.meta, seed,
                                     with_regressor=mode not in RANDOM,
                                     rdgn_depth=cfg.rdgn.depth, rdgn_channels=cfg.rdgn.base_channels)
        except CbtError as exc:
            raise StageError("pretrain", str(exc)) from exc
    try:
        return run_ablation(mode, sites, fed, dgn_cfg, site_meta)
    except CbtError as exc:
        raise StageError("train", str(exc)) from exc


def _safe_kl(test, template, measure):
    try:
        return kl_divergence(ground_truth_distribution(test, measure),
                             topology_distribution(template, measure))
    except DegenerateError:
        return math.nan


def site_metrics(template, test):
    return {
        "centeredness": centeredness(template, test),
        "kl_pagerank": _safe_kl(test, template, "pagerank"),
        "kl_effsize": _safe_kl(test, template, "effective_size"),
    }


def pair_svm(ta, tb, test_a, test_b, params_a, params_b, dgn_cfg):
    """One-shot SVM on two class templates; each test subject is mapped by its own class model."""
    try:
        return one_shot_svm(ta, tb, subject_cbts(params_a, test_a, dgn_cfg),
                            subject_cbts(params_b, test_b, dgn_cfg))
    except DegenerateError:
        return dict.fromkeys(("acc", "prec", "rec", "f1"), math.nan)


def _model_name(mode, rep, n_reps):
    return mode if n_reps == 1 else f"{mode}/rep{rep}"


def evaluate(cfg, pops, splits, results, dgn_cfg):
    """Metrics rows per class: results[c][fold] is the list of FedResult of that fold."""
    rows = [[] for _ in pops]
    for fold in range(cfg.folds):
        train = [[p.tensors[i] for i in splits[c][1].train(fold)] for c, p in enumerate(pops)]
        test = [[p.tensors[i] for i in splits[c][1].test(fold)] for c, p in enumerate(pops)]
        n_reps = len(results[0][fold])
        for rep in range(n_reps):
            name = _model_name(results[0][fold][rep].mode, rep, n_reps)
            for k in range(cfg.fed.k):
                temps = [global_cbt(results[c][fold][rep].site_params[k], train[c][k], dgn_cfg)
                         for c in range(len(pops))]
                svm = dict.fromkeys(("acc", "prec", "rec", "f1"), math.nan)
                if len(pops) >= 2:
                    svm = pair_svm(temps[0], temps[1], test[0][k], test[1][k],
                                   results[0][fold][rep].site_params[k],
                                   results[1][fold][rep].site_params[k], dgn_cfg)
                for c in range(len(pops)):
                    m = site_metrics(temps[c], test[c][k])
                    rows[c].append({"fold": fold, "site": k, "model": name, **m, **svm})
    return rows


def metrics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["fold"], r["site"], r["model"]] + [repr(float(r[m])) for m in METRICS])
    return buf.getvalue()


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != METRIC_COLUMNS:
        raise ComparisonError(f"{path}: unexpected metrics columns")
    for r in rows:
        r["fold"], r["site"] = int(r["fold"]), int(r["site"])
        for m in METRICS:
            r[m] = float(r[m])
    return rows


# ---------------------------------------------------------------------------
# run

class _Writer:
    """Single writer for a run directory; records every file it creates."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def text(self, rel, content):
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(content)
        self.files.append(str(rel))

    def checkpoint(self, rel, params):
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(p, params)
        self.files.append(str(rel))


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_experiment(cfg, mode=None, output_dir=None, n_workers=None):
    """Execute a full run and return its manifest (also written to ``manifest.json``)."""
    if mode is not None:
        cfg = cfg.with_mode(mode)
    mode = cfg.fed.mode
    out = _Writer(output_dir or cfg.output_dir)
    manifest = {
        "version": __version__, "mode": mode, "config": cfg.to_dict(), "started": _now(),
        "status": "running", "outputs": [], "run_dir": str(out.root),
    }
    stage = "data"
    try:
        pops = load_populations(cfg)
        manifest["dataset"] = dataset_fingerprint(pops)
        manifest["classes"] = [p.label for p in pops]
        stage = "partition"
        splits = [split_population(p, cfg, c) for c, p in enumerate(pops)]
        seeds = fold_seeds(cfg, len(pops))
        manifest["fold_seeds"] = {p.label: seeds[c] for c, p in enumerate(pops)}
        dgn_cfg = dgn_config(cfg, pops[0])
        stage = "train"
        jobs = [(c, f) for c in range(len(pops)) for f in range(cfg.folds)]

        def job(cf):
            c, f = cf
            sites = [pops[c].tensors[i] for i in splits[c][1].train(f)]
            return train_fold(cfg, mode, sites, seeds[c][f], dgn_cfg)

        workers = n_workers or 1
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                done = list(pool.map(job, jobs))
        else:
            done = [job(j) for j in jobs]
        results = [[None] * cfg.folds for _ in pops]
        for (c, f), res in zip(jobs, done):
            results[c][f] = res
        stage = "io"
        out.text("config.yaml", dump_config(cfg))
        for c, p in enumerate(pops):
            for f in range(cfg.folds):
                for rep, res in enumerate(results[c][f]):
                    tag = f"{p.label}_fold{f}_rep{rep}"
                    out.text(f"history/{tag}.csv", res.history_csv())
                    for k, w in enumerate(res.site_params):
                        out.checkpoint(f"checkpoints/{tag}_site{k}.ckpt", w)
        stage = "eval"
        rows = evaluate(cfg, pops, splits, results, dgn_cfg)
        stage = "io"
        for c, p in enumerate(pops):
            out.text(f"metrics_{p.label}.csv", metrics_csv(rows[c]))
        manifest["status"] = "complete"
    except StageError as exc:
        manifest["status"] = "failed"
        manifest["error"] = str(exc)
        raise
    except (CbtError, OSError) as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"[{stage}] {exc}"
        raise StageError(stage, str(exc)) from exc
    finally:
        manifest["finished"] = _now()
        manifest["outputs"] = sorted(out.files) + ["manifest.json"]
        (out.root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def rerun_from_manifest(manifest, output_dir):
    return run_experiment(parse_config(manifest["config"]), manifest["mode"], output_dir)


def evaluate_run(run_dir):
    """Recompute the metrics CSVs of a finished run from its checkpoints."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    cfg = parse_config(manifest["config"])
    pops = load_populations(cfg)
    if dataset_fingerprint(pops) != manifest["dataset"]:
        raise StageError("eval", "dataset differs from the one recorded in the manifest")
    splits = [split_population(p, cfg, c) for c, p in enumerate(pops)]
    dgn_cfg = dgn_config(cfg, pops[0])
    n_reps = cfg.fed.repetitions if manifest["mode"] in RANDOM else 1

    class _Stub:
        def __init__(self, mode, params):
            self.mode, self.site_params = mode, params

    results = [[[_Stub(manifest["mode"], [
        load_checkpoint(run_dir / f"checkpoints/{p.label}_fold{f}_rep{r}_site{k}.ckpt")
        for k in range(cfg.fed.k)]) for r in range(n_reps)]
        for f in range(cfg.folds)] for p in pops]
    rows = evaluate(cfg, pops, splits, results, dgn_cfg)
    out = {}
    for c, p in enumerate(pops):
        text = metrics_csv(rows[c])
        (run_dir / f"metrics_{p.label}.csv").write_text(text)
        out[p.label] = rows[c]
    return out


def load_manifest(run_dir):
    p = Path(run_dir)
    p = p / "manifest.json" if p.is_dir() else p
    try:
        return json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise StageError("report", f"cannot read manifest {p}: {exc}") from exc


# ---------------------------------------------------------------------------
# report

def _base_model(name):
    return name.split("/rep")[0]


def fold_values(rows):
    """{(model, site, metric): [value per fold]} with repetitions averaged within a fold."""
    acc = {}
    for r in rows:
        for m in METRICS:
            acc.setdefault((_base_model(r["model"]), r["site"], m), {}).setdefault(r["fold"], []).append(r[m])
    return {key: [float(np.mean(v[f])) for f in sorted(v)] for key, v in acc.items()}


def compare(a, b):
    """Paired t-test that tolerates degenerate differences: identical inputs give p = 1."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    d = a - b
    if a.size < 2 or not np.all(np.isfinite(d)):
        return math.nan, math.nan
    if np.all(d == 0):
        return 0.0, 1.0
    try:
        return paired_ttest(a, b)
    except DegenerateError:
        return math.copysign(math.inf, d.mean()), 0.0


def emit_report(manifests, designated="metafedcbt", out_dir=None):
    """Mean ± sd tables, paired t-tests against ``designated`` and per-fold plot data.

    ``manifests`` are manifest dicts with a ``run_dir`` key, run directories
    or paths to ``manifest.json``. Returns ``{"tables": ..., "tests": ...,
    "plot": ...}`` with one list of row dicts per class.
    """
    loaded = []
    for m in manifests:
        if isinstance(m, dict):
            loaded.append((Path(m["run_dir"]), m))
        else:
            p = Path(m)
            run_dir = p if p.is_dir() else p.parent
            loaded.append((run_dir, load_manifest(run_dir)))
    if not loaded:
        raise ComparisonError("no runs to report")
    ids = {m.get("dataset") for _, m in loaded}
    if len(ids) != 1:
        raise ComparisonError("runs were produced on different datasets")
    classes = loaded[0][1]["classes"]
    values = {}
    for run_dir, m in loaded:
        if m["classes"] != classes:
            raise ComparisonError("runs disagree on class labels")
        for label in classes:
            for key, v in fold_values(read_metrics(run_dir / f"metrics_{label}.csv")).items():
                values.setdefault(label, {})[key] = v
    tables, tests, plot = {}, {}, []
    for label in classes:
        vals = values[label]
        models = sorted({k[0] for k in vals})
        sites = sorted({k[1] for k in vals})
        table = []
        for model in models:
            for site in sites:
                row = {"model": model, "site": site}
                for metric in METRICS:
                    v = np.asarray(vals[(model, site, metric)])
                    row[f"{metric}_mean"] = float(np.mean(v))
                    row[f"{metric}_sd"] = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
                table.append(row)
                for f, x in enumerate(vals[(model, site, "centeredness")]):
                    plot.append({"class": label, "site": site, "model": model, "fold": str(f), "value": x})
                plot.append({"class": label, "site": site, "model": model, "fold": "mean",
                             "value": float(np.mean(vals[(model, site, "centeredness")]))})
        tables[label] = table
        rows = []
        if designated in models:
            for model in models:
                for site in sites:
                    for metric in METRICS:
                        a, b = vals[(designated, site, metric)], vals[(model, site, metric)]
                        t, p = compare(a, b)
                        rows.append({"designated": designated, "baseline": model, "site": site,
                                     "metric": metric, "mean_diff": float(np.mean(np.subtract(a, b))),
                                     "t": t, "p": p,
                                     "stars": "" if math.isnan(p) else significance_stars(p)})
        tests[label] = rows
    report = {"tables": tables, "tests": tests, "plot": plot}
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _rows_csv(rows):
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def write_report(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for label, rows in report["tables"].items():
        (out / f"table_{label}.csv").write_text(_rows_csv(rows))
    for label, rows in report["tests"].items():
        (out / f"ttest_{label}.csv").write_text(_rows_csv(rows))
    (out / "plot_data.csv").write_text(_rows_csv(report["plot"]))


def format_table(rows, metric="centeredness"):
    lines = [f"{'model':<16}{'site':>5}  {metric}"]
    for r in rows:
        lines.append(f"{r['model']:<16}{r['site']:>5}  {r[metric + '_mean']:.4f} ± {r[metric + '_sd']:.4f}")
    return "\n".join(lines)

