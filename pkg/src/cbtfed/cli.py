"""Command line entry point: ``cbtfed {synth,partition,train,eval,report}``.

Every subcommand accepts ``--config FILE`` and any number of
``--section.key VALUE`` overrides (values parse as YAML), e.g.
``cbtfed train --mode fedcbt --fed.t_max 20 --dgn.layer_dims [16,8,4]``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .config import apply_overrides, load_yaml, parse_config
from .data import write_population
from .exceptions import CbtError, ConfigError, StageError
from .experiment import emit_report, evaluate_run, format_table, load_populations, run_experiment, split_population
from .federation import MODES


def _parser():
    p = argparse.ArgumentParser(prog="cbtfed", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML or JSON run configuration")
        return sp

    s = with_config(sub.add_parser("synth", help="write the configured populations as MGT1 files"))
    s.add_argument("--out", required=True, help="output directory")
    s = with_config(sub.add_parser("partition", help="write site partitions and fold splits as JSON"))
    s.add_argument("--out", required=True, help="output JSON file")
    s = with_config(sub.add_parser("train", help="run one mode end to end"))
    s.add_argument("--mode", required=True, choices=MODES)
    s.add_argument("--out", help="run directory (default: output_dir from the config)")
    s.add_argument("--workers", type=int, default=1, help="parallel fold workers")
    s = sub.add_parser("eval", help="recompute metrics of a run from its checkpoints")
    s.add_argument("--run", required=True, help="run directory")
    s = sub.add_parser("report", help="compare runs: tables, paired t-tests, plot data")
    s.add_argument("runs", nargs="+", help="run directories")
    s.add_argument("--designated", default="metafedcbt", help="model tested against every other")
    s.add_argument("--out", help="directory for report CSVs")
    return p


def _split_overrides(extra):
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}; overrides look like --section.key VALUE")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def _load_config(args, extra):
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = load_yaml(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise StageError("config", f"cannot read {args.config}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise StageError("config", f"{args.config} is not valid YAML/JSON: {exc}") from exc
    try:
        return parse_config(apply_overrides(raw, _split_overrides(extra)))
    except ConfigError as exc:
        raise StageError("config", str(exc)) from exc


def cmd_synth(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for pop in load_populations(cfg):
        path = out / f"{pop.label}.mgt1"
        write_population(path, pop)
        print(path)


def cmd_partition(args, cfg):
    doc = {}
    for c, pop in enumerate(load_populations(cfg)):
        part, folds = split_population(pop, cfg, c)
        doc[pop.label] = {
            "assignments": part.assignments.tolist(),
            "folds": [[p.tolist() for p in site] for site in folds.folds],
        }
    Path(args.out).write_text(json.dumps(doc, indent=1))
    print(args.out)


def cmd_train(args, cfg):
    m = run_experiment(cfg, args.mode, args.out, n_workers=args.workers)
    print(m["run_dir"])


def cmd_eval(args, cfg):
    for label, rows in evaluate_run(args.run).items():
        print(f"{label}: {len(rows)} rows")


def cmd_report(args, cfg):
    rep = emit_report(args.runs, args.designated, args.out)
    for label, table in rep["tables"].items():
        print(f"[{label}]")
        print(format_table(table))


COMMANDS = {"synth": (cmd_synth, "data"), "partition": (cmd_partition, "partition"),
            "train": (cmd_train, "train"), "eval": (cmd_eval, "eval"), "report": (cmd_report, "report")}


def main(argv=None):
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    fn, stage = COMMANDS[args.command]
    try:
        if args.command in ("eval", "report") and extra:
            raise StageError("config", f"{args.command} takes no config overrides")
        cfg = _load_config(args, extra) if args.command not in ("eval", "report") else None
        fn(args, cfg)
    except StageError as exc:
        print(f"cbtfed: error {exc}", file=sys.stderr)
        return 1
    except (CbtError, OSError) as exc:
        print(f"cbtfed: error [{stage}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
