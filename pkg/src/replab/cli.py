"""Command-line entry point: ``replab train|eval|report|plot|fixtures``.

Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from replab.errors import ConfigError, ReplabError, TrainingAbort

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
log = logging.getLogger("replab")


def data_root() -> Path:
    return Path(os.environ.get("REPLAB_DATA_DIR", "replab_data"))


def _cmd_train(args):
    from replab.config import load_config
    from replab.train import save_checkpoint, train

    overrides = {}
    if args.seed is not None:
        overrides.setdefault("run", {})["seed"] = args.seed
    cfg = load_config(args.config, preset=args.preset, overrides=overrides)
    out = Path(args.out) if args.out else data_root() / "runs" / f"{cfg.method_name}-{cfg.config_hash()}-s{cfg.run.seed}"
    cfg.run.output_dir = str(out)

    def progress(event, state, payload):
        if event == "eval":
            log.info("step %d  return %.3f", payload.step, payload.episode_return)

    state = train(cfg, callbacks=[progress])
    save_checkpoint(state, out / "checkpoint")
    print(json.dumps({"out": str(out), "env_steps": state.env_steps, "records": len(state.records)}))
    return EXIT_OK


def _cmd_eval(args):
    from replab.train import evaluate

    summary = evaluate(args.checkpoint, args.episodes, args.seed)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _cmd_report(args):
    from replab.bench import final_records, load_taxonomy, read_records, report_by_category

    records = final_records(read_records(args.runs))
    sys.stdout.write(report_by_category(records, load_taxonomy(args.taxonomy), format=args.format))
    return EXIT_OK


def _cmd_plot(args):
    from replab.bench import emit_plots, load_taxonomy, read_records

    paths = emit_plots(read_records(args.runs), args.out, load_taxonomy(args.taxonomy))
    for p in paths:
        print(p)
    return EXIT_OK


def _cmd_fixtures(args):
    from replab.bench import ingest_fixture, write_records

    records = ingest_fixture(args.file, args.groups)
    out = Path(args.out) if args.out else data_root() / "fixtures" / (Path(args.file).stem + ".jsonl")
    if out.exists():
        out.unlink()
    write_records(records, out)
    print(json.dumps({"records": len(records), "out": str(out)}))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="replab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one (config, seed) run")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--preset", choices=["desk", "paper"])
    t.add_argument("--out")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="deterministic rollouts of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("report", help="per-category table over final records")
    r.add_argument("--runs", required=True)
    r.add_argument("--taxonomy", help="taxonomy TOML; default: built-in table, 'desk' for synthetic categories")
    r.add_argument("--format", choices=["csv", "md"], default="csv")
    r.set_defaults(func=_cmd_report)

    pl = sub.add_parser("plot", help="learning curves and category bars")
    pl.add_argument("--runs", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--taxonomy")
    pl.set_defaults(func=_cmd_plot)

    f = sub.add_parser("fixtures", help="published-score fixtures")
    fsub = f.add_subparsers(dest="fixture_command", required=True)
    ing = fsub.add_parser("ingest", help="validate a score CSV and convert it to run records")
    ing.add_argument("--file", required=True)
    ing.add_argument("--groups", help="game,group CSV; default: <file>.groups.csv next to the file")
    ing.add_argument("--out")
    ing.set_defaults(func=_cmd_fixtures)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ReplabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
