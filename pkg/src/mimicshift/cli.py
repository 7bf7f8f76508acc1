"""Command-line entry point: ``mimicshift <subcommand> ...``."""

import argparse
import glob
import json
import os
import sys

import numpy as np

from .attack import make_shift_schedule
from .experiment import (FILTER_NAMES, ConfigError, ExperimentConfig, StageError,
                         _interval_schedule, _load_corpus, _make_filter, load_attacker,
                         load_normal, run_experiment, save_attacker, save_normal,
                         train_attacker, train_normal)
from .filters import decide, read_decision_log, run_online, write_decision_log
from .markov import MarkovValidationError
from .metrics import (ACCEPTANCE, REJECTION, compute_metrics, confusion, emit_report,
                      load_report, rate_curve, render_comparison_table)
from .traffic import SKEW_PRESETS, CorpusError, ingest_csv, synth_normal_corpus, write_csv

OUT_ENV = "MIMICSHIFT_OUT"
EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_out(name):
    return os.path.join(os.environ.get(OUT_ENV, "results"), name)


def _config(args):
    if args.config and args.preset:
        raise UsageError("give --config or --preset, not both")
    kw = {"seed": args.seed}
    if args.out:
        kw["out_dir"] = args.out
    return ExperimentConfig.load(args.config or args.preset or "paper-defaults", **kw)


def _corpus(cfg, path):
    if path:
        return ingest_csv(path, feature_name=cfg.section("corpus").get("feature_name",
                                                                        "request_len"))
    return _load_corpus(cfg)


# ------------------------------------------------------------ subcommands


def cmd_synth(args):
    spec = SKEW_PRESETS.get(args.preset)
    if spec is None:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(SKEW_PRESETS)}")
    corpus = synth_normal_corpus(spec, args.n_requests, args.seed)
    out = args.out or _default_out(f"{args.preset}.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_csv(corpus, out)
    vals = corpus.feature_values()
    _, counts = np.unique(vals, return_counts=True)
    top3 = float(np.sort(counts)[::-1][:3].sum() / vals.size)
    return {"out": out, "n_requests": len(corpus), "top3_mass": round(top3, 6)}


def cmd_train_attacker(args):
    cfg = _config(args)
    corpus = _corpus(cfg, args.corpus)
    out = args.out or _default_out("attacker")
    gan = train_attacker(cfg, corpus)
    save_attacker(gan, out)
    normal = train_normal(cfg, corpus)
    save_normal(normal, os.path.join(out, "normal"), corpus.vocab)
    return {"out": out, "d_accuracy": gan.d_accuracy_, "warnings": gan.warnings_}


def cmd_attack(args):
    cfg = _config(args)
    gan = load_attacker(args.model)
    t = cfg.section("traffic")
    n_minutes = args.minutes or int(t.get("n_minutes", 10))
    rpm = args.requests_per_minute or int(t.get("requests_per_minute", 1000))
    n_attack = int(round(t.get("alpha", 0.8) * rpm)) if args.normal else rpm
    idx, params = make_shift_schedule(cfg.profiles(), n_minutes, cfg.stage_seed("schedule"))
    normal = (ingest_csv(args.normal, vocab=gan.vocab_).requests if args.normal else [])
    n_normal = rpm - n_attack
    if len(normal) < n_minutes * n_normal:
        raise UsageError(f"--normal has {len(normal)} requests; need {n_minutes * n_normal}")
    out = args.out or _default_out("intervals")
    os.makedirs(out, exist_ok=True)
    log = []
    base = cfg.stage_seed("generate")
    for m, p in enumerate(params):
        rng = np.random.default_rng([base, m])
        att = gan.generate_interval(p, n_attack, rng, interval_index=m)
        reqs = att.requests + [r.replace(interval_index=m, source_id=f"n{i}")
                               for i, r in enumerate(normal[m * n_normal:(m + 1) * n_normal])]
        order = rng.permutation(len(reqs))
        corpus = att.with_requests([reqs[i] for i in order])
        write_csv(corpus, os.path.join(out, f"minute_{m:03d}.csv"))
        inj = att.metadata["injected_classes"]
        log.append({"minute": m, "profile_index": int(idx[m]),
                    "class_freq": (np.bincount(inj.ravel(), minlength=gan.n_classes)
                                   / inj.size).round(6).tolist()})
    with open(os.path.join(out, "schedule.json"), "w") as fh:
        json.dump(log, fh, indent=1)
    return {"out": out, "minutes": n_minutes, "profile_index": [int(i) for i in idx]}


def cmd_filter(args):
    cfg = _config(args)
    normal, vocab = load_normal(args.normal_model)
    files = sorted(f for pat in args.intervals for f in glob.glob(pat)) or args.intervals
    minutes = [ingest_csv(f, vocab=vocab) for f in files]
    train_corpus = None
    if args.filter.replace("Enhanced-", "") == "Iterative":
        if not args.normal:
            raise UsageError("the Iterative filters need --normal (replay corpus)")
        train_corpus = ingest_csv(args.normal, vocab=vocab)
    filt = _make_filter(args.filter, cfg, normal, train_corpus).fit()
    sched = _interval_schedule(args.filter, cfg, len(minutes))
    run = run_online(filt, minutes, sched, bool(cfg.section("filters").get("causal", False)))
    rate = cfg.section("filters").get("rejection_rate", 0.8)
    decisions, labels = [], []
    for m, corpus in enumerate(minutes):
        decisions += decide(run.raw_scores[m], rate, interval=m)
        labels += list(corpus.labels)
    out = args.out or _default_out("decisions.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_decision_log(out, decisions, labels)
    return {"out": out, "minutes": len(minutes), "intervals": [list(b) for b in run.boundaries]}


def cmd_eval(args):
    rows = read_decision_log(args.decisions)
    if args.interval is not None:
        rows = [r for r in rows if int(r["interval"]) == args.interval]
    if not rows:
        raise UsageError("no decisions to evaluate")
    if any(r["label"] == "" for r in rows):
        raise UsageError("decision log has unlabeled rows")
    verdicts = [r["verdict"] for r in rows]
    labels = [r["label"] for r in rows]
    scores = np.array([float(r["score"]) for r in rows])
    row = compute_metrics(confusion(verdicts, labels), dataset=args.dataset, model=args.model,
                          interval="all" if args.interval is None else str(args.interval))
    curves = {f"{args.model}/fnr": rate_curve(scores, labels, ACCEPTANCE),
              f"{args.model}/fpr": rate_curve(scores, labels, REJECTION)}
    out = args.out or _default_out(f"eval.{args.format}")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    files = emit_report([row], curves, out, args.format)
    return {"files": files, **row.values()}


def cmd_run(args):
    cfg = _config(args)
    res = run_experiment(cfg)
    return {"out": cfg.out_dir, "files": res.files,
            "rows": [{"dataset": r.dataset, "model": r.model, "fnr": r.fnr, "fpr": r.fpr}
                     for r in res.rows]}


def cmd_report(args):
    doc = load_report(args.metrics)
    sys.stdout.write(render_comparison_table(doc["rows"], reference_dataset=args.reference))
    return None


# ------------------------------------------------------------------ parser


def _add_config(p):
    p.add_argument("--config", help="TOML config file (merged over paper-defaults)")
    p.add_argument("--preset", help="name of a shipped config preset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out")


def build_parser():
    parser = _Parser(prog="mimicshift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic normal corpus CSV")
    p.add_argument("--preset", default="caida-skew")
    p.add_argument("--n-requests", type=int, default=10000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-attacker", help="train the conditional generator and normal model")
    _add_config(p)
    p.add_argument("--corpus", help="normal-traffic CSV; default synthesizes from config")
    p.set_defaults(func=cmd_train_attacker)

    p = sub.add_parser("attack", help="generate per-minute interval CSVs under a shift schedule")
    _add_config(p)
    p.add_argument("--model", required=True, help="directory written by train-attacker")
    p.add_argument("--normal", help="normal CSV mixed into each minute")
    p.add_argument("--minutes", type=int)
    p.add_argument("--requests-per-minute", type=int)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("filter", help="run one online filter over interval CSVs")
    _add_config(p)
    p.add_argument("--filter", required=True, choices=FILTER_NAMES)
    p.add_argument("--normal-model", required=True, help="normal model directory")
    p.add_argument("--normal", help="normal CSV used for replay by the Iterative filters")
    p.add_argument("intervals", nargs="+", help="interval CSVs in time order (globs allowed)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("eval", help="metrics and curves from a decision log")
    p.add_argument("decisions")
    p.add_argument("--interval", type=int, help="only evaluate this interval")
    p.add_argument("--dataset", default="")
    p.add_argument("--model", default="filter")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="full pipeline: static and shifting attack, all filters")
    _add_config(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="comparison table from a metrics file")
    p.add_argument("metrics")
    p.add_argument("--reference", choices=("HULK", "LOIC", "CAIDA07"),
                   help="compare every row against this published dataset")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind, message, code, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        result = args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except (ConfigError, MarkovValidationError) as exc:
        return _fail("config", str(exc), EXIT_USAGE)
    except StageError as exc:
        return _fail("stage", str(exc), EXIT_FAILURE, stage=exc.stage)
    except (CorpusError, OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)
    if result is not None:
        sys.stdout.write(json.dumps(result, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
