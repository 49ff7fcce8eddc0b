"""Command-line entry point: ``gcrfcast <subcommand> [options]``.

Every subcommand accepts ``--config FILE``, ``--seed N`` and ``--out DIR``.
Failures print a stage-tagged message and exit with status 1; usage
errors exit with status 2.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import __version__
from .dataset import Schema, ingest_node_series, write_node_series
from .harness import (
    FAMILY_LABEL,
    MODEL_LABEL,
    ExperimentConfig,
    PipelineError,
    dumps_predictions,
    load_predictions,
    prepare,
    run_experiment,
    stage,
    train_structured,
    write_reports,
    _slug,
)
from .evaluation import ModelMonthOutput, build_report
from .extensions import predict_structured
from .kvconfig import ConfigError, dumps_kv, read_kv
from .serialize import load_params, save_params
from .similarity import (
    attribute_histograms,
    common_history_similarity,
    js_divergence_similarity,
    parse_sparsify_rule,
    save_similarity,
    sparsify,
    variogram,
)
from .synthetic import SynthConfig, generate_ar_graph

DEFAULT_OUT = "gcrfcast-out"


def _experiment_config(args):
    if not args.config:
        raise ConfigError("--config FILE is required for this subcommand")
    cfg = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        synth = dict(cfg.synth)
        if not cfg.dataset:
            synth["seed"] = str(args.seed)
        cfg = dataclasses.replace(cfg, seed=args.seed, synth=synth)
    return cfg


def _load_series(args):
    if args.input:
        return ingest_node_series(args.input)
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
        if cfg.dataset:
            return ingest_node_series(cfg.dataset, Schema(
                cfg.col_timestep, cfg.col_node, cfg.col_target, None, cfg.delimiter))
        return generate_ar_graph(SynthConfig.from_mapping(cfg.synth))[0]
    raise ConfigError("need --input SERIES or --config FILE")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_ingest(args):
    with stage("ingest"):
        if not args.input:
            raise ConfigError("--input CSV is required")
        attrs = tuple(a for a in (args.attributes or "").split(",") if a) or None
        schema = Schema(args.timestep_col, args.node_col, args.target_col, attrs, args.delimiter)
        ds = ingest_node_series(args.input, schema)
    with stage("output"):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_node_series(ds, out / "series.csv")
    print(f"ingested {ds.n_nodes} nodes x {ds.n_timesteps} timesteps -> {out / 'series.csv'}")


def cmd_synth(args):
    with stage("config"):
        mapping = read_kv(args.config) if args.config else {}
        if any(k.startswith("synth.") for k in mapping):
            mapping = {k[len("synth."):]: v for k, v in mapping.items() if k.startswith("synth.")}
        mapping.pop("format_version", None)
        if args.seed is not None:
            mapping["seed"] = str(args.seed)
        cfg = SynthConfig.from_mapping(mapping)
    with stage("synthesis"):
        ds, graph = generate_ar_graph(cfg)
    with stage("output"):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_node_series(ds, out / "series.csv")
        save_similarity(graph, out / "ground_truth.sim")
        (out / "synth.cfg").write_text(cfg.to_text(), encoding="utf-8")
    print(f"generated {ds.n_nodes} nodes x {ds.n_timesteps} timesteps -> {out}")


def cmd_graph(args):
    with stage("ingest"):
        ds = _load_series(args)
    with stage("similarity"):
        t = ds.n_timesteps if args.timestep is None else ds.timesteps.index(args.timestep)
        if args.kind == "common-history":
            S = common_history_similarity(ds, args.attribute, args.h, t)
        else:
            H = attribute_histograms(ds, args.attribute, t, args.h, args.bins)
            S = js_divergence_similarity(H, timestep=t)
        rule = parse_sparsify_rule(args.sparsify)
        if rule:
            S = sparsify(S, **rule)
    with stage("variogram"):
        # compare against the most recent targets the graph was built from
        rep = variogram(S, ds.targets[t - 1], n_bins=args.n_bins)
    with stage("output"):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_similarity(S, out / "similarity.sim")
        fields = {
            "kind": args.kind, "timestep": t, "verdict": rep.verdict,
            "overall_variance": repr(float(rep.overall_variance)),
            "spearman": repr(float(rep.spearman)),
            "spearman_pvalue": repr(float(rep.spearman_pvalue)),
            "bins": " ".join(f"{float(lo)!r}:{float(hi)!r}" for lo, hi in rep.bins),
            "gamma": " ".join(repr(float(g)) for g in rep.gamma),
            "n_pairs": " ".join(str(int(n)) for n in rep.n_pairs),
        }
        (out / "variogram.txt").write_text(dumps_kv(fields), encoding="utf-8")
    print(f"similarity -> {out / 'similarity.sim'}; variogram verdict: {rep.verdict}")


def cmd_train(args):
    with stage("config"):
        cfg = _experiment_config(args)
    prep = prepare(cfg)
    month = prep.test_months[0] if args.month is None else args.month
    families = [args.family] if args.family else list(cfg.families)
    models = [args.model] if args.model else list(cfg.models)
    out = Path(args.out) / "models"
    out.mkdir(parents=True, exist_ok=True)
    for fam in families:
        for model in models:
            params = train_structured(prep, model, fam, month)
            name = f"{MODEL_LABEL[model]} + {FAMILY_LABEL[fam]}"
            path = out / f"{_slug(name)}_m{month}.params"
            with stage("output"):
                save_params(params, path)
            print(f"{name} month {month} -> {path}")


def cmd_predict(args):
    with stage("config"):
        cfg = _experiment_config(args)
        if not args.params:
            raise ConfigError("--params FILE is required")
        params = load_params(args.params)
        fam = args.family or cfg.families[0]
    prep = prepare(cfg)
    months = prep.test_months if args.month is None else [args.month]
    name = f"{MODEL_LABEL[params.model]} + {FAMILY_LABEL[fam]}"
    preds, truths = {name: {}}, {}
    with stage("prediction"):
        for m in months:
            if m not in prep.snapshots[fam]:
                raise ConfigError(f"month {m} has no snapshot")
            dist = predict_structured(params, prep.snapshots[fam][m])
            preds[name][m] = ModelMonthOutput(dist.mean, dist.variance)
            truths[m] = prep.data.targets[m]
    with stage("output"):
        out = Path(args.out) / "predictions"
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{_slug(name)}.csv"
        path.write_text(dumps_predictions(preds, truths, prep.data.node_ids), encoding="utf-8")
    print(f"predictions -> {path}")


def cmd_evaluate(args):
    with stage("evaluation"):
        if not args.predictions:
            raise ConfigError("--predictions FILE is required")
        outputs, truths, ids = load_predictions(args.predictions)
        report = build_report(outputs, truths, node_ids=ids)
    with stage("output"):
        write_reports(report, Path(args.out) / "reports")
    for model in report.ranking.get("rmse", []):
        a = report.averages[model]
        extra = f"  nlpd={a['nlpd']:.6g}" if "nlpd" in a else ""
        print(f"{model:20s} rmse={a['rmse']:.6g}{extra}")


def cmd_run(args):
    with stage("config"):
        cfg = _experiment_config(args)
    result = run_experiment(cfg, args.out)
    for model in result.report.ranking.get("rmse", []):
        a = result.report.averages[model]
        print(f"{model:20s} rmse={a['rmse']:.6g}  nlpd={a['nlpd']:.6g}  cov95={a['coverage95']:.3f}")
    print(f"outputs -> {result.out_dir}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key = value config file")
    common.add_argument("--seed", type=int, metavar="N", help="override the configured seed")
    common.add_argument("--out", metavar="DIR", default=DEFAULT_OUT, help="output directory")

    p = argparse.ArgumentParser(prog="gcrfcast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gcrfcast {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("ingest", parents=[common], help="validate a long-format node series CSV")
    s.add_argument("--input", metavar="CSV")
    s.add_argument("--timestep-col", default="timestep")
    s.add_argument("--node-col", default="node_id")
    s.add_argument("--target-col", default="target")
    s.add_argument("--attributes", help="comma-separated attribute columns")
    s.add_argument("--delimiter", default=",")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", parents=[common], help="generate a seeded synthetic dataset")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("graph", parents=[common], help="build a similarity graph and its variogram")
    s.add_argument("--input", metavar="SERIES", help="series CSV (otherwise taken from --config)")
    s.add_argument("--kind", choices=("common-history", "js-divergence"), default="common-history")
    s.add_argument("--h", type=int, default=3, help="history window length")
    s.add_argument("--timestep", type=int, help="build the graph for this timestep (default: after the last)")
    s.add_argument("--attribute", default="target")
    s.add_argument("--bins", type=int, default=10, help="histogram bins for js-divergence")
    s.add_argument("--sparsify", default="none", help="none | topk:K | threshold:X")
    s.add_argument("--n-bins", type=int, default=20, help="variogram similarity bins")
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("train", parents=[common], help="train structured models for one test month")
    s.add_argument("--month", type=int, help="test month index (default: first test month)")
    s.add_argument("--model", choices=tuple(MODEL_LABEL))
    s.add_argument("--family", choices=tuple(FAMILY_LABEL))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="predict test months with saved parameters")
    s.add_argument("--params", metavar="FILE")
    s.add_argument("--month", type=int, help="single month (default: all test months)")
    s.add_argument("--family", choices=tuple(FAMILY_LABEL))
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="score a predictions file")
    s.add_argument("--predictions", metavar="FILE")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", parents=[common], help="run the full rolling experiment")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with stage(args.command):
            args.func(args)
    except PipelineError as exc:
        print(f"gcrfcast: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
