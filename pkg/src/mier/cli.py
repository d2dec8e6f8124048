"""Command-line entry point: ``mier <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import os

# BLAS reads its thread count at import time, so the knob is applied first
if os.environ.get("MIER_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["MIER_THREADS"])

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
import yaml  # noqa: E402

from . import benchmark, core, embedding, gnn, graph as graph_mod, matchers, metrics  # noqa: E402
from .nn import NumericError, TrainHyper  # noqa: E402
from .pipeline import ConfigError, evaluate, pipeline_run, render_run_report  # noqa: E402

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

GRIDS = {
    "default": {"h1": list(gnn.H1_GRID), "k": list(graph_mod.DEFAULT_K_GRID), "layers": [2, 3]},
    "small": {"h1": [100, 300], "k": [0, 4], "layers": [2]},
}


def _hyper(args):
    return TrainHyper(learning_rate=args.lr, weight_decay=args.weight_decay,
                      epochs=args.epochs, seed=args.seed)


def _add_train_args(p, epochs=150):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=5e-4)


def _file_out(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_x(manifest):
    return embedding.import_embeddings(manifest, align=True)[0].aligned().astype(np.float64)


def _write_bench(out, records, pairs, labels, intents):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    core.write_records(records, out / "records.jsonl")
    core.write_pairs(pairs, out / "pairs.jsonl")
    core.write_labels(labels, out / "labels.jsonl")
    core.write_intents(intents, out / "intents.json")
    rates = benchmark.positive_rate_report(labels, [it.name for it in intents])
    print(f"{len(records)} records, {len(pairs)} candidate pairs, {labels.P} intents -> {out}")
    _print_rates(rates)


def _print_rates(rates):
    print(f"{'intent':<28}{'train':>8}{'valid':>8}{'test':>8}")
    for name, r in rates.items():
        print(f"{name:<28}" + "".join(f"{100 * r[s]:>7.1f}%" for s in core.SPLITS))


def cmd_bench(args):
    if args.action == "synth":
        records, pairs, labels, intents, _ = benchmark.generate_synthetic(
            args.records, args.intents, args.seed, n_pairs=args.n)
        _write_bench(args.out, records, pairs, labels, intents)
    elif args.action == "build":
        try:
            rules = yaml.safe_load(Path(args.rules).read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"{args.rules}: not valid YAML: {e}") from e
        if not isinstance(rules, dict):
            raise ConfigError(f"{args.rules}: expected a mapping")
        records = core.read_records(args.records, args.id_column, args.source_column)
        dups = None
        if args.duplicates:
            dups = [(p.left_id, p.right_id) for p in core.read_pairs(args.duplicates)]
        pairs, labels, intents = benchmark.build_benchmark(records, rules, dups)
        _write_bench(args.out, records, pairs, labels, intents)
    else:
        labels = core.read_labels(args.labels)
        names = None
        if args.intents:
            names = [it.name for it in core.read_intents(args.intents)]
        rates = benchmark.positive_rate_report(labels, names)
        if args.json:
            print(json.dumps(rates, indent=1, sort_keys=True))
        else:
            _print_rates(rates)


def cmd_embed(args):
    if args.matchers:
        if not args.embeddings:
            raise ConfigError("--matchers needs --embeddings")
        m = matchers.load_matchers(args.matchers)
        sets = matchers.extract_representations(m, _load_x(args.embeddings), args.layer)
    else:
        missing = [f for f in ("records", "pairs", "labels") if not getattr(args, f)]
        if missing:
            raise ConfigError(f"lexical embedding needs --{' --'.join(missing)}")
        records = core.read_records(args.records)
        pairs = core.read_pairs(args.pairs)
        labels = core.read_labels(args.labels)
        sets = [embedding.embed_lexical(pairs, records, args.dim, args.seed,
                                        labels.mask("train"), args.fields,
                                        shared_grams=args.shared_grams)]
    path = embedding.export_embeddings(sets, args.out)
    print(f"{len(sets)} embedding set(s) of dim {sets[0].dim} -> {path}")


def cmd_train_baseline(args):
    x = _load_x(args.embeddings)
    labels = core.read_labels(args.labels)
    hyper = _hyper(args)
    if args.mode == "in-parallel":
        m = matchers.train_in_parallel(x, labels, hyper, args.hidden, args.batch_size)
        pred = np.stack([mm.predict(x) for mm in m], axis=1)
    elif args.mode == "multi-label":
        m = matchers.train_multilabel(x, labels, hyper, args.hidden, args.branch,
                                      batch_size=args.batch_size)
        pred = m.predict(x)
    else:
        p = args.equivalence_intent
        m = matchers.train_binary(x, labels, p, hyper, args.hidden, args.batch_size)
        pred = np.repeat(m.predict(x)[:, None], labels.P, axis=1)
    matchers.save_matchers(m, _file_out(args.out))
    if args.pred:
        core.write_predictions(pred, _file_out(args.pred))
    te = labels.indices("test")
    f = [metrics.f1_score(pred[te, p], labels.labels[te, p]) for p in range(labels.P)]
    print(f"{args.mode}: test F1 per intent {np.round(f, 3).tolist()}, MI-F {np.mean(f):.3f}")


def cmd_graph(args):
    sets = embedding.import_embeddings(args.embeddings, align=True)
    g = graph_mod.build_graph(sets, graph_mod.GraphConfig(k=args.k, project_dim=args.project_dim))
    path = graph_mod.save_graph(g, args.out)
    c = g.counts()
    print(f"{c['nodes']} nodes, {c['intra']} intra-layer and {c['inter']} inter-layer edges "
          f"-> {path}")


def cmd_train_flexer(args):
    g = graph_mod.load_graph(args.graph)
    labels = core.read_labels(args.labels)
    hyper = _hyper(args)
    intents = range(g.P) if args.intent == "all" else [int(args.intent)]
    preds = np.zeros((g.n, g.P), dtype=np.int8)
    out = Path(args.out)
    if args.intent == "all":
        out.mkdir(parents=True, exist_ok=True)
    for p in intents:
        if not 0 <= p < g.P:
            raise core.DataError(f"intent {p} out of range for P={g.P}")
        seed = hyper.seed + gnn.INTENT_SEED_STRIDE * p
        cfg = gnn.FlexerTrainConfig(target_intent=p, h1=args.h1, layers=args.layers,
                                    out_dim=args.out_dim, hyper=replace(hyper, seed=seed))
        m = gnn.train_flexer(g, labels, cfg)
        gnn.save_model(m, out / f"intent_{p}.ckpt" if args.intent == "all" else _file_out(out))
        preds[:, p] = gnn.predict_intent(m, g)[0]
        te = labels.indices("test")
        print(f"intent {p}: best epoch {m.best_epoch}, test F1 "
              f"{metrics.f1_score(preds[te, p], labels.labels[te, p]):.3f}")
    if args.pred:
        cols = list(intents)
        core.write_predictions(preds[:, cols], _file_out(args.pred))


def cmd_sweep(args):
    if args.grid in GRIDS:
        grid = GRIDS[args.grid]
    else:
        grid = yaml.safe_load(Path(args.grid).read_text())
        if not isinstance(grid, dict) or set(grid) - {"h1", "k", "layers"}:
            raise ConfigError(f"{args.grid}: grid needs only h1, k and layers lists")
    sets = embedding.import_embeddings(args.embeddings, align=True)
    labels = core.read_labels(args.labels)
    best, rep = gnn.sweep(sets, labels, grid.get("h1", [300]), grid.get("k", [4]),
                          grid.get("layers", [2]), _hyper(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred = np.stack([best[p]["predictions"] for p in range(labels.P)], axis=1)
    core.write_predictions(pred, out / "flexer.jsonl")
    rep["best"] = {str(p): {k: v for k, v in b.items() if k != "predictions"}
                   for p, b in best.items()}
    (out / "sweep.json").write_text(json.dumps(rep, indent=1, sort_keys=True))
    for p, b in sorted(best.items()):
        print(f"intent {p}: h1={b['h1']} k={b['k']} L={b['layers']} "
              f"valid F1 {b['valid_f1']:.3f} test F1 {b['test_f1']:.3f}")


def cmd_eval(args):
    labels = core.read_labels(args.gold)
    if args.intents:
        intents = core.read_intents(args.intents)
    else:
        subs = core.subsumption_sets(labels)
        intents = [core.IntentSpec(p, str(p), subs[p]) for p in range(labels.P)]
    pred_dir = Path(args.pred)
    files = {p.stem: p for p in sorted(pred_dir.glob("*.jsonl"))}
    if not files:
        raise core.DataError(f"no *.jsonl prediction files in {pred_dir}")
    rep = evaluate(files, labels, intents, args.baseline, args.split)
    _file_out(args.out).write_text(metrics.report_json(rep))
    print(metrics.render_report(rep), end="")


def cmd_report(args):
    try:
        rep = json.loads(Path(args.report).read_text())
    except json.JSONDecodeError as e:
        raise core.DataError(f"{args.report}: not JSON: {e}") from e
    if rep.get("schema_version") != metrics.REPORT_SCHEMA_VERSION:
        raise core.DataError(f"{args.report}: unsupported report schema "
                             f"{rep.get('schema_version')}")
    text = render_run_report(rep)
    if args.out:
        _file_out(args.out).write_text(text)
    print(text, end="")


def cmd_pipeline(args):
    run_dir = pipeline_run(args.config)
    print(Path(run_dir / "report.txt").read_text(), end="")
    print(f"run directory: {run_dir}")


def build_parser():
    ap = argparse.ArgumentParser(prog="mier", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="build, synthesize or profile a benchmark")
    bsub = b.add_subparsers(dest="action", required=True)
    bb = bsub.add_parser("build")
    bb.add_argument("--records", required=True)
    bb.add_argument("--rules", required=True)
    bb.add_argument("--out", required=True)
    bb.add_argument("--id-column", default="id")
    bb.add_argument("--source-column", default=None)
    bb.add_argument("--duplicates", default=None, help="pairs file of known duplicates")
    bs = bsub.add_parser("synth")
    bs.add_argument("--n", type=int, default=2000, help="candidate pairs to keep")
    bs.add_argument("--records", type=int, default=800)
    bs.add_argument("--intents", type=int, default=3)
    bs.add_argument("--seed", type=int, default=0)
    bs.add_argument("--out", required=True)
    bp = bsub.add_parser("profile")
    bp.add_argument("--labels", required=True)
    bp.add_argument("--intents", default=None)
    bp.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("embed", help="lexical pair embeddings or matcher representations")
    e.add_argument("--records")
    e.add_argument("--pairs")
    e.add_argument("--labels")
    e.add_argument("--dim", type=int, default=512)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--fields", nargs="+", default=None)
    e.add_argument("--shared-grams", action=argparse.BooleanOptionalAction, default=True)
    e.add_argument("--matchers", help="checkpoint to extract representations from")
    e.add_argument("--embeddings", help="lexical manifest fed to --matchers")
    e.add_argument("--layer", choices=["hidden", "pre_activation"], default="hidden")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_embed)

    t = sub.add_parser("train-baseline", help="train baseline matchers")
    t.add_argument("--mode", choices=["in-parallel", "multi-label", "naive"],
                   default="in-parallel")
    t.add_argument("--embeddings", required=True)
    t.add_argument("--labels", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--pred", default=None, help="write predicted labels here")
    t.add_argument("--hidden", type=int, default=128)
    t.add_argument("--branch", type=int, default=128)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--equivalence-intent", type=int, default=0)
    _add_train_args(t)
    t.set_defaults(func=cmd_train_baseline)

    g = sub.add_parser("graph", help="build the multiplex intent graph")
    g.add_argument("--embeddings", required=True)
    g.add_argument("--k", type=int, default=4)
    g.add_argument("--project-dim", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_graph)

    f = sub.add_parser("train-flexer", help="train FlexER for one intent or all")
    f.add_argument("--graph", required=True)
    f.add_argument("--labels", required=True)
    f.add_argument("--intent", default="all", help="intent index or 'all'")
    f.add_argument("--h1", type=int, default=300)
    f.add_argument("--layers", type=int, choices=[2, 3], default=2)
    f.add_argument("--out-dim", type=int, default=64)
    f.add_argument("--out", required=True, help="checkpoint (one intent) or directory (all)")
    f.add_argument("--pred", default=None)
    _add_train_args(f)
    f.set_defaults(func=cmd_train_flexer)

    s = sub.add_parser("sweep", help="grid search over h1, k and L")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--grid", default="default", help="default, small, or a YAML file")
    s.add_argument("--out", required=True)
    _add_train_args(s)
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("eval", help="score prediction files against gold labels")
    v.add_argument("--pred", required=True, help="directory of <method>.jsonl files")
    v.add_argument("--gold", required=True)
    v.add_argument("--intents", default=None)
    v.add_argument("--baseline", default="in-parallel")
    v.add_argument("--split", choices=list(core.SPLITS), default="test")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render a report.json as text tables")
    r.add_argument("report")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run every stage from a YAML config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (core.DataError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
