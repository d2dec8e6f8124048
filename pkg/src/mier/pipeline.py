"""End-to-end runs driven by one YAML config.

Stages per seed: bench, embed, baseline, repr, graph, flexer, eval; a final
report stage merges the per-seed evaluations. Every stage writes into its own
directory with a ``stage.json`` recording a key (hash of the config section
and of the input files) and the hashes of its outputs, so a rerun skips any
stage whose key and outputs are unchanged.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__, benchmark, core, embedding, gnn, graph as graph_mod, matchers, metrics
from .nn import NumericError, TrainHyper

log = logging.getLogger(__name__)

OUTPUT_ENV = "MIER_OUTPUT_DIR"
THREADS_ENV = "MIER_THREADS"
BASELINE_METHODS = ("in-parallel", "multi-label", "naive")


class ConfigError(ValueError):
    pass


# -- config schema -----------------------------------------------------------------

_TRAIN = {"learning_rate": (float, False, 0.01), "weight_decay": (float, False, 5e-4),
          "epochs": (int, False, 150), "batch_size": ((int, type(None)), False, None)}

# key -> (type or nested schema, required, default)
SCHEMA = {
    "run": ({"seeds": (list, True, None),
             "output_dir": (str, False, "runs/default"),
             "threads": (int, False, 1)}, True, None),
    "bench": ({"source": (str, True, None),
               "synthetic": (dict, False, {}),
               "records": (str, False, None),
               "rules": (str, False, None),
               "id_column": (str, False, "id"),
               "duplicates": (str, False, None)}, True, None),
    "embed": ({"dim": (int, False, 512),
               "fields": ((list, type(None)), False, None),
               "ngram_range": (list, False, [3, 5]),
               "shared_grams": (bool, False, True)}, True, None),
    "baseline": ({"methods": (list, False, list(BASELINE_METHODS)),
                  "hidden": (int, False, 128),
                  "branch": (int, False, 128),
                  "train": (_TRAIN, False, {})}, True, None),
    "representation": ({"source": (str, False, "in-parallel"),
                        "layer": (str, False, "hidden")}, False, {}),
    "flexer": ({"h1": (int, False, 300),
                "layers": (int, False, 2),
                "k": (int, False, 4),
                "out_dim": ((int, type(None)), False, 64),
                "train": (_TRAIN, False, {}),
                "grid": (dict, False, None)}, True, None),
    "eval": ({"baseline": (str, False, "in-parallel"),
              "split": (str, False, "test")}, False, {}),
}


def _check(node, schema, path):
    if not isinstance(node, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    unknown = sorted(set(node) - set(schema))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {unknown}")
    out = {}
    for key, spec in schema.items():
        kind, required, default = spec
        dotted = f"{path}.{key}" if path else key
        if key not in node:
            if required:
                raise ConfigError(f"missing required key '{dotted}'")
            value = copy.deepcopy(default)
            if isinstance(kind, dict):
                value = _check(value or {}, kind, dotted)
            out[key] = value
            continue
        value = node[key]
        if isinstance(kind, dict):
            value = _check(value, kind, dotted)
        else:
            ok = isinstance(value, kind) and not (kind in (int, float) and isinstance(value, bool))
            if kind is float and isinstance(value, int) and not isinstance(value, bool):
                value, ok = float(value), True
            if not ok:
                raise ConfigError(f"'{dotted}' has the wrong type: {value!r}")
        out[key] = value
    return out


def validate_config(raw) -> dict:
    """Check a parsed config against the schema and fill in defaults."""
    cfg = _check(raw, SCHEMA, "")
    seeds = cfg["run"]["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("'run.seeds' must be a non-empty list of integers")
    source = cfg["bench"]["source"]
    if source not in ("synthetic", "files"):
        raise ConfigError(f"'bench.source' must be synthetic or files, got {source!r}")
    if source == "files":
        for key in ("records", "rules"):
            if not cfg["bench"][key]:
                raise ConfigError(f"missing required key 'bench.{key}' for file sources")
    bad = [m for m in cfg["baseline"]["methods"] if m not in BASELINE_METHODS]
    if bad:
        raise ConfigError(f"'baseline.methods' has unknown entries {bad}")
    if "in-parallel" not in cfg["baseline"]["methods"]:
        raise ConfigError("'baseline.methods' must include in-parallel")
    if cfg["representation"]["source"] not in ("in-parallel", "multi-label"):
        raise ConfigError("'representation.source' must be in-parallel or multi-label")
    if cfg["representation"]["source"] not in cfg["baseline"]["methods"]:
        raise ConfigError("'representation.source' must be one of 'baseline.methods'")
    if cfg["flexer"]["layers"] not in (2, 3):
        raise ConfigError("'flexer.layers' must be 2 or 3")
    grid = cfg["flexer"]["grid"]
    if grid is not None:
        unknown = sorted(set(grid) - {"h1", "k", "layers"})
        if unknown:
            raise ConfigError(f"flexer.grid: unknown key(s) {unknown}")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from e
    cfg = validate_config(raw if raw is not None else {})
    base = path.parent
    for key in ("records", "rules", "duplicates"):
        value = cfg["bench"][key]
        if value and not Path(value).is_absolute():
            cfg["bench"][key] = str((base / value).resolve())
    if os.environ.get(OUTPUT_ENV):
        cfg["run"]["output_dir"] = os.environ[OUTPUT_ENV]
    elif not Path(cfg["run"]["output_dir"]).is_absolute():
        cfg["run"]["output_dir"] = str((base / cfg["run"]["output_dir"]).resolve())
    if os.environ.get(THREADS_ENV):
        cfg["run"]["threads"] = int(os.environ[THREADS_ENV])
    return cfg


def train_hyper(section: dict, seed: int) -> TrainHyper:
    kw = {k: v for k, v in section.items() if k != "batch_size"}
    return TrainHyper(seed=seed, **kw)


# -- hashing and manifests -----------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def config_hash(cfg) -> str:
    """Hash of everything that can change results (not where they are written)."""
    c = copy.deepcopy(cfg)
    c["run"].pop("output_dir", None)
    c["run"].pop("threads", None)
    # input files enter through their content hashes, not their locations
    for key in ("records", "rules", "duplicates"):
        c["bench"][key] = c["bench"][key] and Path(c["bench"][key]).name
    return hash_obj(c)


@dataclass
class RunManifest:
    config_hash: str
    seeds: list
    module_versions: dict
    datasets: dict = field(default_factory=dict)
    stage_seconds: dict = field(default_factory=dict)
    cached_stages: dict = field(default_factory=dict)
    hyperparameters: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))


def module_versions():
    return {"mier": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pyyaml": yaml.__version__, "python": platform.python_version()}


class Stage:
    """One cached unit of work writing into ``directory``."""

    def __init__(self, name, directory, key_material, inputs):
        self.name = name
        self.dir = Path(directory)
        self.inputs = {k: Path(v) for k, v in inputs.items()}
        for k, p in self.inputs.items():
            if not p.exists():
                raise core.DataError(f"stage {name}: input {k} ({p}) does not exist")
        self.key = hash_obj({"stage": name, "config": key_material,
                             "inputs": {k: sha256_file(p) for k, p in self.inputs.items()}})

    def cached_outputs(self):
        meta = self.dir / "stage.json"
        if not meta.exists():
            return None
        info = json.loads(meta.read_text())
        if info.get("key") != self.key:
            return None
        for rel, digest in info["outputs"].items():
            p = self.dir / rel
            if not p.exists() or sha256_file(p) != digest:
                return None
        return {k: self.dir / rel for k, rel in info["names"].items()}

    def commit(self, outputs: dict):
        files = sorted({p for p in self.dir.rglob("*") if p.is_file() and p.name != "stage.json"})
        info = {"key": self.key, "stage": self.name,
                "outputs": {str(p.relative_to(self.dir)): sha256_file(p) for p in files},
                "names": {k: str(Path(v).relative_to(self.dir)) for k, v in outputs.items()}}
        (self.dir / "stage.json").write_text(json.dumps(info, indent=1, sort_keys=True))
        return info["outputs"]


def _run_stage(stage: Stage, fn, manifest: RunManifest, seed_key: str):
    outputs = stage.cached_outputs()
    times = manifest.stage_seconds.setdefault(seed_key, {})
    cached = manifest.cached_stages.setdefault(seed_key, [])
    if outputs is not None:
        log.info("[%s] %s: cached", seed_key, stage.name)
        times[stage.name] = 0.0
        cached.append(stage.name)
        files = json.loads((stage.dir / "stage.json").read_text())["outputs"]
    else:
        stage.dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        try:
            outputs = fn(stage.dir, stage.inputs)
        except (core.DataError, NumericError, ConfigError) as e:
            raise type(e)(f"stage {stage.name} ({seed_key}): {e}") from e
        except (OSError, ValueError) as e:
            raise core.DataError(f"stage {stage.name} ({seed_key}): {e}") from e
        times[stage.name] = round(time.perf_counter() - t0, 3)
        files = stage.commit(outputs)
        log.info("[%s] %s: %.1fs", seed_key, stage.name, times[stage.name])
    for rel, digest in files.items():
        manifest.artifacts[str(Path(seed_key) / stage.name / rel)] = digest
    return outputs


# -- stages --------------------------------------------------------------------------

def _bench(cfg, seed):
    b = cfg["bench"]

    def run(out, inputs):
        if b["source"] == "synthetic":
            kw = dict(b["synthetic"])
            n_records = kw.pop("n_records", 800)
            P = kw.pop("intents", 3)
            records, pairs, labels, intents, _ = benchmark.generate_synthetic(
                n_records, P, seed, **kw)
        else:
            records = core.read_records(inputs["records"], b["id_column"])
            rules = yaml.safe_load(Path(inputs["rules"]).read_text())
            dups = None
            if "duplicates" in inputs:
                dups = [(p.left_id, p.right_id) for p in core.read_pairs(inputs["duplicates"])]
            pairs, labels, intents = benchmark.build_benchmark(records, rules, dups)
        core.write_records(records, out / "records.jsonl")
        core.write_pairs(pairs, out / "pairs.jsonl")
        core.write_labels(labels, out / "labels.jsonl")
        core.write_intents(intents, out / "intents.json")
        return {k: out / f for k, f in (("records", "records.jsonl"), ("pairs", "pairs.jsonl"),
                                         ("labels", "labels.jsonl"),
                                         ("intents", "intents.json"))}

    inputs = {}
    if b["source"] == "files":
        inputs = {"records": b["records"], "rules": b["rules"]}
        if b["duplicates"]:
            inputs["duplicates"] = b["duplicates"]
    key = {"bench": {k: v for k, v in b.items() if k not in ("records", "rules", "duplicates")}}
    # file-based benchmarks do not depend on the seed
    if b["source"] == "synthetic":
        key["seed"] = seed
    return key, inputs, run


def _embed(cfg, seed):
    e = cfg["embed"]

    def run(out, inputs):
        records = core.read_records(inputs["records"])
        pairs = core.read_pairs(inputs["pairs"])
        labels = core.read_labels(inputs["labels"])
        s = embedding.embed_lexical(pairs, records, e["dim"], seed, labels.mask("train"),
                                    e["fields"], tuple(e["ngram_range"]), e["shared_grams"])
        return {"manifest": embedding.export_embeddings([s], out)}

    return {"embed": e, "seed": seed}, run


def _load_lexical(path):
    return embedding.import_embeddings(path, align=True)[0].aligned().astype(np.float64)


def _baseline_run(cfg, seed):
    bl = cfg["baseline"]

    def run(out, inputs):
        x = _load_lexical(inputs["embeddings"])
        labels = core.read_labels(inputs["labels"])
        intents = core.read_intents(inputs["intents"])
        hyper = train_hyper(bl["train"], seed)
        bs = bl["train"].get("batch_size")
        outputs = {}
        ip = matchers.train_in_parallel(x, labels, hyper, bl["hidden"], bs)
        matchers.save_matchers(ip, out / "in-parallel.ckpt")
        outputs["in-parallel"] = out / "in-parallel.ckpt"
        preds = {"in-parallel": np.stack([m.predict(x) for m in ip], axis=1)}
        if "multi-label" in bl["methods"]:
            ml = matchers.train_multilabel(x, labels, hyper, bl["hidden"], bl["branch"],
                                           batch_size=bs)
            matchers.save_matchers(ml, out / "multi-label.ckpt")
            outputs["multi-label"] = out / "multi-label.ckpt"
            preds["multi-label"] = ml.predict(x)
        if "naive" in bl["methods"]:
            names = [it.name for it in intents]
            eq = names.index("equivalence") if "equivalence" in names else 0
            preds["naive"] = np.repeat(preds["in-parallel"][:, eq:eq + 1], labels.P, axis=1)
        (out / "pred").mkdir(exist_ok=True)
        for method, pred in preds.items():
            core.write_predictions(pred, out / "pred" / f"{method}.jsonl")
            outputs[f"pred:{method}"] = out / "pred" / f"{method}.jsonl"
        return outputs

    return {"baseline": bl, "seed": seed}, run


def _repr_run(cfg):
    rc = cfg["representation"]

    def run(out, inputs):
        x = _load_lexical(inputs["embeddings"])
        m = matchers.load_matchers(inputs["matchers"])
        sets = matchers.extract_representations(m, x, rc["layer"])
        return {"manifest": embedding.export_embeddings(sets, out)}

    return {"representation": rc}, run


def _graph_run(cfg):
    def run(out, inputs):
        sets = embedding.import_embeddings(inputs["representations"], align=True)
        g = graph_mod.build_graph(sets, graph_mod.GraphConfig(k=cfg["flexer"]["k"]))
        return {"graph": graph_mod.save_graph(g, out)}

    return {"k": cfg["flexer"]["k"]}, run


def _flexer_run(cfg, seed):
    fc = cfg["flexer"]

    def run(out, inputs):
        labels = core.read_labels(inputs["labels"])
        hyper = train_hyper(fc["train"], seed)
        if fc["grid"]:
            sets = embedding.import_embeddings(inputs["representations"], align=True)
            grid = fc["grid"]
            best, rep = gnn.sweep(sets, labels, grid.get("h1", [fc["h1"]]),
                                  grid.get("k", [fc["k"]]), grid.get("layers", [fc["layers"]]),
                                  hyper, out_dim=fc["out_dim"])
            pred = np.stack([best[p]["predictions"] for p in range(labels.P)], axis=1)
            chosen = {str(p): {k: best[p][k] for k in ("h1", "k", "layers", "valid_f1")}
                      for p in best}
            (out / "sweep.json").write_text(json.dumps(rep, indent=1, sort_keys=True,
                                                       default=_jsonable))
        else:
            g = graph_mod.load_graph(inputs["graph"])
            _, pred, models = gnn.run_mier(None, labels, fc["h1"], fc["k"], fc["layers"],
                                           hyper, graph=g, out_dim=fc["out_dim"])
            for p, m in enumerate(models):
                gnn.save_model(m, out / f"intent_{p}.ckpt")
            chosen = {str(p): {"h1": fc["h1"], "k": fc["k"], "layers": fc["layers"],
                               "best_epoch": m.best_epoch} for p, m in enumerate(models)}
        (out / "chosen.json").write_text(json.dumps(chosen, indent=1, sort_keys=True))
        core.write_predictions(pred, out / "flexer.jsonl")
        return {"pred:flexer": out / "flexer.jsonl", "chosen": out / "chosen.json"}

    return {"flexer": fc, "seed": seed}, run


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def evaluate(pred_files: dict, labels: core.IntentLabelMatrix, intents, baseline, split,
             meta=None) -> dict:
    """Report over the pairs of ``split`` for predictions read from files."""
    rows = labels.indices(split)
    if not len(rows):
        raise core.DataError(f"split {split!r} has no pairs")
    preds = {m: core.read_predictions(p, labels.n_pairs)[rows] for m, p in pred_files.items()}
    for m, p in preds.items():
        if p.shape[1] != labels.P:
            raise core.DataError(f"predictions of {m} have {p.shape[1]} intents, "
                                 f"labels have {labels.P}")
    return metrics.build_report(preds, labels.labels[rows],
                                baseline=baseline,
                                intent_names=[it.name for it in intents],
                                subsumed_by={it.intent_id: list(it.subsumed_by) for it in intents},
                                meta=dict(meta or {}, split=split))


def _eval_run(cfg):
    ec = cfg["eval"]

    def run(out, inputs):
        labels = core.read_labels(inputs["labels"])
        intents = core.read_intents(inputs["intents"])
        files = {k.split(":", 1)[1]: v for k, v in inputs.items() if k.startswith("pred:")}
        rep = evaluate(files, labels, intents, ec["baseline"], ec["split"])
        (out / "report.json").write_text(metrics.report_json(rep))
        return {"report": out / "report.json"}

    return {"eval": ec}, run


# -- driver --------------------------------------------------------------------------

def summarize(reports: dict, baseline="in-parallel", method="flexer") -> dict:
    """Across-seed means and head-to-head counts of ``method`` against ``baseline``."""
    methods = sorted({m for r in reports.values() for m in r["methods"]})
    means = {}
    for m in methods:
        vals = [r["methods"][m]["aggregate"] for r in reports.values() if m in r["methods"]]
        means[m] = {k: metrics._clean(np.mean([v[k] for v in vals])) for k in vals[0]}
    h2h = {}
    if all(method in r["methods"] and baseline in r["methods"] for r in reports.values()):
        f_wins = sum(r["methods"][method]["aggregate"]["MI-F"]
                     >= r["methods"][baseline]["aggregate"]["MI-F"] for r in reports.values())
        pe = {}
        for r in reports.values():
            for intent, v in r["methods"][method]["preventable_error"].items():
                b = r["methods"][baseline]["preventable_error"][intent]["all_fp"]
                entry = pe.setdefault(intent, {"not_worse": 0, "compared": 0})
                if v["all_fp"] is not None and b is not None:
                    entry["compared"] += 1
                    entry["not_worse"] += int(v["all_fp"] <= b)
        h2h = {"method": method, "baseline": baseline, "seeds": len(reports),
               "mi_f_not_worse": int(f_wins), "preventable_error_not_worse": pe}
    return {"mean_aggregate": means, "head_to_head": h2h}


def pipeline_run(config_path) -> Path:
    """Run every stage for every seed; returns the run directory.

    ``report.json`` depends only on the config and inputs; timings and
    hashes go to ``manifest.json``.
    """
    cfg = load_config(config_path)
    run_dir = Path(cfg["run"]["output_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    manifest = RunManifest(config_hash=config_hash(cfg), seeds=list(cfg["run"]["seeds"]),
                           module_versions=module_versions())
    reports = {}
    for seed in cfg["run"]["seeds"]:
        sk = f"seed_{seed}"
        sd = run_dir / sk
        key, inputs, run = _bench(cfg, seed)
        bench = _run_stage(Stage("bench", sd / "bench", key, inputs), run, manifest, sk)
        manifest.datasets[sk] = {k: sha256_file(bench[k])
                                 for k in ("records", "pairs", "labels")}

        key, run = _embed(cfg, seed)
        emb = _run_stage(Stage("embed", sd / "embed", key,
                               {k: bench[k] for k in ("records", "pairs", "labels")}),
                         run, manifest, sk)
        key, run = _baseline_run(cfg, seed)
        base = _run_stage(Stage("baseline", sd / "baseline", key,
                                {"embeddings": emb["manifest"], "labels": bench["labels"],
                                 "intents": bench["intents"]}), run, manifest, sk)
        key, run = _repr_run(cfg)
        rep = _run_stage(Stage("repr", sd / "repr", key,
                               {"embeddings": emb["manifest"],
                                "matchers": base[cfg["representation"]["source"]]}),
                         run, manifest, sk)
        key, run = _graph_run(cfg)
        gr = _run_stage(Stage("graph", sd / "graph", key,
                              {"representations": rep["manifest"]}), run, manifest, sk)
        key, run = _flexer_run(cfg, seed)
        fl = _run_stage(Stage("flexer", sd / "flexer", key,
                              {"graph": gr["graph"], "labels": bench["labels"],
                               "representations": rep["manifest"]}), run, manifest, sk)
        manifest.hyperparameters[sk] = json.loads(Path(fl["chosen"]).read_text())
        key, run = _eval_run(cfg)
        preds = {k: v for k, v in {**base, **fl}.items() if k.startswith("pred:")}
        ev = _run_stage(Stage("eval", sd / "eval", key,
                              {"labels": bench["labels"], "intents": bench["intents"],
                               **preds}), run, manifest, sk)
        reports[str(seed)] = json.loads(Path(ev["report"]).read_text())

    final = {"schema_version": metrics.REPORT_SCHEMA_VERSION,
             "config_hash": manifest.config_hash,
             "seeds": [int(s) for s in cfg["run"]["seeds"]],
             "runs": reports,
             "summary": summarize(reports, cfg["eval"]["baseline"])}
    (run_dir / "report.json").write_text(metrics.report_json(final))
    (run_dir / "report.txt").write_text(render_run_report(final))
    for name in ("report.json", "report.txt", "config.resolved.json"):
        manifest.artifacts[name] = sha256_file(run_dir / name)
    manifest.write(run_dir / "manifest.json")
    return run_dir


def render_run_report(report) -> str:
    """Text tables for a single-seed report or a multi-seed run report."""
    if "runs" not in report:
        return metrics.render_report(report)
    parts = []
    for seed, r in report["runs"].items():
        parts.append(f"== seed {seed} ==\n" + metrics.render_report(r))
    s = report["summary"]
    lines = ["== mean over seeds =="]
    head = f"{'Model':<14}{'MI-P':>8}{'MI-R':>8}{'MI-F':>8}{'MI-Acc':>8}"
    lines += [head, "-" * len(head)]
    for m, a in s["mean_aggregate"].items():
        lines.append(f"{m:<14}" + "".join(f"{a[k]:>8.3f}" for k in ("MI-P", "MI-R", "MI-F",
                                                                      "MI-Acc")))
    h = s.get("head_to_head")
    if h:
        lines.append("")
        lines.append(f"{h['method']} MI-F >= {h['baseline']} in {h['mi_f_not_worse']} "
                     f"of {h['seeds']} seeds")
        for intent, v in h["preventable_error_not_worse"].items():
            lines.append(f"preventable error ({intent}) not worse in {v['not_worse']} "
                         f"of {v['compared']} seeds")
    parts.append("\n".join(lines) + "\n")
    return "\n".join(parts)
