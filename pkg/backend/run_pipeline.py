# run_pipeline.py (Master Execution Script)
#
# Execution: python -m backend.run_pipeline <command> --config run.json [--out DIR] [--seed N]
#
# Commands: ingest, walks, pretrain, train, eval, analyze, ablate, sweep.
# Each command builds whatever cheap prerequisites are missing or stale; the
# SGPM pre-training is the one prerequisite never rebuilt implicitly.
# Exit codes: 0 ok, 1 usage/config, 2 data, 3 numeric.

import argparse
import json
import logging
import os
import sys
import traceback

import numpy as np
import pandas as pd

from .core_pipeline import analysis
from .core_pipeline.data_export import (ArtifactStore, export_run_summary, file_sha256, output_lock, stage_key,
                                        write_csv, write_json)
from .core_pipeline.dataset_io import (EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLIT_FILE, STATS_FILE, load_dataset,
                                       load_dataset_cache, load_split, make_split, save_dataset_cache, save_split)
from .core_pipeline.errors import ConfigError, TokenwalkError, TrainingDiverged
from .core_pipeline.graph_core import compute_metrics, largest_component, subgraph
from .core_pipeline.graph_doc import default_mean_length, generate_document, load_document, save_document
from .core_pipeline.log import setup_logging
from .core_pipeline.run_config import config_hash, load_config, save_resolved
from .core_pipeline.sgpm import (CHECKPOINT_FILE, HISTORY_FILE, LAST_GOOD_FILE, TOKENS_FILE, TOKENS_META_FILE,
                                 export_sgpm_tokens, load_sgpm_tokens, pretrain, save_sgpm_tokens)
from .core_pipeline.tokenphormer import (HOP_TOKENS_FILE, HOP_TOKENS_META_FILE, MODEL_FILE, evaluate, hop_tokens,
                                         load_hop_tokens, prepare_token_inputs, save_hop_tokens, sweep_walk_tokens,
                                         train, write_metrics)
from .core_pipeline.walk_engine import WALKS_FILE, WalkKind, generate_mixed_walks, read_walks, write_walks

logger = logging.getLogger("tokenwalk")

# --- Configuration ---
DATASET_DIR = "dataset"
WALKS_DIR = "walks"
DOCUMENT_DIR = "document"
SGPM_DIR = "sgpm"
TOKENS_DIR = "tokens"
ANALYSIS_DIR = "analysis"
ABLATIONS = ("sgpm-token", "walk-token", "hop-token", "only-urw", "only-nbrw", "only-njw", "only-nbnjw")
ANALYSES = ("stationary", "coverage", "discrimination", "complexity", "all")
DEFAULT_SWEEP_COUNTS = "0,10,20,30,40,50,60,70,80,90,100,110,120,130,140"


def _rel(*parts):
    return os.path.join(*parts)


class Pipeline:
    """Stage graph over one run directory."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.store = ArtifactStore(cfg.output_dir, config_hash(cfg))
        self._dataset = None
        self._dataset_key = None

    # STEP: dataset cache + split
    def ensure_dataset(self):
        if self._dataset_key is not None:
            return self._dataset_key
        cfg = self.cfg
        inputs = []
        for name in (EDGES_FILE, FEATURES_FILE, LABELS_FILE):
            path = os.path.join(cfg.dataset.path, name)
            inputs.append(file_sha256(path) if os.path.isfile(path) else None)
        key = stage_key({"dataset": cfg.dataset.model_dump(mode="json"), "split": cfg.split.model_dump(mode="json")},
                        *[str(i) for i in inputs])

        def build():
            ds = load_dataset(cfg.dataset.path, cfg.dataset.name)
            metrics = compute_metrics(ds.graph)
            stats = save_dataset_cache(self.store.resolve(DATASET_DIR), ds, metrics)
            split = make_split(ds.node_count, cfg.split.ratios, ds.labels, cfg.split.seed)
            save_split(self.store.resolve(_rel(DATASET_DIR, SPLIT_FILE)), split)
            self._dataset = ds
            files = ["nodes.parquet", "edges.parquet", STATS_FILE, SPLIT_FILE]
            summary = {k: stats[k] for k in ("nodes", "edges", "radius", "diameter")}
            return [_rel(DATASET_DIR, f) for f in files], summary

        self._dataset_key = self.store.run_stage("dataset", key, build).key
        return self._dataset_key

    def dataset(self):
        self.ensure_dataset()
        if self._dataset is None:
            self._dataset = load_dataset_cache(self.store.resolve(DATASET_DIR))
        return self._dataset

    def split(self):
        self.ensure_dataset()
        return load_split(self.store.resolve(_rel(DATASET_DIR, SPLIT_FILE)))

    def stats(self):
        self.ensure_dataset()
        with open(self.store.resolve(_rel(DATASET_DIR, STATS_FILE))) as f:
            return json.load(f)

    # STEP: mixed walks
    def ensure_walks(self, walk_cfg=None, stage="walks", directory=WALKS_DIR):
        walk_cfg = walk_cfg or self.cfg.walks
        key = stage_key(walk_cfg, self.ensure_dataset())

        def build():
            walks = generate_mixed_walks(self.dataset().graph, walk_cfg)
            write_walks(self.store.resolve(_rel(directory, WALKS_FILE)), walks, walk_cfg.seed)
            return [_rel(directory, WALKS_FILE)], {"walks_per_node": walk_cfg.walks_per_node,
                                                   "walk_length": walk_cfg.walk_length}

        return self.store.run_stage(stage, key, build).key

    def walks(self, directory=WALKS_DIR):
        return read_walks(self.store.resolve(_rel(directory, WALKS_FILE)), self.dataset().node_count)

    # STEP: graph document
    def ensure_document(self):
        doc_cfg = self.cfg.document
        key = stage_key(doc_cfg, self.ensure_dataset())

        def build():
            mu = doc_cfg.mean_length or default_mean_length(self.stats()["radius"])
            doc = generate_document(self.dataset().graph, doc_cfg.walks_per_node, doc_cfg.val_walks_per_node,
                                    mu, doc_cfg.std_length, doc_cfg.seed)
            save_document(self.store.resolve(DOCUMENT_DIR), doc)
            files = [_rel(DOCUMENT_DIR, f) for f in ("train.txt", "val.txt", "meta.json")]
            return files, {"mean_length": mu, "std_length": doc_cfg.std_length}

        return self.store.run_stage("document", key, build).key

    # STEP: SGPM pre-training and token export
    def run_pretrain(self):
        sgpm_cfg = self.cfg.sgpm
        key = stage_key(sgpm_cfg, self.ensure_document())

        def build():
            doc = load_document(self.store.resolve(DOCUMENT_DIR), self.dataset().node_count)
            out = self.store.resolve(SGPM_DIR)
            try:
                result = pretrain(doc, self.dataset(), sgpm_cfg, output_dir=out)
            except TrainingDiverged:
                logger.error("Last good parameters kept in %s", _rel(SGPM_DIR, LAST_GOOD_FILE))
                raise
            tokens = export_sgpm_tokens(result.model, sgpm_cfg.token_mode, doc)
            save_sgpm_tokens(out, tokens, _rel(SGPM_DIR, CHECKPOINT_FILE))
            files = [_rel(SGPM_DIR, f) for f in (CHECKPOINT_FILE, HISTORY_FILE, TOKENS_FILE, TOKENS_META_FILE)]
            return files, {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss}

        return self.store.run_stage("sgpm", key, build).key

    # STEP: hop tokens
    def ensure_hop_tokens(self, model_cfg):
        section = model_cfg.model_dump(mode="json", include={"n_hop", "hop_normalization", "include_hop0"})
        key = stage_key(section, self.ensure_dataset())

        def build():
            ds = self.dataset()
            hop_set = hop_tokens(ds.graph, ds.features, model_cfg.n_hop, model_cfg.hop_normalization,
                                 model_cfg.include_hop0)
            save_hop_tokens(self.store.resolve(TOKENS_DIR), hop_set)
            files = [_rel(TOKENS_DIR, HOP_TOKENS_FILE), _rel(TOKENS_DIR, HOP_TOKENS_META_FILE)]
            return files, {"hops": hop_set.hop_count}

        return self.store.run_stage("tokens", key, build).key

    def token_inputs(self, model_cfg, walks_dir=WALKS_DIR, walk_stage="walks", walk_cfg=None):
        """Prepared token material plus the upstream keys it depends on."""
        upstream = [self.ensure_dataset()]
        hops = walks = sgpm = None
        if model_cfg.use_hop:
            upstream.append(self.ensure_hop_tokens(model_cfg))
            hops = load_hop_tokens(self.store.resolve(TOKENS_DIR))
        if model_cfg.use_walk:
            upstream.append(self.ensure_walks(walk_cfg, walk_stage, walks_dir))
            walks = self.walks(walks_dir)
        if model_cfg.use_sgpm:
            upstream.append(self.store.require("sgpm", "pretrain"))
            sgpm = load_sgpm_tokens(self.store.resolve(SGPM_DIR))
        return prepare_token_inputs(self.dataset().features, model_cfg, hops, walks, sgpm), upstream


def parse_seeds(text):
    """'0,1,2' or '0-9' or a mix such as '0-4,10'."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"cannot parse seed list {text!r}") from None
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


# --- Commands ---

def cmd_ingest(pipe, args):
    pipe.ensure_dataset()
    stats = pipe.stats()
    print(f"  -> {stats['name']}: {stats['nodes']} nodes, {stats['edges']} edges, radius {stats['radius']}, "
          f"diameter {stats['diameter']}")


def cmd_walks(pipe, args):
    pipe.ensure_walks()


def cmd_pretrain(pipe, args):
    pipe.run_pretrain()


def cmd_train(pipe, args):
    model_cfg = pipe.cfg.model
    inputs, upstream = pipe.token_inputs(model_cfg)
    key = stage_key(model_cfg, *upstream)

    def build():
        result = train(pipe.dataset(), pipe.split(), inputs, model_cfg, output_dir=pipe.store.resolve("train"))
        write_json(pipe.store.resolve(_rel("train", "result.json")),
                   {"seed": result.seed, "best_epoch": result.best_epoch, "best_val_acc": result.best_val_acc,
                    "test_acc": result.test_acc})
        files = [_rel("train", f) for f in (MODEL_FILE, HISTORY_FILE, "result.json")]
        return files, {"test_acc": result.test_acc, "best_val_acc": result.best_val_acc}

    rec = pipe.store.run_stage("train", key, build)
    print(f"  -> test accuracy {rec.summary['test_acc']:.4f} (best val {rec.summary['best_val_acc']:.4f})")


def _evaluate_variant(pipe, model_cfg, seeds, out_rel, stage, walks_dir=WALKS_DIR, walk_stage="walks", walk_cfg=None):
    inputs, upstream = pipe.token_inputs(model_cfg, walks_dir, walk_stage, walk_cfg)
    key = stage_key({"model": model_cfg.model_dump(mode="json"), "seeds": seeds}, *upstream)
    variant_hash = stage_key(model_cfg, *upstream)[:12]

    def build():
        result = evaluate(pipe.dataset(), pipe.split(), inputs, model_cfg, seeds)
        metrics_rel = _rel(out_rel, "metrics.csv")
        per_seed_rel = _rel(out_rel, "per_seed.csv")
        write_metrics(pipe.store.resolve(metrics_rel), [result.to_row(pipe.dataset().name, variant_hash)])
        write_csv(pipe.store.resolve(per_seed_rel),
                  pd.DataFrame({"seed": list(result.accuracies), "test_acc": list(result.accuracies.values())}))
        return [metrics_rel, per_seed_rel], {"mean": result.mean, "std": result.std, "seeds": seeds}

    rec = pipe.store.run_stage(stage, key, build)
    print(f"  -> {stage}: {rec.summary['mean']:.4f} +/- {rec.summary['std']:.4f} over {len(seeds)} seeds")
    return rec


def cmd_eval(pipe, args):
    seeds = parse_seeds(args.seeds) if args.seeds else list(pipe.cfg.model.eval_seeds)
    _evaluate_variant(pipe, pipe.cfg.model, seeds, "eval", "eval")


def cmd_ablate(pipe, args):
    seeds = parse_seeds(args.seeds) if args.seeds else list(pipe.cfg.model.eval_seeds)
    drop = args.drop
    model_cfg, walk_cfg = pipe.cfg.model, pipe.cfg.walks
    out_rel = _rel("ablate", drop)
    walks_dir, walk_stage = WALKS_DIR, "walks"
    if drop == "sgpm-token":
        model_cfg = model_cfg.model_copy(update={"use_sgpm": False})
    elif drop == "walk-token":
        model_cfg = model_cfg.model_copy(update={"use_walk": False})
    elif drop == "hop-token":
        model_cfg = model_cfg.model_copy(update={"use_hop": False})
    else:
        kind = WalkKind(drop.split("-", 1)[1])
        walk_cfg = walk_cfg.model_copy(update={"ratios": {kind: 1.0}})
        walks_dir, walk_stage = out_rel, f"ablate/{drop}/walks"
    _evaluate_variant(pipe, model_cfg, seeds, out_rel, f"ablate/{drop}", walks_dir, walk_stage, walk_cfg)


def cmd_sweep(pipe, args):
    seeds = parse_seeds(args.seeds) if args.seeds else list(pipe.cfg.model.eval_seeds)
    counts = parse_seeds(args.counts)
    model_cfg = pipe.cfg.model
    upstream = [pipe.ensure_dataset()]
    hops = sgpm = None
    if model_cfg.use_hop:
        upstream.append(pipe.ensure_hop_tokens(model_cfg))
        hops = load_hop_tokens(pipe.store.resolve(TOKENS_DIR))
    if model_cfg.use_sgpm:
        upstream.append(pipe.store.require("sgpm", "pretrain"))
        sgpm = load_sgpm_tokens(pipe.store.resolve(SGPM_DIR))
    key = stage_key({"model": model_cfg.model_dump(mode="json"), "walks": pipe.cfg.walks.model_dump(mode="json"),
                     "counts": counts, "seeds": seeds}, *upstream)

    def build():
        table = sweep_walk_tokens(pipe.dataset(), pipe.split(), model_cfg, pipe.cfg.walks, counts, hops, sgpm, seeds)
        write_csv(pipe.store.resolve(_rel("sweep", "walk_tokens.csv")), table)
        best = table.loc[table["mean"].idxmax()]
        return [_rel("sweep", "walk_tokens.csv")], {"best_walk_tokens": int(best["walk_tokens"]),
                                                    "best_mean": float(best["mean"])}

    rec = pipe.store.run_stage("sweep", key, build)
    print(f"  -> best with {rec.summary['best_walk_tokens']} walk tokens: {rec.summary['best_mean']:.4f}")


def cmd_analyze(pipe, args):
    which = ANALYSES[:-1] if args.which == "all" else (args.which,)
    acfg = pipe.cfg.analysis
    out = pipe.store.resolve(ANALYSIS_DIR)
    os.makedirs(out, exist_ok=True)

    for step, name in enumerate(which, start=1):
        print(f"\n[ANALYSIS {step}/{len(which)}] {name}")
        if name == "stationary":
            ds = pipe.dataset()
            g, _ = subgraph(ds.graph, largest_component(ds.graph))
            if g.node_count != ds.node_count:
                logger.info("Using the largest component (%d of %d nodes)", g.node_count, ds.node_count)
            rows = [analysis.empirical_stationary(g, kind, acfg.stationary_steps, acfg.seed).as_row(acfg.seed)
                    for kind in acfg.stationary_kinds]
            write_csv(os.path.join(out, "stationary.csv"), pd.DataFrame(rows))
        elif name == "coverage":
            ds = pipe.dataset()
            start = acfg.coverage_start
            if start is None:
                start = int(np.argmax(ds.graph.degrees))
            seeds = list(range(acfg.seed, acfg.seed + acfg.coverage_seeds))
            table = analysis.coverage_sweep(ds.graph, ds.labels, start, acfg.coverage_k, acfg.coverage_walks,
                                            acfg.coverage_eps, seeds, acfg.coverage_kind)
            write_csv(os.path.join(out, "coverage.csv"), table)
            detail = analysis.coverage_experiment(ds.graph, ds.labels, start, acfg.coverage_k, acfg.coverage_walks,
                                                  acfg.coverage_eps, acfg.seed, acfg.coverage_kind)
            write_csv(os.path.join(out, "coverage_types.csv"), detail.type_table())
        elif name == "discrimination":
            report = {}
            for pair, (a, b) in analysis.reference_pairs().items():
                report[pair] = analysis.hop_walk_discrimination(a, b, acfg.discrimination_k).to_dict()
            write_json(os.path.join(out, "discrimination.json"), report)
        elif name == "complexity":
            timing = analysis.complexity_probe(acfg.complexity_tokens, acfg.complexity_feature_dims,
                                               d_h=acfg.complexity_d_h, nodes=acfg.complexity_nodes,
                                               repeats=acfg.complexity_repeats, seed=acfg.seed)
            write_csv(os.path.join(out, "complexity.csv"), timing.table[["N_t", "d_F", "seconds_per_node"]])
            write_json(os.path.join(out, "complexity_fit.json"),
                       {"exponent": timing.exponent, "space": timing.space.to_dict(orient="records")})
        print(f"  -> wrote {ANALYSIS_DIR}/{name}")


COMMANDS = {
    "ingest": cmd_ingest,
    "walks": cmd_walks,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="tokenwalk", description="Walk-token graph transformer pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run config")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="seed for every seeded section")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("ingest", "walks", "pretrain", "train"):
        sub.add_parser(name, parents=[common])
    ev = sub.add_parser("eval", parents=[common])
    ev.add_argument("--seeds", help="training seeds, e.g. 0-9 or 0,3,7")
    an = sub.add_parser("analyze", parents=[common])
    an.add_argument("--which", choices=ANALYSES, default="all")
    ab = sub.add_parser("ablate", parents=[common])
    ab.add_argument("--drop", choices=ABLATIONS, required=True)
    ab.add_argument("--seeds")
    sw = sub.add_parser("sweep", parents=[common])
    sw.add_argument("--counts", default=DEFAULT_SWEEP_COUNTS, help="walk tokens per node to try")
    sw.add_argument("--seeds")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code else 0
    setup_logging(args.verbose)
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
        print(f"--- tokenwalk {args.command} -> {cfg.output_dir} (config {config_hash(cfg)}) ---")
        with output_lock(cfg.output_dir):
            save_resolved(cfg, cfg.output_dir)
            pipe = Pipeline(cfg)
            COMMANDS[args.command](pipe, args)
            export_run_summary(pipe.store)
    except TokenwalkError as e:
        logger.error("%s", e)
        return e.exit_code
    except Exception as e:
        print(f"An unexpected error occurred during pipeline execution: {e}")
        traceback.print_exc()
        return 1
    print(f"\n--- {args.command} complete ---")
    return 0


if __name__ == "__main__":
    sys.exit(main())
