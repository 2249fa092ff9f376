"""Command-line entry point: ``psmdetect <subcommand> ...``.

Every subcommand reads the module file formats and writes its primary output to
``-o/--output`` (stdout by default). With ``--output-dir`` the output lands in
that directory next to a ``run_manifest.json``. Exit codes: 0 success, 1
validation or domain failure, 2 usage error or missing input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .actionlog import CascadeSet, log_stats, parse_action_log, read_action_log
from .causal import VectorTable, causal_vectors
from .classify import LabeledSet, Predictions, c2dc_classify, knn_classify, read_labels, threshold_classify
from .community import CommunityPartition, build_graph, cohesion_test, louvain
from .config import PipelineConfig, parse_duration
from .decay import decay_vectors
from .errors import PsmError
from .evaluation import ClassifierSpec, FeatureSpec, cross_validate, score, timeliness
from .synth import generate

log = logging.getLogger("psmdetect")


class UsageError(Exception):
    """Bad invocation or missing input (exit code 2)."""


# -- helpers ------------------------------------------------------------------------


def _existing(path: str) -> str:
    if path != "-" and not os.path.exists(path):
        raise UsageError(f"input not found: {path}")
    return path


def _read_log(args, cfg: PipelineConfig):
    path = _existing(args.log)
    dedup = cfg.get("log", "dedup")
    if path == "-":
        return parse_action_log(sys.stdin, args.format or "csv", dedup=dedup)
    return read_action_log(path, args.format, dedup=dedup)


class Run:
    """Collects outputs and writes the manifest when ``--output-dir`` is set."""

    def __init__(self, args, cfg: PipelineConfig) -> None:
        self.args = args
        self.cfg = cfg
        self.out_dir = Path(args.output_dir) if args.output_dir else None
        self.outputs: dict[str, str] = {}
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def target(self, default_name: str) -> Path | None:
        if getattr(self.args, "output", None) and self.args.output != "-":
            return Path(self.args.output)
        if self.out_dir:
            return self.out_dir / default_name
        return None

    @contextmanager
    def open(self, default_name: str):
        path = self.target(default_name)
        if path is None:
            yield sys.stdout
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            yield fh
        self.record(path)

    def record(self, path: Path) -> None:
        self.outputs[str(path)] = hashlib.sha256(Path(path).read_bytes()).hexdigest()

    def write_json(self, obj, default_name: str) -> None:
        with self.open(default_name) as fh:
            fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self, seeds: dict) -> None:
        if not self.out_dir:
            return
        import numba
        import scipy
        import sklearn

        manifest = {
            "command": self.args.command,
            "argv": sys.argv[1:],
            "config": self.cfg.to_json(),
            "config_sha256": self.cfg.digest(),
            "seeds": seeds,
            "workers": self.cfg.get("run", "workers"),
            "outputs": dict(sorted(self.outputs.items())),
            "versions": {
                "psmdetect": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "scikit-learn": sklearn.__version__,
                "numba": numba.__version__,
            },
        }
        path = self.out_dir / "run_manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_vectors(run: Run, table: VectorTable, name: str, as_json: bool) -> None:
    if as_json:
        run.write_json(table.to_json(), name + ".json")
    else:
        with run.open(name + ".csv") as fh:
            table.write_csv(fh)


def _partition(args, cfg: PipelineConfig) -> CommunityPartition:
    if getattr(args, "partition", None):
        return CommunityPartition.read_csv(_existing(args.partition))
    if getattr(args, "log", None):
        return louvain(
            build_graph(_read_log(args, cfg)),
            seed=cfg.get("community", "seed"),
            weighted=cfg.get("community", "weighted"),
        )
    raise UsageError("need --partition or --log to obtain communities")


def _classifier_spec(kind: str, cfg: PipelineConfig) -> ClassifierSpec:
    return ClassifierSpec(
        kind,
        k=cfg.get("classify", "k"),
        metric=cfg.get("classify", "metric"),
        rule=cfg.rule(),
        seed=cfg.get("community", "seed"),
        weighted=cfg.get("community", "weighted"),
    )


def _feature_spec(args, cfg: PipelineConfig) -> FeatureSpec:
    return FeatureSpec(
        kind=args.features,
        theta=cfg.get("log", "theta"),
        phi=cfg.get("log", "phi"),
        causal=cfg.causal(),
        decay=cfg.decay(),
        workers=cfg.get("run", "workers"),
    )


# -- subcommands -----------------------------------------------------------------------


def cmd_ingest(args, cfg, run):
    data = _read_log(args, cfg)
    span = data.time_span
    summary = {
        "n_actions": len(data),
        "n_users": int(len(data.active_users)),
        "n_messages": int(np.count_nonzero(np.diff(data.msg_ptr))),
        "time_span": list(span) if span else None,
    }
    if run.target("log.csv") is not None:
        with run.open("log.csv") as fh:
            (data.write_jsonl if args.to == "jsonl" else data.write_csv)(fh)
        print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    else:
        print(json.dumps(summary, indent=2, sort_keys=True))
    return {}


def cmd_stats(args, cfg, run):
    data = _read_log(args, cfg)
    stats = log_stats(data, CascadeSet(data, cfg.get("log", "theta"), cfg.get("log", "phi")))
    run.write_json(stats.to_json(), "stats.json")
    if args.plot:
        from .plotting import plot_stats

        path = Path(args.plot) if run.out_dir is None else run.out_dir / Path(args.plot).name
        plot_stats(stats, path)
        run.record(path)
    return {}


def cmd_metrics(args, cfg, run):
    data = _read_log(args, cfg)
    table = causal_vectors(
        data, cfg.get("log", "theta"), cfg.get("log", "phi"), cfg.causal(), tuple(args.interval) if args.interval else None
    )
    _write_vectors(run, table, "vectors", args.json)
    return {}


def cmd_decay(args, cfg, run):
    data = _read_log(args, cfg)
    table = decay_vectors(
        data,
        tuple(args.interval) if args.interval else None,
        theta=cfg.get("log", "theta"),
        phi=cfg.get("log", "phi"),
        causal_config=cfg.causal(),
        config=cfg.decay(),
        workers=cfg.get("run", "workers"),
    )
    _write_vectors(run, table, "decay_vectors", args.json)
    return {}


def cmd_graph(args, cfg, run):
    graph = build_graph(_read_log(args, cfg))
    with run.open("graph.edgelist") as fh:
        graph.write_edgelist(fh)
    log.info("graph: %d vertices, %d edges", graph.n_vertices, graph.n_edges)
    return {}


def cmd_communities(args, cfg, run):
    graph = build_graph(_read_log(args, cfg))
    seed = cfg.get("community", "seed")
    part = louvain(graph, seed=seed, weighted=cfg.get("community", "weighted"))
    with run.open("partition.csv") as fh:
        part.write_csv(fh)
    log.info("communities: k=%d modularity=%.6f", part.k, part.modularity)
    return {"louvain": seed}


def cmd_classify(args, cfg, run):
    vectors = VectorTable.read_csv(_existing(args.vectors))
    kind = args.classifier
    if kind == "threshold":
        preds = threshold_classify(vectors, cfg.rule(), cfg.get("classify", "metric"))
        seeds = {}
    else:
        if not args.labels:
            raise UsageError(f"{kind} needs --labels with training labels")
        labels = read_labels(_existing(args.labels))
        training = LabeledSet.from_table(vectors, labels)
        queries = vectors if args.all else vectors.subset([u for u in vectors.users.tolist() if u not in labels])
        k = cfg.get("classify", "k")
        seeds = {}
        if kind == "knn":
            preds = knn_classify(queries, training, k)
        else:
            part = _partition(args, cfg)
            preds = c2dc_classify(queries, training, k=k, partition=part)
            seeds = {"louvain": cfg.get("community", "seed")}
    with run.open("predictions.csv") as fh:
        preds.write_csv(fh)
    for user, err in sorted(preds.errors.items()):
        log.warning("no prediction for %s: %s", user, err)
    return seeds


def cmd_evaluate(args, cfg, run):
    truth = read_labels(_existing(args.truth))
    if args.cv:
        vectors = VectorTable.read_csv(_existing(args.cv))
        spec = _classifier_spec(args.classifier, cfg)
        partition = _partition(args, cfg) if args.classifier == "c2dc" else None
        seed = cfg.get("evaluate", "seed")
        report = cross_validate(
            vectors, truth, spec, cfg.get("evaluate", "folds"), seed,
            partition=partition, workers=cfg.get("run", "workers"),
        )
        run.write_json(report.to_json(), "evaluation.json")
        return {"folds": seed, "louvain": spec.seed}
    if not args.predictions:
        raise UsageError("evaluate needs prediction CSVs or --cv VECTORS")
    reports = {}
    for path in args.predictions:
        reports[path] = score(Predictions.read_csv(_existing(path)), truth).to_json()
    run.write_json(reports[args.predictions[0]] if len(reports) == 1 else reports, "evaluation.json")
    return {}


def cmd_timeline(args, cfg, run):
    data = _read_log(args, cfg)
    truth = read_labels(_existing(args.truth))
    spec = _classifier_spec(args.classifier, cfg)
    seed = cfg.get("evaluate", "seed")
    report = timeliness(
        data, truth, spec, _feature_spec(args, cfg),
        period_length=cfg.get("evaluate", "period_length"),
        train_fraction=cfg.get("evaluate", "train_fraction"),
        horizon=cfg.get("evaluate", "horizon"),
        seed=seed,
    )
    run.write_json(report.to_json(), "timeliness.json")
    if args.csv:
        path = Path(args.csv) if run.out_dir is None else run.out_dir / Path(args.csv).name
        with open(path, "w", newline="") as fh:
            report.write_csv(fh)
        run.record(path)
    return {"split": seed, "louvain": spec.seed}


def cmd_synth(args, cfg, run):
    c = cfg.synth()
    out = Path(args.out) if args.out else (run.out_dir or Path("."))
    result = generate(c)
    paths = result.write(out, args.to)
    for p in paths.values():
        run.record(p)
    meta = result.metadata()
    log.info("synth: %d actions, %d PSMs, theta=%d", meta["n_actions"], meta["n_psm"], meta["theta"])
    return {"synth": c.seed}


def cmd_ttest(args, cfg, run):
    vectors = VectorTable.read_csv(_existing(args.vectors))
    part = _partition(args, cfg)
    seed = cfg.get("community", "seed")
    result = cohesion_test(part, vectors, seed=seed, reject_at=cfg.get("community", "reject_at"))
    run.write_json(result.to_json(), "ttest.json")
    return {"ttest": seed}


# -- argument parsing --------------------------------------------------------------------

# flag dest -> (section, key)
OVERRIDES = {
    "theta": ("log", "theta"),
    "phi": ("log", "phi"),
    "rho_mode": ("causal", "rho_mode"),
    "rho": ("causal", "rho"),
    "alpha": ("causal", "alpha"),
    "delta": ("decay", "delta"),
    "sigma": ("decay", "sigma"),
    "window_grid": ("decay", "window_grid"),
    "k_set": ("decay", "k_set"),
    "k": ("classify", "k"),
    "metric": ("classify", "metric"),
    "thr_km": ("classify", "km"),
    "thr_rel": ("classify", "rel"),
    "thr_nb": ("classify", "nb"),
    "thr_wnb": ("classify", "wnb"),
    "community_seed": ("community", "seed"),
    "weighted": ("community", "weighted"),
    "reject_at": ("community", "reject_at"),
    "folds": ("evaluate", "folds"),
    "eval_seed": ("evaluate", "seed"),
    "period_length": ("evaluate", "period_length"),
    "train_fraction": ("evaluate", "train_fraction"),
    "horizon": ("evaluate", "horizon"),
    "workers": ("run", "workers"),
    "seed": ("synth", "seed"),
    "n_users": ("synth", "n_users"),
    "n_messages": ("synth", "n_messages"),
    "psm_fraction": ("synth", "psm_fraction"),
    "viral_fraction": ("synth", "viral_fraction"),
    "size_exponent": ("synth", "size_exponent"),
    "psm_early_bias": ("synth", "psm_early_bias"),
    "time_span": ("synth", "time_span"),
}


def _log_input(p: argparse.ArgumentParser) -> None:
    p.add_argument("log", help="action log (CSV or JSONL; '-' reads stdin)")
    p.add_argument("--format", choices=("csv", "jsonl"), help="input format (default: from extension)")
    p.add_argument("--no-dedup", dest="dedup", action="store_false", default=None,
                   help="reject duplicate (user, message) pairs instead of keeping the earliest")


def _cascade_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--theta", type=int, help="virality threshold (cascade size)")
    p.add_argument("--phi", type=float, help="key-user fraction")


def _causal_flags(p: argparse.ArgumentParser) -> None:
    _cascade_flags(p)
    p.add_argument("--rho-mode", choices=("fixed", "computed"))
    p.add_argument("--rho", type=float, help="fixed prior virality probability")
    p.add_argument("--alpha", type=float, help="smoothing constant of the relative likelihood")


def _interval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--interval", nargs=2, type=float, metavar=("START", "END"),
                   help="restrict to [START, END] (epoch seconds)")


def _community_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--community-seed", type=int, help="Louvain seed")
    p.add_argument("--weighted", action="store_true", default=None, help="weighted modularity")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI pipeline config; flags override it")
    common.add_argument("--output-dir", help="write all artifacts and run_manifest.json here")
    common.add_argument("-o", "--output", help="primary output file (default: stdout)")
    common.add_argument("--workers", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="psmdetect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"psmdetect {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate and normalize an action log")
    _log_input(p)
    p.add_argument("--to", choices=("csv", "jsonl"), default="csv", help="output format")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", parents=[common], help="cascade size/duration distribution report")
    _log_input(p)
    _cascade_flags(p)
    p.add_argument("--plot", metavar="PNG", help="also render the distributions (needs matplotlib)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("metrics", parents=[common], help="causality vectors per user")
    _log_input(p)
    _causal_flags(p)
    _interval(p)
    p.add_argument("--json", action="store_true", help="JSON instead of CSV")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("decay", parents=[common], help="time-decayed causality vectors per user")
    _log_input(p)
    _causal_flags(p)
    _interval(p)
    p.add_argument("--delta", type=parse_duration, help="window length, e.g. 5d or 432000")
    p.add_argument("--sigma", type=float, help="decay rate per day")
    p.add_argument("--window-grid", choices=("paper_exact", "include_final"))
    p.add_argument("--k-set", help="comma-separated metrics to decay (default all)")
    p.add_argument("--json", action="store_true", help="JSON instead of CSV")
    p.set_defaults(func=cmd_decay)

    p = sub.add_parser("graph", parents=[common], help="co-posting graph edge list")
    _log_input(p)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("communities", parents=[common], help="Louvain partition of the co-posting graph")
    _log_input(p)
    _community_flags(p)
    p.set_defaults(func=cmd_communities)

    p = sub.add_parser("classify", parents=[common], help="label users as PSM or normal")
    p.add_argument("classifier", choices=("threshold", "knn", "c2dc"))
    p.add_argument("vectors", help="vector CSV from metrics or decay")
    p.add_argument("--labels", help="training labels CSV (knn, c2dc)")
    p.add_argument("--all", action="store_true", help="also classify labeled users")
    p.add_argument("--partition", help="community CSV (c2dc)")
    p.add_argument("--log", help="action log to build communities from (c2dc)")
    p.add_argument("--format", choices=("csv", "jsonl"))
    p.add_argument("--k", type=int, help="neighbors (default 10)")
    p.add_argument("--metric", help="threshold metric, e.g. km or xi_rel")
    for m in ("km", "rel", "nb", "wnb"):
        p.add_argument(f"--thr-{m}", type=float, help=f"threshold for {m}")
    _community_flags(p)
    p.set_defaults(func=cmd_classify, dedup=None)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions or cross-validate a classifier")
    p.add_argument("predictions", nargs="*", help="prediction CSVs (ours or external baselines)")
    p.add_argument("--truth", required=True, help="ground-truth labels CSV")
    p.add_argument("--cv", metavar="VECTORS", help="cross-validate on this vector CSV instead")
    p.add_argument("--classifier", choices=("threshold", "knn", "c2dc", "all_psm", "all_normal"), default="c2dc")
    p.add_argument("--partition", help="community CSV (c2dc)")
    p.add_argument("--log", help="action log to build communities from (c2dc)")
    p.add_argument("--format", choices=("csv", "jsonl"))
    p.add_argument("--folds", type=int)
    p.add_argument("--eval-seed", type=int, help="fold seed")
    p.add_argument("--k", type=int)
    p.add_argument("--metric")
    _community_flags(p)
    p.set_defaults(func=cmd_evaluate, dedup=None)

    p = sub.add_parser("timeline", parents=[common], help="per-period detection of first-period PSMs")
    _log_input(p)
    _causal_flags(p)
    p.add_argument("--truth", required=True, help="ground-truth labels CSV")
    p.add_argument("--classifier", choices=("threshold", "knn", "c2dc", "all_psm", "all_normal"), default="c2dc")
    p.add_argument("--features", choices=("decay", "causal"), default="decay")
    p.add_argument("--period-length", type=parse_duration, help="e.g. 10d")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--horizon", type=float, help="fraction of the log span to evaluate (default 0.5)")
    p.add_argument("--eval-seed", type=int, help="train/test split seed")
    p.add_argument("--delta", type=parse_duration)
    p.add_argument("--sigma", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--metric")
    p.add_argument("--csv", help="also write the per-period CSV here")
    _community_flags(p)
    p.set_defaults(func=cmd_timeline)

    p = sub.add_parser("synth", parents=[common], help="generate a labeled synthetic log")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-users", type=int)
    p.add_argument("--n-messages", type=int)
    p.add_argument("--psm-fraction", type=float)
    p.add_argument("--viral-fraction", type=float)
    p.add_argument("--size-exponent", type=float)
    p.add_argument("--psm-early-bias", type=float)
    p.add_argument("--time-span", type=float, help="days")
    p.add_argument("--out", help="directory for log, labels.csv and metadata.json")
    p.add_argument("--to", choices=("csv", "jsonl"), default="csv")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ttest", parents=[common], help="community cohesion t-test on vectors")
    p.add_argument("vectors", help="vector CSV")
    p.add_argument("--partition", help="community CSV")
    p.add_argument("--log", help="action log to build communities from")
    p.add_argument("--format", choices=("csv", "jsonl"))
    p.add_argument("--reject-at", type=float, help="significance level (default 0.01)")
    _community_flags(p)
    p.set_defaults(func=cmd_ttest, dedup=None)
    return parser


def effective_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(_existing(args.config)) if args.config else PipelineConfig()
    for dest, (section, key) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg.set(section, key, value)
    if getattr(args, "dedup", None) is False:
        cfg.set("log", "dedup", False)
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with code 2 on usage errors
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        cfg = effective_config(args)
        log.info("effective config sha256=%s %s", cfg.digest()[:12], json.dumps(cfg.to_json(), sort_keys=True))
        run = Run(args, cfg)
        seeds = args.func(args, cfg, run) or {}
        log.info("seeds %s", json.dumps(seeds, sort_keys=True))
        run.finish(seeds)
    except UsageError as exc:
        _error("usage", str(exc))
        return 2
    except PsmError as exc:
        _error(type(exc).__name__, str(exc), getattr(exc, "line", None))
        return 1
    except BrokenPipeError:
        return 0
    return 0


def _error(kind: str, message: str, line: int | None = None) -> None:
    payload = {"error": kind, "message": message}
    if line is not None:
        payload["line"] = line
    print(json.dumps(payload), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
