"""Command-line entry point.

Exit codes: 0 success, 1 data/module error, 2 usage error, 3 missing input
file, 4 invalid parameter. Every report starts with ``#`` lines recording the
invocation and seed; reports are written only after the whole workflow succeeds.
"""

from __future__ import annotations

import argparse
import logging
import shlex
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from embeval import contrastive, geometry, metrics, nli_filter, simsearch, store
from embeval.errors import EmbevalError

log = logging.getLogger("embeval")

EXIT_OK = 0
EXIT_MODULE = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_PARAM = 4

SUBCOMMANDS = ("search", "eval-retrieval", "eval-ranking", "diagnose", "train-head", "filter-nli")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class ParamError(Exception):
    """Raised from argparse type converters; escapes argparse so it maps to exit 4."""

    def __init__(self, flag: str, message: str):
        super().__init__(f"--{flag.replace('_', '-')}: {message}")
        self.flag = flag


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, f"{self.format_usage()}{self.prog}: error: {message}")


def _typed(flag: str, cast, check=None, desc: str = ""):
    def convert(text: str):
        try:
            value = cast(text)
        except (TypeError, ValueError):
            raise ParamError(flag, f"expected {cast.__name__}, got {text!r}") from None
        if check is not None and not check(value):
            raise ParamError(flag, f"must be {desc}, got {text!r}")
        return value

    convert.__name__ = cast.__name__
    return convert


def _pos_int(flag):
    return _typed(flag, int, lambda v: v >= 1, "a positive integer")


def _pos_float(flag):
    return _typed(flag, float, lambda v: v > 0 and v == v and v != float("inf"), "a finite number > 0")


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


@dataclass
class RunConfig:
    subcommand: str
    inputs: dict[str, Any] = field(default_factory=dict)
    params: dict[str, Any] = field(default_factory=dict)
    out_dir: Path = Path(".")
    invocation: str = ""


# flag dest -> True when it names an input file (list-valued for nargs)
_INPUT_FLAGS = {
    "queries", "corpus", "qrels", "docs", "listings", "compare",
    "embeddings", "triplets", "scores", "apply",
}

_REQUIRED = {
    "search": ("queries", "corpus", "k"),
    "eval-retrieval": ("queries", "corpus", "qrels", "k"),
    "eval-ranking": (),
    "diagnose": ("queries", "docs", "qrels"),
    "train-head": ("embeddings", "triplets"),
    "filter-nli": ("scores", "threshold"),
}


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="embeval", description="Evaluate and tune precomputed sentence-embedding spaces.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value file; command-line flags override it")
    common.add_argument("--out-dir", default=".", help="directory for report files")
    common.add_argument("--format", choices=("binary", "tsv"), help="embedding file format (default: by extension)")

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    p = add("search", "exact cosine top-k retrieval")
    p.add_argument("--queries")
    p.add_argument("--corpus")
    p.add_argument("--k", type=_pos_int("k"))
    p.add_argument("--workers", type=_pos_int("workers"))

    p = add("eval-retrieval", "Recall@K of exact retrieval against qrels")
    p.add_argument("--queries")
    p.add_argument("--corpus")
    p.add_argument("--qrels")
    p.add_argument("--k", type=_pos_int("k"))
    p.add_argument("--workers", type=_pos_int("workers"))

    p = add("eval-ranking", "click-based NDCG of cosine-reranked listings, or a paired t-test")
    p.add_argument("--queries", help="query embeddings keyed by listing id")
    p.add_argument("--docs")
    p.add_argument("--listings")
    p.add_argument("--truncation", type=_pos_int("truncation"))
    p.add_argument("--binary-gains", action="store_true", help="treat any click count > 0 as gain 1")
    p.add_argument("--compare", nargs=2, metavar=("RUN_A", "RUN_B"), help="two per-query NDCG reports")
    p.add_argument("--label-a")
    p.add_argument("--label-b")

    p = add("diagnose", "alignment and uniformity of query/clicked-doc embeddings")
    p.add_argument("--queries")
    p.add_argument("--docs")
    p.add_argument("--qrels", help="positive (query, doc) pairs")
    p.add_argument("--alpha", type=_pos_float("alpha"), default=geometry.DEFAULT_ALPHA)
    p.add_argument("--t", type=_pos_float("t"), default=geometry.DEFAULT_T)
    p.add_argument("--batch-size", type=_typed("batch_size", int, lambda v: v >= 2, "an integer >= 2"),
                   default=geometry.DEFAULT_BATCH_SIZE)
    p.add_argument("--seed", type=_typed("seed", int), default=0)
    p.add_argument("--label", default="model")
    p.add_argument("--recall", type=_typed("recall", float, lambda v: 0 <= v <= 1, "in [0, 1]"))
    p.add_argument("--append", action="store_true", help="append one row to an existing diag.tsv")

    p = add("train-head", "fit a linear projection head with the contrastive loss")
    p.add_argument("--embeddings")
    p.add_argument("--triplets")
    p.add_argument("--tau", type=_pos_float("tau"), default=contrastive.DEFAULT_TAU)
    p.add_argument("--lr", type=_pos_float("lr"), default=0.1)
    p.add_argument("--epochs", type=_typed("epochs", int, lambda v: v >= 0, "an integer >= 0"), default=10)
    p.add_argument("--batch-size", type=_typed("batch_size", int, lambda v: v >= 2, "an integer >= 2"),
                   default=64)
    p.add_argument("--seed", type=_typed("seed", int), default=0)
    p.add_argument("--d-out", type=_pos_int("d_out"))
    p.add_argument("--no-hard-negatives", action="store_true")
    p.add_argument("--bias", action="store_true")
    p.add_argument("--apply", nargs="+", default=[], help="embedding files to project with the trained head")

    p = add("filter-nli", "best-of-systems selection and score-threshold filtering")
    p.add_argument("--scores")
    p.add_argument("--threshold", type=_typed("threshold", float, lambda v: v == v, "a number"))
    p.add_argument("--triplets", help="triplet file; members' scores are aggregated per triplet")
    p.add_argument("--aggregate", choices=("min", "mean"), default="min")

    return parser, dict(sub.choices)


def _read_config_file(path: Path, sub: _Parser) -> dict[str, Any]:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(EXIT_PARAM, f"{path}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        action = actions.get(dest)
        if action is None:
            raise CliError(EXIT_PARAM, f"{path}:{lineno}: unknown key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            try:
                values[dest] = _bool(raw)
            except ValueError:
                raise CliError(EXIT_PARAM, f"{path}:{lineno}: {key} expects true/false") from None
        elif action.nargs in ("+", 2):
            parts = raw.split()
            values[dest] = [action.type(v) if action.type else v for v in parts]
        else:
            values[dest] = action.type(raw) if action.type else raw
            if action.choices and values[dest] not in action.choices:
                raise CliError(EXIT_PARAM, f"{path}:{lineno}: {key} must be one of {list(action.choices)}")
    return values


def _invocation(argv: Sequence[str]) -> str:
    # the worker count never changes results, so it is left out of the recorded command
    kept, skip = [], False
    for arg in argv:
        if skip:
            skip = False
            continue
        if arg == "--workers":
            skip = True
            continue
        if arg.startswith("--workers="):
            continue
        kept.append(arg)
    return shlex.join(["embeval", *kept])


def parse_and_validate(argv: Sequence[str]) -> RunConfig:
    argv = list(argv)
    parser, subs = build_parser()
    if not argv:
        raise CliError(EXIT_USAGE, parser.format_help())
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise CliError(EXIT_USAGE, parser.format_help())
        if ns.config:
            cfg_path = Path(ns.config)
            if not cfg_path.is_file():
                raise CliError(EXIT_MISSING, f"--config: file not found: {cfg_path}")
            sub = subs[ns.command]
            sub.set_defaults(**_read_config_file(cfg_path, sub))
            ns = parser.parse_args(argv)
    except ParamError as exc:
        raise CliError(EXIT_PARAM, str(exc)) from None

    command = ns.command
    values = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    if command == "eval-ranking":
        needed = () if values.get("compare") else ("queries", "docs", "listings")
    else:
        needed = _REQUIRED[command]
    for dest in needed:
        if values.get(dest) is None:
            raise CliError(EXIT_USAGE, f"embeval {command}: missing required flag --{dest.replace('_', '-')}")

    inputs, params = {}, {}
    for key, value in values.items():
        if key in _INPUT_FLAGS:
            if value is None or value == []:
                continue
            paths = [Path(v) for v in value] if isinstance(value, list) else Path(value)
            for path in paths if isinstance(paths, list) else [paths]:
                if not path.is_file():
                    raise CliError(EXIT_MISSING, f"--{key.replace('_', '-')}: file not found: {path}")
            inputs[key] = paths
        elif key != "out_dir":
            params[key] = value

    out_dir = Path(values["out_dir"])
    if out_dir.exists() and not out_dir.is_dir():
        raise CliError(EXIT_PARAM, f"--out-dir: not a directory: {out_dir}")
    return RunConfig(command, inputs, params, out_dir, _invocation(argv))


# ---------------------------------------------------------------------------
# workflows


def _header(config: RunConfig, *columns: str) -> str:
    seed = config.params.get("seed")
    lines = [f"# {config.invocation}\n", f"# seed={seed if seed is not None else 'none'}\n"]
    if columns:
        lines.append("# " + "\t".join(columns) + "\n")
    return "".join(lines)


def _load(config: RunConfig, key: str) -> store.EmbeddingMatrix:
    return store.load_embeddings(config.inputs[key], config.params.get("format"))


def _run_search(config: RunConfig) -> dict[str, str]:
    queries, corpus = _load(config, "queries"), _load(config, "corpus")
    runs = simsearch.top_k(queries, corpus, config.params["k"], config.params.get("workers"))
    body = simsearch.format_neighbors(runs)
    return {"neighbors.tsv": _header(config, "query_id", "rank", "doc_id", "score") + body}


def _run_eval_retrieval(config: RunConfig) -> dict[str, str]:
    queries, corpus = _load(config, "queries"), _load(config, "corpus")
    rels = store.load_qrels(config.inputs["qrels"])
    missing = [q for q in rels.entries if not queries.has(q)]
    if missing:
        raise EmbevalError(f"qrels queries without embeddings: {', '.join(missing[:5])}")
    judged = queries.take([queries.row_of(q) for q in queries.ids if q in rels])
    k = config.params["k"]
    runs = simsearch.top_k(judged, corpus, k, config.params.get("workers"))
    report = metrics.recall_at_k(runs, rels, k)
    log.info("recall@%d = %.6f over %d queries", k, report.mean, len(report.per_query))
    return {
        "neighbors.tsv": _header(config, "query_id", "rank", "doc_id", "score") + simsearch.format_neighbors(runs),
        "recall.tsv": _header(config, "query_id", report.metric_name) + report.to_tsv(),
    }


def _run_eval_ranking(config: RunConfig) -> dict[str, str]:
    if "compare" in config.inputs:
        path_a, path_b = config.inputs["compare"]
        a = metrics.parse_metric_tsv(path_a.read_text(encoding="utf-8"))
        b = metrics.parse_metric_tsv(path_b.read_text(encoding="utf-8"))
        if set(a) != set(b):
            raise EmbevalError("compared reports cover different query sets")
        keys = list(a)
        t, p = metrics.paired_t_test([a[k] for k in keys], [b[k] for k in keys])
        label_a = config.params.get("label_a") or path_a.stem
        label_b = config.params.get("label_b") or path_b.stem
        row = f"{label_a}\t{label_b}\t{t:.9f}\t{p:.9g}\n"
        return {"significance.tsv": _header(config, "model_a", "model_b", "t", "p") + row}
    queries, docs = _load(config, "queries"), _load(config, "docs")
    listings = store.load_listings(config.inputs["listings"], queries, docs)
    report = metrics.evaluate_ranking(
        listings, truncation=config.params.get("truncation"), binary_gains=config.params.get("binary_gains", False)
    )
    log.info("%s = %.6f over %d listings", report.metric_name, report.mean, len(report.per_query))
    return {"ndcg.tsv": _header(config, "listing_id", report.metric_name) + report.to_tsv()}


def _run_diagnose(config: RunConfig) -> dict[str, str]:
    queries, docs = _load(config, "queries"), _load(config, "docs")
    rels = store.load_qrels(config.inputs["qrels"])
    p = config.params
    report = geometry.diagnose(queries, docs, rels, p["alpha"], p["t"], p["batch_size"], p["seed"])
    log.info("align=%.6f uniform=%.6f", report.align, report.uniform)
    row = report.to_row(p["label"], p.get("recall"))
    target = config.out_dir / "diag.tsv"
    if p.get("append") and target.exists():
        return {"diag.tsv": target.read_text(encoding="utf-8") + row}
    columns = ["model_label", "align", "uniform"] + (["recall_at_k"] if p.get("recall") is not None else [])
    return {"diag.tsv": _header(config, *columns) + row}


def _run_train_head(config: RunConfig) -> dict[str, Any]:
    p = config.params
    emb = _load(config, "embeddings")
    triplets = store.load_triplets(config.inputs["triplets"], emb)
    train_cfg = contrastive.TrainConfig(
        tau=p["tau"], learning_rate=p["lr"], epochs=p["epochs"], batch_size=p["batch_size"], seed=p["seed"],
        use_hard_negatives=not p["no_hard_negatives"], d_out=p.get("d_out"), bias=p["bias"],
    )

    def progress(epoch, head, loss):
        print(f"epoch {epoch + 1}/{train_cfg.epochs} loss {loss:.6f}", file=sys.stderr)

    result = contrastive.train_head(triplets, train_cfg, progress)
    outputs: dict[str, Any] = {
        "head": (
            result.head,
            {
                "tau": p["tau"], "lr": p["lr"], "epochs": p["epochs"], "batch_size": p["batch_size"],
                "seed": p["seed"], "use_hard_negatives": str(train_cfg.use_hard_negatives).lower(),
                "loss_history": result.loss_history,
            },
        )
    }
    for path in config.inputs.get("apply", []):
        matrix = store.load_embeddings(path, p.get("format"))
        outputs[f"{path.stem}.projected.emb"] = contrastive.apply_head(matrix, result.head)
    return outputs


def _run_filter_nli(config: RunConfig) -> dict[str, str]:
    p = config.params
    rows = nli_filter.load_scores(config.inputs["scores"])
    chosen = nli_filter.select_best_translation(rows)
    sentence_scores = nli_filter.best_scores(rows)
    outputs = {
        "best_translation.tsv": _header(config, "sentence_id", "system", "score")
        + "".join(f"{sid}\t{chosen[sid]}\t{sentence_scores[sid]!r}\n" for sid in chosen)
    }
    if "triplets" in config.inputs:
        records = store.load_triplet_records(config.inputs["triplets"])
        scores = nli_filter.triplet_scores(records, sentence_scores, p["aggregate"])
        retained, stats = nli_filter.filter_by_threshold(scores, p["threshold"])
        keep = set(retained)
        outputs["filtered_triplets.tsv"] = _header(config, "triplet_id", "anchor_id", "positive_id", "negative_id") + "".join(
            f"{r.triplet_id}\t{r.anchor_id}\t{r.positive_id}\t{r.negative_id}\n" for r in records if r.triplet_id in keep
        )
    else:
        retained, stats = nli_filter.filter_by_threshold(sentence_scores, p["threshold"])
    log.info("kept %d of %d (removed %.4f)", stats.output_count, stats.input_count, stats.removed_fraction)
    outputs["retained.txt"] = _header(config) + "".join(f"{r}\n" for r in retained)
    outputs["filter_stats.tsv"] = _header(config, "key", "value") + stats.to_tsv()
    return outputs


_WORKFLOWS = {
    "search": _run_search,
    "eval-retrieval": _run_eval_retrieval,
    "eval-ranking": _run_eval_ranking,
    "diagnose": _run_diagnose,
    "train-head": _run_train_head,
    "filter-nli": _run_filter_nli,
}


def _write_outputs(config: RunConfig, outputs: dict[str, Any]) -> list[Path]:
    config.out_dir.mkdir(parents=True, exist_ok=True)
    files: dict[Path, bytes] = {}
    for name, payload in outputs.items():
        if name == "head":
            head, meta = payload
            weight_bytes, meta_text = contrastive.encode_head(head, meta, header=_header(config, "key", "value"))
            files[config.out_dir / "head.emb"] = weight_bytes
            files[config.out_dir / "head_meta.tsv"] = meta_text.encode("utf-8")
        elif isinstance(payload, store.EmbeddingMatrix):
            files[config.out_dir / name] = store.encode_binary(payload)
        else:
            files[config.out_dir / name] = payload.encode("utf-8")
    store.atomic_write_many(files)
    return list(files)


def execute(config: RunConfig) -> int:
    outputs = _WORKFLOWS[config.subcommand](config)
    for path in _write_outputs(config, outputs):
        log.info("wrote %s", path)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    argv = sys.argv[1:] if argv is None else argv
    try:
        config = parse_and_validate(argv)
    except CliError as exc:
        print(str(exc).rstrip("\n"), file=sys.stderr)
        return exc.code
    try:
        return execute(config)
    except (EmbevalError, ArithmeticError) as exc:
        print(f"embeval {config.subcommand}: error: {exc}", file=sys.stderr)
        return EXIT_MODULE
    except OSError as exc:
        print(f"embeval {config.subcommand}: I/O error: {exc}", file=sys.stderr)
        return EXIT_MODULE


if __name__ == "__main__":
    sys.exit(main())
