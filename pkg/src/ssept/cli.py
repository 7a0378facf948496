"""Command-line driver: prepare, train, evaluate, export-attention, ablate, recommend.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import (
    ParseError,
    build_sequences,
    filter_min_counts,
    left_pad,
    load_interactions,
    load_sequence_cache,
    save_sequence_cache,
    sequence_stats,
    split_leave_last_two,
)
from .evaluation import EvalReport, evaluate, model_scorer, poprec_scorer
from .model import (
    CheckpointError,
    ModelConfig,
    extract_attention_maps,
    load_checkpoint,
    output_embeddings,
    forward,
    save_checkpoint,
)
from .autodiff import no_tape
from .training import NumericError, SamplingError, train

logger = logging.getLogger("ssept")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ABLATION_AXES = ("blocks", "dims", "sse_pu", "sampling_prob", "negatives")


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def load_split(cfg: RunConfig):
    path = Path(cfg.data.cache)
    if not path.is_file():
        raise DataError(f"sequence cache {path} not found; run 'prepare' first")
    seqs, maps = load_sequence_cache(path)
    return split_leave_last_two(seqs, maps.n_users, maps.n_items), maps


def check_dims(model_cfg: ModelConfig, maps) -> None:
    if (model_cfg.n_users, model_cfg.n_items) != (maps.n_users, maps.n_items):
        raise CheckpointError(
            f"checkpoint dimensions (n_users={model_cfg.n_users}, n_items={model_cfg.n_items}) "
            f"do not match dataset (n_users={maps.n_users}, n_items={maps.n_items})")


def out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.paths.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def echo_config(cfg: RunConfig) -> None:
    (out_dir(cfg) / "config.effective").write_text(cfg.to_text(), encoding="utf-8")


def user_lookup(maps, raw: str) -> int:
    if raw not in maps.user_to_index:
        raise LookupError(f"unknown user {raw!r}")
    return maps.user_to_index[raw]


# ---------------------------------------------------------------- commands


def cmd_prepare(cfg: RunConfig) -> dict:
    if not cfg.data.path:
        raise ConfigError("data.path is required for prepare")
    report = load_interactions(cfg.data.path, cfg.data.delimiter, strict=cfg.data.strict)
    records = filter_min_counts(report.records, cfg.data.min_user_count, cfg.data.min_item_count)
    seqs, maps = build_sequences(records)
    stats = sequence_stats(seqs)
    stats["malformed_lines"] = len(report.malformed)
    for key in ("users", "items", "interactions", "avg_len", "max_len", "malformed_lines"):
        value = stats[key]
        print(f"{key} = {value:.1f}" if isinstance(value, float) else f"{key} = {value}")
    if seqs:
        save_sequence_cache(cfg.data.cache, seqs, maps)
        print(f"cache = {cfg.data.cache}")
    else:
        print("cache = (not written: no interactions)")
    return stats


def cmd_train(cfg: RunConfig):
    split, maps = load_split(cfg)
    model_cfg = cfg.model_config(maps.n_users, maps.n_items)
    out = out_dir(cfg)
    echo_config(cfg)
    log_path = out / "metrics.log"
    with open(log_path, "w", encoding="utf-8") as log:
        result = train(split, model_cfg, cfg.train_config(), cfg.eval_config(),
                       on_epoch=lambda e: (log.write(e.to_line() + "\n"), log.flush()))
    save_checkpoint(cfg.paths.checkpoint, result.params, model_cfg)
    if result.best_valid is not None:
        print(f"best_epoch = {result.best_epoch}")
        print(f"valid_ndcg_at_{cfg.eval.k} = {result.best_valid.ndcg!r}")
        print(f"valid_recall_at_{cfg.eval.k} = {result.best_valid.recall!r}")
    print(f"checkpoint = {cfg.paths.checkpoint}")
    return result


def cmd_evaluate(cfg: RunConfig, baseline: str | None = None, sweep: list[int] | None = None,
                 per_user: bool = False) -> list[EvalReport]:
    split, maps = load_split(cfg)
    if baseline == "poprec":
        scorer, max_len, tag = poprec_scorer(split), cfg.model.max_len, "poprec"
    else:
        params, model_cfg = load_checkpoint(cfg.paths.checkpoint)
        check_dims(model_cfg, maps)
        scorer, max_len, tag = model_scorer(params, model_cfg), model_cfg.max_len, "model"
    out = out_dir(cfg)
    reports = []
    for c in sweep or [cfg.eval.negatives]:
        report = evaluate(scorer, split, cfg.eval.split, cfg.eval_config(c), max_len,
                          keep_per_user=per_user)
        stem = f"report_{tag}_{cfg.eval.split}_C{c}"
        (out / f"{stem}.txt").write_text(report.to_text(), encoding="utf-8")
        if per_user:
            (out / f"{stem}.csv").write_text(report.per_user_csv(), encoding="utf-8")
        print(f"[{tag} {cfg.eval.split} C={c}] ndcg_at_{report.k} = {report.ndcg:.4f} "
              f"recall_at_{report.k} = {report.recall:.4f} users = {report.users}")
        reports.append(report)
    return reports


def _export_window(split, user: int, max_len: int) -> list[int]:
    if user in split.test:
        return split.history_before(user, "test")[-max_len:]
    return split.train[user][-max_len:]


def recency_mass(matrix: np.ndarray, last: int = 10) -> float:
    """Attention mass that the final row places on its ``last`` most recent positions."""
    return float(matrix[-1, -last:].sum())


def cmd_export_attention(cfg: RunConfig, raw_user: str, dest: str | None = None) -> Path:
    split, maps = load_split(cfg)
    params, model_cfg = load_checkpoint(cfg.paths.checkpoint)
    check_dims(model_cfg, maps)
    user = user_lookup(maps, raw_user)
    items = _export_window(split, user, model_cfg.max_len)
    maps_out = extract_attention_maps(user, left_pad(items, model_cfg.max_len), params, model_cfg)
    target = Path(dest) if dest else out_dir(cfg) / f"attention_user_{raw_user}"
    target.mkdir(parents=True, exist_ok=True)
    summary = []
    for amap in maps_out:
        with open(target / f"block{amap.block}.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in amap.matrix:
                writer.writerow([repr(float(v)) for v in row])
        summary.append(f"block{amap.block}_recency_mass_last10 = {recency_mass(amap.matrix)!r}")
    lines = [f"{pos}\t{maps.index_to_item[i]}" for pos, i in
             enumerate(left_pad(items, model_cfg.max_len), start=1) if i]
    (target / "items.txt").write_text("position\titem\n" + "\n".join(lines) + "\n", encoding="utf-8")
    (target / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print("\n".join(summary))
    print(f"exported = {target}")
    return target


def cmd_recommend(cfg: RunConfig, raw_user: str, top_k: int | None = None,
                  include_seen: bool = False) -> list[tuple[str, float]]:
    split, maps = load_split(cfg)
    params, model_cfg = load_checkpoint(cfg.paths.checkpoint)
    check_dims(model_cfg, maps)
    user = user_lookup(maps, raw_user)
    history = split.history_before(user, "test") + [split.test[user]] if user in split.test \
        else split.train[user]
    window = left_pad(history, model_cfg.max_len)[None, :]
    users = np.array([user])
    all_items = np.arange(1, model_cfg.n_items + 1)[None, :]
    with no_tape():
        hidden, _ = forward(users, window, params, model_cfg)
        emb = output_embeddings(users, all_items, params, model_cfg).data[0]
    scores = emb @ hidden.data[0, -1]
    if not include_seen:
        seen = np.fromiter(split.full_history[user], dtype=np.int64) - 1
        scores[seen] = -np.inf
    k = top_k or cfg.eval.k
    order = np.lexsort((all_items[0], -scores))[:k]
    recs = [(maps.index_to_item[i + 1], float(scores[i])) for i in order if np.isfinite(scores[i])]
    for rank, (item, s) in enumerate(recs, start=1):
        print(f"{rank}\t{item}\t{s:.6f}")
    return recs


def run_ablation(cfg: RunConfig, axis: str, values: list[str], split, maps):
    """Train/evaluate once per axis value; returns (header, rows)."""
    k = cfg.eval.k
    metrics = [f"ndcg{k}", f"recall{k}"]

    def fit_eval(run: RunConfig, negatives=None):
        model_cfg = run.model_config(maps.n_users, maps.n_items)
        result = train(split, model_cfg, run.train_config(), run.eval_config())
        scorer = model_scorer(result.params, model_cfg)
        cs = negatives or [run.eval.negatives]
        return [evaluate(scorer, split, run.eval.split, run.eval_config(c), model_cfg.max_len)
                for c in cs]

    def variant(**sections):
        run = RunConfig.from_text(cfg.to_text())
        for key, value in sections.items():
            run.set(key.replace("__", "."), value)
        return run

    rows = []
    if axis == "negatives":
        cs = [int(v) for v in values]
        for label, personalized in (("un-personalized", "false"), ("personalized", "true")):
            for c, rep in zip(cs, fit_eval(variant(model__personalized=personalized), cs)):
                rows.append([label, rep.ndcg, rep.recall, c])
        return ["model", *metrics, "C"], rows
    for v in values:
        if axis == "blocks":
            run, lead = variant(model__blocks=v), [int(v)]
        elif axis == "dims":
            du, _, di = v.partition(":")
            run, lead = variant(model__d_u=du, model__d_i=di), [int(du), int(di)]
        elif axis == "sse_pu":
            run, lead = variant(sse__p_u=v), [float(v)]
        elif axis == "sampling_prob":
            run, lead = variant(train__sampling_prob=v), [float(v)]
        else:
            raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
        rep = fit_eval(run)[0]
        rows.append([*lead, rep.ndcg, rep.recall])
    header = {"blocks": ["blocks"], "dims": ["d_u", "d_i"], "sse_pu": ["p_u"],
              "sampling_prob": ["p_s"]}[axis]
    return [*header, *metrics], rows


def cmd_ablate(cfg: RunConfig) -> Path:
    axis = cfg.ablate.axis
    if axis not in ABLATION_AXES:
        raise ConfigError(f"ablate.axis must be one of {ABLATION_AXES}, got {axis!r}")
    values = [v.strip() for v in cfg.ablate.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("ablate.values is empty")
    split, maps = load_split(cfg)
    echo_config(cfg)
    header, rows = run_ablation(cfg, axis, values, split, maps)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path = out_dir(cfg) / f"ablate_{axis}.csv"
    path.write_text(buf.getvalue(), encoding="utf-8")
    print(buf.getvalue(), end="")
    return path


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("-v", "--verbose", action="store_true")
    group = common.add_argument_group("config overrides")
    for key, typ in RunConfig.keys().items():
        group.add_argument(f"--{key}", dest=f"cfg:{key}", default=None, metavar=typ.__name__.upper())

    parser = argparse.ArgumentParser(prog="ssept", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="ingest interactions and write the sequence cache")
    sub.add_parser("train", parents=[common], help="train and save the best-validation checkpoint")
    p = sub.add_parser("evaluate", parents=[common], help="sampled-candidate NDCG/Recall report")
    p.add_argument("--baseline", choices=["poprec"])
    p.add_argument("--negatives-sweep", help="comma-separated C values, one report each")
    p.add_argument("--per-user-csv", action="store_true")
    p = sub.add_parser("export-attention", parents=[common], help="per-block attention CSVs for one user")
    p.add_argument("--user", required=True, help="raw user id")
    p.add_argument("--out", help="destination directory")
    sub.add_parser("ablate", parents=[common], help="sweep one hyperparameter axis")
    p = sub.add_parser("recommend", parents=[common], help="top-K items for one user")
    p.add_argument("--user", required=True, help="raw user id")
    p.add_argument("--top-k", type=int)
    p.add_argument("--include-seen", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for name, value in vars(args).items():
        if name.startswith("cfg:") and value is not None:
            cfg.set(name[4:], value)
    problems = cfg.validate()
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            sweep = [int(c) for c in args.negatives_sweep.split(",")] if args.negatives_sweep else None
            cmd_evaluate(cfg, args.baseline, sweep, args.per_user_csv)
        elif args.command == "export-attention":
            cmd_export_attention(cfg, args.user, args.out)
        elif args.command == "ablate":
            cmd_ablate(cfg)
        elif args.command == "recommend":
            cmd_recommend(cfg, args.user, args.top_k, args.include_seen)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        where = f" (line {exc.line_number})" if exc.line_number else ""
        print(f"data error{where}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, CheckpointError, LookupError, OSError, SamplingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
