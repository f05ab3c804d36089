"""``metadt`` command line: train, eval, explain, dump-weights, ablate, gen-data.

Every failure ends with one JSON line on stderr and an exit code of
2 (configuration), 3 (data) or 4 (numeric divergence or a degenerate
zero-norm prototype).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from metadt import experiments as X
from metadt.config import RunConfig, describe_keys, load_config, parse_override
from metadt.dtinet import DTINetParams, load_checkpoint, save_checkpoint
from metadt.episodes import save_features
from metadt.errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    DigestMismatchError,
    MetaDTError,
    NumericError,
)
from metadt.hierarchy import save_hierarchy

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

CHECKPOINT_NAME = "checkpoint.mdtc"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (TOML value syntax); repeatable")
    return p


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys:\n" + describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="metadt", description="Decision-tree meta-learning over class hierarchies.",
                     epilog=epilog, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_common()]

    sub.add_parser("train", parents=common, help="meta-train and write a checkpoint", epilog=epilog,
                   formatter_class=fmt)

    p = sub.add_parser("eval", parents=common, help="meta-test a checkpoint", epilog=epilog, formatter_class=fmt)
    p.add_argument("--checkpoint", help=f"checkpoint file (default: OUT/{CHECKPOINT_NAME})")
    p.add_argument("--fuse", metavar="lambda=V", help="also report cosine and fused accuracies")
    p.add_argument("--episodes", type=int, help="overrides eval_episodes")

    p = sub.add_parser("explain", parents=common, help="decision traces for query samples", epilog=epilog,
                       formatter_class=fmt)
    p.add_argument("--checkpoint")
    p.add_argument("--samples", required=True, help="comma-separated sample ids")
    p.add_argument("--episode-seed", type=int)

    p = sub.add_parser("dump-weights", parents=common, help="write per-node prototype weights", epilog=epilog,
                       formatter_class=fmt)
    p.add_argument("--checkpoint")
    p.add_argument("--episode-seed", type=int, help="dump one episode before and after adaptation")

    p = sub.add_parser("ablate", parents=common, help="run the five ablation settings", epilog=epilog,
                       formatter_class=fmt)
    p.add_argument("--episodes", type=int, help="overrides eval_episodes")

    sub.add_parser("gen-data", parents=common, help="write the synthetic world as hierarchy + feature files",
                   epilog=epilog, formatter_class=fmt)
    return parser


def _config(args) -> RunConfig:
    overrides = dict(parse_override(item) for item in args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_params(args, cfg: RunConfig, world: X.World) -> DTINetParams:
    path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / CHECKPOINT_NAME
    try:
        params, found = load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    expected = X.digest_for(cfg, world)
    if found != expected:
        raise DigestMismatchError(expected.hex(), found.hex())
    return params


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    world = X.build_world(cfg)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log:
        def record(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
        params, history = X.train(cfg, world, record)
    save_checkpoint(out / CHECKPOINT_NAME, params, X.digest_for(cfg, world))
    summary = {"checkpoint": str(out / CHECKPOINT_NAME), "episodes": len(history)}
    if history:
        tail = history[-min(len(history), cfg.episodes_per_epoch):]
        summary["last_epoch_query_accuracy"] = float(np.mean([r["query_accuracy"] for r in tail]))
    _print_json(summary)
    return EXIT_OK


def _parse_fuse(text: str) -> float:
    key, _, value = text.partition("=")
    if key.strip() not in ("lambda", "lam") or not value:
        raise ConfigError(f"--fuse expects lambda=<value>, got {text!r}")
    try:
        lam = float(value)
    except ValueError:
        raise ConfigError(f"--fuse lambda must be a number, got {value!r}") from None
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("--fuse lambda must lie in [0, 1]")
    return lam


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args)
    world = X.build_world(cfg)
    params = None if cfg.no_dtinet else _load_params(args, cfg, world)
    lam = _parse_fuse(args.fuse) if args.fuse else None
    result = X.evaluate(params, cfg, world, lam=lam, episodes=args.episodes)
    with open(out / "eval_log.jsonl", "w", encoding="utf-8") as log:
        for i, (a, c, f) in enumerate(zip(result.tree.accuracies, result.cosine.accuracies, result.fused.accuracies)):
            log.write(json.dumps({"episode": i, "metadt": a, "cosine": c, "fused": f}) + "\n")
    (out / "eval_report.json").write_text(json.dumps(result.to_dict(), indent=1) + "\n", encoding="utf-8")
    if args.fuse:
        print(result.table())
    else:
        print(f"MetaDT  {result.tree}")
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = _config(args)
    out = _out(args)
    world = X.build_world(cfg)
    params = _load_params(args, cfg, world)
    ids = [s.strip() for s in args.samples.split(",") if s.strip()]
    if not ids:
        raise ConfigError("--samples is empty")
    records = X.explain_samples(params, cfg, world, ids, args.episode_seed)
    with open(out / "traces.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            line = json.dumps(rec, sort_keys=True)
            fh.write(line + "\n")
            print(line)
    return EXIT_OK


def cmd_dump_weights(args) -> int:
    cfg = _config(args)
    out = _out(args)
    world = X.build_world(cfg)
    params = _load_params(args, cfg, world)
    rows = X.dump_weights(params, cfg, world, args.episode_seed)
    d_f = len(rows[0]["weights"])
    header = ["node_id", "node_name", "depth", "leaf", "stage"] + [f"w{j}" for j in range(d_f)]
    lines = ["\t".join(header)]
    for r in rows:
        lines.append("\t".join([r["node_id"], r["node_name"], str(r["depth"]), str(int(r["leaf"])), r["stage"]]
                               + [repr(float(v)) for v in r["weights"]]))
    path = out / "weights.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _print_json({"weights": str(path), "rows": len(rows)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    with open(out / "ablate_log.jsonl", "w", encoding="utf-8") as log:
        def record(setting, rec):
            log.write(json.dumps({"setting": setting, **rec}, sort_keys=True) + "\n")
        results = X.ablate(cfg, args.episodes, record)
    report = {k: v.to_dict() for k, v in results.items()}
    (out / "ablation.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    print(X.ablation_table(results))
    return EXIT_OK


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot write {v!r} as TOML")


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in cfg.to_dict().items())


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if not cfg.synthetic:
        raise ConfigError("gen-data needs synthetic = true")
    if cfg.no_semantic:
        raise ConfigError("gen-data writes the semantic vectors; unset no_semantic")
    out = _out(args)
    world = X.build_world(cfg)
    save_hierarchy(world.hierarchy, out / "hierarchy.json")
    save_features(world.dataset, out / "features.tsv")
    file_cfg = cfg.replace(hierarchy_path="hierarchy.json", features_path="features.tsv", synthetic=False,
                           semantic_mode="file", novel_classes=list(world.novel))
    (out / "config.toml").write_text(dump_config(file_cfg), encoding="utf-8")
    _print_json({"hierarchy": str(out / "hierarchy.json"), "features": str(out / "features.tsv"),
                 "config": str(out / "config.toml"), "samples": len(world.dataset.ids)})
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "dump-weights": cmd_dump_weights,
    "ablate": cmd_ablate,
    "gen-data": cmd_gen_data,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (NumericError, DegenerateInputError)):
        return EXIT_NUMERIC
    return EXIT_OTHER


def _report(exc: BaseException) -> int:
    code = exit_code(exc)
    payload = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    if isinstance(exc, DigestMismatchError):
        payload.update(expected_digest=exc.expected, found_digest=exc.found)
    for attr in ("step", "episode", "line"):
        if getattr(exc, attr, None) is not None:
            payload[attr] = getattr(exc, attr)
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (MetaDTError, OSError, ValueError) as exc:
        return _report(exc)


if __name__ == "__main__":
    sys.exit(main())
