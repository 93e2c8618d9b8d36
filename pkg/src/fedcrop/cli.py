"""``fedcrop`` command line: split data, run CFL/DFL roles, simulate, baselines.

Exit codes: 0 success, 2 usage/configuration, 3 data, 4 protocol or
connection, 5 round synchronisation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .data import CROP_CLASSES, Dataset, load_crop_dataset, load_csv, split_shards, train_test_split, write_csv
from .errors import ConfigurationError, DataError, FedCropError
from .learner import LearnerConfig
from .orchestration import (RoundConfig, join_reports, run_cfl_client, run_cfl_server, run_cloud_baseline,
                            run_dfl_node, run_local_baseline, carve_global_set, simulate, DEFAULT_LINK)
from .report import ExperimentReport
from .topology import load_topology

log = logging.getLogger("fedcrop")

LOG_ENV = "FEDCROP_LOG"

# flag dest -> LearnerConfig field
_LEARNER_FLAGS = {"kind": "kind", "hidden": "hidden_size", "dense": "dense_sizes", "optimizer": "optimizer",
                  "lr": "learning_rate", "batch_size": "batch_size", "epochs": "epochs",
                  "num_classes": "num_classes"}
# flag dest -> RoundConfig field
_ROUND_FLAGS = {"rounds": "rounds", "fraction": "client_fraction", "clients": "expected_clients",
                "stop_delta": "stop_delta", "timeout": "timeout", "test_fraction": "test_fraction",
                "include_self": "include_self", "literal_divisor": "divide_by_connected"}


def _add_learner_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("learner")
    g.add_argument("--model", dest="kind", choices=["lstm-classifier", "softmax-regression"])
    g.add_argument("--hidden", type=int, help="LSTM hidden size")
    g.add_argument("--dense", type=lambda s: tuple(int(x) for x in s.split(",") if x),
                   help="comma-separated dense layer sizes, e.g. 64,32")
    g.add_argument("--optimizer", choices=["adam", "sgd"])
    g.add_argument("--lr", type=float, help="learning rate")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int, help="local epochs per round")
    g.add_argument("--num-classes", type=int)


def _add_common(p: argparse.ArgumentParser, rounds: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file with round/learner settings (flags win)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="directory for report.json and series.csv")
    if rounds:
        p.add_argument("--rounds", type=int)
        p.add_argument("--stop-delta",
                       help="early-stop accuracy delta; 'none' disables")
        p.add_argument("--timeout", type=float, help="seconds to wait at each barrier")
    p.add_argument("--test-fraction", type=float)
    _add_learner_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcrop", description="Federated crop-recommendation experiments.")
    parser.add_argument("--version", action="version", version=f"fedcrop {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="partition a CSV into client shards plus a global eval file")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--shards", type=int, required=True)
    p.add_argument("--stratified", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--shards-random", dest="stratified", action="store_false", help="same as --no-stratified")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-fraction", type=float, default=0.2,
                   help="share of rows held out as the server's eval file; 0 writes no eval file")
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("cfl-server", help="run the FedAvg server")
    p.add_argument("--bind", default="127.0.0.1:7000", help="host:port to listen on")
    p.add_argument("--clients", type=int, help="number of clients to wait for")
    p.add_argument("--fraction", type=float, help="client fraction per round, in (0, 1]")
    p.add_argument("--eval", type=Path, required=True, help="server's global evaluation CSV")
    p.add_argument("--literal-divisor", action="store_true", default=None,
                   help="divide by the connected client count instead of the participant count")
    _add_common(p)

    p = sub.add_parser("cfl-client", help="run one CFL client")
    p.add_argument("--server", required=True, help="server host:port")
    p.add_argument("--data", type=Path, required=True, help="this client's shard CSV")
    p.add_argument("--id", type=int, default=None, help="client id (assigned by the server if omitted)")
    p.add_argument("--connect-timeout", type=float, default=10.0)
    _add_common(p)

    p = sub.add_parser("dfl-node", help="run one ring/mesh node")
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--topology", type=Path, required=True, help="JSON node list")
    p.add_argument("--kind", dest="topology_kind", choices=["ring", "mesh"], default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--include-self", action="store_true", default=None)
    _add_common(p)

    p = sub.add_parser("simulate", help="run a whole scenario in one process")
    p.add_argument("--topology", choices=["star", "ring", "mesh"], required=True)
    p.add_argument("--nodes", type=int, required=True, help="clients for star, nodes for ring/mesh")
    p.add_argument("--dataset", type=Path, default=None, help="crop CSV (default: bundled copy)")
    p.add_argument("--fraction", type=float)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--no-link", action="store_true", help="disable the emulated network delay")
    p.add_argument("--with-baseline", action="store_true", help="also run the local-only baseline (star)")
    p.add_argument("--include-self", action="store_true", default=None)
    _add_common(p)

    p = sub.add_parser("baseline", help="cloud-only or local-only reference runs")
    p.add_argument("--mode", choices=["cloud-only", "local-only"], required=True)
    p.add_argument("--dataset", type=Path, default=None)
    p.add_argument("--clients", type=int, default=5)
    p.add_argument("--no-link", action="store_true")
    p.add_argument("--cfl-report", type=Path, help="report.json of a matching CFL run to join with")
    p.add_argument("--run-cfl", action="store_true",
                   help="also run the matching CFL simulation and join both reports")
    _add_common(p)
    return parser


# ---------------------------------------------------------------------------
# config merging


def resolve_config(args: argparse.Namespace) -> RoundConfig:
    """Defaults, then the JSON file, then explicit flags."""
    doc = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from None
    learner_doc = dict(doc.pop("learner", {}) or {})
    known = {f.name for f in fields(RoundConfig)}
    unknown = set(doc) - known
    unknown |= set(learner_doc) - {f.name for f in fields(LearnerConfig)}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    for flag, name in _LEARNER_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            learner_doc[name] = value
    for flag, name in _ROUND_FLAGS.items():
        if flag == "stop_delta":
            if getattr(args, "stop_delta", None) is not None:
                doc[name] = None if args.stop_delta.lower() == "none" else float(args.stop_delta)
            continue
        value = getattr(args, flag, None)
        if value is not None:
            doc[name] = value
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    seed = int(doc.get("seed", 0))
    learner_doc.setdefault("seed", seed)
    try:
        return RoundConfig(**{**doc, "learner": LearnerConfig(**learner_doc)})
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def _load_labelled(path, num_classes: int) -> Dataset:
    """Load a shard; label indices follow the canonical crop list when it covers them."""
    ds = load_csv(path)
    if ds.num_classes != num_classes and set(ds.class_names) <= set(CROP_CLASSES) \
            and len(CROP_CLASSES) == num_classes:
        ds = load_csv(path, CROP_CLASSES)
    if ds.num_classes != num_classes:
        raise DataError(f"{path}: {ds.num_classes} classes, the model expects {num_classes}")
    return ds


def _write(report: ExperimentReport, out) -> None:
    if out is None:
        print(report.to_json())
        return
    js, sc = report.write(out)
    log.info("wrote %s and %s", js, sc)


# ---------------------------------------------------------------------------
# subcommands


def cmd_split(args) -> int:
    if args.shards < 1:
        raise ConfigurationError("--shards must be >= 1")
    ds = load_csv(args.input)
    pool, eval_set = ds, None
    if args.eval_fraction > 0:
        pool, eval_set = train_test_split(ds, args.eval_fraction, args.seed)
    shards = split_shards(pool, args.shards, args.stratified, args.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for i, shard in enumerate(shards):
        write_csv(shard, args.out_dir / f"shard_{i}.csv")
    if eval_set is not None:
        write_csv(eval_set, args.out_dir / "eval.csv")
    summary = {"shards": [len(s) for s in shards], "eval": len(eval_set) if eval_set is not None else 0}
    print(json.dumps(summary))
    return 0


def cmd_cfl_server(args) -> int:
    config = resolve_config(args)
    eval_set = _load_labelled(args.eval, config.learner.num_classes)
    log.info("waiting for %d clients on %s", config.expected_clients, args.bind)
    report = run_cfl_server(config, args.bind, eval_set)
    _write(report, args.out)
    if report.error:
        log.error("%s", report.error)
        return 5 if report.error.startswith(("RoundSyncError", "RoundTimeout")) else 4
    return 0


def cmd_cfl_client(args) -> int:
    from . import transport
    config = resolve_config(args)
    shard = _load_labelled(args.data, config.learner.num_classes)
    host, port = transport.parse_address(args.server)
    channel = transport.connect(host, port, args.connect_timeout)
    result = run_cfl_client(channel, shard, config.learner, client_id=args.id,
                            test_fraction=config.test_fraction, timeout=config.timeout, save_dir=args.out)
    report = ExperimentReport(mode="cfl-client", seed=config.seed, config=config.to_dict())
    report.final_metrics = result.local_metrics
    report.timing = result.timing
    report.epoch_losses = result.epoch_losses
    report.nodes[result.client_id] = {
        "rounds_trained": result.rounds_trained,
        "metrics": result.local_metrics.to_dict(),
        "global_metrics": result.global_metrics.to_dict() if result.global_metrics else None,
        "response_time": result.response_time,
    }
    if result.response_time is not None:
        report.response_times["cfl"] = {"mean": result.response_time}
    _write(report, args.out)
    return 0


def cmd_dfl_node(args) -> int:
    config = resolve_config(args)
    topology = load_topology(args.topology, args.topology_kind)
    shard = _load_labelled(args.data, config.learner.num_classes)
    result = run_dfl_node(args.id, topology, shard, config)
    _write(result.to_report(config, topology.kind), args.out)
    return 0


def _dataset(path) -> Dataset:
    return load_csv(path) if path else load_crop_dataset()


def cmd_simulate(args) -> int:
    config = resolve_config(args)
    ds = _dataset(args.dataset)
    link = None if args.no_link else DEFAULT_LINK
    report = simulate(args.topology, args.nodes, ds, config, config.seed, link=link,
                      stratified=not args.no_stratify, with_baseline=args.with_baseline)
    _write(report, args.out)
    return 0


def cmd_baseline(args) -> int:
    config = resolve_config(args)
    ds = _dataset(args.dataset)
    if args.mode == "local-only":
        _, global_set = carve_global_set(ds, config.test_fraction, config.seed)
        report = run_local_baseline(global_set, config.learner, config.test_fraction, config.seed)
        report.config = {**config.to_dict(), "mode": "local-only"}
        _write(report, args.out)
        return 0
    link = None if args.no_link else DEFAULT_LINK
    report = run_cloud_baseline(ds, config, args.clients, config.seed, link=link)
    _write(report, args.out)
    cfl = None
    if args.run_cfl:
        cfl = simulate("star", args.clients, ds, config, config.seed, link=link)
        if args.out is not None:
            cfl.write(Path(args.out) / "cfl")
    elif args.cfl_report:
        try:
            cfl = json.loads(Path(args.cfl_report).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read {args.cfl_report}: {exc}") from None
    if cfl is not None:
        joined = json.dumps(join_reports(cfl, report), indent=2, sort_keys=True)
        if args.out is not None:
            (Path(args.out) / "joined.json").write_text(joined + "\n")
        else:
            print(joined)
    return 0


COMMANDS = {"split": cmd_split, "cfl-server": cmd_cfl_server, "cfl-client": cmd_cfl_client,
            "dfl-node": cmd_dfl_node, "simulate": cmd_simulate, "baseline": cmd_baseline}


def configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FedCropError as exc:
        print(f"fedcrop {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fedcrop {args.command}: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"fedcrop {args.command}: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"fedcrop {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
