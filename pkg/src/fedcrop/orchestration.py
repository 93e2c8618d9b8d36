"""Round loops for the CFL server, CFL client and DFL node roles, the
in-process simulator, the cloud-only and local-only baselines, and the
convergence diagnostic.

Every role talks through :class:`~fedcrop.transport.Channel` objects, so the
same code runs over TCP sockets or in-process loopback pairs.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import transport
from .aggregation import ModelUpdate, fedavg, neighbor_average
from .data import Dataset, FeatureStats, preprocess, split_shards, train_test_split
from .errors import ConfigurationError, FedCropError, ProtocolError, RoundSyncError
from .learner import (LearnerConfig, MetricsReport, classification_metrics, dataset_loss, evaluate,
                      init_model, loss_and_gradient, predict, schema_id, train_local)
from .params import ParameterSet
from .report import ExperimentReport, PhaseTimer, RoundRecord, TimingBreakdown
from .topology import Topology
from .transport import Channel, LinkModel, MessageType

log = logging.getLogger(__name__)

SERVER_ID = 0
FINAL_ROUND = 0xFFFFFFFF
# 100 Mbit/s with 1 ms latency: the default emulated LAN for simulate()
DEFAULT_LINK = LinkModel(latency=0.001, bandwidth=12.5e6)


@dataclass
class RoundConfig:
    rounds: int = 10
    client_fraction: float = 1.0
    expected_clients: int = 5
    stop_delta: float | None = 0.001
    min_rounds: int = 3
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    timeout: float = 120.0
    divide_by_connected: bool = False
    include_self: bool = False
    report_gradients: bool = True
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigurationError(f"client fraction must lie in (0, 1], got {self.client_fraction}")
        if self.expected_clients < 1:
            raise ConfigurationError("expected_clients must be >= 1")
        if self.timeout <= 0:
            raise ConfigurationError("timeout must be positive")

    @property
    def clients_per_round(self) -> int:
        return max(math.ceil(self.client_fraction * self.expected_clients - 1e-9), 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["learner"] = self.learner.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundConfig":
        d = dict(d)
        if "learner" in d:
            d["learner"] = LearnerConfig.from_dict(d["learner"])
        return cls(**d)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def prepare_local(shard: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset, FeatureStats]:
    """Split a node's shard into held-out halves and scale both with train stats."""
    if len(shard) == 0:
        raise FedCropError("empty shard")
    train_raw, test_raw = train_test_split(shard, test_fraction, seed)
    train, stats = preprocess(train_raw)
    test, _ = preprocess(test_raw, stats)
    return train, test, stats


def sample_clients(rng: np.random.Generator, n_clients: int, k: int) -> list[int]:
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


def _json(payload: bytes) -> dict:
    try:
        return json.loads(payload.decode("utf-8")) if payload else {}
    except ValueError as exc:
        raise ProtocolError(f"bad JSON payload: {exc}") from None


def _send_json(ch: Channel, msg_type, round: int, sender: int, obj: dict) -> None:
    ch.send(msg_type, round, sender, json.dumps(obj, sort_keys=True).encode("utf-8"))


def _recv_expect(ch: Channel, msg_type, timeout: float) -> transport.Frame:
    frame = ch.recv(timeout)
    if frame.msg_type != msg_type:
        raise ProtocolError(f"expected {MessageType(msg_type).name}, got {frame.msg_type.name}")
    return frame


def _weighted_mean(values: Sequence[float], weights: Sequence[float]) -> float:
    w = np.asarray(weights, dtype=float)
    return float(np.dot(np.asarray(values, dtype=float), w) / w.sum())


# ---------------------------------------------------------------------------
# CFL server


def accept_clients(listener: transport.TcpListener, n: int, timeout: float) -> list[Channel]:
    """Accept connections until ``n`` clients are connected."""
    channels = []
    while len(channels) != n:
        channels.append(listener.accept(timeout))
    return channels


def _handshake_clients(channels: Sequence[Channel], config: RoundConfig, schema: str) -> dict[int, Channel]:
    hellos = []
    for ch in channels:
        frame = _recv_expect(ch, MessageType.HELLO, config.timeout)
        hellos.append((ch, _json(frame.payload)))
    taken = {h["client_id"] for _, h in hellos if h.get("client_id") is not None}
    if len(taken) != sum(1 for _, h in hellos if h.get("client_id") is not None):
        raise ProtocolError("two clients announced the same id")
    free = (i for i in range(1, len(channels) + 1 + len(taken)) if i not in taken)
    by_id = {}
    for ch, hello in hellos:
        cid = hello.get("client_id")
        cid = next(free) if cid is None else int(cid)
        if hello.get("schema") not in (None, schema):
            raise ProtocolError(f"client {cid} runs an incompatible model schema")
        _send_json(ch, MessageType.HELLO, 0, SERVER_ID, {"client_id": cid, "rounds": config.rounds})
        by_id[cid] = ch
    return dict(sorted(by_id.items()))


def run_cfl_server(config: RoundConfig, endpoint, eval_set: Dataset, *,
                   init_params: ParameterSet | None = None) -> ExperimentReport:
    """Coordinate ``config.rounds`` rounds of FedAvg.

    ``endpoint`` is a ``host:port`` string, a :class:`TcpListener`, or a list
    of already connected channels (one per client). ``eval_set`` is the
    server's global dataset, used only for held-out evaluation.
    """
    own_listener = None
    if isinstance(endpoint, str):
        own_listener = transport.TcpListener(*transport.parse_address(endpoint))
        endpoint = own_listener
    if isinstance(endpoint, transport.TcpListener):
        channels = accept_clients(endpoint, config.expected_clients, config.timeout)
    else:
        channels = list(endpoint)
    if len(channels) != config.expected_clients:
        raise ConfigurationError(f"expected {config.expected_clients} clients, got {len(channels)}")

    learner = config.learner
    report = ExperimentReport(mode="cfl", seed=config.seed, config=config.to_dict())
    clients: dict[int, Channel] = {}
    try:
        clients = _handshake_clients(channels, config, schema_id(learner))
        _serve_rounds(config, clients, eval_set, init_params, report)
    except (FedCropError, OSError) as exc:
        report.error = f"{type(exc).__name__}: {exc}"
        log.error("CFL session aborted: %s", report.error)
    finally:
        for ch in clients.values() or channels:
            ch.close()
        if own_listener is not None:
            own_listener.close()
    return report


def _serve_rounds(config, clients, eval_set, init_params, report):
    learner = config.learner
    ids = list(clients)
    timer = PhaseTimer()
    with timer.phase("init"):
        global_params = init_params.copy() if init_params is not None else init_model(learner, config.seed)
        rng = np.random.default_rng(derive_seed(config.seed, 0x5A))
        eval_scaled, _ = preprocess(eval_set)
    schema = global_params.schema_id
    prev_acc = None
    last = timer.snapshot()
    k = config.clients_per_round
    for r in range(1, config.rounds + 1):
        chosen = [ids[i] for i in sample_clients(rng, len(ids), k)]
        with timer.phase("exchange"):
            payload = transport.encode_params(global_params)
            for cid in chosen:
                clients[cid].send(MessageType.MODEL_PARAMS, r, SERVER_ID, payload)
        updates, reports = [], []
        for cid in chosen:
            update, meta, grad = _collect_update(clients[cid], cid, r, timer, config.timeout)
            if update.params.schema_id != schema:
                raise ProtocolError(f"client {cid} sent an update with a foreign schema")
            updates.append(update)
            reports.append((meta, grad))
        with timer.phase("aggregate"):
            divisor = len(ids) if config.divide_by_connected else None
            global_params = fedavg(updates, divisor=divisor)

        with timer.excluded():
            metrics = evaluate(global_params, eval_scaled)
            weights = [m["n"] for m, _ in reports]
            round_loss = _weighted_mean([m["loss"] for m, _ in reports], weights)
            grad_sq = None
            if all(g is not None for _, g in reports):
                g = sum(w * gi.to_vector() for w, (_, gi) in zip(weights, reports)) / sum(weights)
                grad_sq = float(g @ g)
            epochs = [m["epoch_losses"] for m, _ in reports]
            for e in range(max((len(x) for x in epochs), default=0)):
                pairs = [(x[e], w) for x, w in zip(epochs, weights) if e < len(x)]
                report.epoch_losses.append(_weighted_mean(*zip(*pairs)))
            snap = timer.snapshot()
            report.rounds.append(RoundRecord(r, round_loss, metrics, snap - last, grad_sq))
            log.info("round %d: clients=%s loss=%.5f acc=%.4f", r, chosen, round_loss, metrics.accuracy)
        last = timer.snapshot()
        if (config.stop_delta is not None and prev_acc is not None and r >= config.min_rounds
                and abs(metrics.accuracy - prev_acc) < config.stop_delta):
            report.stopped_early_at = r
            break
        prev_acc = metrics.accuracy

    with timer.phase("exchange"):
        payload = transport.encode_params(global_params)
        for cid in ids:
            clients[cid].send(MessageType.RELEASE, FINAL_ROUND, SERVER_ID, payload)
    report.timing = timer.snapshot()

    with timer.excluded():
        report.final_metrics = evaluate(global_params, eval_scaled)
        for cid in ids:
            frame = _recv_expect(clients[cid], MessageType.METRICS_REPORT, config.timeout)
            meta, _ = transport.decode_report(frame.payload)
            report.nodes[cid] = meta
        cfl_times = [n["response_time"] for n in report.nodes.values() if n.get("response_time") is not None]
        if cfl_times:
            report.response_times["cfl"] = _stats(cfl_times)
        report.diagnostics = convergence_diagnostics(
            report.loss_series(), [r.grad_norm_sq for r in report.rounds])
    report.final_params = global_params
    return report


def _collect_update(ch: Channel, cid: int, r: int, timer: PhaseTimer, timeout: float):
    """Wait for client ``cid``'s round-``r`` MODEL_UPDATE and METRICS_REPORT."""
    update = meta = grad = None
    while update is None or meta is None:
        with timer.phase("train"):
            frame = ch.recv(timeout)
        if frame.round != r:
            log.warning("dropping %s for round %d from client %d during round %d",
                        frame.msg_type.name, frame.round, frame.sender_id, r)
            continue
        if frame.sender_id != cid:
            raise ProtocolError(f"frame from sender {frame.sender_id} on client {cid}'s channel")
        with timer.phase("exchange"):
            if frame.msg_type == MessageType.MODEL_UPDATE:
                update = ModelUpdate(cid, r, transport.decode_params(frame.payload))
            elif frame.msg_type == MessageType.METRICS_REPORT:
                meta, grad = transport.decode_report(frame.payload)
            else:
                raise ProtocolError(f"unexpected {frame.msg_type.name} from client {cid}")
    return update, meta, grad


def _stats(values: Sequence[float]) -> dict:
    a = np.asarray(values, dtype=float)
    return {"mean": float(a.mean()), "min": float(a.min()), "max": float(a.max()),
            "per_client": [float(v) for v in a]}


# ---------------------------------------------------------------------------
# CFL client


@dataclass
class ClientResult:
    client_id: int
    params: ParameterSet
    global_params: ParameterSet | None
    local_metrics: MetricsReport
    global_metrics: MetricsReport | None
    timing: TimingBreakdown
    rounds_trained: list[int]
    epoch_losses: list[float]
    response_time: float | None


def run_cfl_client(endpoint, shard: Dataset, learner: LearnerConfig, *, client_id: int | None = None,
                   test_fraction: float = 0.2, timeout: float = 120.0, save_dir=None,
                   report_gradients: bool = True) -> ClientResult:
    """Receive global params, train locally, send the update; repeat until RELEASE.

    ``endpoint`` is a connected channel or a ``host:port`` string.
    """
    ch = transport.connect(*transport.parse_address(endpoint)) if isinstance(endpoint, str) else endpoint
    timer = PhaseTimer()
    try:
        with timer.phase("init"):
            train, test, _ = prepare_local(shard, test_fraction, learner.seed)
            params = init_model(learner)
            rng = np.random.default_rng(learner.seed)
        with timer.phase("exchange"):
            _send_json(ch, MessageType.HELLO, 0, client_id or 0,
                       {"client_id": client_id, "n_train": len(train), "schema": params.schema_id})
            hello = _json(_recv_expect(ch, MessageType.HELLO, timeout).payload)
        cid = int(hello["client_id"])
        rounds_trained, losses = [], []
        final_global = None
        while True:
            with timer.phase("exchange"):
                frame = ch.recv(timeout)
                incoming = transport.decode_params(frame.payload) if frame.payload else None
            if incoming is not None and incoming.schema_id != params.schema_id:
                raise ProtocolError("server model schema differs from the local model")
            if frame.msg_type == MessageType.RELEASE:
                final_global = incoming
                break
            if frame.msg_type != MessageType.MODEL_PARAMS:
                raise ProtocolError(f"unexpected {frame.msg_type.name} from server")
            grad = None
            if report_gradients:
                with timer.excluded():
                    _, grad = loss_and_gradient(incoming, train.features, train.labels)
            with timer.phase("train"):
                params, epoch_losses = train_local(incoming, train, learner, rng)
            if not epoch_losses:
                epoch_losses = [dataset_loss(params, train)]
            with timer.phase("exchange"):
                transport.send_params(ch, params, MessageType.MODEL_UPDATE, frame.round, cid)
                meta = {"loss": epoch_losses[-1], "n": len(train), "epoch_losses": epoch_losses}
                ch.send(MessageType.METRICS_REPORT, frame.round, cid, transport.encode_report(meta, grad))
            rounds_trained.append(frame.round)
            losses.extend(epoch_losses)
        timing = timer.snapshot()

        local_metrics = evaluate(params, test)
        global_metrics = response_time = None
        if final_global is not None:
            t0 = time.perf_counter()
            predictions = predict(final_global, test.features)
            response_time = time.perf_counter() - t0
            global_metrics = classification_metrics(test.labels, predictions, learner.num_classes,
                                                    dataset_loss(final_global, test))
        if save_dir is not None:
            out = Path(save_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "model.flmu").write_bytes(transport.encode_params(params))
            if final_global is not None:
                (out / "global_model.flmu").write_bytes(transport.encode_params(final_global))
        meta = {"client_id": cid, "n_train": len(train), "n_test": len(test),
                "metrics": local_metrics.to_dict(),
                "global_metrics": global_metrics.to_dict() if global_metrics else None,
                "rounds_trained": rounds_trained, "response_time": response_time,
                "timing": timing.to_dict()}
        ch.send(MessageType.METRICS_REPORT, FINAL_ROUND, cid, transport.encode_report(meta))
        return ClientResult(cid, params, final_global, local_metrics, global_metrics, timing,
                            rounds_trained, losses, response_time)
    finally:
        ch.close()


def load_model(path) -> ParameterSet:
    return transport.decode_params(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# DFL node


@dataclass
class NodeResult:
    node_id: int
    neighbors: tuple[int, ...]
    params: ParameterSet
    metrics: MetricsReport
    round_metrics: list[MetricsReport]
    round_losses: list[float]
    timing: TimingBreakdown
    round_timing: list[TimingBreakdown]
    history: list[ParameterSet]
    test_set: Dataset
    exchanges_sent: int

    def to_report(self, config: RoundConfig, kind: str) -> ExperimentReport:
        """Node-local report: the series are this node's own loss and held-out metrics."""
        report = ExperimentReport(mode=kind, seed=config.seed, config=config.to_dict())
        report.config["node_id"] = self.node_id
        for r, (loss, m, t) in enumerate(zip(self.round_losses, self.round_metrics, self.round_timing), 1):
            report.rounds.append(RoundRecord(r, loss, m, t))
        report.final_metrics = self.metrics
        report.timing = self.timing
        report.nodes[self.node_id] = self.to_dict()
        report.final_params = self.params
        return report

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "neighbors": list(self.neighbors),
                "metrics": self.metrics.to_dict(), "round_losses": self.round_losses,
                "round_metrics": [m.to_dict() for m in self.round_metrics],
                "exchanges_sent": self.exchanges_sent, "timing": self.timing.to_dict(),
                "round_timing": [t.to_dict() for t in self.round_timing]}


def connect_mesh_links(node_id: int, topology: Topology, timeout: float) -> dict[int, Channel]:
    """TCP links to every neighbour: dial larger ids, accept smaller ones."""
    me = topology.address(node_id)
    listener = transport.TcpListener(me.address, me.port)
    links: dict[int, Channel] = {}
    try:
        for j in topology.neighbors(node_id):
            if j > node_id:
                peer = topology.address(j)
                ch = transport.connect(peer.address, peer.port, timeout)
                ch.send(MessageType.HELLO, 0, node_id, b"{}")
                links[j] = ch
        expected = sum(1 for j in topology.neighbors(node_id) if j < node_id)
        for _ in range(expected):
            ch = listener.accept(timeout)
            frame = _recv_expect(ch, MessageType.HELLO, timeout)
            if frame.sender_id not in topology.neighbors(node_id):
                raise ProtocolError(f"node {frame.sender_id} is not a neighbour of {node_id}")
            links[frame.sender_id] = ch
    finally:
        listener.close()
    return links


def run_dfl_node(node_id: int, topology: Topology, shard: Dataset, config: RoundConfig,
                 channels: dict[int, Channel] | None = None, *, keep_history: bool = False) -> NodeResult:
    """Train, swap models with the topology neighbours, average; ``config.rounds`` times.

    Without ``channels`` the node connects over TCP using the topology's
    addresses. Every node must start from the same ``config.seed`` so all
    share the initial model.
    """
    if topology.kind not in ("ring", "mesh"):
        raise ConfigurationError("DFL nodes run on ring or mesh topologies")
    nbrs = topology.neighbors(node_id)
    if channels is None:
        channels = connect_mesh_links(node_id, topology, config.timeout)
    if set(channels) != set(nbrs):
        raise ConfigurationError(f"node {node_id} has links to {sorted(channels)}, neighbours are {list(nbrs)}")
    learner = config.learner
    timer = PhaseTimer()
    pool = ThreadPoolExecutor(max_workers=len(nbrs))
    try:
        with timer.phase("exchange"):
            hello = {"rounds": config.rounds, "kind": topology.kind, "schema": schema_id(learner)}
            for j in nbrs:
                _send_json(channels[j], MessageType.HELLO, 0, node_id, hello)
            for j in nbrs:
                peer = _json(_recv_expect(channels[j], MessageType.HELLO, config.timeout).payload)
                if peer.get("rounds") != config.rounds:
                    raise RoundSyncError(
                        f"node {j} runs {peer.get('rounds')} rounds, node {node_id} runs {config.rounds}")
                if peer.get("schema") != hello["schema"] or peer.get("kind") != topology.kind:
                    raise ProtocolError(f"node {j} runs an incompatible configuration")
        with timer.phase("init"):
            train, test, _ = prepare_local(shard, config.test_fraction, learner.seed)
            params = init_model(learner, config.seed)
            rng = np.random.default_rng(learner.seed)
        round_metrics, round_losses, round_timing, history = [], [], [], []
        sent = 0
        last = timer.snapshot()
        for r in range(1, config.rounds + 1):
            with timer.phase("train"):
                params, losses = train_local(params, train, learner, rng)
            with timer.phase("exchange"):
                payload = transport.encode_params(params)
                futures = [pool.submit(channels[j].send, MessageType.MODEL_UPDATE, r, node_id, payload)
                           for j in nbrs]
                received = [_recv_round_update(channels[j], j, r, config.timeout) for j in nbrs]
                for f in futures:
                    f.result()
                sent += len(nbrs)
            with timer.phase("aggregate"):
                params = neighbor_average(received, params, config.include_self, expected=len(nbrs))
            with timer.excluded():
                round_losses.append(losses[-1] if losses else dataset_loss(params, train))
                round_metrics.append(evaluate(params, test))
                if keep_history:
                    history.append(params)
                snap = timer.snapshot()
                round_timing.append(snap - last)
            last = timer.snapshot()
        timing = timer.snapshot()
    finally:
        pool.shutdown(wait=True)
        for ch in channels.values():
            ch.close()
    return NodeResult(node_id, nbrs, params, evaluate(params, test), round_metrics, round_losses,
                      timing, round_timing, history, test, sent)


def _recv_round_update(ch: Channel, j: int, r: int, timeout: float) -> ModelUpdate:
    while True:
        frame = _recv_expect(ch, MessageType.MODEL_UPDATE, timeout)
        if frame.sender_id != j:
            raise ProtocolError(f"update from {frame.sender_id} on the link to {j}")
        if frame.round == r:
            return ModelUpdate(j, r, transport.decode_params(frame.payload))
        if frame.round > r:
            raise RoundSyncError(f"node {j} is at round {frame.round} while this node is at {r}")
        log.warning("dropping stale round-%d update from node %d", frame.round, j)


# ---------------------------------------------------------------------------
# in-process simulation


def _run_threads(targets: list[Callable[[], object]]) -> list:
    results: list = [None] * len(targets)
    errors: list = [None] * len(targets)

    def wrap(i, fn):
        try:
            results[i] = fn()
        except BaseException as exc:  # re-raised in the caller
            errors[i] = exc

    threads = [threading.Thread(target=wrap, args=(i, fn), daemon=True) for i, fn in enumerate(targets)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for exc in errors:
        if exc is not None:
            raise exc
    return results


def carve_global_set(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """(client pool, server global set) as used by the star scenarios."""
    return train_test_split(dataset, test_fraction, derive_seed(seed, 0x61))


def client_learner(base: LearnerConfig, seed: int, node: int) -> LearnerConfig:
    return base.replace(seed=derive_seed(seed, node))


def simulate(topology_kind: str, n_nodes: int, dataset: Dataset, round_config: RoundConfig,
             seed: int = 0, *, link: LinkModel | None = DEFAULT_LINK, stratified: bool = True,
             with_baseline: bool = False) -> ExperimentReport:
    """Run a whole scenario in one process over loopback channels.

    ``star`` means one server plus ``n_nodes`` clients. Results depend only on
    (dataset, config, seed); timing fields are the only nondeterministic part.
    """
    config = replace(round_config, seed=seed)
    if topology_kind == "star":
        Topology("star", n_nodes + 1)
        return _simulate_star(n_nodes, dataset, config, link, stratified, with_baseline)
    topology = Topology(topology_kind, n_nodes)
    return _simulate_dfl(topology, dataset, config, link, stratified)


def _simulate_star(n, dataset, config, link, stratified, with_baseline):
    config = replace(config, expected_clients=n)
    pool, global_set = carve_global_set(dataset, config.test_fraction, config.seed)
    shards = split_shards(pool, n, stratified, config.seed)
    pairs = [transport.loopback_pair(link) for _ in range(n)]
    server_ends = [a for a, _ in pairs]

    def client(i):
        return lambda: run_cfl_client(pairs[i][1], shards[i], client_learner(config.learner, config.seed, i + 1),
                                      client_id=i + 1, test_fraction=config.test_fraction,
                                      timeout=config.timeout, report_gradients=config.report_gradients)

    results = _run_threads([lambda: run_cfl_server(config, server_ends, global_set)]
                           + [client(i) for i in range(n)])
    report: ExperimentReport = results[0]
    if report.error:
        raise ProtocolError(report.error)
    report.mode = "cfl"
    report.config["topology"] = {"kind": "star", "clients": n, "link": asdict(link) if link else None}
    for res in results[1:]:
        node = report.nodes.setdefault(res.client_id, {})
        node["neighbors"] = [SERVER_ID]
        node["shard_size"] = len(shards[res.client_id - 1])
    if with_baseline:
        report.baselines["local-only"] = run_local_baseline(global_set, config.learner, config.test_fraction,
                                                            config.seed)
    return report


def _simulate_dfl(topology, dataset, config, link, stratified):
    n = topology.node_count
    shards = split_shards(dataset, n, stratified, config.seed)
    links: dict[int, dict[int, Channel]] = {i: {} for i in range(n)}
    for i in range(n):
        for j in topology.neighbors(i):
            if i < j:
                a, b = transport.loopback_pair(link)
                links[i][j], links[j][i] = a, b

    def node(i):
        cfg = replace(config, learner=client_learner(config.learner, config.seed, i + 1))
        return lambda: run_dfl_node(i, topology, shards[i], cfg, links[i], keep_history=True)

    results: list[NodeResult] = _run_threads([node(i) for i in range(n)])
    report = ExperimentReport(mode=topology.kind, seed=config.seed, config=config.to_dict())
    report.config["topology"] = {"kind": topology.kind, "nodes": n,
                                 "exchanges_per_round": topology.exchanges_per_round(),
                                 "link": asdict(link) if link else None}
    union_test = Dataset(np.vstack([res.test_set.features for res in results]),
                         np.concatenate([res.test_set.labels for res in results]),
                         list(dataset.class_names))
    for r in range(config.rounds):
        models = [res.history[r] for res in results]
        consensus = fedavg([ModelUpdate(res.node_id, r + 1, m) for res, m in zip(results, models)])
        metrics = evaluate(consensus, union_test)
        loss = float(np.mean([res.round_losses[r] for res in results]))
        timing = TimingBreakdown.mean([res.round_timing[r] for res in results])
        report.rounds.append(RoundRecord(r + 1, loss, metrics, timing,
                                         node_metrics={res.node_id: res.round_metrics[r] for res in results}))
    if config.rounds:
        final = fedavg([ModelUpdate(res.node_id, config.rounds, res.params) for res in results])
        report.final_metrics = evaluate(final, union_test)
        report.final_params = final
    report.timing = TimingBreakdown.mean([res.timing for res in results])
    for res in results:
        report.nodes[res.node_id] = res.to_dict()
    report.diagnostics = convergence_diagnostics(report.loss_series(), [None] * len(report.rounds))
    report.node_results = results
    return report


# ---------------------------------------------------------------------------
# baselines


def run_local_baseline(global_set: Dataset, learner: LearnerConfig, test_fraction: float = 0.2,
                       seed: int = 0, init_seed: int | None = None) -> ExperimentReport:
    """The server trains alone on its own global data ("before FL")."""
    train, test, _ = prepare_local(global_set, test_fraction, derive_seed(seed, 0x10CA1))
    timer = PhaseTimer()
    with timer.phase("init"):
        params = init_model(learner, seed if init_seed is None else init_seed)
    with timer.phase("train"):
        params, losses = train_local(params, train, learner, np.random.default_rng(derive_seed(seed, 0x10CA2)))
    report = ExperimentReport(mode="local-only", seed=seed, config={"learner": learner.to_dict()})
    report.timing = timer.snapshot()
    report.epoch_losses = losses
    report.final_metrics = evaluate(params, test)
    report.rounds.append(RoundRecord(1, losses[-1] if losses else dataset_loss(params, train),
                                     report.final_metrics, report.timing))
    report.final_params = params
    return report


@dataclass
class CloudServerResult:
    received: list[Dataset]
    params: ParameterSet
    timing: TimingBreakdown


def run_cloud_server(channels: Sequence[Channel], learner: LearnerConfig, class_names: list[str],
                     timeout: float = 120.0, seed: int = 0) -> CloudServerResult:
    """Collect every client's raw training rows, fit one model on the union,
    answer each client's prediction query."""
    timer = PhaseTimer()
    requests = []
    for ch in channels:
        with timer.phase("exchange"):
            frame = _recv_expect(ch, MessageType.PREDICT_REQUEST, timeout)
            tensors = transport.decode_params(frame.payload)
        requests.append((ch, frame.sender_id, tensors))
    received = [Dataset(t["train_features"], t["train_labels"].astype(np.int64), list(class_names))
                for _, _, t in requests]
    with timer.phase("init"):
        union = Dataset(np.vstack([d.features for d in received]),
                        np.concatenate([d.labels for d in received]), list(class_names))
        scaled, stats = preprocess(union)
        params = init_model(learner, seed)
    with timer.phase("train"):
        params, _ = train_local(params, scaled, learner, np.random.default_rng(derive_seed(seed, 0xC10)))
    for ch, sender, t in requests:
        with timer.phase("exchange"):
            query = t["query_features"]
            span = np.where(stats.maximum > stats.minimum, stats.maximum - stats.minimum, 1.0)
            q = np.where(stats.maximum > stats.minimum, (query - stats.minimum) / span, 0.0)
            preds = predict(params, q).astype(np.float64)
            transport.send_params(ch, ParameterSet.from_arrays({"predictions": preds}),
                                  MessageType.PREDICT_RESPONSE, 0, SERVER_ID)
    return CloudServerResult(received, params, timer.snapshot())


def run_cloud_client(ch: Channel, shard: Dataset, client_id: int, test_fraction: float, seed: int,
                     timeout: float = 120.0) -> dict:
    """Upload raw data, wait for predictions; response time = submit to receipt."""
    train_raw, test_raw = train_test_split(shard, test_fraction, seed)
    payload = transport.encode_params(ParameterSet.from_arrays({
        "train_features": train_raw.features,
        "train_labels": train_raw.labels.astype(np.float64),
        "query_features": test_raw.features}))
    t0 = time.perf_counter()
    ch.send(MessageType.PREDICT_REQUEST, 0, client_id, payload)
    _, tensors = transport.recv_params(ch, MessageType.PREDICT_RESPONSE, timeout)
    elapsed = time.perf_counter() - t0
    ch.close()
    preds = tensors["predictions"].astype(np.int64)
    metrics = classification_metrics(test_raw.labels, preds, shard.num_classes)
    return {"client_id": client_id, "response_time": elapsed, "metrics": metrics.to_dict(),
            "n_train": len(train_raw), "n_test": len(test_raw)}


def run_cloud_baseline(dataset_or_shards, round_config: RoundConfig, n_clients: int | None = None,
                       seed: int = 0, *, link: LinkModel | None = DEFAULT_LINK,
                       stratified: bool = True) -> ExperimentReport:
    """Cloud-only framework in process: raw shards go to the server, answers come back.

    Takes either the full dataset (split exactly as :func:`simulate` splits
    it for the star scenario) or a ready list of client shards.
    """
    config = replace(round_config, seed=seed)
    if isinstance(dataset_or_shards, Dataset):
        if n_clients is None:
            raise ConfigurationError("n_clients is required when passing a whole dataset")
        pool, _ = carve_global_set(dataset_or_shards, config.test_fraction, seed)
        shards = split_shards(pool, n_clients, stratified, seed)
    else:
        shards = list(dataset_or_shards)
    n = len(shards)
    class_names = shards[0].class_names
    pairs = [transport.loopback_pair(link) for _ in range(n)]

    def client(i):
        lc = client_learner(config.learner, seed, i + 1)
        return lambda: run_cloud_client(pairs[i][1], shards[i], i + 1, config.test_fraction, lc.seed,
                                        config.timeout)

    results = _run_threads([lambda: run_cloud_server([a for a, _ in pairs], config.learner, class_names,
                                                     config.timeout, seed)]
                           + [client(i) for i in range(n)])
    server: CloudServerResult = results[0]
    report = ExperimentReport(mode="cloud-only", seed=seed, config=config.to_dict())
    report.config["clients"] = n
    report.timing = server.timing
    for res in results[1:]:
        report.nodes[res["client_id"]] = res
    report.response_times["cloud"] = _stats([r["response_time"] for r in results[1:]])
    accs = {k: float(np.mean([r["metrics"][k] for r in results[1:]]))
            for k in ("accuracy", "precision", "recall", "f1")}
    report.final_metrics = MetricsReport(loss=0.0, **accs)
    report.received = server.received
    return report


def join_reports(cfl, cloud) -> dict:
    """Side-by-side metrics and response times of a CFL run and the cloud baseline.

    Accepts :class:`ExperimentReport` objects or their ``to_dict()`` form.
    """
    cfl = cfl.to_dict() if isinstance(cfl, ExperimentReport) else cfl
    cloud = cloud.to_dict() if isinstance(cloud, ExperimentReport) else cloud
    cfl_rt = (cfl.get("response_times") or {}).get("cfl")
    cloud_rt = (cloud.get("response_times") or {}).get("cloud")
    ratio = None
    if cfl_rt and cloud_rt and cloud_rt["mean"] > 0:
        ratio = cfl_rt["mean"] / cloud_rt["mean"]
    local = [n["global_metrics"] for n in cfl.get("nodes", {}).values() if n.get("global_metrics")]
    keys = ("accuracy", "precision", "recall", "f1")
    cfl_avg = {k: float(np.mean([m[k] for m in local])) for k in keys} if local else None
    return {
        "cfl": {"response_time": cfl_rt, "client_metrics_mean": cfl_avg,
                "global_metrics": cfl.get("final_metrics")},
        "cloud_only": {"response_time": cloud_rt, "client_metrics_mean": cloud.get("final_metrics")},
        "response_time_ratio": ratio,
        "response_time_reduction": (1.0 - ratio) if ratio is not None else None,
    }


# ---------------------------------------------------------------------------
# diagnostics


def convergence_diagnostics(loss_series: Sequence[float], grad_norm_series: Sequence[float | None],
                            window: int = 3) -> dict:
    """Running mean of squared global-gradient norms, (1/R) * sum_r ||grad L(m^r)||^2,
    and whether the norms fall from the first ``window`` rounds to the last."""
    grads = [g for g in grad_norm_series if g is not None]
    out: dict = {"rounds": len(loss_series), "loss": [float(x) for x in loss_series]}
    if len(grads) < window:
        out.update(note="insufficient data: fewer than %d rounds with gradient norms" % window,
                   running_mean=[], trend=None, decreasing=None)
        return out
    g = np.asarray(grads, dtype=float)
    running = np.cumsum(g) / np.arange(1, g.size + 1)
    first, last = float(g[:window].mean()), float(g[-window:].mean())
    if first == last:
        trend = "flat"
    elif last < first:
        trend = "decreasing"
    else:
        trend = "non-decreasing"
    out.update(running_mean=[float(x) for x in running], mean_grad_norm_sq=float(running[-1]),
               first_window_mean=first, last_window_mean=last, trend=trend, decreasing=last < first,
               note=None)
    return out
