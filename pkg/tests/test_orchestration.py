from __future__ import annotations

import json
import socket
import threading
from dataclasses import replace

import numpy as np
import pytest

from fedcrop import transport
from fedcrop.data import split_shards, train_test_split
from fedcrop.errors import ConfigurationError, ConnectionLost, RoundSyncError
from fedcrop.learner import LearnerConfig, init_model, train_local
from fedcrop.orchestration import (FINAL_ROUND, RoundConfig, carve_global_set, client_learner, convergence_diagnostics, prepare_local,
                                   run_cfl_client, run_cfl_server, run_cloud_baseline, run_dfl_node,
                                   run_local_baseline, sample_clients, simulate)
from fedcrop.topology import NodeAddress, Topology
from fedcrop.transport import MessageType, loopback_pair

from conftest import blobs

FAST = LearnerConfig(hidden_size=8, dense_sizes=(8, 8), num_classes=4, epochs=2, learning_rate=0.01)


def run_star(shards, config, eval_set, learners=None):
    """Server plus one thread per client over loopback; returns (report, client results)."""
    pairs = [loopback_pair() for _ in shards]
    learners = learners or [config.learner] * len(shards)
    results = [None] * len(shards)

    def client(i):
        results[i] = run_cfl_client(pairs[i][1], shards[i], learners[i], client_id=i + 1,
                                    test_fraction=config.test_fraction, timeout=config.timeout)

    threads = [threading.Thread(target=client, args=(i,)) for i in range(len(shards))]
    for t in threads:
        t.start()
    report = run_cfl_server(config, [a for a, _ in pairs], eval_set)
    for t in threads:
        t.join()
    return report, results


# CFL -----------------------------------------------------------------------


def test_single_client_global_equals_its_update():
    ds = blobs()
    cfg = RoundConfig(rounds=1, expected_clients=1, learner=FAST, stop_delta=None)
    report, (res,) = run_star([ds], cfg, ds)
    assert report.error is None
    assert report.final_params.bit_equal(res.params)
    assert res.global_params.bit_equal(res.params)


def test_single_client_matches_direct_training():
    ds = blobs(seed=3)
    cfg = RoundConfig(rounds=1, expected_clients=1, learner=FAST, stop_delta=None)
    report, (res,) = run_star([ds], cfg, ds)
    train, _, _ = prepare_local(ds, cfg.test_fraction, FAST.seed)
    direct = train_local(init_model(FAST, cfg.seed), train, FAST, np.random.default_rng(FAST.seed))
    assert res.params.bit_equal(direct.params)


def test_identical_clients_reach_bit_exact_consensus():
    ds = blobs(seed=1)
    cfg = RoundConfig(rounds=2, expected_clients=3, learner=FAST, stop_delta=None)
    report, results = run_star([ds] * 3, cfg, ds)
    for res in results:
        assert res.params.bit_equal(report.final_params)


def test_release_before_any_round_keeps_initial_model(tmp_path):
    ds = blobs()
    cfg = RoundConfig(rounds=0, expected_clients=1, learner=FAST)
    a, b = loopback_pair()
    t = threading.Thread(target=run_cfl_server, args=(cfg, [a], ds))
    t.start()
    res = run_cfl_client(b, ds, FAST, save_dir=tmp_path)
    t.join()
    saved = transport.decode_params((tmp_path / "model.flmu").read_bytes())
    assert saved.bit_equal(init_model(FAST))
    assert res.rounds_trained == []


def test_zero_learning_rate_client_returns_global():
    ds = blobs()
    frozen = FAST.replace(learning_rate=0.0)
    cfg = RoundConfig(rounds=2, expected_clients=2, learner=FAST, stop_delta=None)
    report, results = run_star([ds, ds], cfg, ds, learners=[FAST, frozen])
    assert report.error is None
    # the frozen client hands back exactly what it was sent in its last round
    assert results[1].params.bit_equal(report_params_before_last_round(ds, cfg, [FAST, frozen]))


def report_params_before_last_round(ds, cfg, learners):
    one_less = replace(cfg, rounds=cfg.rounds - 1)
    report, _ = run_star([ds, ds], one_less, ds, learners)
    return report.final_params


def test_partial_participation():
    assert RoundConfig(client_fraction=0.5, expected_clients=10).clients_per_round == 5
    assert RoundConfig(client_fraction=0.25, expected_clients=10).clients_per_round == 3
    assert RoundConfig(client_fraction=0.01, expected_clients=10).clients_per_round == 1
    chosen = sample_clients(np.random.default_rng(0), 10, 5)
    assert chosen == sorted(set(chosen)) and len(chosen) == 5
    shards = split_shards(blobs(n_per_class=40), 4, seed=0)
    cfg = RoundConfig(rounds=3, expected_clients=4, client_fraction=0.5, learner=FAST, stop_delta=None)
    report, results = run_star(shards, cfg, blobs(seed=9))
    assert report.error is None
    assert sum(len(r.rounds_trained) for r in results) == 3 * 2


@pytest.mark.parametrize("fraction", [0.0, 1.5])
def test_invalid_fraction(fraction):
    with pytest.raises(ConfigurationError):
        RoundConfig(client_fraction=fraction)


def test_client_disconnect_aborts_cleanly():
    ds = blobs()
    cfg = RoundConfig(rounds=3, expected_clients=1, learner=FAST, timeout=5)
    a, b = loopback_pair()

    def rogue():
        b.send(MessageType.HELLO, 0, 0, b'{"client_id": null}')
        b.recv(timeout=5)  # HELLO reply
        b.recv(timeout=5)  # round-1 params
        b.close()

    t = threading.Thread(target=rogue)
    t.start()
    report = run_cfl_server(cfg, [a], ds)
    t.join()
    assert report.error and "ConnectionLost" in report.error
    assert report.executed_rounds == 0


def test_missing_update_times_out():
    ds = blobs()
    cfg = RoundConfig(rounds=2, expected_clients=1, learner=FAST, timeout=0.2)
    a, b = loopback_pair()
    b.send(MessageType.HELLO, 0, 0, b"{}")
    report = run_cfl_server(cfg, [a], ds)
    assert report.error.startswith("RoundTimeout")


def test_stale_round_is_dropped(caplog):
    ds = blobs()
    cfg = RoundConfig(rounds=1, expected_clients=1, learner=FAST, stop_delta=None)
    a, b = loopback_pair()
    out = {}

    def client():
        b.send(MessageType.HELLO, 0, 1, b'{"client_id": 1}')
        b.recv(timeout=5)
        frame, params = transport.recv_params(b, MessageType.MODEL_PARAMS, timeout=5)
        stale = params.with_vector(params.to_vector() + 1.0)
        transport.send_params(b, stale, MessageType.MODEL_UPDATE, 0, 1)
        transport.send_params(b, params, MessageType.MODEL_UPDATE, frame.round, 1)
        b.send(MessageType.METRICS_REPORT, frame.round, 1,
               transport.encode_report({"loss": 1.0, "n": 1, "epoch_losses": [1.0]}))
        out["sent"] = params
        b.recv(timeout=5)  # RELEASE
        b.send(MessageType.METRICS_REPORT, FINAL_ROUND, 1,
               transport.encode_report({"client_id": 1}))

    t = threading.Thread(target=client)
    t.start()
    with caplog.at_level("WARNING"):
        report = run_cfl_server(cfg, [a], ds)
    t.join()
    assert report.error is None
    assert report.final_params.bit_equal(out["sent"])
    assert "dropping" in caplog.text


def test_schema_mismatch_aborts_client():
    ds = blobs()
    cfg = RoundConfig(rounds=1, expected_clients=1, learner=FAST)
    other = FAST.replace(hidden_size=4)
    a, b = loopback_pair()
    t = threading.Thread(target=run_cfl_server, args=(cfg, [a], ds))
    t.start()
    with pytest.raises(Exception):
        run_cfl_client(b, ds, other, timeout=5)
    t.join()


def test_tcp_matches_loopback():
    ds = blobs(n_per_class=40)
    shards = split_shards(ds, 2, seed=0)
    cfg = RoundConfig(rounds=2, expected_clients=2, learner=FAST, stop_delta=None)
    loop_report, _ = run_star(shards, cfg, ds)

    listener = transport.TcpListener("127.0.0.1", 0)
    host, port = listener.address
    results = {}

    def client(i):
        results[i] = run_cfl_client(f"{host}:{port}", shards[i], FAST, client_id=i + 1, timeout=30)

    threads = [threading.Thread(target=client, args=(i,)) for i in range(2)]
    for t in threads:
        t.start()
    tcp_report = run_cfl_server(cfg, listener, ds)
    for t in threads:
        t.join()
    listener.close()
    assert tcp_report.error is None
    assert tcp_report.final_params.bit_equal(loop_report.final_params)
    assert tcp_report.loss_series() == loop_report.loss_series()


# DFL -----------------------------------------------------------------------


def run_dfl(kind, shards, cfg):
    topo = Topology(kind, len(shards))
    links = {i: {} for i in range(len(shards))}
    for i in range(len(shards)):
        for j in topo.neighbors(i):
            if i < j:
                links[i][j], links[j][i] = loopback_pair()
    results = [None] * len(shards)
    errors = []

    def node(i):
        try:
            results[i] = run_dfl_node(i, topo, shards[i], cfg[i] if isinstance(cfg, list) else cfg, links[i],
                                      keep_history=True)
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=node, args=(i,)) for i in range(len(shards))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results, errors


def test_three_node_ring_equals_mesh():
    shards = split_shards(blobs(n_per_class=30), 3, seed=0)
    cfg = RoundConfig(rounds=2, learner=FAST)
    ring, _ = run_dfl("ring", shards, cfg)
    mesh, _ = run_dfl("mesh", shards, cfg)
    for a, b in zip(ring, mesh):
        assert all(x.bit_equal(y) for x, y in zip(a.history, b.history))


def test_identical_nodes_stay_identical():
    ds = blobs()
    ring, _ = run_dfl("ring", [ds] * 4, RoundConfig(rounds=2, learner=FAST))
    for r in range(2):
        assert all(res.history[r].bit_equal(ring[0].history[r]) for res in ring)


def test_mesh_node_records_neighbours():
    ds = blobs()
    mesh, _ = run_dfl("mesh", [ds] * 4, RoundConfig(rounds=1, learner=FAST))
    assert [len(r.neighbors) for r in mesh] == [3, 3, 3, 3]
    assert all(r.exchanges_sent == 3 for r in mesh)
    rep = mesh[0].to_report(RoundConfig(rounds=1, learner=FAST), "mesh")
    assert rep.executed_rounds == 1 and rep.nodes[0]["neighbors"] == [1, 2, 3]


def test_mismatched_rounds_raise_sync_error():
    ds = blobs()
    cfgs = [RoundConfig(rounds=2, learner=FAST, timeout=2)] * 2 + [RoundConfig(rounds=3, learner=FAST, timeout=2)]
    _, errors = run_dfl("ring", [ds] * 3, cfgs)
    assert errors and all(isinstance(e, (RoundSyncError, ConnectionLost)) for e in errors)
    assert any(isinstance(e, RoundSyncError) for e in errors)


def test_silent_neighbour_times_out():
    ds = blobs()
    topo = Topology("ring", 3)
    links = {1: loopback_pair(), 2: loopback_pair()}
    hello = json.dumps({"rounds": 1, "kind": "ring", "schema": init_model(FAST).schema_id}).encode()
    for j, (_, far) in links.items():
        far.send(MessageType.HELLO, 0, j, hello)
    with pytest.raises(RoundSyncError):
        run_dfl_node(0, topo, ds, RoundConfig(rounds=1, learner=FAST, timeout=0.3),
                     {j: near for j, (near, _) in links.items()})


def test_dfl_over_tcp(tmp_path):
    ports = []
    for _ in range(3):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        ports.append(s.getsockname()[1])
        s.close()
    topo = Topology("ring", 3, tuple(NodeAddress(i, "127.0.0.1", p) for i, p in enumerate(ports)))
    shards = split_shards(blobs(n_per_class=30), 3, seed=0)
    cfg = RoundConfig(rounds=2, learner=FAST, timeout=20)
    out = [None] * 3
    threads = [threading.Thread(target=lambda i=i: out.__setitem__(i, run_dfl_node(i, topo, shards[i], cfg,
                                                                                     keep_history=True)))
               for i in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    loop, _ = run_dfl("ring", shards, cfg)
    for a, b in zip(out, loop):
        assert a.params.bit_equal(b.params)


# simulate / baselines ------------------------------------------------------


def test_simulate_is_deterministic(crop):
    cfg = RoundConfig(rounds=2, learner=LearnerConfig(hidden_size=8, dense_sizes=(8, 8), epochs=1))
    a = simulate("star", 3, crop, cfg, seed=4, link=None)
    b = simulate("star", 3, crop, cfg, seed=4, link=None)
    assert a.series_csv(include_timing=False) == b.series_csv(include_timing=False)
    assert a.to_json(include_timing=False) == b.to_json(include_timing=False)
    c = simulate("star", 3, crop, cfg, seed=5, link=None)
    assert c.series_csv(include_timing=False) != a.series_csv(include_timing=False)


def test_simulate_rejects_small_ring(crop):
    with pytest.raises(ConfigurationError):
        simulate("ring", 2, crop, RoundConfig(rounds=1))
    with pytest.raises(ConfigurationError):
        simulate("torus", 4, crop, RoundConfig(rounds=1))


def test_simulate_dfl_report_structure(crop):
    cfg = RoundConfig(rounds=2, learner=LearnerConfig(hidden_size=8, dense_sizes=(8, 8), epochs=1))
    rep = simulate("mesh", 4, crop, cfg, seed=0, link=None)
    assert rep.executed_rounds == 2
    assert set(rep.nodes) == {0, 1, 2, 3}
    assert rep.config["topology"]["exchanges_per_round"] == 12
    assert all(len(r.node_metrics) == 4 for r in rep.rounds)


def test_simulate_ring3_equals_mesh3(crop):
    cfg = RoundConfig(rounds=2, learner=LearnerConfig(hidden_size=8, dense_sizes=(8, 8), epochs=1))
    ring = simulate("ring", 3, crop, cfg, seed=1, link=None)
    mesh = simulate("mesh", 3, crop, cfg, seed=1, link=None)
    assert ring.series_csv(False) == mesh.series_csv(False)


def test_early_stop_records_round():
    ds = blobs()
    cfg = RoundConfig(rounds=6, expected_clients=1, learner=FAST.replace(learning_rate=0.0), stop_delta=0.5)
    report, _ = run_star([ds], cfg, ds)
    assert report.stopped_early_at == 3
    assert report.executed_rounds == 3


def test_cloud_baseline_moves_every_row(crop):
    cfg = RoundConfig(rounds=1, learner=LearnerConfig(hidden_size=8, dense_sizes=(8, 8), epochs=1))
    rep = run_cloud_baseline(crop, cfg, 3, seed=0, link=None)
    pool, _ = carve_global_set(crop, cfg.test_fraction, 0)
    shards = split_shards(pool, 3, True, 0)
    uploaded = set()
    for d in rep.received:
        uploaded |= d.rows()
    expected = set()
    for i, s in enumerate(shards):
        expected |= train_test_split(s, cfg.test_fraction, client_learner(cfg.learner, 0, i + 1).seed)[0].rows()
    assert uploaded == expected
    stats = rep.response_times["cloud"]
    assert stats["mean"] > 0 and len(stats["per_client"]) == 3
    assert set(rep.final_metrics.to_dict()) == {"accuracy", "precision", "recall", "f1", "loss"}


def test_local_baseline(crop):
    _, global_set = carve_global_set(crop, 0.2, 0)
    rep = run_local_baseline(global_set, LearnerConfig(hidden_size=8, dense_sizes=(8, 8), epochs=3))
    assert len(rep.epoch_losses) == 3
    assert 0 <= rep.final_metrics.accuracy <= 1


# diagnostics ---------------------------------------------------------------


def test_diagnostic_flat_for_zero_gradients():
    d = convergence_diagnostics([0.0] * 5, [0.0] * 5)
    assert d["mean_grad_norm_sq"] == 0.0 and d["trend"] == "flat"


def test_diagnostic_flags_increasing_norms():
    d = convergence_diagnostics([1.0] * 6, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    assert d["trend"] == "non-decreasing" and d["decreasing"] is False
    assert d["running_mean"] == [1.0, 1.5, 2.0, 2.5, 3.0, 3.5]


def test_diagnostic_decreasing():
    d = convergence_diagnostics([1.0] * 6, [6.0, 5.0, 4.0, 3.0, 2.0, 1.0])
    assert d["trend"] == "decreasing"
    assert d["first_window_mean"] == 5.0 and d["last_window_mean"] == 2.0


def test_diagnostic_needs_three_rounds():
    d = convergence_diagnostics([1.0, 0.5], [1.0, 0.5])
    assert "insufficient" in d["note"] and d["trend"] is None
