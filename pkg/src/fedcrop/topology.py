"""Star, ring and mesh neighbour sets, and the topology JSON file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

KINDS = ("star", "ring", "mesh")


@dataclass(frozen=True)
class NodeAddress:
    id: int
    address: str = "127.0.0.1"
    port: int = 0


@dataclass(frozen=True)
class Topology:
    """``node_count`` nodes with ids ``0..n-1``.

    For ``star`` node 0 is the server and the rest are clients. Ring order
    follows id order.
    """

    kind: str
    node_count: int
    nodes: tuple[NodeAddress, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown topology kind {self.kind!r}")
        minimum = 2 if self.kind == "star" else 3
        if self.node_count < minimum:
            raise ConfigurationError(f"{self.kind} topology needs at least {minimum} nodes, got {self.node_count}")
        if self.nodes and len(self.nodes) != self.node_count:
            raise ConfigurationError("node list length does not match node_count")

    def neighbors(self, node_id: int) -> tuple[int, ...]:
        n = self.node_count
        if not 0 <= node_id < n:
            raise ConfigurationError(f"node id {node_id} outside 0..{n - 1}")
        if self.kind == "ring":
            return tuple(sorted({(node_id - 1) % n, (node_id + 1) % n}))
        if self.kind == "mesh":
            return tuple(j for j in range(n) if j != node_id)
        return tuple(range(1, n)) if node_id == 0 else (0,)

    def exchanges_per_round(self) -> int:
        """Directed model transfers in one round."""
        n = self.node_count
        if self.kind == "ring":
            return 2 * n
        if self.kind == "mesh":
            return n * (n - 1)
        return 2 * (n - 1)

    def address(self, node_id: int) -> NodeAddress:
        if not self.nodes:
            raise ConfigurationError("topology has no node addresses")
        return self.nodes[node_id]

    def to_dict(self) -> dict:
        return {"kind": self.kind,
                "nodes": [{"id": a.id, "address": a.address, "port": a.port} for a in self.nodes]}


def neighbors(topology: Topology, node_id: int) -> tuple[int, ...]:
    return topology.neighbors(node_id)


def exchanges_per_round(topology: Topology) -> int:
    return topology.exchanges_per_round()


def load_topology(path, kind: str | None = None) -> Topology:
    """Read ``{"kind": ..., "nodes": [{"id", "address", "port"}, ...]}``.

    ``kind`` overrides the file's kind (the node list is shared by ring and
    mesh runs).
    """
    try:
        doc = json.loads(Path(path).read_text())
        nodes = sorted((NodeAddress(int(n["id"]), str(n.get("address", "127.0.0.1")), int(n["port"]))
                        for n in doc["nodes"]), key=lambda a: a.id)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigurationError(f"bad topology file {path}: {exc}") from None
    if [a.id for a in nodes] != list(range(len(nodes))):
        raise ConfigurationError("topology node ids must be 0..n-1")
    return Topology(kind or doc.get("kind", "ring"), len(nodes), tuple(nodes))


def save_topology(topology: Topology, path) -> None:
    Path(path).write_text(json.dumps(topology.to_dict(), indent=2))
