from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from numpy.typing import ArrayLike, NDArray

from gridmin.errors import (
    DisconnectedNetworkError,
    NetworkSchemaError,
    SupplyDeficitError,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

PathLike = Union[str, Path]
Edge = Tuple[int, int]


def _frozen(values: ArrayLike) -> NDArray[np.float64]:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PowerNetwork:
    """
    Power network on a connected graph.

    Nodes are numbered 1..n_V; the first ``n_plus`` nodes supply power, the
    remaining ones consume it. Demands are stored positive. Arrays are made
    read-only so an instance can be shared between concurrent evaluations.
    """

    edges: Tuple[Edge, ...]
    weights: NDArray[np.float64]
    inertias: NDArray[np.float64]
    dampings: NDArray[np.float64]
    noise: NDArray[np.float64]
    p_max: NDArray[np.float64]
    p_demand: NDArray[np.float64]
    name: str = "network"
    _graph: nx.Graph = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "edges", tuple((int(i), int(j)) for i, j in self.edges))
        for attr in ("weights", "inertias", "dampings", "noise", "p_max", "p_demand"):
            object.__setattr__(self, attr, _frozen(getattr(self, attr)))
        self._validate()

    # ------------------------------------------------------------------ #
    # Sizes
    # ------------------------------------------------------------------ #
    @property
    def n_V(self) -> int:
        return len(self.inertias)

    @property
    def n_E(self) -> int:
        return len(self.edges)

    @property
    def n_plus(self) -> int:
        return len(self.p_max)

    @property
    def p_sum_demand(self) -> float:
        return float(self.p_demand.sum())

    @property
    def graph(self) -> nx.Graph:
        return self._graph

    # ------------------------------------------------------------------ #
    # Validation
    # ------------------------------------------------------------------ #
    def _validate(self) -> None:
        n_V = self.n_V
        if self.n_plus < 2:
            raise NetworkSchemaError(
                f"At least two supply nodes are required, got {self.n_plus}"
            )
        if self.n_plus + len(self.p_demand) != n_V:
            raise NetworkSchemaError(
                f"{self.n_plus} supply + {len(self.p_demand)} demand nodes "
                f"do not add up to {n_V} nodes"
            )
        for attr in ("dampings", "noise"):
            if len(getattr(self, attr)) != n_V:
                raise NetworkSchemaError(f"'{attr}' must have one entry per node")
        if len(self.weights) != self.n_E:
            raise NetworkSchemaError("'weights' must have one entry per edge")
        if self.n_E == 0:
            raise NetworkSchemaError("Network has no edges")

        for k, (i, j) in enumerate(self.edges, start=1):
            if not (1 <= i <= n_V and 1 <= j <= n_V):
                raise NetworkSchemaError(f"Edge {k} ({i}, {j}) references an unknown node")
            if i == j:
                raise NetworkSchemaError(f"Edge {k} is a self-loop on node {i}")

        if np.any(self.weights <= 0):
            raise NetworkSchemaError("All line weights must be strictly positive")
        if np.any(self.inertias <= 0):
            raise NetworkSchemaError("All inertias must be strictly positive")
        for attr in ("dampings", "noise", "p_max", "p_demand"):
            if np.any(getattr(self, attr) < 0):
                raise NetworkSchemaError(f"'{attr}' must be nonnegative")

        graph = nx.Graph()
        graph.add_nodes_from(range(1, n_V + 1))
        graph.add_edges_from(self.edges)
        if not nx.is_connected(graph):
            components = [sorted(c) for c in nx.connected_components(graph)]
            logger.warning("Network %s has %d islands", self.name, len(components))
            raise DisconnectedNetworkError(
                f"Network graph is disconnected; components: {components}"
            )
        object.__setattr__(self, "_graph", graph)

        if self.p_max.sum() < self.p_sum_demand:
            raise SupplyDeficitError(
                f"Total supply capacity {self.p_max.sum():g} is below "
                f"total demand {self.p_sum_demand:g}"
            )

    # ------------------------------------------------------------------ #
    # Constructors
    # ------------------------------------------------------------------ #
    @classmethod
    def from_arrays(
        cls,
        edges: Sequence[Edge],
        weights: ArrayLike,
        inertias: ArrayLike,
        dampings: ArrayLike,
        noise: ArrayLike,
        p_max: ArrayLike,
        p_demand: ArrayLike,
        name: str = "network",
    ) -> "PowerNetwork":
        return cls(
            edges=tuple(edges),
            weights=np.asarray(weights, dtype=float),
            inertias=np.asarray(inertias, dtype=float),
            dampings=np.asarray(dampings, dtype=float),
            noise=np.asarray(noise, dtype=float),
            p_max=np.asarray(p_max, dtype=float),
            p_demand=np.asarray(p_demand, dtype=float),
            name=name,
        )

    def flipped(self, edge: int) -> "PowerNetwork":
        """Copy of the network with edge ``edge`` (1-based) reversed."""
        edges = list(self.edges)
        i, j = edges[edge - 1]
        edges[edge - 1] = (j, i)
        return self.with_changes(edges=tuple(edges))

    def with_changes(self, **changes: Any) -> "PowerNetwork":
        values: Dict[str, Any] = {
            "edges": self.edges,
            "weights": self.weights,
            "inertias": self.inertias,
            "dampings": self.dampings,
            "noise": self.noise,
            "p_max": self.p_max,
            "p_demand": self.p_demand,
            "name": self.name,
        }
        values.update(changes)
        return PowerNetwork(**values)

    # ------------------------------------------------------------------ #
    # Derived quantities
    # ------------------------------------------------------------------ #
    def injection(self, p_s: ArrayLike) -> NDArray[np.float64]:
        """
        Full nodal injection [p_s, p_{n_plus}, -p_demand].

        The last supply node covers whatever the decision vector leaves open.
        """
        p_s = np.asarray(p_s, dtype=float)
        last = self.p_sum_demand - p_s.sum()
        return np.concatenate([p_s, [last], -self.p_demand])

    def to_document(self) -> Dict[str, Any]:
        nodes: List[Dict[str, Any]] = []
        for idx in range(self.n_V):
            node: Dict[str, Any] = {
                "id": idx + 1,
                "role": "supply" if idx < self.n_plus else "demand",
                "inertia": float(self.inertias[idx]),
                "damping": float(self.dampings[idx]),
                "noise": float(self.noise[idx]),
            }
            if idx < self.n_plus:
                node["p_max"] = float(self.p_max[idx])
            else:
                node["demand"] = float(self.p_demand[idx - self.n_plus])
            nodes.append(node)
        edges = [
            {"from": i, "to": j, "weight": float(w)}
            for (i, j), w in zip(self.edges, self.weights)
        ]
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "nodes": nodes,
            "edges": edges,
        }


def incidence_matrix(net: PowerNetwork) -> NDArray[np.float64]:
    """
    Node-by-edge incidence matrix: +1 at the first endpoint, -1 at the second.

    :param net: Power network
    :return: Matrix of shape (n_V, n_E)
    """
    B = np.zeros((net.n_V, net.n_E))
    for k, (i, j) in enumerate(net.edges):
        B[i - 1, k] = 1.0
        B[j - 1, k] = -1.0
    return B


# ------------------------------------------------------------------ #
# Loading
# ------------------------------------------------------------------ #
def _require(mapping: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in mapping:
        raise NetworkSchemaError(f"{where} is missing required field '{key}'")
    return mapping[key]


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise NetworkSchemaError(f"{where} must be a number, got {value!r}")
    return float(value)


def network_from_document(doc: Mapping[str, Any]) -> PowerNetwork:
    if not isinstance(doc, Mapping):
        raise NetworkSchemaError("Network document must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise NetworkSchemaError(
            f"Unsupported schema_version {version!r} (expected {SCHEMA_VERSION})"
        )

    raw_nodes = _require(doc, "nodes", "network")
    raw_edges = _require(doc, "edges", "network")
    if not isinstance(raw_nodes, list) or not isinstance(raw_edges, list):
        raise NetworkSchemaError("'nodes' and 'edges' must be arrays")

    nodes = sorted(raw_nodes, key=lambda n: _require(n, "id", "node"))
    ids = [n["id"] for n in nodes]
    if ids != list(range(1, len(nodes) + 1)):
        raise NetworkSchemaError(f"Node ids must be 1..{len(nodes)} without gaps, got {ids}")

    roles = [_require(n, "role", f"node {n['id']}") for n in nodes]
    for node_id, role in zip(ids, roles):
        if role not in ("supply", "demand"):
            raise NetworkSchemaError(f"Node {node_id} has unknown role {role!r}")
    n_plus = roles.count("supply")
    if roles != ["supply"] * n_plus + ["demand"] * (len(roles) - n_plus):
        raise NetworkSchemaError(
            "Supply nodes must occupy ids 1..n_plus; interleaved roles are rejected"
        )

    inertias, dampings, noise, p_max, p_demand = [], [], [], [], []
    for node in nodes:
        where = f"node {node['id']}"
        inertias.append(_number(_require(node, "inertia", where), f"{where} inertia"))
        dampings.append(_number(_require(node, "damping", where), f"{where} damping"))
        noise.append(_number(_require(node, "noise", where), f"{where} noise"))
        if node["role"] == "supply":
            p_max.append(_number(_require(node, "p_max", where), f"{where} p_max"))
        else:
            p_demand.append(_number(_require(node, "demand", where), f"{where} demand"))

    edges: List[Edge] = []
    weights: List[float] = []
    for k, edge in enumerate(raw_edges, start=1):
        where = f"edge {k}"
        i = _require(edge, "from", where)
        j = _require(edge, "to", where)
        if not isinstance(i, int) or not isinstance(j, int):
            raise NetworkSchemaError(f"{where} endpoints must be integer node ids")
        edges.append((i, j))
        weights.append(_number(_require(edge, "weight", where), f"{where} weight"))

    return PowerNetwork.from_arrays(
        edges=edges,
        weights=weights,
        inertias=inertias,
        dampings=dampings,
        noise=noise,
        p_max=p_max,
        p_demand=p_demand,
        name=str(doc.get("name", "network")),
    )


def load_network(source: Union[PathLike, Mapping[str, Any]]) -> PowerNetwork:
    """
    Load and validate a network document.

    :param source: Path to a JSON file, ``bundled:<name>`` or an already parsed document
    :return: Validated PowerNetwork
    """
    if isinstance(source, Mapping):
        return network_from_document(source)

    text = str(source)
    if text.startswith("bundled:"):
        return load_bundled_network(text.split(":", 1)[1])

    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"Network file does not exist: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise NetworkSchemaError(f"{path} is not valid JSON: {e}") from e
    net = network_from_document(doc)
    logger.info("Loaded network %s (%d nodes, %d lines) from %s", net.name, net.n_V, net.n_E, path)
    return net


def load_bundled_network(name: str) -> PowerNetwork:
    resource = resources.files("gridmin").joinpath("data").joinpath(f"{name}.json")
    if not resource.is_file():
        raise FileNotFoundError(f"No bundled network named '{name}'")
    return network_from_document(json.loads(resource.read_text(encoding="utf-8")))
