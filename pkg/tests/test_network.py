# tests/test_network.py
from __future__ import annotations

import json
from copy import deepcopy
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest

from gridmin.errors import (
    DisconnectedNetworkError,
    NetworkSchemaError,
    SupplyDeficitError,
)
from gridmin.network import (
    PowerNetwork,
    incidence_matrix,
    load_bundled_network,
    load_network,
    network_from_document,
)


@pytest.fixture
def toy_document(toy_network: PowerNetwork) -> Dict[str, Any]:
    return toy_network.to_document()


def test_bundled_network_sizes(two_ring: PowerNetwork) -> None:
    assert two_ring.n_V == 12
    assert two_ring.n_E == 13
    assert two_ring.n_plus == 4
    assert two_ring.p_sum_demand == pytest.approx(80.0)
    assert two_ring.graph.number_of_edges() == 13


def test_network_arrays_are_read_only(two_ring: PowerNetwork) -> None:
    with pytest.raises(ValueError):
        two_ring.weights[0] = 1.0


def test_incidence_matrix_orientation(two_ring: PowerNetwork) -> None:
    B = incidence_matrix(two_ring)

    assert B.shape == (12, 13)
    np.testing.assert_allclose(B.sum(axis=0), 0.0)
    i, j = two_ring.edges[0]
    assert B[i - 1, 0] == 1.0
    assert B[j - 1, 0] == -1.0


def test_injection_balances(two_ring: PowerNetwork) -> None:
    injection = two_ring.injection([23.0, 19.0, 24.0])

    assert injection.sum() == pytest.approx(0.0, abs=1e-12)
    assert injection[3] == pytest.approx(14.0)


def test_document_round_trip(two_ring: PowerNetwork) -> None:
    again = network_from_document(two_ring.to_document())

    assert again.edges == two_ring.edges
    np.testing.assert_array_equal(again.weights, two_ring.weights)
    np.testing.assert_array_equal(again.noise, two_ring.noise)
    np.testing.assert_array_equal(again.p_max, two_ring.p_max)
    np.testing.assert_array_equal(again.p_demand, two_ring.p_demand)


def test_unsorted_node_ids_are_accepted(toy_document: Dict[str, Any]) -> None:
    toy_document["nodes"] = list(reversed(toy_document["nodes"]))

    net = network_from_document(toy_document)

    np.testing.assert_array_equal(net.p_max, [10.0, 10.0])


def test_disconnected_network_is_rejected(toy_document: Dict[str, Any], caplog) -> None:
    doc = deepcopy(toy_document)
    doc["edges"] = [{"from": 1, "to": 3, "weight": 20.0}]

    with pytest.raises(DisconnectedNetworkError):
        network_from_document(doc)
    assert "islands" in caplog.text


def test_supply_deficit_is_rejected(toy_document: Dict[str, Any]) -> None:
    toy_document["nodes"][2]["demand"] = 25.0

    with pytest.raises(SupplyDeficitError):
        network_from_document(toy_document)


def test_interleaved_roles_are_rejected(two_ring: PowerNetwork) -> None:
    doc = two_ring.to_document()
    doc["nodes"][3]["role"] = "demand"
    doc["nodes"][3]["demand"] = 1.0
    doc["nodes"][4]["role"] = "supply"
    doc["nodes"][4]["p_max"] = 30.0

    with pytest.raises(NetworkSchemaError, match="interleaved"):
        network_from_document(doc)


def test_wrong_schema_version(toy_document: Dict[str, Any]) -> None:
    toy_document["schema_version"] = 2

    with pytest.raises(NetworkSchemaError):
        network_from_document(toy_document)


def test_missing_field(toy_document: Dict[str, Any]) -> None:
    del toy_document["nodes"][0]["inertia"]

    with pytest.raises(NetworkSchemaError, match="inertia"):
        network_from_document(toy_document)


def test_nonpositive_weight(toy_document: Dict[str, Any]) -> None:
    toy_document["edges"][0]["weight"] = 0.0

    with pytest.raises(NetworkSchemaError):
        network_from_document(toy_document)


def test_single_supply_node_is_rejected() -> None:
    with pytest.raises(NetworkSchemaError):
        PowerNetwork.from_arrays(
            edges=[(1, 2)],
            weights=[1.0],
            inertias=[1.0, 1.0],
            dampings=[1.0, 1.0],
            noise=[1.0, 1.0],
            p_max=[5.0],
            p_demand=[1.0],
        )


def test_load_network_from_file(tmp_path: Path, toy_document: Dict[str, Any]) -> None:
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(toy_document), encoding="utf-8")

    net = load_network(path)

    assert net.name == "toy"
    assert net.edges == ((1, 3), (2, 3))


def test_load_network_missing_file(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        load_network(tmp_path / "missing.json")


def test_load_network_invalid_json(tmp_path: Path) -> None:
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")

    with pytest.raises(NetworkSchemaError):
        load_network(path)


def test_bundled_prefix() -> None:
    assert load_network("bundled:two_ring_12").n_V == 12
    with pytest.raises(FileNotFoundError):
        load_bundled_network("does_not_exist")


def test_flipped_edge(toy_network: PowerNetwork) -> None:
    flipped = toy_network.flipped(1)

    assert flipped.edges == ((3, 1), (2, 3))
    assert toy_network.edges == ((1, 3), (2, 3))
