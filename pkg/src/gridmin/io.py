from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from gridmin.errors import InputError
from gridmin.network import SCHEMA_VERSION, PowerNetwork
from gridmin.objective import ObjectiveEvaluation

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def result_document(
    net: PowerNetwork,
    ev: ObjectiveEvaluation,
    method: str,
    summary: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Result of a run: optimal decision vector, full dispatch including the last
    supply node, objective value and per-edge terms.
    """
    injection = net.injection(ev.p)
    doc: Dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "network": net.name,
        "method": method,
        "p_s": [float(v) for v in ev.p],
        "dispatch": [float(v) for v in injection[: net.n_plus]],
        "injection": [float(v) for v in injection],
    }
    doc.update(ev.to_dict(net))
    if summary:
        doc["summary"] = {k: v for k, v in summary.items() if v is not None}
    return doc


def write_json(doc: Dict[str, Any], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_result_point(path: PathLike) -> NDArray[np.float64]:
    """The decision vector ``p_s`` stored in a result document."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Result file does not exist: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("schema_version") != SCHEMA_VERSION or "p_s" not in doc:
        raise InputError(f"{path} is not a result document")
    return np.array(doc["p_s"], dtype=float)


def parse_vector(text: str) -> NDArray[np.float64]:
    """Parse ``v1,v2,...``."""
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()], dtype=float)
    except ValueError as e:
        raise InputError(f"Cannot parse vector {text!r}: {e}") from e


def format_vector(p: ArrayLike) -> str:
    return ",".join(f"{v:.10g}" for v in np.asarray(p, dtype=float))
