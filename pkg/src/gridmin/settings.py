from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# ---------------------------------------------------------
# Settings handling
# ---------------------------------------------------------

DEFAULT_SETTINGS: Dict[str, Any] = {
    "r": 1.0,                    # risk weight of the standard deviation term
    "alpha": 0.3,                # Armijo parameter, 0 < alpha < 0.5
    "beta": 0.5,                 # backtracking factor, 0 < beta < 1
    "gamma": 0.5,                # inner step exponent, 0 < gamma < 1
    "inner_iters": 600,
    "inner_step_scale": None,    # None -> diameter of the capacity box
    "init_iters": 300,           # per phase
    "init_phase1_exp": 0.5,
    "init_phase2_exp": 1.1,
    "init_step_scale": 1.0,
    "eps_stop": 1e-6,
    "eps_active": 1e-3,          # edges this close to the max count as maximizers in descent
    "eps_active_max": 1e-1,
    "stall_limit": 3,            # short steps cut by an outside edge before an eps stop is accepted
    "xi": 0.5,
    "xi_vote": False,            # trial points at 0.25 / 0.5 / 0.75 and take the majority
    "max_iters": 500,
    "max_halvings": 60,
    "delta_fd": 1e-4,
    "richardson_check": False,
    "theta": 0.5,
    "tol_zero": 1e-10,
    "tol_max": 1e-9,
    "tol_fprime": 1e-10,
    "lyapunov_method": "schur",  # schur | kron
    "workers": 1,
    "seed": 0,
}

SETTINGS_LOCATIONS = [
    "/etc/gridmin/settings.json",
    os.path.expanduser("~/.config/gridmin/settings.json"),
    os.path.join(os.getcwd(), "settings.json"),
]


def _read_settings_file(path: PathLike) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"settings file {path} must contain a JSON object")
    return data


def load_settings(path: Optional[PathLike] = None) -> Dict[str, Any]:
    """
    Load settings.json, shallow-merging known keys into DEFAULT_SETTINGS.

    Without ``path`` the first readable file from SETTINGS_LOCATIONS wins; an
    unreadable file is logged and the search continues. An explicit ``path``
    must exist.

    :param path: Optional explicit settings file
    :return: Merged settings dictionary
    """
    settings = DEFAULT_SETTINGS.copy()

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Settings file does not exist: {path}")
        candidates = [str(path)]
    else:
        candidates = SETTINGS_LOCATIONS

    for candidate in candidates:
        if not os.path.exists(candidate):
            continue
        try:
            data = _read_settings_file(candidate)
        except (OSError, ValueError) as e:
            if path is not None:
                raise
            logger.warning("Error reading settings from %s: %s", candidate, e)
            continue

        for key in DEFAULT_SETTINGS.keys():
            if key in data:
                settings[key] = data[key]
        ignored = sorted(set(data) - set(DEFAULT_SETTINGS))
        if ignored:
            logger.debug("Ignoring unknown settings keys %s", ignored)
        logger.info("Loaded settings from %s", candidate)
        break

    return settings
