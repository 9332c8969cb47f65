"""Strict JSON run configuration.

One JSON document per run, with up to five sections: ``env``, ``dataset``,
``morse``, ``agent``, ``ablation``.  Unknown sections or keys are errors
rather than warnings; a silently ignored typo ("n_stpes") can corrupt a
multi-hour sweep.  Value ranges are NOT checked here; the constructors that
consume them (EnvSpec, MorseNet, TD3BST, ...) own those checks.

Relative file paths inside a config resolve against the directory containing
the config file, so a config can ship next to its data.
"""

import json
from pathlib import Path

from .envs import EnvSpec
from .errors import ConfigError

__all__ = [
    "SECTION_KEYS",
    "load_config",
    "env_spec_from",
    "section_params",
    "resolve_path",
]

SECTION_KEYS = {
    "env": {"kind", "layout", "horizon", "step_scale", "goal_radius"},
    "dataset": {
        "path",
        "n_transitions",
        "n_episodes",
        "noise_scale",
        "waypoint_radius",
    },
    "morse": {
        "path",
        "kernel",
        "scale",
        "mixture",
        "hidden_layers",
        "hidden_units",
        "n_steps",
        "batch_size",
        "learning_rate",
        "n_uniform",
        "normalize_states",
    },
    "agent": {
        "path",
        "kind",
        "weighting",
        "regularizer",
        "mu",
        "gamma",
        "rho",
        "policy_delay",
        "n_steps",
        "batch_size",
        "learning_rate",
        "hidden_layers",
        "hidden_units",
        "n_critics",
        "q_aggregation",
        "noise_sigma",
        "noise_clip",
        "fixed_alpha",
        "eval_every",
        "eval_episodes",
    },
    "ablation": {"variable", "values", "n_seeds", "eval_episodes"},
}

# Keys that name files or select code paths rather than estimator parameters.
_NON_PARAM_KEYS = {"path", "kind", "weighting"}


def load_config(path) -> dict:
    """Parses and structurally validates a config file.

    Returns the raw nested dict.  Missing file, malformed JSON, a non-object
    top level, unknown sections, and unknown keys all raise ConfigError
    naming the offender.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object at top level")
    for section, body in raw.items():
        if section not in SECTION_KEYS:
            raise ConfigError(
                f"unknown config section {section!r}; "
                f"expected one of {sorted(SECTION_KEYS)}"
            )
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        unknown = set(body) - SECTION_KEYS[section]
        if unknown:
            raise ConfigError(
                f"unknown key(s) {sorted(unknown)} in section {section!r}; "
                f"allowed: {sorted(SECTION_KEYS[section])}"
            )
    return raw


def env_spec_from(config: dict) -> EnvSpec:
    """Builds the environment spec; the ``env`` section is required."""
    if "env" not in config:
        raise ConfigError("config is missing the required 'env' section")
    return EnvSpec(**config["env"])


def section_params(config: dict, section: str) -> dict:
    """Estimator keyword arguments from a section, bookkeeping keys removed."""
    body = dict(config.get(section, {}))
    for key in _NON_PARAM_KEYS:
        body.pop(key, None)
    return body


def resolve_path(config_path, value) -> Path:
    """Resolves a path from a config relative to the config's directory."""
    p = Path(value)
    if p.is_absolute():
        return p
    return (Path(config_path).parent / p).resolve()
