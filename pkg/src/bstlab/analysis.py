"""Experiment analysis: certainty discrimination, sweeps, and graymaps.

Everything here emits CSV tables (and P5 graymaps) rather than rendered
plots; any plotting tool can consume them.  All sampling is driven by
explicit seeds, and CSV bytes are reproducible for a fixed seed.  The
environment variable BST_THREADS caps worker parallelism for sweep arms
(default 1); threads are used rather than processes because the heavy
lifting happens inside numpy, which releases the GIL.
"""

import csv
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import AGGREGATIONS, TD3BST, evaluate
from .datasets import ReplayDataset, permuted_actions
from .errors import ConfigError
from .morse import MorseNet

__all__ = [
    "SAMPLES_PER_STATE",
    "AblationSpec",
    "analyze_morse",
    "density_fraction",
    "deviation_histogram",
    "ablate_lambda",
    "ablate_cdq",
    "ablate_agent_param",
    "emit_heatmap",
    "write_rows_csv",
]

# Per-state sample count for the permuted/uniform certainty populations.
SAMPLES_PER_STATE = 10

_SWEEP_VARIABLES = ("lambda", "mu", "n_critics", "cdq")

_MORSE_KEYS = set(MorseNet._get_param_names())
_AGENT_KEYS = set(TD3BST._get_param_names())


def _worker_count() -> int:
    raw = os.environ.get("BST_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"BST_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"BST_THREADS must be >= 1, got {n}")
    return n


def _map_jobs(fn, jobs):
    workers = _worker_count()
    if workers == 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_rows_csv(path, fieldnames, rows) -> Path:
    """Writes dict rows as CSV with reproducible float formatting."""
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt(row.get(name)) for name in fieldnames])
    return path


@dataclass(frozen=True)
class AblationSpec:
    """One sweep: a variable, its values, and repetitions per value.

    ``morse_params`` and ``agent_params`` are base estimator settings shared
    by every arm; the swept value and the derived per-arm seeds override
    them.  ``values`` entries for the "cdq" variable are
    (n_critics, aggregation) pairs.
    """

    variable: str
    values: tuple
    n_seeds: int = 3
    morse_params: dict = field(default_factory=dict)
    agent_params: dict = field(default_factory=dict)
    eval_episodes: int = 100

    def __post_init__(self):
        if self.variable not in _SWEEP_VARIABLES:
            raise ConfigError(
                f"ablation variable must be one of {_SWEEP_VARIABLES}, "
                f"got {self.variable!r}"
            )
        object.__setattr__(self, "values", tuple(self.values))
        if len(self.values) < 1:
            raise ConfigError("ablation needs at least one value")
        if self.n_seeds < 1:
            raise ConfigError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if self.eval_episodes < 1:
            raise ConfigError(
                f"eval_episodes must be >= 1, got {self.eval_episodes}"
            )
        if self.variable == "cdq":
            for v in self.values:
                if (
                    not isinstance(v, (tuple, list))
                    or len(v) != 2
                    or not isinstance(v[0], (int, np.integer))
                    or v[0] < 1
                    or v[1] not in AGGREGATIONS
                ):
                    raise ConfigError(
                        "cdq sweep values must be (n_critics >= 1, "
                        f"aggregation in {AGGREGATIONS}) pairs, got {v!r}"
                    )
            object.__setattr__(
                self, "values", tuple((int(n), str(a)) for n, a in self.values)
            )
        bad = set(self.morse_params) - _MORSE_KEYS
        bad |= {"seed"} & set(self.morse_params)
        if bad:
            raise ConfigError(f"invalid morse parameter(s) in sweep: {sorted(bad)}")
        bad = set(self.agent_params) - _AGENT_KEYS
        bad |= {"seed", "morse"} & set(self.agent_params)
        if bad:
            raise ConfigError(f"invalid agent parameter(s) in sweep: {sorted(bad)}")


def analyze_morse(model: MorseNet, dataset: ReplayDataset, seed: int = 0, path=None):
    """Certainty samples for three populations: data, permuted, uniform.

    Data pairs are scored once each; for the other two populations every
    state gets SAMPLES_PER_STATE actions, drawn as whole-dataset action
    permutations and as uniform box samples respectively.  Returns a dict
    with per-population sample arrays and their means; when ``path`` is
    given, also writes a CSV (columns population, state_index, sample_index,
    certainty; final row "means" carries the data/permuted/uniform means in
    the remaining columns).
    """
    if not hasattr(model, "net_"):
        raise ConfigError("analyze_morse needs a trained model")
    n, state_dim = dataset.states.shape
    action_dim = dataset.actions.shape[1]
    if (model.state_dim_, model.action_dim_) != (state_dim, action_dim):
        raise ConfigError(
            f"model dims ({model.state_dim_}, {model.action_dim_}) do not "
            f"match dataset dims ({state_dim}, {action_dim})"
        )
    root, uni_child = np.random.SeedSequence(seed).spawn(2)
    perm_seeds = root.generate_state(SAMPLES_PER_STATE, np.uint32)
    perms = np.stack(
        [permuted_actions(dataset, int(s)) for s in perm_seeds]
    )  # (k, n, adim)
    uniform = np.random.default_rng(uni_child).uniform(
        -1.0, 1.0, size=(SAMPLES_PER_STATE, n, action_dim)
    )

    c_data = model.certainty(dataset.states, dataset.actions)
    tiled = np.tile(dataset.states, (SAMPLES_PER_STATE, 1))
    c_perm = model.certainty(tiled, perms.reshape(-1, action_dim)).reshape(
        SAMPLES_PER_STATE, n
    )
    c_uni = model.certainty(tiled, uniform.reshape(-1, action_dim)).reshape(
        SAMPLES_PER_STATE, n
    )
    means = {
        "data": float(np.mean(c_data)),
        "permuted": float(np.mean(c_perm)),
        "uniform": float(np.mean(c_uni)),
    }

    if path is not None:
        lines = ["population,state_index,sample_index,certainty"]
        for i in range(n):
            lines.append(f"data,{i},0,{float(c_data[i])!r}")
        for name, block in (("permuted", c_perm), ("uniform", c_uni)):
            for i in range(n):
                for k in range(SAMPLES_PER_STATE):
                    lines.append(f"{name},{i},{k},{float(block[k, i])!r}")
        lines.append(
            "means,{!r},{!r},{!r}".format(
                means["data"], means["permuted"], means["uniform"]
            )
        )
        Path(path).write_text("\n".join(lines) + "\n")

    return {
        "means": means,
        "data": c_data,
        "permuted": c_perm,
        "uniform": c_uni,
    }


def density_fraction(
    model: MorseNet, state, threshold: float = 0.5, resolution: int = 101
) -> float:
    """Fraction of the 2-D action grid where certainty exceeds threshold."""
    grid = model.density_grid(state, resolution)
    return float(np.mean(grid > threshold))


def deviation_histogram(deviations, action_dim: int, n_bins: int = 40):
    """Histogram of ||pi(s) - a_D|| over fixed bins covering the box diameter."""
    edges = np.linspace(0.0, 2.0 * math.sqrt(action_dim), n_bins + 1)
    counts, _ = np.histogram(np.asarray(deviations, dtype=np.float64), bins=edges)
    return [
        {
            "bin_left": float(edges[i]),
            "bin_right": float(edges[i + 1]),
            "count": int(counts[i]),
        }
        for i in range(n_bins)
    ]


def _arm_words(seed: int, arm_index: int, rep: int) -> tuple[int, int, int]:
    """Morse/agent/eval seeds for one arm repetition, order-independent."""
    words = np.random.SeedSequence(
        entropy=seed, spawn_key=(arm_index, rep)
    ).generate_state(3, np.uint32)
    return int(words[0]), int(words[1]), int(words[2])


def _run_sweep(arms, run_one, n_seeds: int, seed: int):
    """Runs every (arm, repetition) job, grouped back in arm order."""
    jobs = [(ai, rep) for ai in range(len(arms)) for rep in range(n_seeds)]

    def job(pair):
        ai, rep = pair
        return ai, run_one(arms[ai], *_arm_words(seed, ai, rep))

    grouped = defaultdict(list)
    for ai, result in _map_jobs(job, jobs):
        grouped[ai].append(result)
    return grouped


def ablate_lambda(
    spec: AblationSpec,
    dataset: ReplayDataset,
    env,
    seed: int = 0,
    out_dir=None,
):
    """Kernel-scale sweep: retrains Morse model and agent per value per seed.

    Returns one row per lambda with score mean/std, deviation mean/std, and
    (for 2-D actions) the mean fraction of the action grid at certainty
    above 0.5.  When ``out_dir`` is given, writes a deviation histogram CSV
    per value.
    """
    if spec.variable != "lambda":
        raise ConfigError(f"expected a lambda sweep, got {spec.variable!r}")
    action_dim = dataset.actions.shape[1]
    probe_state = dataset.states.mean(axis=0)

    def run_one(value, morse_seed, agent_seed, eval_seed):
        morse = MorseNet(
            **{**spec.morse_params, "scale": float(value), "seed": morse_seed}
        ).fit(dataset.states, dataset.actions)
        agent = TD3BST(
            **{
                "regularizer": "bst",
                **spec.agent_params,
                "morse": morse,
                "seed": agent_seed,
            }
        ).fit(dataset)
        result = evaluate(
            agent.policy(), env, spec.eval_episodes, seed=eval_seed, dataset=dataset
        )
        fraction = (
            density_fraction(morse, probe_state) if action_dim == 2 else None
        )
        return {
            "score": result.mean_return,
            "deviations": result.deviations,
            "fraction": fraction,
        }

    grouped = _run_sweep(spec.values, run_one, spec.n_seeds, seed)
    rows = []
    for ai, value in enumerate(spec.values):
        results = grouped[ai]
        scores = np.array([r["score"] for r in results])
        devs = np.concatenate([r["deviations"] for r in results])
        fractions = [r["fraction"] for r in results]
        rows.append(
            {
                "lambda": float(value),
                "n_seeds": spec.n_seeds,
                "mean_score": float(scores.mean()),
                "std_score": float(scores.std()),
                "mean_deviation": float(devs.mean()),
                "std_deviation": float(devs.std()),
                "grid_fraction": None
                if fractions[0] is None
                else float(np.mean(fractions)),
            }
        )
        if out_dir is not None:
            write_rows_csv(
                Path(out_dir) / f"deviations_lambda_{float(value)!r}.csv",
                ("bin_left", "bin_right", "count"),
                deviation_histogram(devs, action_dim),
            )
    return rows


def _score_arms(spec, dataset, env, morse, seed, build_params):
    def run_one(value, _morse_seed, agent_seed, eval_seed):
        agent = TD3BST(
            **{**spec.agent_params, **build_params(value), "seed": agent_seed},
            morse=morse,
        ).fit(dataset)
        result = evaluate(agent.policy(), env, spec.eval_episodes, seed=eval_seed)
        return {"score": result.mean_return}

    grouped = _run_sweep(spec.values, run_one, spec.n_seeds, seed)
    stats = []
    for ai in range(len(spec.values)):
        scores = np.array([r["score"] for r in grouped[ai]])
        stats.append((float(scores.mean()), float(scores.std())))
    return stats


def ablate_cdq(
    spec: AblationSpec,
    dataset: ReplayDataset,
    env,
    morse: MorseNet | None,
    seed: int = 0,
):
    """Critic-ensemble sweep over (n_critics, aggregation) arms.

    Scores every arm and reports percent change against the (2, "cdq")
    baseline, which must be among the arms.
    """
    if spec.variable != "cdq":
        raise ConfigError(f"expected a cdq sweep, got {spec.variable!r}")
    baseline = (2, "cdq")
    if baseline not in spec.values:
        raise ConfigError("cdq sweep must include the (2, 'cdq') baseline arm")

    stats = _score_arms(
        spec, dataset, env, morse, seed,
        lambda arm: {"n_critics": arm[0], "q_aggregation": arm[1]},
    )
    base_mean = stats[spec.values.index(baseline)][0]
    rows = []
    for (n_critics, aggregation), (mean, std) in zip(spec.values, stats):
        if mean == base_mean:
            pct = 0.0
        elif base_mean == 0.0:
            pct = math.nan
        else:
            pct = 100.0 * (mean - base_mean) / abs(base_mean)
        rows.append(
            {
                "n_critics": n_critics,
                "aggregation": aggregation,
                "n_seeds": spec.n_seeds,
                "mean_score": mean,
                "std_score": std,
                "pct_change_vs_baseline": pct,
            }
        )
    return rows


def ablate_agent_param(
    spec: AblationSpec,
    dataset: ReplayDataset,
    env,
    morse: MorseNet | None,
    seed: int = 0,
):
    """Scalar agent-parameter sweep (mu or n_critics) at fixed Morse model."""
    if spec.variable not in ("mu", "n_critics"):
        raise ConfigError(
            f"expected a mu or n_critics sweep, got {spec.variable!r}"
        )
    name = spec.variable
    caster = float if name == "mu" else int
    stats = _score_arms(
        spec, dataset, env, morse, seed, lambda value: {name: caster(value)}
    )
    return [
        {
            name: caster(value),
            "n_seeds": spec.n_seeds,
            "mean_score": mean,
            "std_score": std,
        }
        for value, (mean, std) in zip(spec.values, stats)
    ]


def emit_heatmap(matrix, path) -> tuple[Path, Path]:
    """Writes a [0,1] matrix as an 8-bit binary graymap plus a CSV sidecar.

    Pixels are round(value * 255), row-major, one byte each.  Returns the
    graymap path and the sidecar path.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"heatmap needs a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)) or m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("heatmap entries must be finite and within [0, 1]")
    path = Path(path)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    pixels = np.rint(m * 255.0).astype(np.uint8)
    path.write_bytes(header + pixels.tobytes(order="C"))
    sidecar = path.with_suffix(".csv")
    with open(sidecar, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for row in m:
            writer.writerow([repr(float(v)) for v in row])
    return path, sidecar
