"""Synthetic multi-task benchmark: a point mass steered through waypoints by a
switching controller with three radius-banded regimes.

Ground truth per task: far from the goal the controller heads (rotated)
straight at it; inside the outer radius it spirals in at ninety degrees to
the goal direction; inside the inner radius it docks with a weak
counter-rotated saturated-proportional pull.  The three regimes are pairwise
distinct as direction/magnitude fields, so they are identifiable from states
alone.  Rotation angles are drawn clockwise-only so the spiral always makes
radial progress; gains are drawn high enough that the waypoint tour fits the
horizon.  Tasks vary controller gain and rotation (sub-skill adaptation
pressure) and the switch radii (selector adaptation pressure).

Everything is deterministic given seeds via the package RNG, including the
JSON Lines dataset files, which round-trip doubles exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import ContractError
from .data import Trajectory
from .rng import SplitMix64, derive_seed

DT = 0.1
ACTION_MAX = 1.0
GOAL_TOLERANCE = 0.05
DOCK_GAIN = 0.3
DOCK_SOFT = 0.15  # saturation radius of the dock controller
NOISE_STD = 0.01

ROTATION_RANGE = (-np.pi / 4, -np.pi / 6)  # within the documented [-pi/4, pi/4]
GAIN_RANGE = (1.0, 2.0)  # within the documented [0.5, 2.0]
R1_RANGE = (0.58, 0.72)
R2_RANGE = (0.21, 0.28)
WAYPOINT_DIST_RANGE = (1.1, 1.4)
N_WAYPOINTS = 4
START_BOX = 0.2


class DatasetFormatError(ValueError):
    """A dataset file line failed to parse or violated the schema."""


@dataclass(frozen=True)
class TaskSpec:
    seed: int
    rotation_angle: float
    gain_scale: float
    switch_radii: tuple[float, float]  # (r1, r2), r1 > r2 > 0
    waypoints: tuple[tuple[float, float], ...]
    noise_std: float

    def __post_init__(self):
        r1, r2 = self.switch_radii
        if not (r1 > r2 > 0):
            raise ContractError(f"need r1 > r2 > 0, got {self.switch_radii}")
        if not (0.5 <= self.gain_scale <= 2.0):
            raise ContractError(f"gain_scale {self.gain_scale} outside [0.5, 2.0]")
        if len(self.waypoints) < 2:
            raise ContractError("need at least two waypoints")
        if self.noise_std < 0:
            raise ContractError("noise_std must be >= 0")


def sample_task(seed: int) -> TaskSpec:
    """Deterministic task draw; the field order below is the stream contract."""
    rng = SplitMix64(derive_seed(seed, 0xA5))
    rotation = rng.uniform(*ROTATION_RANGE)
    gain = rng.uniform(*GAIN_RANGE)
    r1 = rng.uniform(*R1_RANGE)
    r2 = rng.uniform(*R2_RANGE)
    waypoints = []
    anchor = np.zeros(2)
    for _ in range(N_WAYPOINTS):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        dist = rng.uniform(*WAYPOINT_DIST_RANGE)
        anchor = anchor + dist * np.array([np.cos(angle), np.sin(angle)])
        waypoints.append((float(anchor[0]), float(anchor[1])))
    return TaskSpec(
        seed=seed,
        rotation_angle=rotation,
        gain_scale=gain,
        switch_radii=(r1, r2),
        waypoints=tuple(waypoints),
        noise_std=NOISE_STD,
    )


def _rot(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def true_skill(spec: TaskSpec, state) -> int:
    """Regime label is a pure function of goal distance and the radii."""
    state = np.asarray(state, dtype=np.float64)
    d = float(np.linalg.norm(state[2:4] - state[0:2]))
    r1, r2 = spec.switch_radii
    if d > r1:
        return 0  # approach
    if d > r2:
        return 1  # orbit
    return 2  # dock


def expert_action(
    spec: TaskSpec, state, rng: SplitMix64 | None = None
) -> tuple[np.ndarray, int]:
    """Controller action and regime for state [px, py, gx, gy].

    Noise of std spec.noise_std is added only when an rng is supplied.
    """
    state = np.asarray(state, dtype=np.float64)
    p, g = state[0:2], state[2:4]
    delta = g - p
    d = float(np.linalg.norm(delta))
    r1, r2 = spec.switch_radii
    if d > r1:
        skill = 0
        a = spec.gain_scale * (_rot(spec.rotation_angle) @ (delta / max(d, 1e-6)))
    elif d > r2:
        skill = 1
        a = spec.gain_scale * (_rot(spec.rotation_angle + np.pi / 2) @ (delta / max(d, 1e-6)))
    else:
        skill = 2
        # Saturated-proportional pull straight at the goal: constant speed
        # down to DOCK_SOFT, then proportional decay, so docking finishes
        # within the horizon and the mass settles instead of hovering.
        # Unrotated on purpose: it stays at least the rotation angle away
        # from the approach field and a quarter turn minus the rotation away
        # from the orbit field for every task, so no two regimes can share a
        # direction structure.
        a = DOCK_GAIN * spec.gain_scale * (delta / max(d, DOCK_SOFT))
    if rng is not None and spec.noise_std > 0:
        a = a + spec.noise_std * rng.normal_array(2)
    return a, skill


def _simulate(
    spec: TaskSpec,
    T: int,
    seed: int,
    act: Callable[[np.ndarray, SplitMix64], tuple[np.ndarray, int]],
) -> tuple[Trajectory, bool]:
    """Shared dynamics loop: p' = p + DT * clip(a); goal advances inside the
    tolerance.  Returns the recorded trajectory and whether every waypoint
    was reached before the horizon."""
    if T < 2:
        raise ContractError(f"horizon must be >= 2, got {T}")
    rng = SplitMix64(derive_seed(spec.seed, seed))
    p = np.array([rng.uniform(-START_BOX, START_BOX), rng.uniform(-START_BOX, START_BOX)])
    waypoints = [np.asarray(w) for w in spec.waypoints]
    n_wp = len(waypoints)
    reached = 0
    states = np.empty((T, 4))
    actions = np.empty((T, 2))
    skills = np.empty(T, dtype=np.int64)
    for t in range(T):
        g = waypoints[min(reached, n_wp - 1)]
        s = np.concatenate([p, g])
        a, z = act(s, rng)
        states[t], actions[t], skills[t] = s, a, z
        p = p + DT * np.clip(a, -ACTION_MAX, ACTION_MAX)
        if reached < n_wp and np.linalg.norm(waypoints[min(reached, n_wp - 1)] - p) < GOAL_TOLERANCE:
            reached += 1
    return Trajectory(states, actions, skills), reached == n_wp


def rollout_expert(spec: TaskSpec, T: int, seed: int) -> Trajectory:
    """One noisy expert demonstration with ground-truth regime labels."""
    return _simulate(spec, T, seed, lambda s, rng: expert_action(spec, s, rng))[0]


def rollout_policy(
    spec: TaskSpec,
    act_fn: Callable[[np.ndarray], np.ndarray],
    T: int,
    seed: int,
) -> tuple[Trajectory, bool]:
    """Closed-loop rollout of an arbitrary policy in the same dynamics; the
    recorded skill labels are the ground-truth regimes of the visited states."""
    return _simulate(spec, T, seed, lambda s, rng: (np.asarray(act_fn(s), dtype=np.float64), true_skill(spec, s)))


@dataclass(frozen=True)
class TaskDataset:
    """Per-task support/query split; disjoint by construction."""

    support: tuple[Trajectory, ...]
    query: tuple[Trajectory, ...]
    spec: TaskSpec

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "query", tuple(self.query))
        if not self.support or not self.query:
            raise ContractError("support and query sets must both be nonempty")
        if {id(t) for t in self.support} & {id(t) for t in self.query}:
            raise ContractError("support and query sets must be disjoint")


def make_dataset(
    spec: TaskSpec, n_support: int, n_query: int, T: int, seed: int
) -> TaskDataset:
    """n_support + n_query demonstrations from per-rollout sub-seeds.

    Four phase batches must be drawable from the support set, hence
    n_support >= 4.
    """
    if n_support < 4:
        raise ContractError(f"n_support must be >= 4, got {n_support}")
    if n_query < 1:
        raise ContractError(f"n_query must be >= 1, got {n_query}")
    rolls = [rollout_expert(spec, T, derive_seed(seed, j)) for j in range(n_support + n_query)]
    return TaskDataset(tuple(rolls[:n_support]), tuple(rolls[n_support:]), spec)


# ---------------------------------------------------------------------------
# JSON Lines dataset files
# ---------------------------------------------------------------------------
#
# One line per trajectory: {"task_seed", "split", "states", "actions",
# "true_skills"}.  Doubles serialize via repr, so load(save(x)) reproduces
# every value exactly.  Specs are reconstructed through sample_task, so the
# format covers sampler-produced tasks (the only kind the tooling writes).


def save_datasets(path, datasets: Sequence[TaskDataset]) -> None:
    lines = []
    for ds in datasets:
        for split, trajs in (("support", ds.support), ("query", ds.query)):
            for t in trajs:
                lines.append(
                    json.dumps(
                        {
                            "task_seed": ds.spec.seed,
                            "split": split,
                            "states": t.states.tolist(),
                            "actions": t.actions.tolist(),
                            "true_skills": None
                            if t.true_skills is None
                            else t.true_skills.tolist(),
                        },
                        separators=(",", ":"),
                    )
                )
    Path(path).write_text("\n".join(lines) + "\n")


def load_datasets(path) -> list[TaskDataset]:
    groups: dict[int, dict[str, list[Trajectory]]] = {}
    order: list[int] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            seed = rec["task_seed"]
            split = rec["split"]
            traj = Trajectory(
                np.array(rec["states"], dtype=np.float64),
                np.array(rec["actions"], dtype=np.float64),
                None if rec["true_skills"] is None else np.array(rec["true_skills"]),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise DatasetFormatError(f"line {lineno}: {e}") from e
        if split not in ("support", "query"):
            raise DatasetFormatError(f"line {lineno}: unknown split {split!r}")
        if seed not in groups:
            groups[seed] = {"support": [], "query": []}
            order.append(seed)
        groups[seed][split].append(traj)
    out = []
    for seed in order:
        g = groups[seed]
        if not g["support"] or not g["query"]:
            raise DatasetFormatError(f"task {seed}: missing support or query trajectories")
        out.append(TaskDataset(tuple(g["support"]), tuple(g["query"]), sample_task(seed)))
    return out
