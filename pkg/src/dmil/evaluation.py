"""Metrics and numerical oracles: finite-difference meta-gradient checks,
permutation-matched skill recovery, adaptation MSE, switch rate, rollout
success, and report files (CSV rows plus a JSON summary)."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import ContractError, ParamVector, inner_adapt
from .data import Trajectory, flatten_trajectories
from .dmil import SkillBatch, few_shot_adapt, make_skill_loss, predict_action, predict_labels
from .policies import HierarchicalParams, MlpShape, featurize, mlp_forward
from .tasks import TaskDataset, TaskSpec, expert_action, rollout_policy

FD_MAX_PARAMS = 500
ROLLOUT_SEED0 = 0xE7A1


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def fd_check(
    objective: Callable[[np.ndarray], float],
    theta: np.ndarray,
    exact: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error of the exact gradient against central differences.

    Per-coordinate differences are normalized by the exact gradient's max
    magnitude, so coordinates with near-zero gradient do not blow up the
    ratio.  Cost is two objective evaluations per coordinate, hence the
    parameter-count cap.
    """
    theta = np.asarray(theta, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    if theta.shape != exact.shape:
        raise ContractError("theta and exact gradient must have the same shape")
    if theta.size > FD_MAX_PARAMS:
        raise ContractError(f"fd_check is limited to {FD_MAX_PARAMS} parameters, got {theta.size}")
    fd = np.zeros_like(theta)
    for i in range(theta.size):
        d = np.zeros_like(theta)
        d[i] = h
        fd[i] = (objective(theta + d) - objective(theta - d)) / (2.0 * h)
    scale = max(float(np.max(np.abs(exact))), 1e-12)
    return float(np.max(np.abs(fd - exact))) / scale


# ---------------------------------------------------------------------------
# label metrics
# ---------------------------------------------------------------------------


def skill_accuracy(
    pred: np.ndarray,
    truth: np.ndarray,
    n_pred_skills: int,
    n_true_skills: int,
    approximate: bool = False,
) -> float:
    """Best per-step agreement over injective maps of true labels into
    predicted labels (skill indices are arbitrary).  Brute force for up to 6
    predicted skills; beyond that the approximate flag enables greedy
    matching."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ContractError("pred and truth must have equal lengths")
    if n_true_skills > n_pred_skills:
        raise ContractError("cannot map more true skills than predicted skills")
    if n_pred_skills > 6 and not approximate:
        raise ContractError("brute-force matching is limited to 6 skills; pass approximate=True")
    confusion = np.zeros((n_true_skills, n_pred_skills))
    for t in range(n_true_skills):
        mask = truth == t
        for p in range(n_pred_skills):
            confusion[t, p] = np.sum(pred[mask] == p)
    if n_pred_skills <= 6:
        best = 0.0
        for mapping in itertools.permutations(range(n_pred_skills), n_true_skills):
            best = max(best, sum(confusion[t, mapping[t]] for t in range(n_true_skills)))
        return best / len(pred)
    matched, used = 0.0, set()
    for t in np.argsort(-confusion.max(axis=1)):
        order = np.argsort(-confusion[t])
        for p in order:
            if int(p) not in used:
                used.add(int(p))
                matched += confusion[t, p]
                break
    return matched / len(pred)


def switch_rate(labels) -> float:
    """Fraction of timesteps at which the label changes: count / length."""
    labels = np.asarray(labels)
    if labels.shape[0] < 2:
        raise ContractError("switch_rate needs at least two timesteps")
    return float(np.count_nonzero(labels[1:] != labels[:-1])) / labels.shape[0]


# ---------------------------------------------------------------------------
# policy adapters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HierarchicalPolicy:
    """Few-shot-adaptable wrapper around hierarchical parameters."""

    params: HierarchicalParams
    adapt_rate: float
    adapt_steps: int
    aux_weight: float = 0.0
    adapt_high: bool = True
    adapt_low: bool = True
    selector_steps: int | None = None

    def adapt(self, demos: Sequence[Trajectory]) -> "HierarchicalPolicy":
        adapted = few_shot_adapt(
            self.params,
            demos,
            self.adapt_rate,
            self.adapt_steps,
            aux_weight=self.aux_weight,
            adapt_high=self.adapt_high,
            adapt_low=self.adapt_low,
            selector_steps=self.selector_steps,
        )
        return replace(self, params=adapted)

    def predict(self, states: np.ndarray) -> np.ndarray:
        z = predict_labels(self.params, states)
        out = np.empty((states.shape[0], self.params.skill_shape.out_dim))
        for k in range(self.params.K):
            mask = z == k
            if np.any(mask):
                out[mask] = self.params.skill_predict(k, states[mask])
        return out

    def predict_skills(self, states: np.ndarray) -> np.ndarray:
        return predict_labels(self.params, states)

    def act(self, state) -> tuple[np.ndarray, int]:
        return predict_action(self.params, state)

    @property
    def n_skills(self) -> int:
        return self.params.K


@dataclass(frozen=True)
class MonolithicPolicy:
    """Single behavior-cloning network (the no-hierarchy baseline)."""

    theta: ParamVector
    shape: MlpShape
    adapt_rate: float
    adapt_steps: int
    feature_kind: str = "raw"

    def adapt(self, demos: Sequence[Trajectory]) -> "MonolithicPolicy":
        s, a, _ = flatten_trajectories(demos)
        x = featurize(s, self.feature_kind)
        trace = inner_adapt(
            make_skill_loss(self.shape), self.theta, self.adapt_rate, SkillBatch(x, a), self.adapt_steps
        )
        return replace(self, theta=trace.final)

    def predict(self, states: np.ndarray) -> np.ndarray:
        return mlp_forward(self.theta, self.shape, featurize(states, self.feature_kind))

    def predict_skills(self, states: np.ndarray) -> np.ndarray:
        return np.zeros(states.shape[0], dtype=np.int64)

    def act(self, state) -> tuple[np.ndarray, int]:
        x = featurize(np.asarray(state, dtype=np.float64)[None, :], self.feature_kind)
        return mlp_forward(self.theta, self.shape, x)[0], 0

    @property
    def n_skills(self) -> int:
        return 1


@dataclass(frozen=True)
class ExpertPolicy:
    """Ground-truth controller (noise-free); adaptation is a no-op."""

    spec: TaskSpec

    def adapt(self, demos) -> "ExpertPolicy":
        return self

    def predict(self, states: np.ndarray) -> np.ndarray:
        return np.vstack([expert_action(self.spec, s)[0] for s in states])

    def predict_skills(self, states: np.ndarray) -> np.ndarray:
        return np.array([expert_action(self.spec, s)[1] for s in states], dtype=np.int64)

    def act(self, state) -> tuple[np.ndarray, int]:
        return expert_action(self.spec, state)

    @property
    def n_skills(self) -> int:
        return 3


# ---------------------------------------------------------------------------
# task-level metrics
# ---------------------------------------------------------------------------


def query_mse(policy, task: TaskDataset) -> float:
    """Mean squared action error on the query set, per pair and dimension."""
    s, a, _ = flatten_trajectories(task.query)
    pred = policy.predict(s)
    return float(np.mean((pred - a) ** 2))


def adaptation_mse(policy, task: TaskDataset, shots: int) -> tuple[float, float]:
    """Query MSE before and after adapting on `shots` support demonstrations."""
    if shots > len(task.support):
        raise ContractError(f"shots={shots} exceeds support size {len(task.support)}")
    pre = query_mse(policy, task)
    post = query_mse(policy.adapt(list(task.support[:shots])), task)
    return pre, post


def adapted_skill_accuracy(policy, task: TaskDataset, n_true_skills: int = 3) -> float:
    """Permutation-matched agreement of predicted skills with the generator's
    hidden labels, over the query set."""
    s, _, _ = flatten_trajectories(task.query)
    truth = np.concatenate([t.true_skills for t in task.query])
    pred = policy.predict_skills(s)
    return skill_accuracy(pred, truth, policy.n_skills, n_true_skills)


@dataclass(frozen=True)
class RolloutStats:
    success_rate: float
    mean_switch_rate: float


def rollout_stats(policy, spec: TaskSpec, episodes: int, T: int) -> RolloutStats:
    """Closed-loop rollouts with the policy's own skill choices; success means
    every waypoint reached within tolerance before the horizon."""
    successes = 0
    rates = []
    for e in range(episodes):
        chosen: list[int] = []

        def act(state):
            a, z = policy.act(state)
            chosen.append(z)
            return a

        _, ok = rollout_policy(spec, act, T, ROLLOUT_SEED0 + e)
        successes += int(ok)
        rates.append(switch_rate(chosen))
    return RolloutStats(successes / episodes, float(np.mean(rates)))


def rollout_success(policy, spec: TaskSpec, episodes: int, T: int) -> float:
    return rollout_stats(policy, spec, episodes, T).success_rate


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_FIELDS = (
    "method",
    "seed",
    "task_seed",
    "shots",
    "pre_mse",
    "post_mse",
    "skill_acc",
    "switch_rate",
    "success",
)


def write_report_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in REPORT_FIELDS})


def summarize_report(rows: Sequence[dict]) -> dict:
    """Means and standard deviations across seeds per (method, shots)."""
    groups: dict[tuple, dict[str, list[float]]] = {}
    for row in rows:
        key = (row["method"], row["shots"])
        g = groups.setdefault(key, {})
        for metric in ("pre_mse", "post_mse", "skill_acc", "switch_rate", "success"):
            if row.get(metric) != "" and row.get(metric) is not None:
                g.setdefault(metric, []).append(float(row[metric]))
    out = {}
    for (method, shots), metrics in sorted(groups.items()):
        entry = {}
        for metric, vals in sorted(metrics.items()):
            entry[metric] = {
                "mean": float(np.mean(vals)),
                "std": float(np.std(vals)),
                "n": len(vals),
            }
        out[f"{method}/shots={shots}"] = entry
    return out


def write_summary_json(path, rows: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps(summarize_report(rows), indent=2, sort_keys=True) + "\n")
