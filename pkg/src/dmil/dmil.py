"""Core bi-level training loop: a skill selector and K sub-skills, jointly
meta-learned so that a few gradient steps adapt both to a new task.

One training iteration runs four phases per task against the *unchanged*
pre-step parameters:

  selector inner update   - best-predicting sub-skill per step supplies hard
                            labels; the selector takes inner gradient steps
                            on cross-entropy (plus a switch-smoothness term).
  sub-skill inner update  - the adapted selector routes a second batch into K
                            per-skill datasets; each sub-skill takes inner
                            steps on its own MSE.
  selector meta-gradient  - outer cross-entropy on a third batch, pushed back
                            through the selector's inner steps.
  sub-skill meta-gradient - outer MSE on a fourth batch (routed by the
                            adapted selector), pushed back through each
                            sub-skill's inner steps.

Meta-gradients are summed over tasks in list order and applied in one atomic
update; no phase ever sees post-update parameters.  Hard label and routing
argmins are constants: no gradient flows through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import (
    AdaptTrace,
    ContractError,
    ParamVector,
    identity_trace,
    inner_adapt,
    meta_grad,
)
from .data import Trajectory, flatten_trajectories
from .policies import HierarchicalParams, MlpShape, featurize, mlp_forward, mlp_logits
from .rng import SplitMix64, derive_seed

# ---------------------------------------------------------------------------
# labels, partitions, losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SkillLabels:
    """Per-timestep hard skill assignments (one-hot over K)."""

    indices: np.ndarray  # (N,) int64
    onehot: np.ndarray  # (N, K) float64

    @classmethod
    def from_indices(cls, indices: np.ndarray, n_skills: int) -> "SkillLabels":
        idx = np.asarray(indices, dtype=np.int64)
        onehot = np.zeros((idx.shape[0], n_skills))
        onehot[np.arange(idx.shape[0]), idx] = 1.0
        idx.setflags(write=False)
        onehot.setflags(write=False)
        return cls(idx, onehot)

    def __len__(self) -> int:
        return self.indices.shape[0]


def hard_labels(
    states: np.ndarray,
    actions: np.ndarray,
    skills: Sequence[ParamVector],
    skill_shape: MlpShape,
    features: str = "raw",
) -> SkillLabels:
    """Label each pair with the sub-skill of least squared action error.

    Ties go to the lowest skill index (argmin's first match), which keeps the
    assignment deterministic and order-stable.
    """
    x = featurize(states, features)
    errors = np.stack(
        [np.sum((actions - mlp_forward(s, skill_shape, x)) ** 2, axis=1) for s in skills],
        axis=1,
    )
    return SkillLabels.from_indices(np.argmin(errors, axis=1), len(skills))


@dataclass(frozen=True)
class Partition:
    """Per-skill (state, action) datasets; disjoint and exhaustive by build."""

    states: tuple[np.ndarray, ...]
    actions: tuple[np.ndarray, ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(s.shape[0] for s in self.states)

    @property
    def K(self) -> int:
        return len(self.states)


def partition_pairs(
    states: np.ndarray, actions: np.ndarray, indices: np.ndarray, n_skills: int
) -> Partition:
    groups_s, groups_a = [], []
    for k in range(n_skills):
        mask = indices == k
        groups_s.append(states[mask])
        groups_a.append(actions[mask])
    return Partition(tuple(groups_s), tuple(groups_a))


def partition_by_skill(
    selector: ParamVector,
    high_shape: MlpShape,
    trajs: Sequence[Trajectory],
    features: str = "raw",
) -> Partition:
    """Route every pair to the selector's argmax skill (ties: lowest index).

    The returned groups hold featurized states, ready for the skill losses."""
    states, actions, _ = flatten_trajectories(trajs)
    x = featurize(states, features)
    logits = mlp_forward(selector, high_shape, x)
    return partition_pairs(x, actions, np.argmax(logits, axis=1), high_shape.out_dim)


def aux_loss(probs: np.ndarray) -> float:
    """Expected-switch surrogate over one probability sequence.

    (1/(T-1)) * sum_t (1 - <p_t, p_{t+1}>): 0 for a constant hard sequence,
    exactly 1 for a hard alternating one.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] < 2:
        raise ContractError("aux_loss needs at least two timesteps")
    dots = np.sum(probs[:-1] * probs[1:], axis=1)
    return float(np.mean(1.0 - dots))


@dataclass(frozen=True)
class HighBatch:
    """Constant inputs for the selector loss: pooled states, one-hot labels,
    per-trajectory row slices (switch terms never cross trajectory ends)."""

    states: np.ndarray
    onehot: np.ndarray
    slices: tuple[tuple[int, int], ...]
    aux_weight: float


def make_high_loss(shape: MlpShape) -> ad.LossFn:
    """Mean cross-entropy vs hard labels plus aux_weight * switch surrogate."""

    def selector_loss(p: ad.Node, batch: HighBatch) -> ad.Node:
        logits = mlp_logits(p, shape, batch.states)
        logp = ad.log_softmax(logits)
        ce = ad.neg(ad.mean(ad.sum_cols(ad.mul(logp, ad.constant(batch.onehot)))))
        if batch.aux_weight == 0.0:
            return ce
        probs = ad.exp(logp)
        total_dot = None
        pairs = 0
        for start, stop in batch.slices:
            if stop - start < 2:
                continue
            d = ad.asum(
                ad.mul(ad.slice_rows(probs, start, stop - 1), ad.slice_rows(probs, start + 1, stop))
            )
            total_dot = d if total_dot is None else ad.add(total_dot, d)
            pairs += stop - start - 1
        if total_dot is None:
            return ce
        aux = ad.sadd(ad.smul(total_dot, -1.0 / pairs), 1.0)
        return ad.add(ce, ad.smul(aux, batch.aux_weight))

    selector_loss.loss_name = "selector cross-entropy"
    return selector_loss


@dataclass(frozen=True)
class SkillBatch:
    states: np.ndarray
    actions: np.ndarray


def make_skill_loss(shape: MlpShape) -> ad.LossFn:
    """Behavior-cloning MSE: mean over pairs of squared action error."""

    def skill_mse_loss(p: ad.Node, batch: SkillBatch) -> ad.Node:
        pred = mlp_logits(p, shape, batch.states)
        r = ad.sub(pred, ad.constant(batch.actions))
        return ad.smul(ad.asum(ad.mul(r, r)), 1.0 / batch.states.shape[0])

    skill_mse_loss.loss_name = "sub-skill MSE"
    return skill_mse_loss


def build_high_batch(
    trajs: Sequence[Trajectory], labels: SkillLabels, aux_weight: float, features: str = "raw"
) -> HighBatch:
    states, _, slices = flatten_trajectories(trajs)
    if len(labels) != states.shape[0]:
        raise ContractError("labels do not align with the trajectory batch")
    return HighBatch(featurize(states, features), labels.onehot, slices, aux_weight)


def high_loss(
    selector: ParamVector,
    shape: MlpShape,
    trajs: Sequence[Trajectory],
    labels: SkillLabels,
    aux_weight: float,
    features: str = "raw",
) -> float:
    """Scalar value of the selector loss (same code path as its gradients)."""
    return ad.loss_value(
        make_high_loss(shape), selector, build_high_batch(trajs, labels, aux_weight, features)
    )


def skill_loss_value(
    skill: ParamVector, shape: MlpShape, states: np.ndarray, actions: np.ndarray
) -> float:
    return ad.loss_value(make_skill_loss(shape), skill, SkillBatch(states, actions))


# ---------------------------------------------------------------------------
# the four phases
# ---------------------------------------------------------------------------


def hi_step(
    params: HierarchicalParams,
    trajs: Sequence[Trajectory],
    rate: float,
    steps: int,
    aux_weight: float,
) -> AdaptTrace:
    """Selector inner update; labels come from the frozen sub-skills."""
    states, actions, _ = flatten_trajectories(trajs)
    labels = hard_labels(states, actions, params.skills, params.skill_shape, params.feature_kind)
    batch = build_high_batch(trajs, labels, aux_weight, params.feature_kind)
    return inner_adapt(make_high_loss(params.high_shape), params.high, rate, batch, steps)


def li_step(
    params: HierarchicalParams,
    partition: Partition,
    rate: float,
    steps: int,
) -> tuple[AdaptTrace, ...]:
    """Per-skill inner updates on the routed datasets; empty set => identity."""
    if partition.K != params.K:
        raise ContractError(f"partition has {partition.K} groups for {params.K} skills")
    loss = make_skill_loss(params.skill_shape)
    traces = []
    for k in range(params.K):
        if partition.sizes[k] == 0:
            traces.append(identity_trace(params.skills[k]))
        else:
            batch = SkillBatch(partition.states[k], partition.actions[k])
            traces.append(inner_adapt(loss, params.skills[k], rate, batch, steps))
    return tuple(traces)


def _ho(
    trace_h: AdaptTrace,
    params: HierarchicalParams,
    trajs3: Sequence[Trajectory],
    label_skills: Sequence[ParamVector],
    aux_weight: float,
    mode: str,
) -> tuple[ParamVector, float]:
    states, actions, _ = flatten_trajectories(trajs3)
    labels = hard_labels(states, actions, label_skills, params.skill_shape, params.feature_kind)
    batch = build_high_batch(trajs3, labels, aux_weight, params.feature_kind)
    loss = make_high_loss(params.high_shape)
    val, g_outer = ad.value_and_grad(loss, trace_h.final, batch)
    return meta_grad(trace_h, g_outer, mode=mode), val


def ho_grad(
    trace_h: AdaptTrace,
    params: HierarchicalParams,
    trajs3: Sequence[Trajectory],
    adapted_skills: Sequence[ParamVector],
    aux_weight: float,
    mode: str = "exact",
) -> ParamVector:
    """Selector meta-gradient: outer loss at the adapted selector, pushed back
    through its inner steps.  Labels come from adapted_skills and are fixed."""
    return _ho(trace_h, params, trajs3, adapted_skills, aux_weight, mode)[0]


def _lo(
    traces_l: Sequence[AdaptTrace],
    selector: ParamVector,
    params: HierarchicalParams,
    trajs4: Sequence[Trajectory],
    mode: str,
) -> tuple[list[ParamVector], float]:
    part = partition_by_skill(selector, params.high_shape, trajs4, params.feature_kind)
    loss = make_skill_loss(params.skill_shape)
    grads: list[ParamVector] = []
    sse_total, n_total = 0.0, 0
    for k in range(params.K):
        if part.sizes[k] == 0:
            grads.append(ParamVector.zeros(len(params.skills[k])))
            continue
        batch = SkillBatch(part.states[k], part.actions[k])
        val, g_outer = ad.value_and_grad(loss, traces_l[k].final, batch)
        grads.append(meta_grad(traces_l[k], g_outer, mode=mode))
        sse_total += val * part.sizes[k]
        n_total += part.sizes[k]
    pooled = sse_total / n_total if n_total else 0.0
    return grads, pooled


def lo_grad(
    traces_l: Sequence[AdaptTrace],
    selector: ParamVector,
    params: HierarchicalParams,
    trajs4: Sequence[Trajectory],
    mode: str = "exact",
) -> list[ParamVector]:
    """Per-skill meta-gradients on the fourth batch, routed by the adapted
    selector.  Skills whose routed set is empty contribute zero vectors."""
    return _lo(traces_l, selector, params, trajs4, mode)[0]


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one meta-training step.  Defaults follow the published
    hyperparameter table; benchmark configs override them per run."""

    inner_rate: float = 5e-4
    outer_rate: float = 1e-4
    inner_steps: int = 3
    aux_weight: float = 0.1
    grad_mode: str = "exact"  # or "first_order"
    outer_reduce: str = "mean"  # or "sum"
    batch_size: int = 16  # trajectories per phase batch
    ho_labels: str = "adapted"  # or "initial"
    meta_high: bool = True  # False: selector gets a plain pooled gradient
    meta_low: bool = True  # False: sub-skills get plain pooled gradients

    def __post_init__(self):
        if self.grad_mode not in ("exact", "first_order"):
            raise ContractError(f"unknown grad_mode {self.grad_mode!r}")
        if self.outer_reduce not in ("mean", "sum"):
            raise ContractError(f"unknown outer_reduce {self.outer_reduce!r}")
        if self.ho_labels not in ("adapted", "initial"):
            raise ContractError(f"unknown ho_labels {self.ho_labels!r}")


class MetaGradient:
    """Per-component accumulator; summation order is the task list order."""

    def __init__(self, params: HierarchicalParams):
        self.g_high = ParamVector.zeros(len(params.high))
        self.g_skills = [ParamVector.zeros(len(s)) for s in params.skills]
        self.task_count = 0

    def accumulate(self, g_high: ParamVector, g_skills: Sequence[ParamVector]) -> None:
        self.g_high = self.g_high.add(g_high)
        self.g_skills = [a.add(b) for a, b in zip(self.g_skills, g_skills)]
        self.task_count += 1

    def reduced(self, mode: str) -> tuple[ParamVector, list[ParamVector]]:
        if mode == "sum" or self.task_count == 0:
            return self.g_high, list(self.g_skills)
        c = 1.0 / self.task_count
        return self.g_high.scaled(c), [g.scaled(c) for g in self.g_skills]


def sample_phase_batches(
    support: Sequence[Trajectory], batch_size: int, rng: SplitMix64
) -> tuple[list[Trajectory], ...]:
    """Four trajectory batches: without replacement when the support set is
    big enough, cycling through one shuffle otherwise."""
    n = len(support)
    if n < 1:
        raise ContractError("support set is empty")
    perm = rng.permutation(n)
    idx = [perm[j % n] for j in range(4 * batch_size)]
    return tuple(
        [support[i] for i in idx[g * batch_size : (g + 1) * batch_size]] for g in range(4)
    )


@dataclass(frozen=True)
class TaskStepStats:
    high_outer_loss: float
    skill_outer_loss: float
    diverged: bool


@dataclass(frozen=True)
class StepResult:
    params: HierarchicalParams
    g_high: ParamVector  # reduced selector meta-gradient
    g_skills: tuple[ParamVector, ...]  # reduced sub-skill meta-gradients
    outer_loss: float  # mean over tasks of (selector + pooled skill outer loss)
    high_outer_loss: float
    skill_outer_loss: float
    diverged_count: int
    task_stats: tuple[TaskStepStats, ...]

    @property
    def grad_norm_high(self) -> float:
        return float(np.linalg.norm(self.g_high.values))

    @property
    def grad_norm_skills(self) -> float:
        return float(np.sqrt(sum(np.sum(g.values**2) for g in self.g_skills)))


def _task_meta_grads(
    params: HierarchicalParams,
    batches: tuple[list[Trajectory], ...],
    cfg: TrainConfig,
) -> tuple[ParamVector, list[ParamVector], TaskStepStats]:
    t1, t2, t3, t4 = batches

    if cfg.meta_high:
        trace_h = hi_step(params, t1, cfg.inner_rate, cfg.inner_steps, cfg.aux_weight)
    else:
        trace_h = identity_trace(params.high)

    part2 = partition_by_skill(trace_h.final, params.high_shape, t2, params.feature_kind)
    if cfg.meta_low:
        traces_l = li_step(params, part2, cfg.inner_rate, cfg.inner_steps)
    else:
        traces_l = tuple(identity_trace(s) for s in params.skills)

    if cfg.ho_labels == "adapted":
        label_skills = [t.final for t in traces_l]
    else:
        label_skills = list(params.skills)

    if cfg.meta_high:
        g_high, high_val = _ho(trace_h, params, t3, label_skills, cfg.aux_weight, cfg.grad_mode)
    else:
        # Plain multi-task gradient for the selector (no inner adaptation).
        s1, a1, _ = flatten_trajectories(t1)
        labels1 = hard_labels(s1, a1, params.skills, params.skill_shape, params.feature_kind)
        batch1 = build_high_batch(t1, labels1, cfg.aux_weight, params.feature_kind)
        high_val, g_high = ad.value_and_grad(make_high_loss(params.high_shape), params.high, batch1)

    if cfg.meta_low:
        g_skills, skill_val = _lo(traces_l, trace_h.final, params, t4, cfg.grad_mode)
    else:
        # Plain per-skill gradients on the routed second batch.
        loss = make_skill_loss(params.skill_shape)
        g_skills = []
        sse, n_total = 0.0, 0
        for k in range(params.K):
            if part2.sizes[k] == 0:
                g_skills.append(ParamVector.zeros(len(params.skills[k])))
                continue
            batch = SkillBatch(part2.states[k], part2.actions[k])
            val, g = ad.value_and_grad(loss, params.skills[k], batch)
            g_skills.append(g)
            sse += val * part2.sizes[k]
            n_total += part2.sizes[k]
        skill_val = sse / n_total if n_total else 0.0

    diverged = trace_h.diverged or any(t.diverged for t in traces_l)
    return g_high, g_skills, TaskStepStats(high_val, skill_val, diverged)


def meta_train_step(
    params: HierarchicalParams,
    tasks: Sequence,
    cfg: TrainConfig,
    step_seed: int,
    task_callback: Callable[[int, HierarchicalParams], None] | None = None,
) -> StepResult:
    """One outer iteration over a batch of tasks.

    Every phase reads only the pre-step `params`; meta-gradients accumulate in
    task order and the update is applied once, atomically, at the end.  Batch
    sampling is a pure function of (step_seed, task.spec.seed), so permuting
    the task list only reassociates the gradient sum.  Any task failure
    aborts the whole step before any update.
    """
    if not tasks:
        raise ContractError("meta_train_step needs at least one task")
    acc = MetaGradient(params)
    stats: list[TaskStepStats] = []
    for ti, task in enumerate(tasks):
        rng = SplitMix64(derive_seed(step_seed, task.spec.seed))
        batches = sample_phase_batches(task.support, cfg.batch_size, rng)
        g_high, g_skills, st = _task_meta_grads(params, batches, cfg)
        acc.accumulate(g_high, g_skills)
        stats.append(st)
        if task_callback is not None:
            task_callback(ti, params)
    g_high, g_skills = acc.reduced(cfg.outer_reduce)
    new_params = params.with_updates(
        params.high.minus_scaled(g_high, cfg.outer_rate),
        tuple(
            s.minus_scaled(g, cfg.outer_rate) for s, g in zip(params.skills, g_skills)
        ),
    )
    high_mean = float(np.mean([s.high_outer_loss for s in stats]))
    skill_mean = float(np.mean([s.skill_outer_loss for s in stats]))
    return StepResult(
        params=new_params,
        g_high=g_high,
        g_skills=tuple(g_skills),
        outer_loss=high_mean + skill_mean,
        high_outer_loss=high_mean,
        skill_outer_loss=skill_mean,
        diverged_count=sum(1 for s in stats if s.diverged),
        task_stats=tuple(stats),
    )


# ---------------------------------------------------------------------------
# test-time adaptation and action prediction
# ---------------------------------------------------------------------------


def few_shot_adapt(
    params: HierarchicalParams,
    demos: Sequence[Trajectory],
    rate: float,
    steps: int,
    aux_weight: float = 0.0,
    adapt_high: bool = True,
    adapt_low: bool = True,
    selector_steps: int | None = None,
) -> HierarchicalParams:
    """Adapt on a handful of demonstrations: selector first, then sub-skills,
    both on the same trajectories.  The input params are untouched.

    selector_steps lets the selector take a different number of inner steps
    than the sub-skills (it chases label noise if over-fitted at test time);
    the default is the shared count."""
    if not demos:
        raise ContractError("few_shot_adapt needs at least one demonstration")
    if adapt_high:
        n = steps if selector_steps is None else selector_steps
        selector = hi_step(params, demos, rate, n, aux_weight).final
    else:
        selector = params.high
    if adapt_low:
        part = partition_by_skill(selector, params.high_shape, demos, params.feature_kind)
        traces = li_step(params, part, rate, steps)
        skills = tuple(t.final for t in traces)
    else:
        skills = params.skills
    return params.with_updates(selector, skills)


def predict_action(params: HierarchicalParams, state) -> tuple[np.ndarray, int]:
    """Selector picks the skill (argmax, ties to lowest index); that skill
    predicts the action."""
    x = params.features(np.asarray(state, dtype=np.float64)[None, :])
    logits = mlp_forward(params.high, params.high_shape, x)[0]
    z = int(np.argmax(logits))
    action = mlp_forward(params.skills[z], params.skill_shape, x)[0]
    return action, z


def predict_labels(params: HierarchicalParams, states: np.ndarray) -> np.ndarray:
    """Selector argmax labels for a batch of raw states."""
    logits = mlp_forward(params.high, params.high_shape, params.features(states))
    return np.argmax(logits, axis=1)
