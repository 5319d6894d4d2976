"""Experiment orchestration shared by the command-line tool and the test
suite: dataset construction, the per-method training loop, evaluation sweeps,
and the composed-objective gradient check.

Determinism contract: every random draw descends from run.seed through fixed
salts, and per-task batch draws depend only on (step seed, task seed), so a
rerun with the same config produces byte-identical metrics and checkpoints.
Wall-clock timings go to a separate timing.csv, which is the one run artifact
excluded from that contract.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, inner_adapt, loss_value
from .baselines import em_only_train, maml_train_step
from .checkpoint import save_checkpoint
from .config import METHODS, dump_config
from .data import flatten_trajectories
from .dmil import (
    TrainConfig,
    build_high_batch,
    hard_labels,
    hi_step,
    ho_grad,
    li_step,
    lo_grad,
    make_high_loss,
    make_skill_loss,
    meta_train_step,
    partition_by_skill,
    partition_pairs,
    sample_phase_batches,
    SkillBatch,
)
from .evaluation import (
    HierarchicalPolicy,
    adapted_skill_accuracy,
    fd_check,
    query_mse,
    rollout_stats,
    write_report_csv,
    write_summary_json,
)
from .policies import HierarchicalParams, featurize, init_hierarchical
from .rng import SplitMix64, derive_seed
from .tasks import TaskDataset, load_datasets, make_dataset, rollout_expert, sample_task

SALT_INIT = 0x1417
SALT_TASK_SELECT = 0x7A5C
SALT_STEP = 0x57E9

METRICS_HEADER = "iteration,outer_loss,grad_norm_high,grad_norm_skills,diverged"


class Adam:
    """Per-vector Adam state for the runner's meta-optimizer option.

    The meta-update op itself applies the plain atomic descent step its
    contract specifies; when the config selects adam, the runner re-applies
    the op's reduced meta-gradients through this optimizer instead.
    """

    def __init__(self, n: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: ParamVector, grad: ParamVector) -> ParamVector:
        self.t += 1
        g = grad.values
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return ParamVector(theta.values - self.lr * mhat / (np.sqrt(vhat) + self.eps))


# ---------------------------------------------------------------------------
# data and model construction
# ---------------------------------------------------------------------------


def build_datasets(cfg: dict) -> tuple[list[TaskDataset], list[TaskDataset]]:
    d = cfg["data"]
    if d["train_path"] or d["test_path"]:
        if not (d["train_path"] and d["test_path"]):
            raise ValueError("train_path and test_path must be set together")
        return load_datasets(d["train_path"]), load_datasets(d["test_path"])
    train = [
        make_dataset(
            sp := sample_task(d["train_task_seed0"] + i),
            d["n_support"],
            d["n_query"],
            d["horizon"],
            seed=derive_seed(d["data_seed"], sp.seed),
        )
        for i in range(d["n_train_tasks"])
    ]
    test = [
        make_dataset(
            sp := sample_task(d["test_task_seed0"] + i),
            d["n_support"],
            d["n_query"],
            d["horizon"],
            seed=derive_seed(d["data_seed"], sp.seed),
        )
        for i in range(d["n_test_tasks"])
    ]
    return train, test


def train_config_from(cfg: dict) -> TrainConfig:
    m = cfg["dmil"]
    return TrainConfig(
        inner_rate=m["inner_rate"],
        outer_rate=m["outer_rate"],
        inner_steps=m["inner_steps"],
        aux_weight=m["aux_weight"],
        grad_mode=m["grad_mode"],
        outer_reduce=m["outer_reduce"],
        batch_size=m["batch_size"],
        ho_labels=m["ho_labels"],
        meta_high=m["method"] != "dmil_low",
        meta_low=m["method"] != "dmil_high",
    )


def init_model(cfg: dict) -> HierarchicalParams:
    n_skills = 1 if cfg["dmil"]["method"] == "maml" else cfg["model"]["n_skills"]
    return init_hierarchical(
        state_dim=4,
        action_dim=2,
        n_skills=n_skills,
        hidden=tuple(cfg["model"]["hidden"]),
        seed=derive_seed(cfg["run"]["seed"], SALT_INIT),
        features=cfg["model"]["features"],
    )


def _em_alternations(
    params: HierarchicalParams,
    pooled,
    states,
    actions,
    x,
    epochs: int,
    lr: float,
    aux: float,
) -> HierarchicalParams:
    """Label-routed hard-EM alternations (the classical E/M pairing): each
    sub-skill trains only on the pairs it currently wins, so per-pair
    competition stays alive and no single network absorbs everything."""
    high_loss_fn = make_high_loss(params.high_shape)
    skill_loss_fn = make_skill_loss(params.skill_shape)
    for _ in range(epochs):
        labels = hard_labels(states, actions, params.skills, params.skill_shape, params.feature_kind)
        batch = build_high_batch(pooled, labels, aux, params.feature_kind)
        _, g_h = ad.value_and_grad(high_loss_fn, params.high, batch)
        new_high = params.high.minus_scaled(g_h, lr)
        part = partition_pairs(x, actions, labels.indices, params.K)
        new_skills = []
        for k in range(params.K):
            if part.sizes[k] == 0:
                new_skills.append(params.skills[k])
                continue
            sb = SkillBatch(part.states[k], part.actions[k])
            _, g = ad.value_and_grad(skill_loss_fn, params.skills[k], sb)
            new_skills.append(params.skills[k].minus_scaled(g, lr))
        params = params.with_updates(new_high, tuple(new_skills))
    return params


def _em_fit_score(params: HierarchicalParams, pooled, states, actions, x) -> float:
    """Self-contained basin score: selector cross-entropy against the current
    labels plus the label-routed pooled MSE.  Low scores mean the labels are
    both state-predictable and well fit, which tracks decomposition quality."""
    labels = hard_labels(states, actions, params.skills, params.skill_shape, params.feature_kind)
    ce = ad.loss_value(
        make_high_loss(params.high_shape),
        params.high,
        build_high_batch(pooled, labels, 0.0, params.feature_kind),
    )
    part = partition_pairs(x, actions, labels.indices, params.K)
    skill_loss_fn = make_skill_loss(params.skill_shape)
    sse, n = 0.0, 0
    for k in range(params.K):
        if part.sizes[k] == 0:
            continue
        v = ad.loss_value(skill_loss_fn, params.skills[k], SkillBatch(part.states[k], part.actions[k]))
        sse += v * part.sizes[k]
        n += part.sizes[k]
    return ce + (sse / n if n else 0.0)


def warm_start(cfg: dict, train_tasks) -> HierarchicalParams:
    """Cold-start cure for hard-EM at desk scale, applied identically to every
    method before its own training.

    Hard-EM is init-sensitive, so several restarts run short alternation
    probes and the best basin (by the self-contained fit score) continues:
    remaining alternations, then a selector-only consolidation so routing
    works from the first outer iteration.  Everything is a pure function of
    (config, data), so paired methods share the identical warm start.
    """
    m = cfg["dmil"]
    if m["warmup_epochs"] <= 0 and m["warmup_consolidate"] <= 0:
        return init_model(cfg)
    per_task = m["warmup_trajs_per_task"]
    pooled = [t for task in train_tasks for t in task.support[:per_task]]
    states, actions, _ = flatten_trajectories(pooled)
    lr = m["warmup_rate"]
    aux = m["aux_weight"]

    n_skills = 1 if m["method"] == "maml" else cfg["model"]["n_skills"]
    seeds = [derive_seed(cfg["run"]["seed"], SALT_INIT, r) for r in range(m["warmup_restarts"])]
    candidates = [
        init_hierarchical(
            4, 2, n_skills, tuple(cfg["model"]["hidden"]), seed=s, features=cfg["model"]["features"]
        )
        for s in seeds
    ]
    x = featurize(states, candidates[0].feature_kind)

    probe = min(m["warmup_probe_epochs"], m["warmup_epochs"])
    if len(candidates) > 1:
        probed = [_em_alternations(p, pooled, states, actions, x, probe, lr, aux) for p in candidates]
        scores = [_em_fit_score(p, pooled, states, actions, x) for p in probed]
        best = int(np.argmin(scores))
        params = probed[best]
    else:
        params = _em_alternations(candidates[0], pooled, states, actions, x, probe, lr, aux)
    params = _em_alternations(
        params, pooled, states, actions, x, m["warmup_epochs"] - probe, lr, aux
    )

    labels = hard_labels(states, actions, params.skills, params.skill_shape, params.feature_kind)
    batch = build_high_batch(pooled, labels, aux, params.feature_kind)
    high = params.high
    high_loss_fn = make_high_loss(params.high_shape)
    for _ in range(m["warmup_consolidate"]):
        _, g_h = ad.value_and_grad(high_loss_fn, high, batch)
        high = high.minus_scaled(g_h, lr)
    return params.with_updates(high, params.skills)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainResult:
    params: HierarchicalParams
    method: str
    metrics: tuple[dict, ...]  # one row per outer iteration
    diverged_total: int
    train_tasks: tuple[TaskDataset, ...]
    test_tasks: tuple[TaskDataset, ...]


def _metrics_line(row: dict) -> str:
    return (
        f"{row['iteration']},{row['outer_loss']!r},{row['grad_norm_high']!r},"
        f"{row['grad_norm_skills']!r},{row['diverged']}"
    )


def train(cfg: dict, out_dir=None, datasets=None, warm_params=None) -> TrainResult:
    """Train one method per cfg; optionally persist run artifacts to out_dir.

    `datasets` lets callers share prebuilt (train, test) task lists across
    paired runs, and `warm_params` a precomputed warm start; both are pure
    functions of the config, so sharing only saves recomputation.
    """
    method = cfg["dmil"]["method"]
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    train_tasks, test_tasks = datasets if datasets is not None else build_datasets(cfg)
    run = cfg["run"]
    seed = run["seed"]
    tc = train_config_from(cfg)
    params = warm_start(cfg, train_tasks) if warm_params is None else warm_params
    task_rng = SplitMix64(derive_seed(seed, SALT_TASK_SELECT))
    n_train = len(train_tasks)

    use_adam = cfg["dmil"]["outer_optimizer"] == "adam"
    if use_adam:
        adam_high = Adam(len(params.high), tc.outer_rate)
        adam_skills = [Adam(len(s), tc.outer_rate) for s in params.skills]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(dump_config(cfg))
        save_checkpoint(out / "checkpoint_000000.json", params, method, task_rng.state, 0)

    rows: list[dict] = []
    timings: list[float] = []
    diverged_total = 0
    for it in range(run["iterations"]):
        t0 = time.perf_counter()
        picks = [task_rng.randint(n_train) for _ in range(cfg["dmil"]["tasks_per_step"])]
        batch_tasks = [train_tasks[i] for i in picks]
        step_seed = derive_seed(seed, SALT_STEP, it)

        if method in ("dmil", "dmil_high", "dmil_low"):
            res = meta_train_step(params, batch_tasks, tc, step_seed)
            if use_adam:
                params = params.with_updates(
                    adam_high.step(params.high, res.g_high),
                    tuple(a.step(s, g) for a, s, g in zip(adam_skills, params.skills, res.g_skills)),
                )
            else:
                params = res.params
            row = dict(
                iteration=it,
                outer_loss=res.outer_loss,
                grad_norm_high=res.grad_norm_high,
                grad_norm_skills=res.grad_norm_skills,
                diverged=res.diverged_count,
            )
        elif method == "maml":
            res = maml_train_step(
                params.skills[0], params.skill_shape, batch_tasks, tc, step_seed, params.feature_kind
            )
            if use_adam:
                params = params.with_updates(
                    params.high, (adam_skills[0].step(params.skills[0], res.g),)
                )
            else:
                params = params.with_updates(params.high, (res.theta,))
            row = dict(
                iteration=it,
                outer_loss=res.outer_loss,
                grad_norm_high=0.0,
                grad_norm_skills=float(np.linalg.norm(res.g.values)),
                diverged=res.diverged_count,
            )
        else:  # em_only: one hard-EM alternation per iteration on pooled batches
            pooled = []
            for task in batch_tasks:
                rng = SplitMix64(derive_seed(step_seed, task.spec.seed))
                for group in sample_phase_batches(task.support, tc.batch_size, rng):
                    pooled.extend(group)
            res = em_only_train(params, pooled, epochs=1, lr=tc.outer_rate, aux_weight=tc.aux_weight)
            params = res.params
            row = dict(
                iteration=it,
                outer_loss=res.losses[0],
                grad_norm_high=res.high_grad_norms[0],
                grad_norm_skills=res.skill_grad_norms[0],
                diverged=0,
            )
        rows.append(row)
        diverged_total += row["diverged"]
        timings.append(time.perf_counter() - t0)
        if out is not None and run["checkpoint_every"] > 0 and (it + 1) % run["checkpoint_every"] == 0:
            save_checkpoint(out / f"checkpoint_{it + 1:06d}.json", params, method, task_rng.state, it + 1)

    if out is not None:
        save_checkpoint(out / "checkpoint_final.json", params, method, task_rng.state, run["iterations"])
        (out / "metrics.csv").write_text(
            "\n".join([METRICS_HEADER] + [_metrics_line(r) for r in rows]) + "\n"
        )
        (out / "timing.csv").write_text(
            "\n".join(["iteration,seconds"] + [f"{i},{t:.6f}" for i, t in enumerate(timings)]) + "\n"
        )
    return TrainResult(
        params=params,
        method=method,
        metrics=tuple(rows),
        diverged_total=diverged_total,
        train_tasks=tuple(train_tasks),
        test_tasks=tuple(test_tasks),
    )


# ---------------------------------------------------------------------------
# evaluation sweep
# ---------------------------------------------------------------------------


def make_policy(cfg: dict, params: HierarchicalParams, method: str) -> HierarchicalPolicy:
    e = cfg["eval"]
    return HierarchicalPolicy(
        params,
        adapt_rate=e["adapt_rate"],
        adapt_steps=e["adapt_steps"],
        aux_weight=cfg["dmil"]["aux_weight"],
        adapt_high=method != "dmil_low",  # fixed selector at test time
        adapt_low=method != "dmil_high",  # fixed sub-skills at test time
        selector_steps=e["selector_steps"],
    )


def evaluate(
    cfg: dict,
    params: HierarchicalParams,
    method: str,
    test_tasks: Sequence[TaskDataset],
) -> list[dict]:
    e = cfg["eval"]
    policy = make_policy(cfg, params, method)
    rows = []
    for shots in e["shots"]:
        shot_policy = policy
        if e["scale_steps_with_shots"]:
            from dataclasses import replace as _replace

            shot_policy = _replace(policy, adapt_steps=e["adapt_steps"] * shots)
        for task in test_tasks:
            pre = query_mse(shot_policy, task)
            adapted = shot_policy.adapt(list(task.support[:shots]))
            post = query_mse(adapted, task)
            if params.K >= e["n_true_skills"]:
                acc = adapted_skill_accuracy(adapted, task, e["n_true_skills"])
            else:
                acc = None  # a monolithic policy has no skill labels to match
            stats = rollout_stats(adapted, task.spec, e["episodes"], cfg["data"]["horizon"])
            rows.append(
                dict(
                    method=method,
                    seed=cfg["run"]["seed"],
                    task_seed=task.spec.seed,
                    shots=shots,
                    pre_mse=pre,
                    post_mse=post,
                    skill_acc=acc,
                    switch_rate=stats.mean_switch_rate,
                    success=stats.success_rate,
                )
            )
    return rows


# ---------------------------------------------------------------------------
# gradient check on the composed adapt-then-evaluate objectives
# ---------------------------------------------------------------------------


def gradcheck_run(cfg: dict) -> dict:
    """Exact selector/sub-skill meta-gradients vs central finite differences
    on random small instances; returns a report with the worst errors."""
    g = cfg["gradcheck"]
    t0 = time.perf_counter()
    worst_high = 0.0
    worst_low = 0.0
    checked = 0
    for i in range(g["instances"]):
        seed = g["seed0"] + i
        params = init_hierarchical(
            g["state_dim"], g["action_dim"], g["n_skills"], (g["hidden"],), seed=derive_seed(seed, 1)
        )
        spec = sample_task(seed)
        trajs = [rollout_expert(spec, g["horizon"], j) for j in range(4 * g["trajectories"])]
        b = g["trajectories"]
        t1, t2, t3, t4 = (trajs[j * b : (j + 1) * b] for j in range(4))
        for steps in g["inner_steps"]:
            rate = g["inner_rate"]
            aux = 0.1
            trace_h = hi_step(params, t1, rate, steps, aux)
            part2 = partition_by_skill(trace_h.final, params.high_shape, t2)
            traces_l = li_step(params, part2, rate, steps)
            adapted = [t.final for t in traces_l]

            # Selector: loss at the adapted selector with labels held fixed.
            s1, a1, _ = flatten_trajectories(t1)
            batch1 = build_high_batch(t1, hard_labels(s1, a1, params.skills, params.skill_shape), aux)
            s3, a3, _ = flatten_trajectories(t3)
            batch3 = build_high_batch(t3, hard_labels(s3, a3, adapted, params.skill_shape), aux)
            high_loss_fn = make_high_loss(params.high_shape)
            exact_h = ho_grad(trace_h, params, t3, adapted, aux)

            def high_objective(vals):
                tr = inner_adapt(high_loss_fn, ParamVector(vals), rate, batch1, steps)
                return loss_value(high_loss_fn, tr.final, batch3)

            worst_high = max(worst_high, fd_check(high_objective, params.high.values, exact_h.values, g["fd_step"]))

            # Sub-skills: per-skill composed objectives on the routed batches.
            exact_l = lo_grad(traces_l, trace_h.final, params, t4)
            part4 = partition_by_skill(trace_h.final, params.high_shape, t4)
            skill_loss_fn = make_skill_loss(params.skill_shape)
            for k in range(params.K):
                if part2.sizes[k] == 0 or part4.sizes[k] == 0:
                    continue
                batch2k = SkillBatch(part2.states[k], part2.actions[k])
                batch4k = SkillBatch(part4.states[k], part4.actions[k])

                def low_objective(vals, b2=batch2k, b4=batch4k):
                    tr = inner_adapt(skill_loss_fn, ParamVector(vals), rate, b2, steps)
                    return loss_value(skill_loss_fn, tr.final, b4)

                worst_low = max(worst_low, fd_check(low_objective, params.skills[k].values, exact_l[k].values, g["fd_step"]))
                checked += 1
    elapsed = time.perf_counter() - t0
    return {
        "instances": g["instances"],
        "skill_objectives_checked": checked,
        "max_rel_err_high": worst_high,
        "max_rel_err_low": worst_low,
        "tolerance": g["tolerance"],
        "pass": bool(worst_high <= g["tolerance"] and worst_low <= g["tolerance"]),
        "elapsed_seconds": elapsed,
    }


# ---------------------------------------------------------------------------
# ablation sweep
# ---------------------------------------------------------------------------


def ablate(cfg: dict, out_dir=None) -> list[dict]:
    """Train and evaluate every method on identical seeds and batch schedules;
    returns the paired report rows."""
    datasets = build_datasets(cfg)
    rows: list[dict] = []
    for method in METHODS:
        sub = copy.deepcopy(cfg)
        sub["dmil"]["method"] = method
        sub_out = Path(out_dir) / method if out_dir is not None else None
        res = train(sub, out_dir=sub_out, datasets=datasets)
        rows.extend(evaluate(sub, res.params, method, res.test_tasks))
    if out_dir is not None:
        write_report_csv(Path(out_dir) / "ablate_report.csv", rows)
        write_summary_json(Path(out_dir) / "ablate_summary.json", rows)
    return rows
