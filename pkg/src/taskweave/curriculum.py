"""Interleaved multi-task training schedules.

Two modes drive the same gradient-coupled step:

* ``balanced``  -- every task contributes the same number of batches per
  optimizer step; an epoch ends once every task's loader has been exhausted.
* ``adaptive``  -- batch slots are sampled per step in proportion to a task
  difficulty score (distance from goal divided by recent improvement rate),
  with a minimum sampling probability guaranteed by two-stage normalization.

All per-batch gradients inside one step are summed into a single buffer and
applied by exactly one optimizer update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import Batch, Loader, TaskData
from .encoder import (
    EncoderParams,
    GradBuffer,
    OptimState,
    adam_step,
    backward,
    batch_hard_triplet,
    embed,
    hardest_distances,
)
from .errors import ConfigurationError, ContractError
from .seeding import stream

BALANCED = "balanced"
ADAPTIVE = "adaptive"
MODES = (BALANCED, ADAPTIVE)


@dataclass
class SchedulerConfig:
    """Knobs shared by both curriculum modes.

    ``goals`` maps task name to target accuracy in (0, 1]. ``batches_per_task``
    is the balanced-mode per-task batch count; ``total_batches`` the adaptive-
    mode step budget (defaults to n_tasks * batches_per_task so the two modes
    consume equal data per step).
    """

    goals: dict[str, float]
    batches_per_task: int = 1
    total_batches: int | None = None
    epsilon: float = 1e-8
    floor: float = 0.05
    accuracy_cadence: int = 1
    probe_batches: int = 2
    steps_per_epoch: int | None = None

    def validate(self, n_tasks: int) -> None:
        if n_tasks < 2:
            raise ConfigurationError("scheduler needs at least 2 tasks")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.floor < 0 or self.floor * n_tasks >= 1:
            raise ConfigurationError("floor must satisfy 0 <= floor and floor * n_tasks < 1")
        if self.batches_per_task < 1:
            raise ConfigurationError("batches_per_task must be >= 1")
        if self.total_batches is not None and self.total_batches < 1:
            raise ConfigurationError("total_batches must be >= 1")
        if self.accuracy_cadence < 1:
            raise ConfigurationError("accuracy_cadence must be >= 1")
        if self.probe_batches < 1:
            raise ConfigurationError("probe_batches must be >= 1")
        for task, goal in self.goals.items():
            if not 0.0 < goal <= 1.0:
                raise ConfigurationError(f"goal for task {task!r} must lie in (0, 1]")


@dataclass
class TaskState:
    """Per-task scheduler state: accuracy log and current scoring values."""

    metric_log: list[tuple[int, float]] = field(default_factory=list)
    last_allocation: int | None = None
    improvement: float | None = None
    goal_distance: float | None = None
    score: float | None = None
    probability: float | None = None

    def latest_accuracy(self) -> float | None:
        return self.metric_log[-1][1] if self.metric_log else None


@dataclass
class TaskScore:
    improvement: float
    goal_distance: float
    score: float
    probability: float


@dataclass
class StepReport:
    step: int
    mode: str
    allocations: dict[str, int]
    losses: dict[str, float]
    exhausted: dict[str, bool]
    accuracies: dict[str, float | None]
    scoring: dict[str, TaskScore] | None

    @property
    def batches_consumed(self) -> int:
        return sum(self.allocations.values())

    def to_record(self) -> dict:
        """JSON-ready trace record; the replay conformance surface."""
        tasks = {}
        for name in self.allocations:
            entry = {
                "allocation": self.allocations[name],
                "loss": self.losses[name],
                "accuracy": self.accuracies[name],
                "exhausted": self.exhausted[name],
            }
            if self.scoring is not None:
                s = self.scoring[name]
                entry.update(
                    improvement=s.improvement,
                    goal_distance=s.goal_distance,
                    score=s.score,
                    probability=s.probability,
                )
            else:
                entry.update(improvement=None, goal_distance=None, score=None, probability=None)
            tasks[name] = entry
        return {"step": self.step, "mode": self.mode, "tasks": tasks}


@dataclass
class EpochReport:
    steps: list[StepReport]

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def total_allocation(self, task: str) -> int:
        return sum(s.allocations[task] for s in self.steps)

    def mean_loss(self, task: str) -> float:
        batches = self.total_allocation(task)
        if batches == 0:
            return float("nan")
        return sum(s.losses[task] for s in self.steps) / batches


def balanced_allocation(n_tasks: int, per_task: int) -> list[int]:
    """Constant allocation: every task gets ``per_task`` batches."""
    if n_tasks < 1 or per_task < 1:
        raise ContractError("n_tasks and per_task must be >= 1")
    return [per_task] * n_tasks


def relative_improvement(
    metric_prev: float, metric_curr: float, allocation: int, epsilon: float
) -> float:
    """Improvement rate per allocated batch: |curr - prev| / prev / t + eps.

    A zero previous metric substitutes eps for the relative ratio.
    """
    if allocation < 1:
        raise ContractError("allocation must be >= 1")
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    if metric_prev < 0:
        raise ContractError("metric_prev must be nonnegative")
    ratio = epsilon if metric_prev == 0 else abs(metric_curr - metric_prev) / metric_prev
    return ratio / allocation + epsilon


def distance_from_goal(goal: float, accuracy: float) -> float:
    """Normalized shortfall (goal - accuracy) / goal, clamped at 0."""
    if not 0.0 < goal <= 1.0:
        raise ContractError("goal must lie in (0, 1]")
    return max(0.0, (goal - accuracy) / goal)


def task_scores_to_probabilities(scores, floor: float) -> np.ndarray:
    """Two-stage normalization of nonnegative scores into probabilities.

    Stage 1 divides by the total (uniform if all scores are zero). Stage 2
    pins every task below ``floor`` to exactly ``floor`` and redistributes the
    remaining mass over the others in proportion to their stage-1 share,
    iterating until no new task falls below the floor.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n == 0:
        raise ContractError("scores must be non-empty")
    if (scores < 0).any() or not np.isfinite(scores).all():
        raise ContractError("scores must be finite and nonnegative")
    if floor < 0 or floor * n >= 1.0:
        raise ConfigurationError("floor must satisfy 0 <= floor and floor * n < 1")
    total = scores.sum()
    p_hat = np.full(n, 1.0 / n) if total == 0 else scores / total
    pinned = p_hat < floor
    while True:
        mass = 1.0 - floor * pinned.sum()
        unpinned_share = p_hat[~pinned].sum()
        p = np.where(pinned, floor, p_hat * (mass / unpinned_share))
        newly = ~pinned & (p < floor)
        if not newly.any():
            return p
        pinned |= newly


def sample_allocation(probabilities, total: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial draw of ``total`` batch slots over tasks."""
    p = np.asarray(probabilities, dtype=np.float64)
    if total < 1:
        raise ContractError("total must be >= 1")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError("probabilities must be nonnegative and sum to 1")
    return rng.multinomial(total, p / p.sum())


class Trainer:
    """Holds everything one curriculum run needs and advances it stepwise."""

    def __init__(
        self,
        mode: str,
        task_data: dict[str, TaskData],
        params: EncoderParams,
        opt_state: OptimState,
        scheduler: SchedulerConfig,
        identities: int,
        positives: int,
        margin: float,
        seed: int,
        subsample: dict[str, float] | None = None,
    ):
        if mode not in MODES:
            raise ConfigurationError(f"unknown curriculum mode {mode!r}")
        scheduler.validate(len(task_data))
        missing = sorted(set(task_data) - set(scheduler.goals))
        if missing:
            raise ConfigurationError(f"goals missing for tasks: {missing}")
        self.mode = mode
        self.task_names = list(task_data)
        self.task_data = task_data
        self.params = params
        self.opt_state = opt_state
        self.scheduler = scheduler
        self.identities = identities
        self.positives = positives
        self.margin = margin
        self.seed = seed
        subsample = subsample or {}
        self.loaders = {
            name: Loader(data, stream(seed, "loader", name), subsample.get(name, 1.0))
            for name, data in task_data.items()
        }
        self.buffer = GradBuffer.zeros_like(params)
        self.states = {name: TaskState() for name in task_data}
        self.alloc_rng = stream(seed, "allocation")
        self.step = 0
        if mode == ADAPTIVE:
            self.seed_initial_accuracies()

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)

    @property
    def total_batches(self) -> int:
        if self.scheduler.total_batches is not None:
            return self.scheduler.total_batches
        return self.n_tasks * self.scheduler.batches_per_task

    def seed_initial_accuracies(self) -> None:
        """Pre-training evaluation pass: log a step-0 accuracy per task so
        the adaptive scorer has a starting point."""
        for name, data in self.task_data.items():
            rng = stream(self.seed, "probe", name)
            satisfied = total = 0
            for _ in range(self.scheduler.probe_batches):
                batch = self._probe_batch(data, rng)
                emb = embed(self.params, batch.features)
                d_pos, d_neg, _, _ = hardest_distances(emb, batch.labels)
                satisfied += int((d_pos < d_neg).sum())
                total += len(d_pos)
            self.states[name].metric_log.append((0, satisfied / total))

    def _probe_batch(self, data: TaskData, rng: np.random.Generator) -> Batch:
        classes = data.classes
        p = min(self.identities, len(classes))
        chosen = rng.choice(classes, size=p, replace=False)
        rows = []
        for lab in chosen:
            members = np.flatnonzero(data.labels == lab)
            rows.extend(rng.choice(members, size=self.positives, replace=False))
        rows = np.asarray(rows)
        return Batch(features=data.features[rows], labels=data.labels[rows], task=data.name)

    def _score_tasks(self) -> dict[str, TaskScore]:
        eps = self.scheduler.epsilon
        raw = {}
        for name in self.task_names:
            state = self.states[name]
            log = state.metric_log
            if not log:
                raise ConfigurationError(
                    f"task {name!r} has no logged accuracy; seed initial accuracies first"
                )
            curr = log[-1][1]
            prev = log[-2][1] if len(log) >= 2 else curr
            alloc = state.last_allocation
            if alloc is None:
                alloc = 1
            if alloc >= 1:
                improvement = relative_improvement(prev, curr, alloc, eps)
            else:
                # No batches last step means no measured improvement.
                improvement = eps
            goal_dist = distance_from_goal(self.scheduler.goals[name], curr)
            raw[name] = (improvement, goal_dist, goal_dist / improvement)
        probs = task_scores_to_probabilities(
            [raw[name][2] for name in self.task_names], self.scheduler.floor
        )
        scoring = {}
        for name, prob in zip(self.task_names, probs):
            improvement, goal_dist, score = raw[name]
            scoring[name] = TaskScore(improvement, goal_dist, score, float(prob))
            state = self.states[name]
            state.improvement = improvement
            state.goal_distance = goal_dist
            state.score = score
            state.probability = float(prob)
        return scoring

    def train_step(self) -> StepReport:
        """One gradient-coupled step: allocate, accumulate, update once,
        then measure online accuracy on the just-used batches."""
        self.step += 1
        if self.mode == BALANCED:
            alloc_list = balanced_allocation(self.n_tasks, self.scheduler.batches_per_task)
            scoring = None
        else:
            scoring = self._score_tasks()
            probs = [scoring[name].probability for name in self.task_names]
            alloc_list = sample_allocation(probs, self.total_batches, self.alloc_rng)
        allocations = {name: int(a) for name, a in zip(self.task_names, alloc_list)}

        losses = {name: 0.0 for name in self.task_names}
        exhausted = {name: False for name in self.task_names}
        used: dict[str, list[Batch]] = {name: [] for name in self.task_names}
        for name in self.task_names:
            loader = self.loaders[name]
            for _ in range(allocations[name]):
                batch, flag = loader.next_batch(self.identities, self.positives)
                emb = embed(self.params, batch.features)
                loss, grad_emb = batch_hard_triplet(emb, batch.labels, self.margin)
                backward(self.params, batch.features, grad_emb, self.buffer)
                losses[name] += loss
                exhausted[name] = exhausted[name] or flag
                used[name].append(batch)
        adam_step(self.params, self.buffer, self.opt_state)

        accuracies: dict[str, float | None] = {name: None for name in self.task_names}
        if self.step % self.scheduler.accuracy_cadence == 0:
            for name in self.task_names:
                if not used[name]:
                    continue
                satisfied = total = 0
                for batch in used[name]:
                    emb = embed(self.params, batch.features)
                    d_pos, d_neg, _, _ = hardest_distances(emb, batch.labels)
                    satisfied += int((d_pos < d_neg).sum())
                    total += len(d_pos)
                accuracies[name] = satisfied / total
                self.states[name].metric_log.append((self.step, accuracies[name]))
        for name in self.task_names:
            self.states[name].last_allocation = allocations[name]

        return StepReport(
            step=self.step,
            mode=self.mode,
            allocations=allocations,
            losses=losses,
            exhausted=exhausted,
            accuracies=accuracies,
            scoring=scoring,
        )

    def run_epoch(self) -> EpochReport:
        """Balanced: step until every loader has exhausted at least once.
        Adaptive: run the configured number of steps."""
        reports: list[StepReport] = []
        if self.mode == ADAPTIVE:
            if self.scheduler.steps_per_epoch is None:
                raise ConfigurationError("adaptive mode requires steps_per_epoch")
            for _ in range(self.scheduler.steps_per_epoch):
                reports.append(self.train_step())
            return EpochReport(steps=reports)

        seen = {name: False for name in self.task_names}
        per_task = self.scheduler.batches_per_task
        batch = self.identities * self.positives
        largest = max(loader.size for loader in self.loaders.values())
        step_cap = 10 * (largest // (per_task * batch) + 2)
        while not all(seen.values()):
            if len(reports) >= step_cap:
                raise ConfigurationError("epoch failed to exhaust all loaders (internal bound hit)")
            report = self.train_step()
            reports.append(report)
            for name, flag in report.exhausted.items():
                seen[name] = seen[name] or flag
        return EpochReport(steps=reports)
