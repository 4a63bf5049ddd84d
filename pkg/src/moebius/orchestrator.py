"""The co-evolution loop: filtered batching, player training, evaluation,
coach adjustment, and all round bookkeeping.

Candidate evaluation during filtering can fan out across worker threads;
every candidate's result depends only on its index, so the accepted batch,
the attempt count, and the metrics stream are identical for any worker
count. All policy mutation happens on the coordinating thread.
"""

from __future__ import annotations

import json
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator

from moebius import _kernels as kernels
from moebius.config import EvalProtocol, RunConfig
from moebius.core import (
    LANE_ROLLOUT,
    RETRAIN_ID_OFFSET,
    FilterStats,
    LossStats,
    MoebiusError,
    PolicyError,
    RolloutGroup,
    RoundAborted,
    RoundRecord,
    TaskInstruction,
    derive_rng,
    initial_round_record,
)
from moebius.domain import ValidationSet, build_validation_set
from moebius.grpo import GrpoBatch, GrpoUpdateStats, grpo_update
from moebius.metrics import MetricsWriter
from moebius.policies import (
    CoachPolicy,
    PlayerPolicy,
    SoftmaxPlayer,
    make_initial_coach,
    make_initial_player,
    player_from_params,
)
from moebius.reinforce import CoachBatch, reinforce_update
from moebius.rewards import build_rollout_group, coach_reward, progress_delta


def _lazy_ordered_map(fn: Callable[[int], object], count: int,
                      workers: int) -> Iterator[object]:
    """Yield fn(0), fn(1), ... in order, speculatively computed in parallel.

    Results depend only on the index, so consumers may stop early without
    affecting anything already yielded; unconsumed speculative work is
    discarded.
    """
    if workers <= 1:
        for index in range(count):
            yield fn(index)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        window = 2 * workers
        pending: deque = deque()
        next_index = 0
        while next_index < count and len(pending) < window:
            pending.append(pool.submit(fn, next_index))
            next_index += 1
        while pending:
            result = pending.popleft().result()
            if next_index < count:
                pending.append(pool.submit(fn, next_index))
                next_index += 1
            yield result


def _is_zero_variance(group: RolloutGroup) -> bool:
    return all(a == 0.0 for a in group.advantages)


def propose_filtered_batch(coach: CoachPolicy, player: PlayerPolicy, cfg: RunConfig,
                           round_index: int) -> tuple[list[TaskInstruction], list[RolloutGroup], FilterStats]:
    """Sample coached candidates until m lie inside the difficulty band.

    Rollouts produced here double as the training rollouts. High consistency
    (acc above the band) means the task is too easy; low consistency means
    too hard. If the attempt budget runs out first, the slots are filled with
    the rejected candidates closest to the band midpoint and the fallback
    flag is set. With the filter disabled the first m candidates pass through.
    """
    filter_on = cfg.ablation.instruction_filter_enabled
    accepted: list[tuple[TaskInstruction, RolloutGroup]] = []
    rejected: list[tuple[TaskInstruction, RolloutGroup, str]] = []
    budget = cfg.attempts_budget

    def candidate(index: int) -> tuple[TaskInstruction, RolloutGroup]:
        task = coach.sample_task(round_index, index)
        samples = player.sample_answers(task, cfg.n)
        return task, build_rollout_group(task.id, samples, cfg.grpo.std_eps)

    candidates_sampled = 0
    stream = _lazy_ordered_map(candidate, budget, cfg.workers)
    try:
        for task, group in stream:
            candidates_sampled += 1
            if not filter_on or cfg.band_lo <= group.acc <= cfg.band_hi:
                accepted.append((task, group))
                if len(accepted) == cfg.m:
                    break
            elif group.acc > cfg.band_hi:
                rejected.append((task, group, "easy"))
            else:
                rejected.append((task, group, "hard"))
    finally:
        stream.close()

    fallback_used = len(accepted) < cfg.m
    if fallback_used:
        midpoint = (cfg.band_lo + cfg.band_hi) / 2.0
        order = sorted(range(len(rejected)),
                       key=lambda i: (abs(rejected[i][1].acc - midpoint), rejected[i][0].id))
        promoted = order[:cfg.m - len(accepted)]
        for i in promoted:
            accepted.append((rejected[i][0], rejected[i][1]))
        rejected = [entry for i, entry in enumerate(rejected) if i not in set(promoted)]
        if len(accepted) < cfg.m:
            raise PolicyError(f"filter budget {budget} cannot fill a batch of {cfg.m}")

    tasks = [task for task, _ in accepted]
    groups = [group for _, group in accepted]
    stats = FilterStats(
        candidates_sampled=candidates_sampled,
        rejected_too_easy=sum(1 for _, _, side in rejected if side == "easy"),
        rejected_too_hard=sum(1 for _, _, side in rejected if side == "hard"),
        fallback_used=fallback_used,
        zero_variance_groups=sum(1 for g in groups if _is_zero_variance(g)),
    )
    return tasks, groups, stats


def regenerate_rollouts(player: PlayerPolicy, tasks: list[TaskInstruction],
                        cfg: RunConfig) -> list[RolloutGroup]:
    """Fresh training rollouts for an accepted batch (two-pass mode).

    Draws come from the retrain id range so they are independent of the
    filtering rollouts; groups keep the original instruction ids.
    """
    groups = []
    for task in tasks:
        view = replace(task, id=task.id + RETRAIN_ID_OFFSET)
        samples = player.sample_answers(view, cfg.n)
        groups.append(build_rollout_group(task.id, samples, cfg.grpo.std_eps))
    return groups


def execute_player_training(player: PlayerPolicy, tasks: list[TaskInstruction],
                            groups: list[RolloutGroup], reference: PlayerPolicy,
                            cfg: RunConfig) -> GrpoUpdateStats:
    """One player update on the round's batch."""
    batch = GrpoBatch(instructions=tuple(tasks), groups=tuple(groups),
                      reference_version=reference.snapshot().digest())
    return grpo_update(player, batch, reference, cfg.grpo, cfg.player_lr,
                       cfg.player_entropy_coef)


def evaluate_player(player: PlayerPolicy, validation: ValidationSet,
                    protocol: EvalProtocol, round_tag: int = 0) -> float:
    """Validation accuracy under the configured protocol.

    Exact mode sums the closed-form probability of each ground-truth answer.
    Sampled mode draws mean@k per task from streams keyed by the protocol
    seed and the evaluation round, so repeated evaluations of one policy
    state are deterministic and evaluations of different rounds independent.
    """
    if len(validation) == 0:
        raise PolicyError("empty validation set")
    if protocol.kind == "exact":
        if not player.exactly_evaluable:
            raise PolicyError("exact evaluation needs an exactly-evaluable player")
        return player.exact_accuracy(validation)

    truth_idx = validation.truth_indices
    total = 0.0
    for ordinal, task in enumerate(validation.tasks):
        logp = player.dist(task)
        rng = derive_rng(protocol.seed, round_tag, task.id, LANE_ROLLOUT)
        draws = kernels.draw_categorical(logp, rng.random(protocol.k))
        total += float((draws == truth_idx[ordinal]).sum()) / protocol.k
    return total / len(validation)


@dataclass
class RunState:
    """Mutable loop state threaded through the rounds."""

    coach: CoachPolicy
    player: PlayerPolicy
    reference: SoftmaxPlayer
    validation: ValidationSet
    acc_pre: float


def run_round(state: RunState, cfg: RunConfig, round_index: int) -> RoundRecord:
    """One full loop iteration; on any failure both policies are restored to
    their round-start snapshots and the round is reported aborted."""
    coach_snapshot = state.coach.snapshot()
    player_snapshot = state.player.snapshot()
    try:
        interval = cfg.grpo.ref_refresh_interval
        if interval > 0 and round_index > 1 and (round_index - 1) % interval == 0:
            state.reference = player_from_params(state.player.snapshot(), cfg.domain,
                                                 cfg.seed, cfg.player_temperature)

        tasks, groups, filter_stats = propose_filtered_batch(
            state.coach, state.player, cfg, round_index)
        if cfg.regenerate_training_rollouts:
            groups = regenerate_rollouts(state.player, tasks, cfg)

        update_stats = execute_player_training(state.player, tasks, groups,
                                               state.reference, cfg)
        acc_post = evaluate_player(state.player, state.validation,
                                   cfg.eval_protocol, round_tag=round_index)
        delta = progress_delta(acc_post, state.acc_pre)
        player_rewards = [group.player_reward for group in groups]
        coach_rewards = [coach_reward(value, delta) for value in player_rewards]

        if cfg.ablation.coach_update_enabled:
            batch = CoachBatch(tuple(zip(tasks, coach_rewards)))
            coach_stats = reinforce_update(state.coach, batch, cfg.coach_lr,
                                           cfg.coach_entropy_coef)
            coach_objective = coach_stats.objective
            coach_entropy = coach_stats.entropy
        else:
            coach_objective = 0.0
            coach_entropy = state.coach.entropy()

        record = RoundRecord(
            round=round_index,
            instruction_ids=tuple(task.id for task in tasks),
            acc_pre=state.acc_pre,
            acc_post=acc_post,
            delta=delta,
            player_rewards=tuple(player_rewards),
            coach_rewards=tuple(coach_rewards),
            filter_stats=filter_stats,
            loss_stats=LossStats(
                player_objective=update_stats.objective,
                player_surrogate=update_stats.surrogate,
                player_kl=update_stats.kl,
                player_entropy=update_stats.entropy,
                max_ratio_dev=update_stats.max_ratio_dev,
                coach_objective=coach_objective,
                coach_entropy=coach_entropy,
            ),
        )
        state.acc_pre = acc_post
        return record
    except MoebiusError as exc:
        state.coach.restore(coach_snapshot)
        state.player.restore(player_snapshot)
        raise RoundAborted(round_index, exc) from exc


@dataclass
class RunResult:
    """Outcome of a full training run."""

    initial_accuracy: float
    final_accuracy: float
    rounds_completed: int
    records: list[RoundRecord]
    coach: CoachPolicy
    player: PlayerPolicy


def _checkpoint(out_dir: Path, round_index: int, state: RunState) -> None:
    target = out_dir / "checkpoints" / f"round_{round_index}"
    target.mkdir(parents=True, exist_ok=True)
    (target / "coach.json").write_text(
        json.dumps(state.coach.snapshot().to_json(), indent=2), encoding="utf-8")
    (target / "player.json").write_text(
        json.dumps(state.player.snapshot().to_json(), indent=2), encoding="utf-8")
    (target / "state.json").write_text(
        json.dumps({"round": round_index, "acc_pre": state.acc_pre,
                    "reference": state.reference.snapshot().to_json()}, indent=2),
        encoding="utf-8")


def run(cfg: RunConfig, *, out_dir: str | Path | None = None,
        coach: CoachPolicy | None = None,
        player: PlayerPolicy | None = None) -> RunResult:
    """Train for cfg.T rounds; optionally stream metrics and checkpoints.

    Accepts prebuilt policies (e.g. wire-backed ones); by default both are
    initialized in process from the config. Metrics are written after every
    round, so partial output survives an aborted run.
    """
    spec = cfg.domain
    validation = build_validation_set(spec, cfg.seed)
    if coach is None:
        coach = make_initial_coach(spec, cfg.seed, cfg.initial_coach_logits())
    if player is None:
        player = make_initial_player(spec, cfg.seed, truth_weight=cfg.init_truth_weight,
                                     temperature=cfg.player_temperature)
    reference = player_from_params(player.snapshot(), spec, cfg.seed,
                                   cfg.player_temperature)
    state = RunState(coach=coach, player=player, reference=reference,
                     validation=validation, acc_pre=0.0)

    initial_accuracy = evaluate_player(player, validation, cfg.eval_protocol, round_tag=0)
    state.acc_pre = initial_accuracy
    records = [initial_round_record(initial_accuracy)]

    out_path = Path(out_dir) if out_dir is not None else None
    writer = MetricsWriter(out_path / "metrics.jsonl") if out_path else None

    def checkpoint_due(round_index: int) -> bool:
        if out_path is None:
            return False
        if round_index == 0 or round_index == cfg.T:
            return True
        return cfg.checkpoint_interval > 0 and round_index % cfg.checkpoint_interval == 0

    try:
        if writer:
            writer.write_record(records[0])
        if checkpoint_due(0):
            _checkpoint(out_path, 0, state)
        rounds_completed = 0
        try:
            for round_index in range(1, cfg.T + 1):
                record = run_round(state, cfg, round_index)
                records.append(record)
                rounds_completed = round_index
                if writer:
                    writer.write_record(record)
                if checkpoint_due(round_index):
                    _checkpoint(out_path, round_index, state)
        except RoundAborted as aborted:
            if writer:
                writer.write_abort(aborted.round_index, str(aborted.cause))
            raise
        return RunResult(initial_accuracy=initial_accuracy,
                         final_accuracy=state.acc_pre,
                         rounds_completed=rounds_completed,
                         records=records, coach=coach, player=player)
    finally:
        if writer:
            writer.close()
