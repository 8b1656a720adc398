"""Assemble a task, a channel and the amplification plans from a config.

The task data, its partition and the static channel all come from
``task_seed``; run seeds only drive the receiver noise, mini-batches and
redrawn channels. Averaging over run seeds therefore estimates the
expectation over the channel noise for one fixed system, which is what
the convergence bounds describe.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from otafl.aggregation import AggregationStrategy
from otafl.channel import ChannelRealization, draw_channels
from otafl.numerics import RandomStream
from otafl.optimizer import (AmplificationPlan, SolverArtifacts, box_upper, plan_case1,
                             plan_case2, plan_unoptimized, solve_Z)
from otafl.settings import ExperimentConfig
from otafl.tasks import TrainingTask, make_idx_task, make_nonconvex_task, make_ridge_task

logger = logging.getLogger(__name__)


@dataclass
class Experiment:
    config: ExperimentConfig
    task: TrainingTask
    chan: ChannelRealization
    b_max: np.ndarray
    artifacts: SolverArtifacts
    plans: dict[str, AmplificationPlan] = field(default_factory=dict)

    def strategy(self, name: str) -> AggregationStrategy:
        return AggregationStrategy(kind=name, G=self.task.require_constants().G)

    @property
    def primary_plan(self) -> AmplificationPlan:
        return self.plans["case1" if self.config.case == "I" else "case2"]


def build_task(config: ExperimentConfig) -> TrainingTask:
    stream = RandomStream(config.task_seed)
    common = dict(theta_th=config.theta_th, skew=config.skew, warmup_rounds=config.warmup_rounds,
                  test_fraction=config.test_fraction)
    if config.task == "ridge":
        return make_ridge_task(stream, config.num_devices, config.samples_per_device, config.dim,
                               config.noise_std, config.ridge_coeff, **common)
    if config.task == "classifier":
        return make_nonconvex_task(stream, config.num_devices, config.samples_per_device,
                                   config.dim_in, config.hidden, config.classes, **common)
    return make_idx_task(stream, config.idx_images, config.idx_labels, config.num_devices,
                         config.hidden, limit=config.idx_limit, **common)


def build_channel(config: ExperimentConfig, dim: int) -> ChannelRealization:
    return draw_channels(RandomStream(config.task_seed, purpose="channel"), config.num_devices,
                         config.channel_mean, sigma2=config.sigma2, dim=dim)


def delta_f_estimate(config: ExperimentConfig, task: TrainingTask) -> float:
    """Configured deltaF, else F(w^1) - 0 (both losses are nonnegative)."""
    if config.delta_f is not None:
        return config.delta_f
    return task.loss(task.w_init)


def build_plans(config: ExperimentConfig, task: TrainingTask, chan: ChannelRealization,
                b_max: np.ndarray, artifacts: SolverArtifacts,
                cases: tuple[str, ...] | None = None) -> dict[str, AmplificationPlan]:
    """Plans keyed by label: ``case1``, ``case2`` and their ``-unoptimized`` twins."""
    cases = cases or (config.case,)
    plans: dict[str, AmplificationPlan] = {}
    if "I" in cases:
        plans["case1"] = plan_case1(chan, b_max, task, config.p, delta_f_estimate(config, task),
                                    artifacts=artifacts)
    if "II" in cases:
        plans["case2"] = plan_case2(chan, b_max, task, config.eta, artifacts=artifacts,
                                    **config.case2_target)
    if config.compare_unoptimized:
        for plan in list(plans.values()):
            twin = plan_unoptimized(chan, b_max, plan)
            plans[twin.label] = twin
    return plans


@lru_cache(maxsize=4)
def build_experiment(config: ExperimentConfig, all_cases: bool = False) -> Experiment:
    """Task, channel, solved Z and plans; cached per process by config."""
    task = build_task(config)
    chan = build_channel(config, task.dim)
    b_max = box_upper(np.asarray(config.b_max), config.num_devices)
    artifacts = solve_Z(chan, b_max)
    cases: tuple[str, ...] = (config.case,)
    if all_cases:
        cases = ("I", "II") if task.require_constants().M > 0 else ("I",)
    plans = build_plans(config, task, chan, b_max, artifacts, cases)
    logger.info("experiment %s: Z=%.6g plans=%s", config.fingerprint()[:12], artifacts.Z,
                ", ".join(plans))
    return Experiment(config=config, task=task, chan=chan, b_max=b_max, artifacts=artifacts,
                      plans=plans)
