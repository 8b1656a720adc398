"""Multi-seed runs on a worker pool.

Each job is one (config, plan, strategy, seed) run. Workers return a
result dict with a ``status`` of ``success`` or ``fail`` so one broken
run never stops the rest; results are merged by key, so completion order
does not matter.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from tqdm import tqdm

from otafl.experiment import build_experiment
from otafl.settings import ExperimentConfig, max_workers as default_workers
from otafl.trainer import RunTrace, run

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Job:
    config: ExperimentConfig
    plan: str
    strategy: str
    seed: int
    all_cases: bool = False

    @property
    def key(self) -> str:
        return f"{self.config.fingerprint()[:12]}/{self.plan}/{self.strategy}/{self.seed:04d}"

    @property
    def group(self) -> str:
        return f"{self.plan}/{self.strategy}"


@dataclass
class SweepResult:
    traces: dict[str, RunTrace] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    def by_group(self, jobs: Sequence[Job]) -> dict[str, list[RunTrace]]:
        """Successful traces per ``plan/strategy``, each list in seed order."""
        groups: dict[str, list[RunTrace]] = {}
        for job in sorted(jobs, key=lambda j: (j.group, j.seed)):
            if job.key in self.traces:
                groups.setdefault(job.group, []).append(self.traces[job.key])
        return groups


def run_job(job: Job) -> dict:
    """Worker: one training run. Never raises."""
    try:
        exp = build_experiment(job.config, job.all_cases)
        plan = exp.plans[job.plan]
        trace = run(exp.task, exp.chan, plan, exp.strategy(job.strategy), job.config.rounds,
                    job.seed, b_max=exp.b_max, batch_size=job.config.batch_size,
                    channel_mode=job.config.channel_mode,
                    channel_mean=job.config.channel_mean,
                    fingerprint=job.config.fingerprint(), label=job.plan)
    except Exception as e:  # noqa: BLE001
        return {'key': job.key, 'status': 'fail', 'message': f"{type(e).__name__}: {e}"}
    return {'key': job.key, 'status': 'success', 'trace': trace,
            'message': f"final loss {trace.final_loss:.6g}"}


def make_jobs(configs: Iterable[ExperimentConfig], seeds: Sequence[int] | None = None, *,
              plans: Sequence[str] | None = None, all_cases: bool = False) -> list[Job]:
    """Cartesian product configs x plans x strategies x seeds."""
    jobs = []
    for config in configs:
        labels = plans or tuple(build_experiment(config, all_cases).plans)
        for label in labels:
            for strategy in config.strategy:
                for seed in (seeds if seeds is not None else config.seeds):
                    jobs.append(Job(config, label, strategy, seed, all_cases))
    return jobs


def sweep(jobs: Sequence[Job], *, workers: int | None = None,
          progress: bool = True) -> SweepResult:
    """Run every job; failures are collected, not raised."""
    workers = default_workers() if workers is None else workers
    result = SweepResult()

    note = tqdm.write if progress else logger.debug

    def collect(outcome: dict, pbar: tqdm) -> None:
        if outcome['status'] == 'success':
            result.traces[outcome['key']] = outcome['trace']
            note(f"[OK] {outcome['key']} - {outcome['message']}")
        else:
            result.failures[outcome['key']] = outcome['message']
            note(f"[FAIL] {outcome['key']} - {outcome['message']}")
        pbar.update(1)

    with tqdm(total=len(jobs), desc="Runs", unit="run", disable=not progress) as pbar:
        if workers <= 1:
            for job in jobs:
                collect(run_job(job), pbar)
        else:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                futures = {executor.submit(run_job, job): job for job in jobs}
                for future in as_completed(futures):
                    collect(future.result(), pbar)

    result.traces = dict(sorted(result.traces.items()))
    result.failures = dict(sorted(result.failures.items()))
    if result.failures:
        logger.warning("%d of %d runs failed", len(result.failures), len(jobs))
    return result
