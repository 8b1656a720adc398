"""Tests for otafl/trainer.py."""
from __future__ import annotations

import math

import numpy as np
import pytest

import otafl.trainer as trainer
from otafl.aggregation import AggregationStrategy
from otafl.channel import ChannelRealization
from otafl.datasets import Dataset
from otafl.errors import DivergenceError, InvalidArgumentError
from otafl.numerics import RandomStream, gaussian_vector
from otafl.optimizer import EtaSchedule
from otafl.trainer import RoundRecord, RunTrace, paired_sign_test, run
from tests.conftest import manual_plan, unit_channel


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class TestRun:
    def test_ideal_gradient_descent_reaches_optimum(self, small_ridge):
        L = small_ridge.require_constants().L
        plan = manual_plan(1.0, np.ones(4), EtaSchedule.constant(1.0 / L))
        trace = run(small_ridge, unit_channel(4, 3), plan, AggregationStrategy("ideal"), 60, 0)
        loss = trace.column("loss")
        assert np.all(np.diff(loss) <= 1e-12)
        assert loss[-1] - small_ridge.optimum.F_star < 1e-6

    def test_records_every_model(self, identity_ridge):
        plan = manual_plan(0.5, [1.0], EtaSchedule.power(0.75))
        trace = run(identity_ridge, unit_channel(1, 2), plan, AggregationStrategy("normalized"), 5, 3)
        assert trace.rounds == 5
        assert trace.column("t").tolist() == [1, 2, 3, 4, 5, 6]
        assert trace.column("eta")[3] == pytest.approx(4 ** -0.75)
        assert trace.records[0].loss == pytest.approx(1.25)
        assert trace.label == "manual" and trace.seed == 3
        assert np.all(np.diff(trace.column("min_grad_norm")) <= 0)

    def test_records_held_out_loss(self, identity_ridge):
        identity_ridge.holdout = Dataset(features=np.eye(2), labels=np.array([1.0, 2.0]))
        plan = manual_plan(0.5, [1.0], EtaSchedule.constant(0.1))
        trace = run(identity_ridge, unit_channel(1, 2), plan, AggregationStrategy("normalized"), 4, 0)
        # held-out rows equal the training rows and there is no regularizer
        assert np.allclose(trace.column("test_loss"), trace.column("loss"))
        assert np.isnan(trace.column("accuracy")).all()

    def test_no_held_out_set_leaves_columns_empty(self, identity_ridge):
        plan = manual_plan(0.5, [1.0], EtaSchedule.constant(0.1))
        trace = run(identity_ridge, unit_channel(1, 2), plan, AggregationStrategy("normalized"), 3, 0)
        assert all(r.test_loss is None and r.accuracy is None for r in trace.records)
        assert trace.records[0].row()["accuracy"] is None

    def test_matches_reference_loop(self, identity_ridge):
        # one device, noisy channel: w <- w - eta * a * (h b g/|g| + z_t)
        h, b, a, eta, seed, T = 0.7, 1.2, 0.3, 0.05, 11, 25
        chan = ChannelRealization(h=[h], sigma2=0.01, dim=2)
        plan = manual_plan(a, [b], EtaSchedule.constant(eta))
        trace = run(identity_ridge, chan, plan, AggregationStrategy("normalized"), T, seed)

        target = np.array([1.0, 2.0])
        w = np.zeros(2)
        expected = [float((w - target) @ (w - target)) / 4]
        for t in range(1, T + 1):
            g = (w - target) / 2
            z = gaussian_vector(RandomStream(seed).child(round=t, purpose="noise"), 2, 0.01)
            w = w - eta * (a * (h * b * g / np.linalg.norm(g) + z))
            expected.append(float((w - target) @ (w - target)) / 4)
        assert np.allclose(trace.column("loss"), expected, rtol=1e-12, atol=0)

    def test_strategies_share_randomness(self, small_ridge, monkeypatch):
        seen: dict[str, list] = {}
        real = trainer.ota_superpose

        def recording(signals, cfg, chan, noise_stream):
            seen.setdefault(current, []).append((noise_stream.seed, noise_stream.stream_id))
            return real(signals, cfg, chan, noise_stream)

        monkeypatch.setattr(trainer, "ota_superpose", recording)
        chan = unit_channel(4, 3, sigma2=1e-4)
        plan = manual_plan(0.1, np.ones(4), EtaSchedule.constant(0.1))
        for current in ("normalized", "standardized"):
            run(small_ridge, chan, plan, AggregationStrategy(current), 6, 21)
        assert len(seen["normalized"]) == 6
        assert seen["normalized"] == seen["standardized"]

    def test_same_seed_same_trace(self, small_ridge):
        chan = unit_channel(4, 3, sigma2=1e-3)
        plan = manual_plan(0.1, np.ones(4), EtaSchedule.constant(0.1))
        strategy = AggregationStrategy("normalized")
        first = run(small_ridge, chan, plan, strategy, 8, 5, batch_size=4, channel_mode="redraw",
                    channel_mean=1.0)
        second = run(small_ridge, chan, plan, strategy, 8, 5, batch_size=4,
                     channel_mode="redraw", channel_mean=1.0)
        other = run(small_ridge, chan, plan, strategy, 8, 6, batch_size=4,
                    channel_mode="redraw", channel_mean=1.0)
        assert np.array_equal(first.column("loss"), second.column("loss"))
        assert not np.array_equal(first.column("loss"), other.column("loss"))

    def test_divergence(self, identity_ridge):
        plan = manual_plan(1e300, [1.0], EtaSchedule.constant(1e300))
        with pytest.raises(DivergenceError) as info:
            run(identity_ridge, unit_channel(1, 2), plan, AggregationStrategy("normalized"), 3, 0)
        assert info.value.round_index == 1

    def test_breach_counts(self, identity_ridge):
        # ||grad|| = sqrt(1.25) * 0.95^(t-1) stays above G = 0.5 for t <= 16
        task = identity_ridge.with_constants(G=0.5)
        plan = manual_plan(1.0, [1.0], EtaSchedule.constant(0.1))
        trace = run(task, unit_channel(1, 2), plan, AggregationStrategy("ideal"), 20, 0)
        assert trace.g_breaches == 16
        assert trace.theta_breaches == 0

    @pytest.mark.parametrize("kwargs, message", [
        (dict(T=0), "T must be"),
        (dict(channel_mode="fading"), "channel_mode"),
        (dict(channel_mode="redraw"), "channel mean"),
    ])
    def test_invalid_arguments(self, identity_ridge, kwargs, message):
        plan = manual_plan(1.0, [1.0], EtaSchedule.constant(0.1))
        args = dict(T=3)
        args.update(kwargs)
        T = args.pop("T")
        with pytest.raises(InvalidArgumentError, match=message):
            run(identity_ridge, unit_channel(1, 2), plan, AggregationStrategy("normalized"),
                T, 0, **args)

    def test_device_count_mismatch(self, identity_ridge):
        plan = manual_plan(1.0, [1.0, 1.0], EtaSchedule.constant(0.1))
        with pytest.raises(InvalidArgumentError, match="devices"):
            run(identity_ridge, unit_channel(2, 2), plan, AggregationStrategy("normalized"), 3, 0)

    def test_dimension_mismatch(self, identity_ridge):
        plan = manual_plan(1.0, [1.0], EtaSchedule.constant(0.1))
        with pytest.raises(InvalidArgumentError, match="dimension"):
            run(identity_ridge, unit_channel(1, 5), plan, AggregationStrategy("normalized"), 3, 0)


# ---------------------------------------------------------------------------
# Trace statistics
# ---------------------------------------------------------------------------

def _trace(losses, seed=0) -> RunTrace:
    records = [RoundRecord(t=i + 1, loss=v, grad_norm=1.0, min_grad_norm=1.0, gap=None,
                           theta_max=0.0, eta=0.1) for i, v in enumerate(losses)]
    return RunTrace(seed=seed, strategy="normalized", records=records)


class TestRunTrace:
    def test_mean_curve(self):
        t, mean, stderr = RunTrace.mean_curve([_trace([1.0, 3.0]), _trace([3.0, 5.0], 1)], "loss")
        assert t.tolist() == [1.0, 2.0]
        assert mean.tolist() == [2.0, 4.0]
        assert stderr == pytest.approx([1.0, 1.0])

    def test_single_trace_has_zero_error(self):
        _, _, stderr = RunTrace.mean_curve([_trace([1.0, 2.0])], "loss")
        assert stderr.tolist() == [0.0, 0.0]

    def test_missing_gap_reads_as_nan(self):
        assert math.isnan(_trace([1.0]).column("gap")[0])

    def test_unknown_column(self):
        with pytest.raises(InvalidArgumentError):
            _trace([1.0]).column("speed")

    def test_lengths_must_match(self):
        with pytest.raises(InvalidArgumentError, match="different lengths"):
            RunTrace.mean_curve([_trace([1.0]), _trace([1.0, 2.0])], "loss")


class TestPairedSignTest:
    def test_all_wins(self):
        result = paired_sign_test([1.0] * 6, [2.0] * 6)
        assert (result.wins, result.losses, result.ties) == (6, 0, 0)
        assert result.p_value == pytest.approx(0.5 ** 6)
        assert result.significant()

    def test_ties_are_dropped(self):
        result = paired_sign_test([1.0, 1.0, 2.0], [1.0, 1.0, 3.0])
        assert result.ties == 2 and result.wins == 1
        assert result.p_value == pytest.approx(0.5)

    def test_all_ties(self):
        assert paired_sign_test([1.0, 2.0], [1.0, 2.0]).p_value == 1.0

    def test_shapes_must_match(self):
        with pytest.raises(InvalidArgumentError):
            paired_sign_test([1.0], [1.0, 2.0])
