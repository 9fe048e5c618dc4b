"""Collective fabric: results, determinism, scheduling, and failure modes."""

import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disco import (
    CollectiveContractError,
    CollectiveTimeoutError,
    DeadlockError,
    ReduceOp,
    run_ranks,
)
from disco.fabric import RankGroup
from support import explore_all_schedules


class TestAllGather:
    def test_two_ranks_concatenate_in_rank_order(self):
        blocks = [np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])]
        results = run_ranks(2, lambda ep: ep.all_gather(blocks[ep.rank]))
        for result in results:
            assert np.array_equal(result, [[1.0, 2.0], [3.0, 4.0]])

    def test_single_rank_identity(self):
        local = np.arange(6.0).reshape(2, 3)
        [result] = run_ranks(1, lambda ep: ep.all_gather(local))
        assert np.array_equal(result, local)

    def test_block_n_equals_rank_n_input(self):
        rng = np.random.default_rng(0)
        blocks = [rng.standard_normal((2, 3)) for _ in range(4)]
        results = run_ranks(4, lambda ep: ep.all_gather(blocks[ep.rank]))
        for rank in range(4):
            assert np.array_equal(results[0][2 * rank:2 * rank + 2], blocks[rank])

    def test_non_2d_input_rejected(self):
        with pytest.raises(CollectiveContractError):
            run_ranks(1, lambda ep: ep.all_gather(np.ones(3)))


class TestAllReduce:
    def test_sum(self):
        blocks = [np.array([1.0, 2.0]), np.array([3.0, 4.0])]
        results = run_ranks(2, lambda ep: ep.all_reduce(blocks[ep.rank]))
        for result in results:
            assert np.array_equal(result, [4.0, 6.0])

    def test_avg(self):
        blocks = [np.array([1.0, 2.0]), np.array([3.0, 4.0])]
        results = run_ranks(
            2, lambda ep: ep.all_reduce(blocks[ep.rank], ReduceOp.AVG))
        for result in results:
            assert np.array_equal(result, [2.0, 3.0])

    def test_single_rank_avg_is_bitwise_identity(self):
        local = np.array([[0.1, -2.7], [1e-300, 3.3]])
        [result] = run_ranks(1, lambda ep: ep.all_reduce(local, ReduceOp.AVG))
        assert result.tobytes() == local.tobytes()

    def test_avg_is_sum_then_one_division(self):
        rng = np.random.default_rng(1)
        blocks = [rng.standard_normal((3, 2)) for _ in range(3)]
        sums = run_ranks(3, lambda ep: ep.all_reduce(blocks[ep.rank], ReduceOp.SUM))
        avgs = run_ranks(3, lambda ep: ep.all_reduce(blocks[ep.rank], ReduceOp.AVG))
        assert avgs[0].tobytes() == (sums[0] / 3).tobytes()

    @given(st.integers(1, 5), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_sum_of_identical_integer_buffers_is_exactly_n_x(self, n, seed):
        rng = np.random.default_rng(seed)
        x = rng.integers(-100, 100, size=(2, 3)).astype(np.float64)
        results = run_ranks(n, lambda ep: ep.all_reduce(x, ReduceOp.SUM))
        assert np.array_equal(results[0], n * x)

    def test_integer_input_coerced_to_float(self):
        results = run_ranks(2, lambda ep: ep.all_reduce(np.array([1, 2]), ReduceOp.AVG))
        assert results[0].dtype == np.float64
        assert np.array_equal(results[0], [1.0, 2.0])

    def test_results_are_read_only(self):
        [result] = run_ranks(1, lambda ep: ep.all_reduce(np.ones((2, 2))))
        with pytest.raises(ValueError):
            result[0, 0] = 5.0


class TestAllReduceScalar:
    def test_avg_of_four(self):
        results = run_ranks(
            4, lambda ep: ep.all_reduce_scalar(float(ep.rank + 1), ReduceOp.AVG))
        assert results == [2.5] * 4

    def test_single_rank_identity(self):
        [result] = run_ranks(1, lambda ep: ep.all_reduce_scalar(0.3, ReduceOp.AVG))
        assert result == 0.3

    def test_seeded_mean_matches_direct_sum(self):
        rng = np.random.default_rng(9)
        values = rng.standard_normal(3)
        results = run_ranks(
            3, lambda ep: ep.all_reduce_scalar(values[ep.rank], ReduceOp.AVG))
        expected = ((values[0] + values[1]) + values[2]) / 3
        assert results[0] == expected


class TestBarrier:
    def test_single_rank_returns_immediately(self):
        assert run_ranks(1, lambda ep: ep.barrier()) == [None]

    def test_staggered_arrivals_all_leave_after_last(self):
        arrivals = [0.0] * 4
        exits = [0.0] * 4

        def fn(ep):
            time.sleep(0.02 * ep.rank)
            arrivals[ep.rank] = time.monotonic()
            ep.barrier()
            exits[ep.rank] = time.monotonic()

        run_ranks(4, fn, mode="concurrent")
        last_arrival = max(arrivals)
        assert all(t >= last_arrival for t in exits)


class TestDeterminism:
    @staticmethod
    def _program(ep):
        rng = np.random.default_rng(ep.rank)
        local = rng.standard_normal((2, 3))
        gathered = ep.all_gather(local)
        reduced = ep.all_reduce(gathered * 0.317, ReduceOp.AVG)
        scalar = ep.all_reduce_scalar(float(local[0, 0]), ReduceOp.SUM)
        ep.barrier()
        return gathered.tobytes(), reduced.tobytes(), scalar

    def test_results_bitwise_identical_across_ranks(self):
        results = run_ranks(8, self._program)
        assert len(set(results)) == 1

    def test_repeat_runs_bitwise_identical(self):
        assert run_ranks(4, self._program) == run_ranks(4, self._program)

    def test_lockstep_and_concurrent_bitwise_identical(self):
        lockstep = run_ranks(4, self._program, mode="lockstep")
        concurrent = run_ranks(4, self._program, mode="concurrent")
        assert lockstep == concurrent

    def test_every_schedule_gives_identical_results(self):
        def fn(ep):
            gathered = ep.all_gather(np.full((1, 2), float(ep.rank)))
            reduced = ep.all_reduce(gathered + ep.rank, ReduceOp.AVG)
            return gathered.tobytes(), reduced.tobytes()

        outcomes = explore_all_schedules(3, fn)
        assert len(outcomes) > 1
        assert all(outcome == outcomes[0] for outcome in outcomes)


class TestExhaustiveScheduling:
    def test_matching_collective_sequences_never_deadlock_n2(self):
        def fn(ep):
            ep.all_gather(np.ones((1, 1)) * ep.rank)
            ep.all_reduce(np.ones((2, 2)))
            ep.barrier()
            return ep.rank

        outcomes = explore_all_schedules(2, fn)
        assert all(outcome == [0, 1] for outcome in outcomes)
        assert len(outcomes) == 2 ** 4  # two-way choice at every hand-off point

    def test_matching_collective_sequences_never_deadlock_n3(self):
        def fn(ep):
            ep.all_reduce(np.full((1, 2), float(ep.rank)))
            ep.barrier()
            return ep.rank

        outcomes = explore_all_schedules(3, fn)
        assert all(outcome == [0, 1, 2] for outcome in outcomes)
        assert len(outcomes) == 6 ** 3  # 3! arrival orders per round boundary


class TestFailureModes:
    def test_missing_rank_is_a_deadlock_in_lockstep(self):
        def fn(ep):
            if ep.rank == 0:
                ep.barrier()

        with pytest.raises(DeadlockError):
            run_ranks(2, fn)

    def test_shape_mismatch_is_a_contract_error(self):
        def fn(ep):
            ep.all_gather(np.ones((1 + ep.rank, 2)))

        with pytest.raises(CollectiveContractError):
            run_ranks(2, fn)

    def test_mixed_collectives_are_a_contract_error(self):
        def fn(ep):
            if ep.rank == 0:
                ep.barrier()
            else:
                ep.all_reduce(np.ones((1, 1)))

        with pytest.raises(CollectiveContractError):
            run_ranks(2, fn)

    def test_mixed_reduce_ops_are_a_contract_error(self):
        def fn(ep):
            op = ReduceOp.SUM if ep.rank == 0 else ReduceOp.AVG
            ep.all_reduce(np.ones((1, 1)), op)

        with pytest.raises(CollectiveContractError):
            run_ranks(2, fn)

    def test_timeout_names_the_missing_ranks(self):
        def fn(ep):
            if ep.rank == 1:
                return ep.all_reduce_scalar(1.0)

        with pytest.raises(CollectiveTimeoutError) as excinfo:
            run_ranks(3, fn, mode="concurrent", timeout=0.2)
        assert excinfo.value.missing_ranks == (0, 2)
        assert "0" in str(excinfo.value) and "2" in str(excinfo.value)

    def test_rank_exception_propagates_and_unblocks_peers(self):
        def fn(ep):
            if ep.rank == 0:
                raise RuntimeError("worker failure")
            ep.barrier()

        with pytest.raises(RuntimeError, match="worker failure"):
            run_ranks(2, fn)

    def test_schedule_choosing_unrunnable_rank_fails_fast(self):
        with pytest.raises(RuntimeError, match="schedule"):
            run_ranks(2, lambda ep: ep.barrier(), schedule=lambda ready: -7)


class TestGroupContract:
    def test_world_size_must_be_positive(self):
        with pytest.raises(ValueError):
            RankGroup(0)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            RankGroup(2, mode="chaotic")

    def test_endpoint_rank_bounds(self):
        group = RankGroup(2, mode="concurrent")
        with pytest.raises(ValueError):
            group.endpoint(2)

    def test_lockstep_group_requires_a_driver(self):
        group = RankGroup(2)  # never started via run_ranks
        with pytest.raises(RuntimeError, match="run_ranks"):
            group.endpoint(0).barrier()

    def test_concurrent_group_usable_with_user_threads(self):
        group = RankGroup(2, mode="concurrent")
        results = [None, None]

        def worker(rank):
            results[rank] = group.endpoint(rank).all_reduce_scalar(float(rank + 1))

        threads = [threading.Thread(target=worker, args=(r,)) for r in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == [3.0, 3.0]
