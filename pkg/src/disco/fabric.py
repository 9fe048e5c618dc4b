"""In-process simulation of a rank group with deterministic collectives.

The group supports the three collectives the sharded loss needs
(``all_gather``, ``all_reduce``, ``barrier``) plus a scalar reduce.
Reductions always accumulate contributions in ascending rank order, so
results are bitwise identical on every rank, across repeated runs, and
across scheduler modes: floating-point addition is not associative, and a
fixed order is what makes exact-equivalence tests meaningful.

Two scheduler modes:

* ``lockstep`` (default): rank workers take turns under a token; exactly
  one runs at a time and the hand-off order is a deterministic round-robin
  (or an injected schedule, which lets tests enumerate every arrival
  order).  Collectives are the only scheduling points, so token-granularity
  schedules cover all observable interleavings.  Deadlocks are detected
  structurally and raised immediately.
* ``concurrent``: workers run freely and collectives synchronize through a
  condition variable with a timeout (default 30 s) that converts a missing
  rank into a diagnosable error.

An endpoint is owned by exactly one worker.  Collective results are shared
read-only arrays; matrices are immutable by convention throughout the
package.
"""

import enum
import threading
import time

import numpy as np

from .errors import CollectiveContractError, CollectiveTimeoutError, DeadlockError

LOCKSTEP = "lockstep"
CONCURRENT = "concurrent"

DEFAULT_TIMEOUT = 30.0


class ReduceOp(enum.Enum):
    SUM = "sum"
    AVG = "avg"


# worker states (lockstep scheduling)
_READY = "ready"      # waiting to be granted the token
_RUNNING = "running"  # holds the token
_BLOCKED = "blocked"  # submitted to a collective that is not complete
_DONE = "done"


class _Round:
    """State of one in-flight collective: signature, per-rank slots, result."""

    def __init__(self, world_size: int, kind: str, op, shape, dtype):
        self.kind = kind
        self.op = op
        self.shape = shape
        self.dtype = dtype
        self.slots = [None] * world_size
        self.arrived: set[int] = set()
        self.done = False
        self.result = None

    def signature_matches(self, kind, op, shape, dtype) -> bool:
        return (
            kind == self.kind
            and op == self.op
            and shape == self.shape
            and dtype == self.dtype
        )

    def submit(self, rank: int, payload) -> None:
        self.slots[rank] = payload
        self.arrived.add(rank)

    def complete(self) -> bool:
        return len(self.arrived) == len(self.slots)

    def finalize(self, world_size: int) -> None:
        """Compute the round result from the slots, in ascending rank order."""
        if self.kind == "all_gather":
            result = np.concatenate(self.slots, axis=0)
            result.flags.writeable = False
        elif self.kind == "all_reduce":
            acc = self.slots[0].copy()
            for rank in range(1, world_size):
                acc += self.slots[rank]
            if self.op is ReduceOp.AVG:
                acc /= world_size
            acc.flags.writeable = False
            result = acc
        elif self.kind == "all_reduce_scalar":
            acc = float(self.slots[0])
            for rank in range(1, world_size):
                acc += self.slots[rank]
            if self.op is ReduceOp.AVG:
                acc /= world_size
            result = acc
        else:  # barrier
            result = None
        self.result = result
        self.done = True


class RankGroup:
    """A group of ``world_size`` simulated ranks sharing a collective fabric."""

    def __init__(self, world_size: int, *, mode: str = LOCKSTEP,
                 timeout: float = DEFAULT_TIMEOUT, schedule=None):
        if world_size < 1:
            raise ValueError(f"world size must be >= 1, got {world_size}")
        if mode not in (LOCKSTEP, CONCURRENT):
            raise ValueError(f"unknown scheduler mode {mode!r}")
        self.world_size = world_size
        self.mode = mode
        self.timeout = timeout
        self._schedule = schedule
        self._cond = threading.Condition()
        self._round: _Round | None = None
        self._error: BaseException | None = None
        self._state = [_READY] * world_size
        self._hint = 0  # next rank favored by the round-robin scan
        self._started = mode == CONCURRENT

    def endpoint(self, rank: int) -> "RankEndpoint":
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} outside [0, {self.world_size})")
        return RankEndpoint(self, rank)

    # -- scheduling ----------------------------------------------------

    def start(self) -> None:
        """Hand the token to the first rank (lockstep mode; no-op otherwise)."""
        with self._cond:
            self._started = True
            if self.mode == LOCKSTEP:
                self._grant_next_locked()

    def _grant_next_locked(self) -> None:
        ready = [r for r in range(self.world_size) if self._state[r] == _READY]
        if not ready:
            blocked = [r for r in range(self.world_size) if self._state[r] == _BLOCKED]
            if blocked and self._round is not None:
                absent = sorted(set(range(self.world_size)) - self._round.arrived)
                self._poison_locked(DeadlockError(
                    f"ranks {blocked} are blocked in an incomplete {self._round.kind} "
                    f"and ranks {absent} will never arrive"))
            return
        if self._schedule is not None:
            try:
                pick = self._schedule(list(ready))
            except BaseException as exc:  # a broken schedule must not hang the group
                self._poison_locked(exc)
                return
            if pick not in ready:
                self._poison_locked(RuntimeError(
                    f"schedule chose rank {pick!r}, not in runnable set {ready}"))
                return
        else:
            pick = next(r for r in (
                (self._hint + k) % self.world_size for k in range(self.world_size)
            ) if self._state[r] == _READY)
        self._state[pick] = _RUNNING
        self._hint = (pick + 1) % self.world_size
        self._cond.notify_all()

    def _worker_begin(self, rank: int) -> None:
        if self.mode != LOCKSTEP:
            return
        with self._cond:
            while self._state[rank] != _RUNNING and self._error is None:
                self._cond.wait()
            self._raise_if_poisoned_locked()

    def _worker_end(self, rank: int) -> None:
        with self._cond:
            was_running = self._state[rank] == _RUNNING
            self._state[rank] = _DONE
            if self.mode == LOCKSTEP and was_running:
                self._grant_next_locked()

    # -- error handling ------------------------------------------------

    def _poison_locked(self, error: BaseException) -> None:
        if self._error is None:
            self._error = error
        self._cond.notify_all()

    def _raise_if_poisoned_locked(self) -> None:
        if self._error is not None:
            raise self._error

    # -- collectives ---------------------------------------------------

    def _collective(self, rank: int, kind: str, payload, op=None):
        with self._cond:
            self._raise_if_poisoned_locked()
            if not self._started:
                raise RuntimeError("lockstep group not started; drive it with run_ranks()")
            shape = payload.shape if isinstance(payload, np.ndarray) else None
            dtype = payload.dtype if isinstance(payload, np.ndarray) else None
            round_ = self._round
            if round_ is None:
                round_ = self._round = _Round(self.world_size, kind, op, shape, dtype)
            elif not round_.signature_matches(kind, op, shape, dtype):
                error = CollectiveContractError(
                    f"rank {rank} entered {kind}"
                    f"{f' shape {shape}' if shape is not None else ''} while the group "
                    f"is in {round_.kind}"
                    f"{f' shape {round_.shape}' if round_.shape is not None else ''}")
                self._poison_locked(error)
                raise error
            round_.submit(rank, payload)
            if round_.complete():
                round_.finalize(self.world_size)
                self._round = None
                self._cond.notify_all()
            if self.mode == LOCKSTEP:
                self._state[rank] = _BLOCKED
                if round_.done:
                    for r in range(self.world_size):
                        if self._state[r] == _BLOCKED:
                            self._state[r] = _READY
                self._grant_next_locked()
                while self._state[rank] != _RUNNING and self._error is None:
                    self._cond.wait()
                self._raise_if_poisoned_locked()
            elif not round_.done:
                deadline = time.monotonic() + self.timeout
                while not round_.done and self._error is None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        missing = tuple(sorted(set(range(self.world_size)) - round_.arrived))
                        error = CollectiveTimeoutError(
                            f"{kind} timed out after {self.timeout:g}s; "
                            f"missing ranks {list(missing)}", missing)
                        self._poison_locked(error)
                        raise error
                    self._cond.wait(remaining)
                self._raise_if_poisoned_locked()
            return round_.result


class RankEndpoint:
    """One rank's handle to its group.  Owned by a single worker at a time."""

    def __init__(self, group: RankGroup, rank: int):
        self.group = group
        self.rank = rank

    @property
    def world_size(self) -> int:
        return self.group.world_size

    def all_gather(self, local: np.ndarray) -> np.ndarray:
        """Rank-order concatenation of every rank's ``local`` rows, on every rank."""
        local = _as_buffer(local)
        if local.ndim != 2:
            raise CollectiveContractError(
                f"all_gather expects a 2-D matrix, got ndim={local.ndim}")
        return self.group._collective(self.rank, "all_gather", local)

    def all_reduce(self, buffer: np.ndarray, op: ReduceOp = ReduceOp.SUM) -> np.ndarray:
        """Elementwise SUM (or SUM/world_size for AVG) across ranks, on every rank."""
        return self.group._collective(
            self.rank, "all_reduce", _as_buffer(buffer), _as_op(op))

    def all_reduce_scalar(self, value: float, op: ReduceOp = ReduceOp.SUM) -> float:
        return self.group._collective(
            self.rank, "all_reduce_scalar", float(value), _as_op(op))

    def barrier(self) -> None:
        self.group._collective(self.rank, "barrier", None)


def _as_buffer(buffer) -> np.ndarray:
    arr = np.asarray(buffer)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _as_op(op) -> ReduceOp:
    if isinstance(op, ReduceOp):
        return op
    return ReduceOp(str(op).lower())


def run_ranks(world_size: int, fn, *, mode: str = LOCKSTEP, schedule=None,
              timeout: float = DEFAULT_TIMEOUT) -> list:
    """Run ``fn(endpoint)`` once per rank and return the per-rank results.

    In lockstep mode the workers execute under the token discipline; in
    concurrent mode they run as free threads.  The first failing rank's
    exception is re-raised after all workers stop.
    """
    group = RankGroup(world_size, mode=mode, timeout=timeout, schedule=schedule)
    results = [None] * world_size
    errors: list[BaseException | None] = [None] * world_size

    def worker(rank: int) -> None:
        try:
            group._worker_begin(rank)
            results[rank] = fn(group.endpoint(rank))
        except BaseException as exc:
            errors[rank] = exc
        finally:
            group._worker_end(rank)

    threads = [
        threading.Thread(target=worker, args=(rank,), name=f"rank-{rank}", daemon=True)
        for rank in range(world_size)
    ]
    for thread in threads:
        thread.start()
    group.start()
    for thread in threads:
        thread.join()
    for exc in errors:
        if exc is not None:
            raise exc
    return results
