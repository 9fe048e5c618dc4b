"""Shared test helpers."""

from disco import run_ranks


def explore_all_schedules(world_size, fn, max_runs=20_000):
    """Run ``fn`` under every feasible lockstep hand-off order.

    Drives the injectable scheduler through a depth-first walk of the
    decision tree: each run follows a forced prefix of choice indices and
    defaults to the first runnable rank afterwards; every alternative at
    every decision point past the prefix is queued for its own run.  Returns
    one per-rank result list per explored schedule.  A run that deadlocks or
    times out raises, failing the exploration.
    """
    outcomes = []
    pending = [()]
    while pending:
        prefix = pending.pop()
        ready_sizes = []
        choices = []

        def schedule(ready, prefix=prefix, ready_sizes=ready_sizes, choices=choices):
            position = len(choices)
            pick = prefix[position] if position < len(prefix) else 0
            ready_sizes.append(len(ready))
            choices.append(pick)
            return ready[pick]

        outcomes.append(run_ranks(world_size, fn, mode="lockstep", schedule=schedule))
        if len(outcomes) > max_runs:
            raise AssertionError(f"more than {max_runs} schedules; program too branchy")
        for depth in range(len(prefix), len(choices)):
            for alternative in range(1, ready_sizes[depth]):
                pending.append(tuple(choices[:depth]) + (alternative,))
    return outcomes
