"""Element and FLOP accounting for the instrumented compute paths.

A ``Counters`` instance is a per-scope accumulator: one owner at a time,
merged explicitly when scopes are combined.  ``tracking`` installs a
counter as the ambient FLOP sink for the current thread so that matrix
products recorded inside the scope are attributed to it.
"""

from contextlib import contextmanager
from dataclasses import dataclass
import threading


@dataclass
class Counters:
    """Accumulated FLOPs plus live/peak element counts for one measurement scope."""

    flops: int = 0
    live_elements: int = 0
    peak_live_elements: int = 0

    def add_flops(self, n: int) -> None:
        if n < 0:
            raise ValueError(f"flop increment must be nonnegative, got {n}")
        self.flops += n

    def alloc(self, elements: int) -> None:
        """Record a buffer of ``elements`` scalars becoming live."""
        if elements < 0:
            raise ValueError(f"allocation size must be nonnegative, got {elements}")
        self.live_elements += elements
        if self.live_elements > self.peak_live_elements:
            self.peak_live_elements = self.live_elements

    def release(self, elements: int) -> None:
        """Record a previously allocated buffer being dropped."""
        if elements < 0:
            raise ValueError(f"release size must be nonnegative, got {elements}")
        if elements > self.live_elements:
            raise ValueError(
                f"release of {elements} elements exceeds live count {self.live_elements}"
            )
        self.live_elements -= elements

    def merge(self, other: "Counters") -> None:
        """Fold another scope into this one: FLOPs and live counts add, peaks take the max.

        The max-of-peaks convention matches per-rank reporting, where the
        quantity of interest is the worst single scope, not the sum.
        """
        self.flops += other.flops
        self.live_elements += other.live_elements
        self.peak_live_elements = max(self.peak_live_elements, other.peak_live_elements)


_ambient = threading.local()


def active_counters() -> Counters | None:
    """The counter installed by the innermost ``tracking`` scope on this thread, if any."""
    stack = getattr(_ambient, "stack", None)
    return stack[-1] if stack else None


@contextmanager
def tracking(counters: Counters):
    """Install ``counters`` as the ambient FLOP sink for the current thread."""
    stack = getattr(_ambient, "stack", None)
    if stack is None:
        stack = _ambient.stack = []
    stack.append(counters)
    try:
        yield counters
    finally:
        stack.pop()
