"""Analytic and measured memory/FLOP accounting for the loss paths.

The analytic side states the per-rank footprint formulas with explicit
constants (asymptotic forms are untestable):

    backbone elements   (B/N)*L*D   full activations (CLIP, DisCo)
                        (B/N)*D     recomputation keeps one layer (BASIC, DisCo*)
    loss elements       B*B         one full similarity matrix (CLIP, BASIC)
                        2*B*B/N     two b x B blocks (DisCo, DisCo*)
    loss FLOPs          B*B*D       similarity multiply-adds (CLIP, BASIC)
                        2*B*B*D/N   two b x B products (DisCo, DisCo*)

The measured side executes the instrumented paths and reads the counters.
Loss-scope counters cover only logits/probability/logit-gradient matrices;
gathered features and B x D gradient buffers are tracked separately as
exchange buffers.  Measured FLOP counters record 2 FLOPs per multiply-add,
twice the analytic convention, so ratios (the tested quantity) agree.
No layered backbone exists in the measured runs, so measured reports carry
backbone_elements = 0 and L = 0.
"""

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .counters import Counters
from .errors import DomainError
from .fabric import LOCKSTEP, run_ranks
from .matrix import l2_normalize_rows
from .oracle import clip_grad_full
from .shard import ShardLayout, disco_step

METHODS = ("CLIP", "BASIC", "DisCo", "DisCo*")

CSV_FIELDS = ("method", "B", "N", "L", "D", "backbone_elements",
              "loss_elements", "total_elements", "loss_flops", "bytes")

PRECISION_BYTES = {"f32": 4, "f64": 8}

MEASURED_BATCH_LIMIT = 4096


@dataclass(frozen=True)
class CostInputs:
    B: int
    N: int
    L: int
    D: int
    bytes_per_scalar: int

    def __post_init__(self):
        for name in ("B", "N", "L", "D"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.B % self.N != 0:
            raise DomainError(f"B={self.B} is not divisible by N={self.N}")
        if self.bytes_per_scalar not in (4, 8):
            raise DomainError(
                f"bytes per scalar must be 4 or 8, got {self.bytes_per_scalar}")


@dataclass(frozen=True)
class CostReport:
    method: str
    B: int
    N: int
    L: int
    D: int
    backbone_elements: int
    loss_elements: int
    total_elements: int
    loss_flops: int
    bytes: int

    def __post_init__(self):
        if self.total_elements != self.backbone_elements + self.loss_elements:
            raise ValueError("total_elements must equal backbone + loss elements")

    def as_row(self) -> dict:
        return {field: getattr(self, field) for field in CSV_FIELDS}


def _report(method: str, B: int, N: int, L: int, D: int, backbone: int,
            loss_elements: int, loss_flops: int, bytes_per_scalar: int) -> CostReport:
    total = backbone + loss_elements
    return CostReport(
        method=method, B=B, N=N, L=L, D=D,
        backbone_elements=backbone, loss_elements=loss_elements,
        total_elements=total, loss_flops=loss_flops,
        bytes=total * bytes_per_scalar)


def analytic_footprint(inputs: CostInputs, method: str) -> CostReport:
    """Per-rank element and FLOP formulas for one method, with exact constants."""
    if method not in METHODS:
        raise DomainError(f"method must be one of {METHODS}, got {method!r}")
    B, N, L, D = inputs.B, inputs.N, inputs.L, inputs.D
    local = B // N
    if method in ("CLIP", "DisCo"):
        backbone = local * L * D
    else:
        backbone = local * D
    if method in ("CLIP", "BASIC"):
        loss_elements = B * B
        loss_flops = B * B * D
    else:
        loss_elements = 2 * B * B // N
        loss_flops = 2 * B * B * D // N
    return _report(method, B, N, L, D, backbone, loss_elements, loss_flops,
                   inputs.bytes_per_scalar)


def savings_fraction(N: int) -> Fraction:
    """Fraction of loss-scope memory saved by sharding: max(0, 1 - 2/N), exact."""
    if N < 1:
        raise DomainError(f"N must be >= 1, got {N}")
    return max(Fraction(0), 1 - Fraction(2, N))


def measured_footprint(mode: str, B: int, N: int, D: int, *,
                       precision: str = "f64", temperature: float = 10.0,
                       seed: int = 0, scheduler: str = LOCKSTEP) -> CostReport:
    """Execute one loss path under instrumentation and report per-rank peaks.

    ``mode`` is ``naive`` (full-batch oracle, replicated per rank, reported
    as CLIP) or ``disco`` (sharded path, reported as DisCo).  Loss elements
    and FLOPs are the maximum over ranks, which are identical by
    construction.
    """
    loss_peak, loss_flops, _ = measured_detail(
        mode, B, N, D, precision=precision, temperature=temperature,
        seed=seed, scheduler=scheduler)
    method = "CLIP" if mode == "naive" else "DisCo"
    return _report(method, B, N, L=0, D=D, backbone=0,
                   loss_elements=loss_peak, loss_flops=loss_flops,
                   bytes_per_scalar=PRECISION_BYTES[precision])


def measured_detail(mode: str, B: int, N: int, D: int, *,
                    precision: str = "f64", temperature: float = 10.0,
                    seed: int = 0, scheduler: str = LOCKSTEP):
    """Raw per-rank counter peaks: (loss_peak, loss_flops, exchange_peak)."""
    if mode not in ("naive", "disco"):
        raise DomainError(f"mode must be 'naive' or 'disco', got {mode!r}")
    if precision not in PRECISION_BYTES:
        raise DomainError(f"precision must be one of {tuple(PRECISION_BYTES)}")
    if B > MEASURED_BATCH_LIMIT:
        raise DomainError(
            f"measured runs are limited to B <= {MEASURED_BATCH_LIMIT}, got {B}")
    if B % N != 0:
        raise DomainError(f"B={B} is not divisible by N={N}")

    rng = np.random.default_rng(seed)
    dtype = np.float32 if precision == "f32" else np.float64
    I = l2_normalize_rows(rng.standard_normal((B, D))).astype(dtype)
    T = l2_normalize_rows(rng.standard_normal((B, D))).astype(dtype)

    if mode == "naive":
        # The sharded baseline replicates the full-batch computation on every
        # rank, so one instrumented run stands for any rank.
        loss_counters = Counters()
        exchange_counters = Counters()
        clip_grad_full(I, T, temperature,
                       loss_counters=loss_counters,
                       exchange_counters=exchange_counters)
        return (loss_counters.peak_live_elements, loss_counters.flops,
                exchange_counters.peak_live_elements)

    layouts = [ShardLayout(world_size=N, global_batch=B, rank=r) for r in range(N)]

    def rank_fn(endpoint):
        layout = layouts[endpoint.rank]
        loss_counters = Counters()
        exchange_counters = Counters()
        disco_step(endpoint,
                   I[layout.row_slice], T[layout.row_slice], temperature,
                   loss_counters=loss_counters,
                   exchange_counters=exchange_counters)
        return (loss_counters.peak_live_elements, loss_counters.flops,
                exchange_counters.peak_live_elements)

    per_rank = run_ranks(N, rank_fn, mode=scheduler)
    return tuple(max(values) for values in zip(*per_rank))


def bytes_moved(collective: str, buffer_elements: int, N: int) -> int:
    """Elements received per rank: N blocks for a gather, modeled identically
    for a reduce (the two collectives are costed as equal for equal buffers)."""
    if collective not in ("all_gather", "all_reduce"):
        raise DomainError(
            f"collective must be 'all_gather' or 'all_reduce', got {collective!r}")
    if buffer_elements < 0 or N < 1:
        raise DomainError(
            f"invalid sizes: buffer_elements={buffer_elements}, N={N}")
    return N * buffer_elements


def reports_to_csv(reports) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for report in reports:
        writer.writerow(report.as_row())
    return out.getvalue()


def reports_to_json(reports) -> str:
    return json.dumps([report.as_row() for report in reports], indent=2) + "\n"


def reports_to_table(reports) -> str:
    """Fixed-width human-readable table over the same fields as the CSV."""
    rows = [[str(v) for v in report.as_row().values()] for report in reports]
    widths = [max(len(CSV_FIELDS[i]), *(len(r[i]) for r in rows)) if rows
              else len(CSV_FIELDS[i]) for i in range(len(CSV_FIELDS))]
    lines = ["  ".join(name.ljust(widths[i]) for i, name in enumerate(CSV_FIELDS))]
    for row in rows:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(len(row))))
    return "\n".join(lines) + "\n"
