"""Command-line interface: verification suites, benchmarks, trainer, cost model.

Subcommands:

* ``verify``: gradient-equivalence grid (sharded vs full-batch), finite
  difference checks, and permutation invariance.  Exit 1 if any check fails.
* ``bench``: instrumented element/FLOP measurements for both loss paths.
* ``train``: the two-tower trainer, optionally in both modes with a
  per-step difference column.
* ``model``: the analytic cost table for all four methods plus the exact
  memory-savings fraction.

Exit codes: 0 success, 1 check failure or training divergence, 2 invalid
arguments.  The environment variable DISCO_SCHEDULER selects the fabric
scheduler (lockstep or concurrent, default lockstep).  All outputs are
deterministic given the flags and seed: identical invocations produce
byte-identical files.
"""

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .costs import (
    METHODS,
    CostInputs,
    analytic_footprint,
    measured_detail,
    measured_footprint,
    reports_to_csv,
    reports_to_json,
    reports_to_table,
    savings_fraction,
)
from .errors import DomainError, LayoutError, TrainingDivergenceError
from .fabric import CONCURRENT, LOCKSTEP, run_ranks
from .matrix import l2_normalize_rows, max_rel_error
from .oracle import clip_grad_full, clip_loss_full, finite_diff_grad
from .shard import ShardLayout, disco_step
from .towers import TrainConfig, generate_dataset, init_tower_params, train_run

GRAD_TOLERANCE = 1e-12
FD_TOLERANCE = 1e-6

DEFAULT_TRAIN_LR = 0.2

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_BAD_ARGS = 2


@dataclass(frozen=True)
class CheckResult:
    name: str
    params: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name} {self.params} "
                f"max_err={self.max_error:.3e} (tol {self.tolerance:.0e})")


@dataclass(frozen=True)
class VerifyReport:
    checks: tuple

    @property
    def overall(self) -> bool:
        return all(check.passed for check in self.checks)

    def lines(self) -> list:
        out = [check.line() for check in self.checks]
        failed = sum(not check.passed for check in self.checks)
        if failed:
            out.append(f"verify: {failed} of {len(self.checks)} checks FAILED")
        else:
            out.append(f"verify: all {len(self.checks)} checks passed")
        return out


def gradient_equivalence_error(batch: int, dim: int, world_size: int, t: float,
                               seed: int, *, scheduler: str = LOCKSTEP,
                               flip_cross_rank_sign: bool = False) -> float:
    """Max relative error between the sharded step and the full-batch oracle.

    Covers both feature gradients and the rank-averaged loss, for one seeded
    instance.  Raises LayoutError if world_size does not divide batch.
    """
    layouts = [ShardLayout(world_size=world_size, global_batch=batch, rank=r)
               for r in range(world_size)]
    rng = np.random.default_rng(seed)
    I = l2_normalize_rows(rng.standard_normal((batch, dim)))
    T = l2_normalize_rows(rng.standard_normal((batch, dim)))
    reference = clip_grad_full(I, T, t)

    def rank_fn(endpoint):
        rows = layouts[endpoint.rank].row_slice
        return disco_step(endpoint, I[rows], T[rows], t,
                          flip_cross_rank_sign=flip_cross_rank_sign)

    results = run_ranks(world_size, rank_fn, mode=scheduler)
    if len({result[2] for result in results}) != 1:
        return float("inf")
    d_image = np.vstack([result[0] for result in results])
    d_text = np.vstack([result[1] for result in results])
    return max(
        max_rel_error(d_image, reference.d_image),
        max_rel_error(d_text, reference.d_text),
        max_rel_error(np.array([results[0][2]]),
                      np.array([reference.loss.total])))


def _finite_difference_checks(seed: int) -> list:
    rng = np.random.default_rng(seed)
    batch, dim, t = 4, 3, 10.0
    I = l2_normalize_rows(rng.standard_normal((batch, dim)))
    T = l2_normalize_rows(rng.standard_normal((batch, dim)))
    pair = clip_grad_full(I, T, t)
    checks = []
    for name, point, analytic, fn in (
            ("finite-difference d_image", I, pair.d_image,
             lambda M: clip_loss_full(M, T, t).total),
            ("finite-difference d_text", T, pair.d_text,
             lambda M: clip_loss_full(I, M, t).total)):
        numeric = finite_diff_grad(fn, point, h=1e-6)
        checks.append(CheckResult(
            name=name, params=f"B={batch} D={dim} t={t:g} seed={seed}",
            max_error=max_rel_error(analytic, numeric), tolerance=FD_TOLERANCE))
    return checks


def _permutation_check(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    batch, dim, t = 8, 5, 10.0
    I = l2_normalize_rows(rng.standard_normal((batch, dim)))
    T = l2_normalize_rows(rng.standard_normal((batch, dim)))
    perm = rng.permutation(batch)
    base = clip_loss_full(I, T, t).total
    permuted = clip_loss_full(I[perm], T[perm], t).total
    return CheckResult(
        name="permutation-invariance", params=f"B={batch} D={dim} t={t:g} seed={seed}",
        max_error=max_rel_error(np.array([permuted]), np.array([base])),
        tolerance=GRAD_TOLERANCE)


def run_verify_suite(*, batches, world_sizes, dim, temperatures, seed,
                     scheduler=LOCKSTEP, flip_cross_rank_sign=False) -> VerifyReport:
    checks = []
    for batch in batches:
        for world_size in world_sizes:
            if batch % world_size != 0:
                continue
            for t in temperatures:
                error = gradient_equivalence_error(
                    batch, dim, world_size, t, seed, scheduler=scheduler,
                    flip_cross_rank_sign=flip_cross_rank_sign)
                checks.append(CheckResult(
                    name="gradient-equivalence",
                    params=f"B={batch} N={world_size} D={dim} t={t:g} seed={seed}",
                    max_error=error, tolerance=GRAD_TOLERANCE))
    checks.extend(_finite_difference_checks(seed))
    checks.append(_permutation_check(seed))
    return VerifyReport(checks=tuple(checks))


def cmd_verify(args, scheduler: str) -> int:
    if args.batch_size is not None or args.world_size is not None:
        batches = [args.batch_size if args.batch_size is not None else 32]
        world_sizes = [args.world_size if args.world_size is not None else 4]
        # Surface an impossible layout as a usage error before any check runs.
        ShardLayout(world_size=world_sizes[0], global_batch=batches[0], rank=0)
    else:
        batches = [8, 16, 32, 64]
        world_sizes = [1, 2, 4, 8]
    report = run_verify_suite(
        batches=batches, world_sizes=world_sizes, dim=args.dim,
        temperatures=[1.0, 10.0, 100.0], seed=args.seed, scheduler=scheduler,
        flip_cross_rank_sign=args.inject_sign_bug)
    print("\n".join(report.lines()))
    return EXIT_OK if report.overall else EXIT_CHECK_FAILURE


def _emit(text: str, out_path) -> None:
    if out_path:
        with open(out_path, "w", newline="") as handle:
            handle.write(text)
    else:
        sys.stdout.write(text)


def cmd_bench(args, scheduler: str) -> int:
    modes = ["naive", "disco"] if args.mode == "both" else [args.mode]
    reports = [
        measured_footprint(mode, args.batch_size, args.world_size, args.dim,
                           precision=args.precision, seed=args.seed,
                           scheduler=scheduler)
        for mode in modes
    ]
    if args.format == "csv":
        text = reports_to_csv(reports)
    elif args.format == "json":
        text = reports_to_json(reports)
    else:
        text = reports_to_table(reports)
        for mode in modes:
            _, _, exchange_peak = measured_detail(
                mode, args.batch_size, args.world_size, args.dim,
                precision=args.precision, seed=args.seed, scheduler=scheduler)
            text += (f"exchange buffers ({mode}): peak "
                     f"{exchange_peak} elements per rank\n")
    _emit(text, args.out)
    return EXIT_OK


def _trajectory_rows(args, scheduler: str):
    latent = min(4, args.input_dim)
    dataset = generate_dataset(
        M=max(64, 2 * args.batch_size), D_in=args.input_dim, latent_dim=latent,
        noise_scale=0.05, seed=args.seed)
    params = init_tower_params(args.input_dim, args.dim, seed=args.seed + 1)
    modes = ["naive", "disco"] if args.mode == "both" else [args.mode]
    trajectories = {}
    for mode in modes:
        config = TrainConfig(
            global_batch=args.batch_size,
            world_size=args.world_size if mode == "disco" else 1,
            steps=args.steps, learning_rate=DEFAULT_TRAIN_LR,
            seed=args.seed, mode=mode)
        trajectories[mode] = train_run(
            config, dataset, params.clone(), scheduler=scheduler)
    if args.mode == "both":
        header = ["step", "loss_naive", "loss_disco", "abs_diff"]
        rows = [
            [str(step), f"{naive_loss:.17g}", f"{disco_loss:.17g}",
             f"{abs(naive_loss - disco_loss):.17g}"]
            for (step, naive_loss), (_, disco_loss)
            in zip(trajectories["naive"], trajectories["disco"])
        ]
        diffs = [abs(a[1] - b[1]) for a, b in
                 zip(trajectories["naive"], trajectories["disco"])]
        summary = (f"max per-step |loss_naive - loss_disco| = "
                   f"{max(diffs) if diffs else 0.0:.3e}")
    else:
        header = ["step", "loss"]
        rows = [[str(step), f"{loss:.17g}"]
                for step, loss in trajectories[modes[0]]]
        summary = f"{modes[0]}: {len(rows)} steps"
    return header, rows, summary


def cmd_train(args, scheduler: str) -> int:
    header, rows, summary = _trajectory_rows(args, scheduler)
    if args.format == "json":
        text = json.dumps([dict(zip(header, row)) for row in rows], indent=2) + "\n"
    elif args.format == "table":
        widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows
                  else len(header[i]) for i in range(len(header))]
        lines = ["  ".join(header[i].ljust(widths[i]) for i in range(len(header)))]
        lines += ["  ".join(r[i].ljust(widths[i]) for i in range(len(r)))
                  for r in rows]
        text = "\n".join(lines) + "\n"
    else:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        text = out.getvalue()
    _emit(text, args.out)
    if args.out:
        print(summary)
    else:
        sys.stdout.write(summary + "\n")
    return EXIT_OK


def cmd_model(args, scheduler: str) -> int:
    inputs = CostInputs(
        B=args.batch_size, N=args.world_size, L=args.layers, D=args.dim,
        bytes_per_scalar=4 if args.precision == "f32" else 8)
    reports = [analytic_footprint(inputs, method) for method in METHODS]
    if args.format == "csv":
        text = reports_to_csv(reports)
    elif args.format == "json":
        text = reports_to_json(reports)
    else:
        clip_loss_bytes = reports[0].loss_elements * inputs.bytes_per_scalar
        text = reports_to_table(reports)
        text += (f"CLIP loss-scope bytes: {clip_loss_bytes} "
                 f"({clip_loss_bytes / 2**30:.2f} GiB)\n")
        text += (f"sharded loss memory savings at N={inputs.N}: "
                 f"{savings_fraction(inputs.N)}\n")
    _emit(text, args.out)
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disco",
        description="Sharded contrastive-loss gradients with exact-equivalence "
                    "checks and a memory/FLOP cost model.")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="run the equivalence check suite")
    verify.add_argument("--batch-size", type=int, default=None)
    verify.add_argument("--world-size", type=int, default=None)
    verify.add_argument("--dim", type=int, default=8)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--inject-sign-bug", action="store_true",
                        help="negate the cross-rank gradient term (self-test "
                             "hook; checks must fail for world size >= 2)")
    verify.set_defaults(func=cmd_verify)

    bench = sub.add_parser("bench", help="measure element/FLOP counters")
    bench.add_argument("--batch-size", type=int, default=256)
    bench.add_argument("--world-size", type=int, default=4)
    bench.add_argument("--dim", type=int, default=16)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--precision", choices=("f32", "f64"), default="f64")
    bench.add_argument("--mode", choices=("naive", "disco", "both"), default="both")
    bench.add_argument("--format", choices=("csv", "json", "table"), default="table")
    bench.add_argument("--out", default=None)
    bench.set_defaults(func=cmd_bench)

    train = sub.add_parser("train", help="run the two-tower trainer")
    train.add_argument("--batch-size", type=int, default=16)
    train.add_argument("--world-size", type=int, default=2)
    train.add_argument("--dim", type=int, default=4)
    train.add_argument("--input-dim", type=int, default=8)
    train.add_argument("--steps", type=int, default=50)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--mode", choices=("naive", "disco", "both"), default="both")
    train.add_argument("--format", choices=("csv", "json", "table"), default="csv")
    train.add_argument("--out", default=None)
    train.set_defaults(func=cmd_train)

    model = sub.add_parser("model", help="print the analytic cost table")
    model.add_argument("--batch-size", type=int, default=65536)
    model.add_argument("--world-size", type=int, default=64)
    model.add_argument("--layers", type=int, default=12)
    model.add_argument("--dim", type=int, default=1024)
    model.add_argument("--precision", choices=("f32", "f64"), default="f32")
    model.add_argument("--format", choices=("csv", "json", "table"), default="table")
    model.add_argument("--out", default=None)
    model.set_defaults(func=cmd_model)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    scheduler = os.environ.get("DISCO_SCHEDULER", LOCKSTEP)
    if scheduler not in (LOCKSTEP, CONCURRENT):
        print(f"error: DISCO_SCHEDULER must be '{LOCKSTEP}' or '{CONCURRENT}', "
              f"got {scheduler!r}", file=sys.stderr)
        return EXIT_BAD_ARGS
    try:
        return args.func(args, scheduler)
    except TrainingDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILURE
    except (DomainError, LayoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS


if __name__ == "__main__":
    sys.exit(main())
