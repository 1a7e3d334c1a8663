"""``qf`` command line: quantize, bench, verify.

Exit codes: 0 success, 1 verification failure, 2 I/O or parse error,
3 precondition violation.
"""
from __future__ import annotations

import argparse
import sys

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_IO = 2
EXIT_PRECONDITION = 3


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="convert an F32/F16 container to Q8 blocks")
    q.add_argument("--in", dest="src", required=True, metavar="FILE")
    q.add_argument("--out", dest="dst", required=True, metavar="FILE")
    q.add_argument("--scale-format", choices=["f16", "f32"], default="f16")

    b = sub.add_parser("bench", help="measure prefill/decode throughput and kernel timings")
    b.add_argument("--hidden", type=_positive, default=512)
    b.add_argument("--ffn", type=_positive, default=1024)
    b.add_argument("--layers", type=_positive, default=8)
    b.add_argument("--prefill-tokens", type=_positive, default=64)
    b.add_argument("--decode-steps", type=_positive, default=64)
    b.add_argument("--warmup", type=_non_negative, default=1)
    b.add_argument("--repeat", type=_positive, default=5)
    b.add_argument("--scale-format", choices=["f16", "f32"], default="f16")
    b.add_argument("--threads", type=_positive, default=None)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--force-scalar", action="store_true")
    b.add_argument("--csv", metavar="PATH", help="write CSV here instead of stdout")

    v = sub.add_parser("verify", help="run scalar-vs-active differential suites")
    v.add_argument("--suite", action="append", choices=["f16", "quant", "kernels"],
                   help="suite to run (repeatable; default all)")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--cases", type=_positive, default=None,
                   help="override the per-suite case count")
    return p


def cmd_quantize(args) -> int:
    from qf.tensorio import ModelFormatError, SourceFormatError, quantize_model

    try:
        report = quantize_model(args.src, args.scale_format, args.dst)
    except FileNotFoundError as e:
        print(f"qf quantize: no such file: {e.filename}", file=sys.stderr)
        return EXIT_IO
    except (OSError, ModelFormatError) as e:
        print(f"qf quantize: {args.src}: {e}", file=sys.stderr)
        return EXIT_IO
    except SourceFormatError as e:
        print(f"qf quantize: {e}", file=sys.stderr)
        return EXIT_PRECONDITION

    print(f"{'tensor':<24}{'dims':<16}{'from':<9}{'to':<9}{'bytes in':>12}{'bytes out':>12}{'rmse':>12}{'max err':>12}")
    for t in report.tensors:
        dims = "x".join(map(str, t.dims))
        rmse = f"{t.stats.rmse:.3e}" if t.stats else "-"
        mx = f"{t.stats.max_abs_err:.3e}" if t.stats else "-"
        print(f"{t.name:<24}{dims:<16}{t.src_format.name:<9}{t.dst_format.name:<9}"
              f"{t.bytes_before:>12}{t.bytes_after:>12}{rmse:>12}{mx:>12}")
    print(f"total {report.bytes_before} -> {report.bytes_after} bytes")
    q = report.quantized_bytes
    if q:
        # the other scale format's size follows from the block count
        blocks = q // report.scale_format.block_bytes
        f16s, f32s = 34 * blocks, 36 * blocks
        print(f"quantized payload: Q8_F16S {f16s} bytes, Q8_F32S {f32s} bytes, "
              f"F32S/F16S ratio {f32s / f16s:.6f} (+{(f32s / f16s - 1) * 100:.2f}%)")
    return EXIT_OK


def cmd_bench(args) -> int:
    from qf.bench import BenchConfig, env_threads_default, run_bench

    try:
        cfg = BenchConfig(
            hidden_dim=args.hidden, ffn_dim=args.ffn, n_layers=args.layers,
            prefill_tokens=args.prefill_tokens, decode_steps=args.decode_steps,
            warmup_iters=args.warmup, repeat_count=args.repeat,
            scale_format=args.scale_format,
            threads=args.threads or env_threads_default(),
            seed=args.seed, force_scalar=args.force_scalar,
        )
    except ValueError as e:
        print(f"qf bench: {e}", file=sys.stderr)
        return EXIT_PRECONDITION
    report = run_bench(cfg)
    print(report.to_text())
    print()
    print(report.dispatch_summary)
    if args.csv:
        try:
            with open(args.csv, "w", newline="") as f:
                report.write_csv(f)
        except OSError as e:
            print(f"qf bench: cannot write {args.csv}: {e}", file=sys.stderr)
            return EXIT_IO
    else:
        print()
        sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_verify(args) -> int:
    from qf.kernels import get_kernels
    from qf.verify import DEFAULT_CASES, run_suites

    names = args.suite or list(DEFAULT_CASES)
    cases = {n: args.cases for n in names} if args.cases else None
    ks = get_kernels()
    print(f"dispatch: {ks.dispatch}")
    print(ks.summary())
    try:
        results = run_suites(names, ks, seed=args.seed, cases=cases)
    except ValueError as e:
        print(f"qf verify: {e}", file=sys.stderr)
        return EXIT_PRECONDITION
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<8} {r.cases} cases in {r.seconds:.1f}s")
        for m in r.mismatches:
            print(f"     {m}")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_VERIFY


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"quantize": cmd_quantize, "bench": cmd_bench, "verify": cmd_verify}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
