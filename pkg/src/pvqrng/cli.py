"""Command-line front end for the whole pipeline.

Subcommands: generate, sift, chsh, visibility, verify, serve, submit,
finalize, report.  Exit codes are a stable scripting contract:

    0  success / verdict Pass
    1  usage error (bad arguments, wrong session state)
    2  format error (bad PVQR/PVQV data, mismatched inputs)
    3  verdict Fail
    4  transport error (connection refused, closed mid-session)

Battery options resolve with precedence: explicit CLI flag, then the
config file named by the ``PVQR_BATTERY_CONFIG`` environment variable,
then the file given with ``--battery-config``, then built-in defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, bitio, protocol, quantum, stats, verifier

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_FAIL = 3
EXIT_TRANSPORT = 4

VISIBILITY_CSV_FORMAT = "pvqrng-visibility v1"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; the CLI contract wants 1
    def error(self, message):
        raise _UsageError(message)


def _stream_paths(directory: Path, prefix: str) -> dict[str, Path]:
    return {
        "A": directory / f"{prefix}_A.pvqr",
        "B": directory / f"{prefix}_B.pvqr",
        "C": directory / f"{prefix}_C.pvqr",
        "meta": directory / f"{prefix}.meta",
    }


def _config_hash(items: dict) -> str:
    canon = ",".join(f"{k}={items[k]}" for k in sorted(items))
    return hashlib.sha256(canon.encode("ascii")).hexdigest()[:16]


def _bench_config(args) -> bench.BenchConfig:
    return bench.BenchConfig(
        pair_rate=args.pair_rate,
        visibility=args.visibility,
        detector_efficiency=args.efficiency,
        dark_rate=args.dark_rate,
        coincidence_window=args.window,
    )


def _add_bench_flags(p: _Parser) -> None:
    p.add_argument("--visibility", type=float, default=1.0, help="source visibility V in [0,1] (default 1.0)")
    p.add_argument("--pair-rate", type=float, default=1e5, help="entangled pair emissions per second")
    p.add_argument("--efficiency", type=float, default=0.6, help="detector efficiency, applied to all six detectors")
    p.add_argument("--dark-rate", type=float, default=500.0, help="dark counts per second per detector")
    p.add_argument("--window", type=float, default=1e-9, help="coincidence window in seconds")


def _add_battery_flags(p: _Parser) -> None:
    g = p.add_argument_group("battery options")
    g.add_argument("--alpha-single", type=float, default=None, help="per-test failure threshold (default 1e-4)")
    g.add_argument("--alpha-ks", type=float, default=None, help="KS-aggregate rejection level (default 0.01)")
    g.add_argument("--min-bits", type=int, default=None, help="minimum accepted stream length (default 100000)")
    g.add_argument("--block-sizes", default=None, help="comma-separated block-frequency sizes")
    g.add_argument("--lags", default=None, help="comma-separated autocorrelation lags")
    g.add_argument("--entropy-k", default=None, help="block-entropy block size in bits, or 'none'")
    g.add_argument("--extended", action="store_true", help="start from the wide 23-test battery preset")
    g.add_argument("--battery-config", type=Path, default=None, help="key=value battery config file")


def _battery_file_values(path) -> dict[str, str]:
    return bitio.read_sidecar(path)


def _resolve_battery(args) -> stats.BatteryConfig:
    layers: list[dict[str, str]] = []
    if args.battery_config is not None:
        layers.append(_battery_file_values(args.battery_config))
    env = os.environ.get("PVQR_BATTERY_CONFIG")
    if env:
        layers.append(_battery_file_values(env))

    preset = "default"
    for layer in layers:
        if "preset" in layer:
            preset = layer["preset"]
    if args.extended:
        preset = "extended"
    if preset not in ("default", "extended"):
        raise _UsageError(f"unknown battery preset {preset!r}")
    base = stats.BatteryConfig.extended() if preset == "extended" else stats.BatteryConfig()

    kwargs = dict(
        block_sizes=base.block_sizes,
        autocorr_lags=base.autocorr_lags,
        entropy_block_bits=base.entropy_block_bits,
        alpha_single=base.alpha_single,
        alpha_ks=base.alpha_ks,
        min_bits=base.min_bits,
    )

    def apply(key: str, raw: str) -> None:
        if key in ("alpha_single", "alpha_ks"):
            kwargs[key] = float(raw)
        elif key == "min_bits":
            kwargs[key] = int(raw)
        elif key in ("block_sizes", "autocorr_lags"):
            kwargs[key] = tuple(int(v) for v in str(raw).split(",") if v.strip())
        elif key == "entropy_block_bits":
            kwargs[key] = None if str(raw).lower() == "none" else int(raw)
        elif key == "preset":
            pass
        else:
            raise _UsageError(f"unknown battery config key {key!r}")

    for layer in layers:
        for key, raw in layer.items():
            apply(key, raw)
    if args.alpha_single is not None:
        kwargs["alpha_single"] = args.alpha_single
    if args.alpha_ks is not None:
        kwargs["alpha_ks"] = args.alpha_ks
    if args.min_bits is not None:
        kwargs["min_bits"] = args.min_bits
    if args.block_sizes is not None:
        apply("block_sizes", args.block_sizes)
    if args.lags is not None:
        apply("autocorr_lags", args.lags)
    if args.entropy_k is not None:
        apply("entropy_block_bits", args.entropy_k)
    try:
        return stats.BatteryConfig(**kwargs)
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc


def _parse_angles(raw: str) -> tuple[float, float, float, float]:
    parts = [p for p in raw.split(",") if p.strip()]
    if len(parts) != 4:
        raise _UsageError("--angles needs four comma-separated radians: a,a',b,b'")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def cmd_generate(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = _stream_paths(out_dir, args.prefix)

    hash_items = {
        "mode": args.mode,
        "n": args.n,
        "visibility": args.visibility,
        "pair_rate": args.pair_rate,
        "efficiency": args.efficiency,
        "dark_rate": args.dark_rate,
        "window": args.window,
    }

    if args.events_in is not None:
        events = bench.read_events(args.events_in)
        records = bench.find_coincidences(events, args.window)
        if len(records) == 0:
            raise _UsageError("replayed event stream contains no coincidences")
        batch = records.triplet_batch()
        hash_items["events_in"] = Path(args.events_in).name
    elif args.mode == "bench":
        if args.n < 1:
            raise _UsageError("--n must be >= 1")
        config = _bench_config(args)
        if args.events_out is not None:
            chunks: list[bench.EventStream] = []
            records = bench.collect_coincidences(config, args.n, args.seed, on_events=chunks.append)
            bench.write_events(args.events_out, bench.EventStream.concatenate(chunks))
            full = records.triplet_batch()
            batch = quantum.TripletBatch(full.x_a[: args.n], full.x_b[: args.n], full.x_c[: args.n])
        else:
            batch = bench.run_generation(config, args.n, args.seed)
    else:
        if args.n < 1:
            raise _UsageError("--n must be >= 1")
        state = quantum.apply_isotropic_noise(quantum.bell_state("phi-"), args.visibility)
        dist = quantum.outcome_distribution(state)
        batch = quantum.sample_triplets(dist, args.n, args.seed)

    bitio.write_stream_file(paths["A"], bitio.TAG_A, bitio.BitStream.from_bits(batch.x_a))
    bitio.write_stream_file(paths["B"], bitio.TAG_B, bitio.BitStream.from_bits(batch.x_b))
    bitio.write_stream_file(paths["C"], bitio.TAG_C, bitio.BitStream.from_bits(batch.x_c))
    bitio.write_sidecar(
        paths["meta"],
        {
            "n_raw": len(batch),
            "qber": repr(batch.odd_parity_fraction()),
            "seed": args.seed,
            "config_hash": _config_hash(hash_items),
        },
    )
    print(f"wrote {len(batch)} triplets to {out_dir} (prefix {args.prefix!r})")
    print(f"raw odd-parity fraction: {batch.odd_parity_fraction():.6f}")
    return EXIT_OK


def cmd_sift(args) -> int:
    in_dir = Path(args.in_dir)
    src = _stream_paths(in_dir, args.prefix)
    columns = {}
    for tag_name, tag in (("A", bitio.TAG_A), ("B", bitio.TAG_B), ("C", bitio.TAG_C)):
        tag_read, stream = bitio.read_stream_file(src[tag_name])
        if tag_read != tag:
            raise bitio.FormatError(f"{src[tag_name]} carries tag {tag_read}, expected {tag}")
        columns[tag_name] = stream.bits()
    lengths = {name: len(col) for name, col in columns.items()}
    if len(set(lengths.values())) != 1:
        raise bitio.FormatError(f"stream lengths differ: {lengths}")

    batch = quantum.TripletBatch(columns["A"], columns["B"], columns["C"])
    sifted = protocol.sift(batch)

    out_dir = Path(args.out_dir) if args.out_dir else in_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    dst = _stream_paths(out_dir, args.out_prefix)
    bitio.write_stream_file(dst["A"], bitio.TAG_A, bitio.BitStream.from_bits(sifted.xp_a))
    bitio.write_stream_file(dst["B"], bitio.TAG_B, bitio.BitStream.from_bits(sifted.xp_b))
    bitio.write_stream_file(dst["C"], bitio.TAG_C, bitio.BitStream.from_bits(sifted.xp_c))

    meta = {"n_raw": sifted.n_raw, "m": sifted.m, "qber": repr(sifted.qber)}
    if src["meta"].exists():
        carried = bitio.read_sidecar(src["meta"])
        for key in ("seed", "config_hash"):
            if key in carried:
                meta[key] = carried[key]
    bitio.write_sidecar(dst["meta"], meta)
    print(f"qber={sifted.qber:.6f}")
    print(f"kept {sifted.m} of {sifted.n_raw} triplets")
    return EXIT_OK


def cmd_chsh(args) -> int:
    settings = _parse_angles(args.angles) if args.angles else quantum.CHSH_OPTIMAL_ANGLES
    config = _bench_config(args)
    s_value, stderr = bench.measure_chsh(config, settings, args.samples, args.seed, arm=args.arm)
    print(f"S = {s_value:.4f} +/- {stderr:.4f}")
    return EXIT_OK


def cmd_visibility(args) -> int:
    config = _bench_config(args)
    angles = np.linspace(0.0, math.pi / 2, args.angle_count, endpoint=False)
    fit = bench.visibility_sweep(config, args.basis, angles, args.samples, args.seed)
    lines = [f"# {VISIBILITY_CSV_FORMAT}", "angle_rad,counts"]
    for angle, count in fit.points():
        lines.append(f"{angle!r},{count}")
    csv_text = "\n".join(lines) + "\n"
    if args.csv:
        Path(args.csv).write_text(csv_text, encoding="ascii")
    else:
        sys.stdout.write(csv_text)
    print(f"V_fit = {fit.visibility:.4f} (c0 = {fit.c0:.1f}, theta0 = {fit.theta0:.4f} rad)")
    return EXIT_OK


def _emit_verdict(verdict: verifier.Verdict, args) -> int:
    if getattr(args, "report_out", None):
        Path(args.report_out).write_bytes(verifier.encode_report_payload(verdict))
    if getattr(args, "csv_out", None):
        Path(args.csv_out).write_text(stats.sorted_pvalues_csv(verdict.report), encoding="ascii")
    rep = verdict.report
    print(f"decision: {verdict.decision}")
    print(f"tests: {len(rep.results)}, ks_d={rep.ks_statistic:.4f}, ks_p={rep.ks_p:.4g}")
    return EXIT_OK if verdict.passed else EXIT_FAIL


def cmd_verify(args) -> int:
    verdict = verifier.verify_file(args.stream, _resolve_battery(args))
    return _emit_verdict(verdict, args)


def cmd_serve(args) -> int:
    config = verifier.VerifierConfig(
        battery=_resolve_battery(args),
        retain_dir=Path(args.retain) if args.retain else None,
    )
    server = verifier.VerifierServer(verifier.parse_endpoint(args.listen), config)
    host, port = server.endpoint
    print(f"listening on {host}:{port}", flush=True)
    try:
        with server:
            server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_submit(args) -> int:
    payload = Path(args.stream).read_bytes()
    verdict = verifier.submit(args.endpoint, payload, timeout=args.timeout)
    return _emit_verdict(verdict, args)


def _shred(path: Path) -> None:
    # overwrite on disk before unlinking so the bits do not linger
    size = path.stat().st_size
    with open(path, "r+b") as fh:
        fh.write(b"\x00" * size)
        fh.flush()
        os.fsync(fh.fileno())
    path.unlink()


def cmd_finalize(args) -> int:
    directory = Path(args.dir)
    paths = _stream_paths(directory, args.prefix)
    meta = bitio.read_sidecar(paths["meta"]) if paths["meta"].exists() else {}
    if meta.get("finalized") == "1":
        raise _UsageError("session already finalized")
    if not paths["A"].exists():
        raise _UsageError(f"no sifted streams under prefix {args.prefix!r} in {directory}")

    verdict = verifier.parse_report_payload(Path(args.report).read_bytes())
    _tag, submitted = bitio.read_stream_file(paths["A"])
    if bitio.stream_digest(submitted) != verdict.stream_digest:
        raise bitio.FormatError("report digest does not match the sifted A stream")

    meta["finalized"] = "1"
    meta["verdict"] = verdict.decision

    if not verdict.passed:
        for name in ("A", "B", "C"):
            if paths[name].exists():
                _shred(paths[name])
        bitio.write_sidecar(paths["meta"], meta)
        print("Fail")
        return EXIT_FAIL

    tag_b, xpb = bitio.read_stream_file(paths["B"])
    if tag_b != bitio.TAG_B:
        raise bitio.FormatError(f"{paths['B']} carries tag {tag_b}, expected {bitio.TAG_B}")
    Path(args.out).write_bytes(bitio.encode_stream(bitio.TAG_B, xpb))

    if args.disposal == "store-sealed":
        sealed_dir = Path(args.sealed_dir) if args.sealed_dir else directory / "sealed"
        sealed_dir.mkdir(parents=True, exist_ok=True)
        sealed_path = sealed_dir / paths["C"].name
        sealed_path.write_bytes(paths["C"].read_bytes())
        paths["C"].unlink()
        # read-only stand-in for sealed storage; real key management is out of scope
        os.chmod(sealed_dir, 0o555)
        meta["disposal"] = "store_sealed"
    else:
        _shred(paths["C"])
        meta["disposal"] = "delete"

    bitio.write_sidecar(paths["meta"], meta)
    print(f"qber={float(meta.get('qber', 'nan')):.6f}")
    print(f"wrote private stream to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    _tag, stream = bitio.read_stream_file(args.stream)
    config = _resolve_battery(args)
    report = stats.run_battery(stream.bits(), config)
    text = stats.render_report(report)
    if args.out:
        Path(args.out).write_text(text, encoding="ascii")
    else:
        sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(stats.sorted_pvalues_csv(report), encoding="ascii")
    print(f"decision: {report.decision}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="pvqrng", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="simulate a run and write raw A/B/C streams")
    p.add_argument("--n", type=int, required=True, help="number of triplets to generate")
    p.add_argument("--seed", type=int, default=1, help="64-bit RNG seed")
    p.add_argument("--mode", choices=("bench", "direct"), default="bench",
                   help="bench: event-level simulation; direct: sample the outcome distribution")
    _add_bench_flags(p)
    p.add_argument("--out-dir", required=True, help="directory for the stream files")
    p.add_argument("--prefix", default="raw", help="file prefix (default 'raw')")
    p.add_argument("--events-out", default=None, help="also dump the raw detector events (text format)")
    p.add_argument("--events-in", default=None, help="replay a recorded event stream instead of simulating")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sift", help="remove parity-violating triplets and report QBER")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--prefix", default="raw")
    p.add_argument("--out-dir", default=None, help="defaults to --in-dir")
    p.add_argument("--out-prefix", default="sifted")
    p.set_defaults(func=cmd_sift)

    p = sub.add_parser("chsh", help="simulate a CHSH measurement run")
    p.add_argument("--samples", type=int, default=100_000, help="coincidences per setting combination")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--arm", type=int, choices=(0, 1), default=0, help="idler splitter arm: 0=(D1,D2), 1=(D3,D4)")
    p.add_argument("--angles", default=None, help="four analyzer angles a,a',b,b' in radians (default optimal)")
    _add_bench_flags(p)
    p.set_defaults(func=cmd_chsh)

    p = sub.add_parser("visibility", help="sweep the idler waveplate and fit the fringe")
    p.add_argument("--basis", choices=sorted(bench.BASIS_ANGLES), default="H")
    p.add_argument("--samples", type=int, default=20_000, help="emitted pairs per sweep angle")
    p.add_argument("--angle-count", type=int, default=16, help="number of sweep angles over one period")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--csv", default=None, help="write angle_rad,counts CSV here (default stdout)")
    _add_bench_flags(p)
    p.set_defaults(func=cmd_visibility)

    p = sub.add_parser("verify", help="offline verification of a PVQR stream file")
    p.add_argument("stream", help="PVQR file to test")
    p.add_argument("--report-out", default=None, help="write the verdict report payload here")
    p.add_argument("--csv-out", default=None, help="write the sorted p-value CSV here")
    _add_battery_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("serve", help="run the public verifier service")
    p.add_argument("--listen", default="127.0.0.1:7177", help="host:port to bind (port 0 picks one)")
    p.add_argument("--retain", default=None, help="directory to keep submitted streams in (off by default)")
    _add_battery_flags(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("submit", help="submit a sifted A stream to a verifier")
    p.add_argument("stream", help="PVQR file of the public stream")
    p.add_argument("--endpoint", required=True, help="verifier host:port")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--report-out", default=None, help="save the verdict report payload for finalize")
    p.add_argument("--csv-out", default=None)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("finalize", help="apply the verdict: emit the B stream or abort")
    p.add_argument("--dir", required=True, help="directory holding the sifted streams")
    p.add_argument("--prefix", default="sifted")
    p.add_argument("--report", required=True, help="verdict report payload from submit/verify")
    p.add_argument("--disposal", choices=("delete", "store-sealed"), default="delete")
    p.add_argument("--out", required=True, help="where to write the private B stream on Pass")
    p.add_argument("--sealed-dir", default=None, help="sealed storage directory (store-sealed)")
    p.set_defaults(func=cmd_finalize)

    p = sub.add_parser("report", help="run the battery on a stream and emit report + plot CSV")
    p.add_argument("stream", help="PVQR file to test")
    p.add_argument("--out", default=None, help="write the report text here (default stdout)")
    p.add_argument("--csv", default=None, help="write the sorted p-value CSV here")
    _add_battery_flags(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (bitio.FormatError, verifier.UndersizedStreamError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except verifier.TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except verifier.VerifierError as exc:
        print(f"verifier rejected the session: {exc}", file=sys.stderr)
        if exc.code in (verifier.ERR_UNDERSIZED, verifier.ERR_BAD_PAYLOAD):
            return EXIT_FORMAT
        return EXIT_TRANSPORT
    except protocol.SessionStateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, stats.StreamTooShortError, bench.FitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
