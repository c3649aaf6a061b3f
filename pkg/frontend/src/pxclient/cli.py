"""Command line for the protocol front end.

serve       bind an endpoint and serve a packaged model to the engine
--selftest  check the wire codec against the shared golden byte fixtures

The golden fixtures are the frozen .bin files both components must agree on;
``--golden`` points at their directory (default: tests/golden under the
current directory).
"""
from __future__ import annotations

import argparse
import pathlib
import sys

from .distributions import (
    Categorical,
    MixtureTruncatedNormal,
    Normal,
    Poisson,
    TruncatedNormal,
    Uniform,
)
from .server import serve
from .toy import ToyConfig, make_toy_model, toy_model
from .values import Boolean, Integer, Real, RealVector
from .wire import (
    Handshake,
    HandshakeResult,
    ObserveRequest,
    ObserveResult,
    ProtocolError,
    Run,
    RunResult,
    SampleRequest,
    SampleResult,
    WireError,
    decode,
    encode,
)

_MODELS = ("toy",)


def golden_table():
    """The frozen (filename, message) pairs the shared .bin fixtures encode."""
    import numpy as np

    mix = MixtureTruncatedNormal(
        (0.25, 0.75),
        (
            TruncatedNormal(0.0, 1.0, -2.0, 2.0),
            TruncatedNormal(0.5, 2.0, -2.0, 2.0),
        ),
    )
    grid = RealVector(np.array([[1.5, -2.25], [0.0, 4.0e6]]))
    return [
        ("handshake.bin", Handshake("toy decay")),
        ("handshake_result.bin", HandshakeResult("toy decay simulator v1")),
        ("run_none.bin", Run(None)),
        ("run_vector.bin", Run(grid)),
        ("run_result.bin", RunResult(Real(3.5))),
        ("run_result_none.bin", RunResult(None)),
        (
            "sample_request_categorical.bin",
            SampleRequest("channel", Categorical((0.4, 0.3, 0.2, 0.1)), name="ch"),
        ),
        (
            "sample_request_uniform_replaced.bin",
            SampleRequest("fragment_2", Uniform(0.0, 1.0), control=True, replace=True),
        ),
        (
            "sample_request_normal_uncontrolled.bin",
            SampleRequest("drift", Normal(-1.5, 0.25), control=False),
        ),
        ("sample_request_mixture.bin", SampleRequest("momentum_1", mix)),
        ("sample_result_integer.bin", SampleResult(Integer(-7))),
        ("sample_result_boolean.bin", SampleResult(Boolean(True))),
        (
            "observe_request_poisson.bin",
            ObserveRequest("calo", Poisson(4.25), Integer(11)),
        ),
        (
            "observe_request_truncated.bin",
            ObserveRequest("hit", TruncatedNormal(1.0, 0.5, 0.0, 2.0), Real(0.75)),
        ),
        ("observe_result_none.bin", ObserveResult(None)),
        ("observe_result_real.bin", ObserveResult(Real(-0.125))),
        ("error.bin", ProtocolError(3, "lock-step violated")),
    ]


def run_selftest(golden_dir: str, out=None) -> int:
    """Decode every golden vector, compare, and re-encode bytewise."""
    out = out if out is not None else sys.stdout
    root = pathlib.Path(golden_dir)
    failures = 0
    for name, expected in golden_table():
        path = root / name
        try:
            blob = path.read_bytes()
        except OSError as e:
            print(f"FAIL {name}: unreadable fixture ({e})", file=out)
            failures += 1
            continue
        try:
            got = decode(blob)
        except WireError as e:
            print(f"FAIL {name}: does not decode ({e})", file=out)
            failures += 1
            continue
        if got != expected:
            print(f"FAIL {name}: decoded {got!r}, expected {expected!r}", file=out)
            failures += 1
            continue
        if encode(got) != blob:
            print(f"FAIL {name}: re-encoding differs from the fixture bytes", file=out)
            failures += 1
            continue
        print(f"ok {name}", file=out)
    total = len(golden_table())
    print(f"{total - failures}/{total} golden vectors verified", file=out)
    return 1 if failures else 0


def _cmd_serve(args) -> int:
    if args.model == "toy":
        model = toy_model if args.scale is None else make_toy_model(ToyConfig(scale=args.scale))
    else:  # unreachable while _MODELS == ("toy",); keeps the dispatch explicit
        raise AssertionError(args.model)
    print(f"serving {args.model} at {args.endpoint}", flush=True)
    try:
        serve(
            model,
            args.endpoint,
            model_name=args.model_name or args.model,
            address_mode=args.address_mode,
        )
    except KeyboardInterrupt:
        pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pxclient", description=__doc__.split("\n")[0])
    parser.add_argument(
        "--selftest", action="store_true", help="verify the codec against golden vectors"
    )
    parser.add_argument(
        "--golden",
        default="tests/golden",
        help="directory holding the shared golden .bin fixtures",
    )
    sub = parser.add_subparsers(dest="command")
    p = sub.add_parser("serve", help="serve a packaged model to the engine")
    p.add_argument("--endpoint", required=True, help="tcp://host:port or ipc://path")
    p.add_argument("--model", default="toy", choices=_MODELS)
    p.add_argument("--model-name", dest="model_name", help="name announced in handshakes")
    p.add_argument(
        "--address-mode",
        dest="address_mode",
        default="explicit",
        choices=("explicit", "stack"),
    )
    p.add_argument(
        "--scale",
        type=float,
        help="override the toy deposition scale (0 gives floor-only rates)",
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.selftest:
        return run_selftest(args.golden)
    if args.command == "serve":
        return _cmd_serve(args)
    parser.print_usage(sys.stderr)
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
