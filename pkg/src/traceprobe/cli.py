"""Command-line front end.

Subcommands
-----------
record    connect to a simulator endpoint and record prior executions
train     fit a proposal network to a recorded trace file
infer     posterior inference (is, ic, lmh, rmh) against live endpoints
diagnose  gr / acf / ess / marginal / tv over saved artifacts
graph     extract the aggregate execution structure as DOT

Every command that writes an output also writes ``<out>.manifest.json``: a
sorted-key JSON record of the command, its arguments, the package version,
start time, and elapsed seconds.

Exit codes: 0 success; 1 usage errors and unreadable inputs; 2 transport,
protocol, or simulator failures; 3 numerical failures.  The environment
variable ``TRACEPROBE_TIMEOUT_SECS`` overrides the per-call socket timeout.
Simulators are never spawned here -- endpoints must already be listening.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .controller import (
    ConditionOutOfSupport,
    InflationConfig,
    LockstepViolation,
    ProposalSupportError,
    Record,
    SimulatorError,
    WorkerError,
    run_batch,
)
from .diagnostics import (
    LengthMismatch,
    autocorrelation,
    ess_chain,
    ess_weighted,
    extract_graph,
    gelman_rubin,
    graph_to_dot,
    marginal_histogram,
    read_marginal_csv,
    tv_distance,
    write_marginal_csv,
    write_series_csv,
)
from .importance import WeightedPosterior, infer_ic, infer_is
from .mcmc import RwKernelConfig, run_chain, save_chain_sidecar
from .neural import (
    NetworkFileError,
    NoControlledAddresses,
    NonFiniteLoss,
    ProposalNetwork,
    TrainConfig,
    network_for_traces,
    train,
)
from .protocol import CodecError, _Reader
from .trace import CorruptTraceFile, TraceIoError, load_traces, save_traces
from .transport import DEFAULT_TIMEOUT_SECS, Connection, TransportError
from .values import Value, value_from_json_file

TIMEOUT_ENV = "TRACEPROBE_TIMEOUT_SECS"

EXIT_USAGE = 1
EXIT_PROTOCOL = 2
EXIT_NUMERICAL = 3

_PROTOCOL_ERRORS = (
    TransportError,
    SimulatorError,
    LockstepViolation,
    ConditionOutOfSupport,
    ProposalSupportError,
    CodecError,
    CorruptTraceFile,
    NetworkFileError,
    TraceIoError,
)
_NUMERICAL_ERRORS = (NonFiniteLoss, NoControlledAddresses, LengthMismatch)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; this front end promises 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _timeout() -> float:
    raw = os.environ.get(TIMEOUT_ENV)
    if raw is None:
        return DEFAULT_TIMEOUT_SECS
    try:
        value = float(raw)
        if not value > 0:
            raise ValueError
    except ValueError:
        raise UsageError(f"{TIMEOUT_ENV} must be a positive number, got {raw!r}")
    return value


def _pool(endpoints: str, timeout: float):
    """Comma-separated endpoints -> list of connection factories."""
    parts = [e.strip() for e in endpoints.split(",") if e.strip()]
    if not parts:
        raise UsageError("no endpoints given")
    return [
        (lambda ep=ep: Connection(ep, timeout=timeout)) for ep in parts
    ], parts


def load_observation(path) -> Value:
    """Read an observation: JSON number/array (*.json) or a raw value record."""
    if str(path).endswith(".json"):
        return value_from_json_file(path)
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    value = r.value()
    if r.pos != len(data):
        raise CodecError(r.pos, f"{len(data) - r.pos} trailing bytes after value")
    return value


def write_manifest(out_path, command: str, args: argparse.Namespace, outputs,
                   started: float, elapsed: float) -> None:
    arguments = {
        k: v
        for k, v in vars(args).items()
        if k not in ("func", "command") and not callable(v)
    }
    manifest = {
        "command": command,
        "arguments": {k: (str(v) if v is not None else None) for k, v in arguments.items()},
        "version": __version__,
        "started_utc": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        "elapsed_secs": round(elapsed, 6),
        "outputs": [str(o) for o in outputs],
    }
    with open(str(out_path) + ".manifest.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


# --- subcommand bodies ------------------------------------------------------


def _cmd_record(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    timeout = _timeout()
    pool, _ = _pool(args.endpoint, timeout)
    inflation = None
    if args.inflate is not None:
        inflation = InflationConfig(frozenset({args.inflate}), args.alpha)
    elif args.alpha != 1.0:
        raise UsageError("--alpha without --inflate has no effect")
    traces = run_batch(
        pool, args.n, Record(inflation=inflation), root_seed=args.seed
    )
    save_traces(args.out, traces)
    return 0


def _cmd_train(args) -> int:
    traces, _ = load_traces(args.data)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
    )
    network = network_for_traces(traces, seed=args.seed)
    result = train(network, traces, config)
    network.save(args.out)
    print(f"untrained valid loss {result.valid_losses[0]:.6f}")
    for epoch, tl in enumerate(result.train_losses):
        vl = result.valid_losses[epoch + 1]
        print(f"epoch {epoch + 1}: train loss {tl:.6f}, valid loss {vl:.6f}")
    return 0


def _cmd_infer(args) -> int:
    timeout = _timeout()
    observation = load_observation(args.obs) if args.obs else None
    if args.engine in ("is", "ic"):
        if args.n is None:
            raise UsageError(f"--n is required for --engine {args.engine}")
        if args.n < 1:
            raise UsageError(f"--n must be >= 1, got {args.n}")
        pool, _ = _pool(args.endpoints, timeout)
        if args.engine == "is":
            posterior = infer_is(
                pool, args.n, observation=observation, root_seed=args.seed
            )
        else:
            if args.net is None:
                raise UsageError("--engine ic requires --net")
            network = ProposalNetwork.load(args.net)
            posterior = infer_ic(
                pool, network, args.n, observation=observation, root_seed=args.seed
            )
        posterior.save(args.out)
        return 0

    # Single-site MCMC engines need exactly one endpoint.
    if args.steps is None:
        raise UsageError(f"--steps is required for --engine {args.engine}")
    if args.steps < 1:
        raise UsageError(f"--steps must be >= 1, got {args.steps}")
    _, endpoints = _pool(args.endpoints, timeout)
    if len(endpoints) != 1:
        raise UsageError(f"--engine {args.engine} takes exactly one endpoint")
    kernel = None if args.engine == "lmh" else RwKernelConfig(sigma=args.sigma)
    with Connection(endpoints[0], timeout=timeout) as conn:
        result = run_chain(
            conn,
            args.steps,
            kernel=kernel,
            burn_in=args.burn_in,
            thinning=args.thin,
            observation=observation,
            root_seed=args.seed,
        )
    posterior = WeightedPosterior(
        np.zeros(len(result.traces)), result.traces
    )
    posterior.save(args.out)
    save_chain_sidecar(str(args.out) + ".chain", result.log_joints, result.accepted)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def _cmd_diagnose(args) -> int:
    kind = args.diagnostic
    if kind == "gr":
        from .mcmc import load_chain_sidecar

        chains = []
        for path in args.chains.split(","):
            log_joints, _ = load_chain_sidecar(path.strip())
            chains.append(log_joints)
        value = gelman_rubin(chains)
        write_series_csv(args.out, "statistic,value", [("gelman_rubin", value)])
        print(f"gelman_rubin {value!r}")
        return 0
    if kind == "acf":
        from .mcmc import load_chain_sidecar

        log_joints, _ = load_chain_sidecar(args.chain)
        rho = autocorrelation(log_joints, args.max_lag)
        write_series_csv(
            args.out, "lag,autocorrelation", list(enumerate(rho.tolist()))
        )
        return 0
    if kind == "ess":
        if args.posterior is not None:
            posterior = WeightedPosterior.load(args.posterior)
            value = ess_weighted(posterior.log_weights)
            name = "ess_weighted"
        else:
            from .mcmc import load_chain_sidecar

            log_joints, _ = load_chain_sidecar(args.chain)
            value = ess_chain(log_joints)
            name = "ess_chain"
        write_series_csv(args.out, "statistic,value", [(name, value)])
        print(f"{name} {value!r}")
        return 0
    if kind == "marginal":
        posterior = WeightedPosterior.load(args.posterior)
        m = marginal_histogram(
            posterior.traces,
            posterior.log_weights,
            args.address,
            instance=args.instance,
            bins=args.bins,
            classes=args.classes,
        )
        write_marginal_csv(args.out, m)
        return 0
    if kind == "tv":
        a = read_marginal_csv(args.a)
        b = read_marginal_csv(args.b)
        value = tv_distance(a, b)
        print(f"tv_distance {value!r}")
        if args.out:
            write_series_csv(args.out, "statistic,value", [("tv_distance", value)])
            return 0
        return 0
    raise UsageError(f"unknown diagnostic {kind!r}")


def _cmd_graph(args) -> int:
    traces, _ = load_traces(args.data)
    graph = extract_graph(traces)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(graph_to_dot(graph))
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="traceprobe", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("record", help="record prior executions from a simulator")
    p.add_argument("--endpoint", required=True, help="tcp://host:port or ipc://path")
    p.add_argument("--n", type=int, required=True, help="number of traces")
    p.add_argument("--out", required=True, help="trace file to write")
    p.add_argument("--inflate", help="categorical address to inflate")
    p.add_argument("--alpha", type=float, default=1.0,
                   help="inflation exponent in [0, 1] (0 = uniform)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_record, out_arg="out")

    p = sub.add_parser("train", help="train a proposal network on recorded traces")
    p.add_argument("--data", required=True, help="trace file")
    p.add_argument("--out", required=True, help="network file to write")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train, out_arg="out")

    p = sub.add_parser("infer", help="posterior inference against live endpoints")
    p.add_argument("--engine", required=True, choices=("is", "ic", "lmh", "rmh"))
    p.add_argument("--obs", help="observation file (raw value or .json)")
    p.add_argument("--endpoints", required=True,
                   help="comma-separated simulator endpoints")
    p.add_argument("--n", type=int, help="importance samples (is, ic)")
    p.add_argument("--steps", type=int, help="MCMC steps (lmh, rmh)")
    p.add_argument("--net", help="proposal network file (ic)")
    p.add_argument("--out", required=True, help="posterior file to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--burn-in", type=int, default=0, dest="burn_in")
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--sigma", type=float, default=0.1, help="rmh step scale")
    p.set_defaults(func=_cmd_infer, out_arg="out")

    p = sub.add_parser("diagnose", help="diagnostics over saved artifacts")
    p.add_argument("diagnostic", choices=("gr", "acf", "ess", "marginal", "tv"))
    p.add_argument("--chains", help="comma-separated chain sidecars (gr)")
    p.add_argument("--chain", help="chain sidecar (acf, ess)")
    p.add_argument("--posterior", help="posterior file (ess, marginal)")
    p.add_argument("--max-lag", type=int, default=50, dest="max_lag")
    p.add_argument("--address", help="raw address (marginal)")
    p.add_argument("--instance", type=int, default=1)
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--classes", type=int, help="discrete class count (marginal)")
    p.add_argument("--a", help="first marginal CSV (tv)")
    p.add_argument("--b", help="second marginal CSV (tv)")
    p.add_argument("--out", help="output CSV")
    p.set_defaults(func=_cmd_diagnose, out_arg="out")

    p = sub.add_parser("graph", help="extract aggregate execution structure")
    p.add_argument("--data", required=True, help="trace file")
    p.add_argument("--out", required=True, help="DOT file to write")
    p.set_defaults(func=_cmd_graph, out_arg="out")

    return parser


def _require(args, names) -> None:
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required here")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        if args.command == "diagnose":
            needed = {
                "gr": ("chains", "out"),
                "acf": ("chain", "out"),
                "marginal": ("posterior", "address", "out"),
                "tv": ("a", "b"),
                "ess": (),
            }[args.diagnostic]
            _require(args, needed)
            if args.diagnostic == "ess" and args.posterior is None and args.chain is None:
                raise UsageError("ess needs --posterior or --chain")
            if args.diagnostic == "ess" and args.out is None:
                raise UsageError("--out is required here")
        code = args.func(args)
    except UsageError as e:
        print(f"traceprobe: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"traceprobe: error: cannot read {e.filename}", file=sys.stderr)
        return EXIT_USAGE
    except TraceIoError as e:
        print(f"traceprobe: error: {e}", file=sys.stderr)
        # a missing input path is a usage mistake; other I/O failures are not
        if isinstance(e.__cause__, FileNotFoundError):
            return EXIT_USAGE
        return EXIT_PROTOCOL
    except OSError as e:
        # socket-level failures (refused connections, timeouts, hangups)
        print(f"traceprobe: error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except WorkerError as e:
        cause = e.__cause__
        print(f"traceprobe: error: {e}", file=sys.stderr)
        if isinstance(cause, _NUMERICAL_ERRORS):
            return EXIT_NUMERICAL
        return EXIT_PROTOCOL
    except _NUMERICAL_ERRORS as e:
        print(f"traceprobe: error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _PROTOCOL_ERRORS as e:
        print(f"traceprobe: error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except ValueError as e:
        print(f"traceprobe: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if code == 0:
        out = getattr(args, getattr(args, "out_arg", "out"), None)
        if out:
            write_manifest(
                out, args.command, args, [out], started, time.time() - started
            )
    return code


if __name__ == "__main__":
    sys.exit(main())
