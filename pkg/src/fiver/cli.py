"""Command-line surface: recv/send/gen/bench subcommands.

Every flag is mirrored by a FIVER_-prefixed environment variable and a
`key=value` line in an optional config file; precedence is flags > env >
config file > defaults. Sizes use binary suffixes (K=KiB, M=MiB, G=GiB).
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import bench, endpoint
from .faults import FaultMode, FaultScheduleError, schedule_faults
from .model import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_BUFFER_SIZE,
    DEFAULT_QUEUE_CAPACITY,
    DatasetSpecError,
    FileMeta,
    HashAlg,
    Strategy,
    TransferPlan,
    parse_size,
)
from .wire import HandshakeError, TransportError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY_FAILED = 2
EXIT_TRANSPORT = 3

ENV_PREFIX = "FIVER_"


class UsageError(Exception):
    pass


def _size(text: str) -> int:
    return parse_size(text, allow_zero=True)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class _Field:
    name: str  # config-file key and flag name (dashes in flag form)
    conv: object  # str -> value
    default: object
    help: str
    is_flag: bool = False  # boolean switch


_FIELDS: dict[str, _Field] = {
    f.name: f
    for f in [
        _Field("strategy", str, Strategy.FIVER.value,
               "sequential|file-ppl|block-ppl|fiver|fiver-chunked|hybrid"),
        _Field("hash", str, HashAlg.MD5.value, "md5|sha1|sha256"),
        _Field("block_size", _size, DEFAULT_BLOCK_SIZE,
               "block size for block-ppl (default 256M)"),
        _Field("chunk_size", _size, 0,
               "digest chunk size for fiver-chunked (0 = whole file)"),
        _Field("queue_capacity", int, DEFAULT_QUEUE_CAPACITY,
               "shared queue depth in buffers"),
        _Field("buffer_size", _size, DEFAULT_BUFFER_SIZE, "I/O buffer size"),
        _Field("hybrid_threshold", str, "0",
               "hybrid routing threshold in bytes, or 'auto' to sample free memory"),
        _Field("net_rate", _size, 0, "network throttle in bytes/s (0 = unlimited)"),
        _Field("checksum_rate", _size, 0, "digest throttle in bytes/s (0 = unlimited)"),
        _Field("faults", int, 0, "number of single-bit faults to inject"),
        _Field("fault_mode", str, FaultMode.IN_FLIGHT.value, "in-flight|post-write"),
        _Field("fault_seed", int, 0, "fault schedule seed"),
        _Field("faults_persistent", _bool, False,
               "re-apply faults on retransfer (exhausts retries)", is_flag=True),
        _Field("audit", _bool, False,
               "final independent on-disk digest pass at the receiver", is_flag=True),
        _Field("report", str, "", "write the transfer report here (.csv or JSON lines)"),
        _Field("root_dir", str, ".", "dataset directory (send) / storage root (recv)"),
        _Field("manifest", str, "", "dataset manifest (default: <root_dir>/manifest.tsv)"),
        _Field("listen", str, "127.0.0.1:7000", "receiver listen address"),
        _Field("sessions", int, 0, "serve N sessions then exit (0 = forever)"),
        _Field("handshake_timeout", float, 10.0, "handshake timeout in seconds"),
        _Field("spec", str, "", "dataset spec, e.g. 8x512K,8x25M"),
        _Field("order", str, "as-given", "as-given|shuffled|sorted-interleave"),
        _Field("seed", int, 0, "dataset content/order seed"),
        _Field("out", str, "", "output directory (gen) or report file (bench)"),
        _Field("matrix", str, "", "experiment matrix file, one cell per line"),
        _Field("format", str, "csv", "csv|text-table"),
        _Field("work_dir", str, "", "bench working directory for datasets and runs"),
    ]
}

_COMMAND_FIELDS = {
    "recv": ["listen", "root_dir", "checksum_rate", "queue_capacity", "sessions",
             "handshake_timeout"],
    "send": ["strategy", "hash", "block_size", "chunk_size", "queue_capacity",
             "buffer_size", "hybrid_threshold", "net_rate", "checksum_rate",
             "faults", "fault_mode", "fault_seed", "faults_persistent", "audit",
             "report", "root_dir", "manifest", "handshake_timeout"],
    "gen": ["spec", "order", "seed", "out"],
    "bench": ["matrix", "out", "format", "work_dir"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(
        prog="fiver",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, names in _COMMAND_FIELDS.items():
        p = sub.add_parser(command, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--print-config", action="store_true",
                       help="print the effective configuration and exit")
        if command == "send":
            p.add_argument("remote", nargs="?", default=None, help="receiver host:port")
        for name in names:
            f = _FIELDS[name]
            flag = "--" + name.replace("_", "-")
            if f.is_flag:
                p.add_argument(flag, action="store_const", const=True, default=None,
                               dest=name, help=f.help)
            else:
                p.add_argument(flag, default=None, dest=name, help=f.help)
        p.set_defaults(command=command)
    return parser


def _load_config_file(path: str) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{line_no}: expected key=value")
            values[key.strip()] = value.strip()
    return values


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge flags > environment > config file > defaults for the command's
    fields, then validate cross-field combinations."""
    file_values = _load_config_file(args.config) if args.config else {}
    cfg = {}
    for name in _COMMAND_FIELDS[args.command]:
        f = _FIELDS[name]
        flag_value = getattr(args, name, None)
        env_value = os.environ.get(ENV_PREFIX + name.upper())
        if flag_value is not None:
            raw = flag_value
        elif env_value is not None:
            raw = env_value
        elif name in file_values:
            raw = file_values[name]
        else:
            cfg[name] = f.default
            continue
        try:
            cfg[name] = f.conv(raw) if isinstance(raw, str) else raw
        except (ValueError, DatasetSpecError) as exc:
            raise UsageError(f"bad value for {name}: {exc}") from None
    _validate(args.command, cfg)
    return cfg


def _validate(command: str, cfg: dict) -> None:
    if "strategy" in cfg:
        try:
            strategy = Strategy(cfg["strategy"])
        except ValueError:
            raise UsageError(f"unknown strategy {cfg['strategy']!r}") from None
        if cfg["chunk_size"] > 0 and strategy is not Strategy.FIVER_CHUNKED:
            raise UsageError("--chunk-size only applies to --strategy fiver-chunked")
        if strategy is Strategy.FIVER_CHUNKED and cfg["chunk_size"] == 0:
            raise UsageError("--strategy fiver-chunked requires --chunk-size")
        threshold = cfg["hybrid_threshold"]
        if strategy is Strategy.FIVER_HYBRID:
            if threshold != "auto" and _size(threshold) == 0:
                raise UsageError("--strategy hybrid requires --hybrid-threshold (bytes or 'auto')")
        elif threshold != "0" and threshold != "auto" and _size(threshold) != 0:
            raise UsageError("--hybrid-threshold only applies to --strategy hybrid")
        try:
            HashAlg(cfg["hash"])
        except ValueError:
            raise UsageError(f"unknown hash {cfg['hash']!r}") from None
        try:
            FaultMode(cfg["fault_mode"])
        except ValueError:
            raise UsageError(f"unknown fault mode {cfg['fault_mode']!r}") from None
        if cfg["faults"] < 0:
            raise UsageError("--faults must be >= 0")
    if "order" in cfg and cfg["order"] not in bench.DATASET_ORDERS:
        raise UsageError(f"unknown order {cfg['order']!r}")
    if "format" in cfg and cfg["format"] not in ("csv", "text-table"):
        raise UsageError(f"unknown report format {cfg['format']!r}")


def print_config(cfg: dict) -> None:
    for name in sorted(cfg):
        value = cfg[name]
        if isinstance(value, bool):
            value = "true" if value else "false"
        print(f"{name}={value}")


def _parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"expected host:port, got {text!r}")
    return host, int(port)


def _resolve_threshold(raw: str) -> int:
    if raw == "auto":
        import psutil

        return int(psutil.virtual_memory().available)
    return _size(raw)


def _load_dataset(cfg: dict) -> tuple[Path, list[FileMeta]]:
    root = Path(cfg["root_dir"])
    if not root.is_dir():
        raise UsageError(f"dataset directory {root} does not exist")
    hash_alg = HashAlg(cfg["hash"])
    manifest = Path(cfg["manifest"]) if cfg["manifest"] else root / bench.MANIFEST_NAME
    if manifest.exists():
        entries = bench.load_manifest(manifest)
        return root, bench.to_file_metas(entries, hash_alg, cfg["chunk_size"])
    files = []
    paths = sorted(
        p for p in root.rglob("*") if p.is_file() and p.name != bench.MANIFEST_NAME
    )
    for i, p in enumerate(paths):
        files.append(
            FileMeta(
                i,
                p.relative_to(root).as_posix(),
                p.stat().st_size,
                hash_alg=hash_alg,
                chunk_size=cfg["chunk_size"],
            )
        )
    if not files:
        raise UsageError(f"no files found under {root}")
    return root, files


def cmd_recv(args, cfg) -> int:
    host, port = _parse_hostport(cfg["listen"])
    receiver = endpoint.Receiver(
        cfg["root_dir"],
        host=host,
        port=port,
        checksum_rate=cfg["checksum_rate"],
        queue_capacity=cfg["queue_capacity"],
        handshake_timeout=cfg["handshake_timeout"],
    )
    bound = receiver.address
    print(f"listening on {bound[0]}:{bound[1]}", flush=True)
    try:
        receiver.serve(max_sessions=cfg["sessions"])
    except KeyboardInterrupt:
        pass
    finally:
        receiver.stop()
    return EXIT_OK


def cmd_send(args, cfg) -> int:
    if not args.remote:
        raise UsageError("send needs a receiver host:port")
    address = _parse_hostport(args.remote)
    strategy = Strategy(cfg["strategy"])
    root, files = _load_dataset(cfg)
    try:
        plan = TransferPlan(
            strategy=strategy,
            block_size=cfg["block_size"],
            hybrid_threshold=(
                _resolve_threshold(cfg["hybrid_threshold"])
                if strategy is Strategy.FIVER_HYBRID
                else 0
            ),
            queue_capacity=cfg["queue_capacity"],
            buffer_size=cfg["buffer_size"],
        )
        throttle_cfg = bench.ThrottleConfig(cfg["net_rate"], cfg["checksum_rate"])
        schedule = schedule_faults(
            cfg["faults"], files, cfg["fault_seed"], FaultMode(cfg["fault_mode"])
        )
    except (ValueError, FaultScheduleError) as exc:
        raise UsageError(str(exc)) from None
    options = endpoint.TransferOptions(
        throttle=throttle_cfg,
        fault_schedule=schedule,
        faults_persistent=cfg["faults_persistent"],
        audit=cfg["audit"],
        handshake_timeout=cfg["handshake_timeout"],
    )
    report = endpoint.transfer(root, files, address, plan, options)
    if cfg["report"]:
        bench.write_transfer_report(report, cfg["report"])
    summary = report.summary_dict()
    print(
        f"{summary['file_count']} files in {summary['wall_clock']:.2f}s, "
        f"retransferred {summary['retransferred_bytes']} bytes, "
        f"{'all verified' if summary['all_verified'] else 'FAILURES'}"
    )
    audit_bad = [r.path for r in report.files if r.audit_ok is False]
    if audit_bad:
        print(f"audit: stored bytes diverge from source for {len(audit_bad)} file(s): "
              + ", ".join(audit_bad))
    if report.transport_error:
        print(f"transport error: {report.transport_error}", file=sys.stderr)
        return EXIT_TRANSPORT
    return EXIT_OK if report.all_verified else EXIT_VERIFY_FAILED


def cmd_gen(args, cfg) -> int:
    if not cfg["spec"]:
        raise UsageError("gen needs --spec")
    if not cfg["out"]:
        raise UsageError("gen needs --out")
    try:
        entries = bench.generate_dataset(cfg["spec"], cfg["order"], cfg["seed"], cfg["out"])
    except DatasetSpecError as exc:
        raise UsageError(str(exc)) from None
    except OSError as exc:
        print(f"fiver gen: {exc}", file=sys.stderr)
        return EXIT_USAGE
    total = sum(e.size for e in entries)
    print(f"wrote {len(entries)} files ({total} bytes) under {cfg['out']}")
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    if not cfg["matrix"]:
        raise UsageError("bench needs --matrix")
    try:
        cells = bench.parse_matrix(Path(cfg["matrix"]).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"bad matrix file: {exc}") from None
    work_dir = cfg["work_dir"] or "bench-work"
    out = cfg["out"] or ("results.csv" if cfg["format"] == "csv" else "results.txt")
    rows = bench.run_experiment(
        cells, work_dir, progress=lambda msg: print(f"  {msg}", flush=True)
    )
    path = bench.emit_report(rows, cfg["format"], out)
    print(f"wrote {path}")
    return EXIT_OK if all(r["outcome"] == "ok" for r in rows) else EXIT_VERIFY_FAILED


_COMMANDS = {"recv": cmd_recv, "send": cmd_send, "gen": cmd_gen, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print_config(cfg)
            return EXIT_OK
        return _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"fiver {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, HandshakeError) as exc:
        print(f"fiver {args.command}: transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
