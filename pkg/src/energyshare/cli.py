"""Command-line harness: run scenarios, compare runs, operate the edge store.

Exit codes: 0 success, 1 usage error, 2 run failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .edge import EdgeClient, EdgeServer, EdgeStore, encode_meta
from .errors import EnergyShareError
from .monitor import trace_csv_text
from .report import compare, write_run_artifacts
from .runner import run_scenario
from .scenario import parse_scenario

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUN_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="energyshare", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one scenario end to end")
    run.add_argument("--scenario", required=True, type=Path, help="scenario file")
    run.add_argument("--out", type=Path, default=None, help="run output directory")
    run.add_argument("--upload", default=None, metavar="HOST:PORT",
                     help="upload the session dataset to an edge service")
    run.add_argument("--pace", type=float, default=None,
                     help="real-time pacing factor (affects wall duration only)")

    cmp_parser = sub.add_parser("compare", help="compare several finished runs")
    cmp_parser.add_argument("--out", required=True, type=Path, help="summary CSV path")
    cmp_parser.add_argument("run_dirs", nargs="+", type=Path, help="run directories")

    edge = sub.add_parser("edge", help="edge service operations")
    edge_sub = edge.add_subparsers(dest="edge_command", required=True, parser_class=_Parser)

    serve = edge_sub.add_parser("serve", help="serve the edge store over TCP")
    serve.add_argument("--port", type=int, required=True)
    serve.add_argument("--data-dir", type=Path, required=True)
    serve.add_argument("--host", default="127.0.0.1")

    lst = edge_sub.add_parser("list", help="list stored sessions")
    lst.add_argument("--addr", required=True, metavar="HOST:PORT")

    get = edge_sub.add_parser("get", help="fetch one stored session dataset")
    get.add_argument("--addr", required=True, metavar="HOST:PORT")
    get.add_argument("session_id")

    return parser


def _cmd_run(args) -> int:
    scenario = parse_scenario(args.scenario)
    result = run_scenario(scenario, pace=args.pace, upload_addr=args.upload)
    out_dir = args.out or scenario.out_dir
    if out_dir is not None:
        run_dir = write_run_artifacts(result, out_dir)
        print(f"run artifacts written to {run_dir}")
    reason = result.terminal_reason.value if result.terminal_reason else "-"
    print(f"outcome: {result.outcome} (reason: {reason})")
    if result.dataset is not None:
        metrics = result.dataset.metrics
        print(
            f"session {result.dataset.session_id}: "
            f"{result.dataset.record_count} record pairs, "
            f"provider_loss={metrics.provider_loss_mah:.3f} mAh, "
            f"consumer_gain={metrics.consumer_gain_mah:.3f} mAh, "
            f"energy_loss={metrics.energy_loss_mah:.3f} mAh"
        )
        if result.upload_receipt is not None:
            print(
                f"uploaded to edge: {result.upload_receipt.session_id} "
                f"({result.upload_receipt.record_count} pairs)"
            )
        return EXIT_OK
    return EXIT_RUN_FAILURE


def _cmd_compare(args) -> int:
    report = compare(args.run_dirs, args.out)
    print(f"summary written to {report.summary_path}")
    print(f"level curves written to {report.curves_path}")
    worst = report.max_energy_loss_run()
    print(f"highest energy loss: {worst.run_id} ({worst.energy_loss_mah:.3f} mAh)")
    return EXIT_OK


def _cmd_edge(args) -> int:
    if args.edge_command == "serve":
        store = EdgeStore(args.data_dir)
        server = EdgeServer(store, host=args.host, port=args.port)
        print(f"edge service listening on {server.address}, data in {store.data_dir}")
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            server.stop()
        return EXIT_OK
    client = EdgeClient(args.addr)
    if args.edge_command == "list":
        for s in client.list():
            print(
                f"{s.session_id} consumer={s.consumer_id} provider={s.provider_id} "
                f"technology={s.technology.value} terminal={s.terminal_reason.value} "
                f"energy_loss_mah={s.energy_loss_mah}"
            )
        return EXIT_OK
    if args.edge_command == "get":
        dataset = client.get(args.session_id)
        sys.stdout.write(encode_meta(dataset))
        sys.stdout.write(trace_csv_text(dataset.records))
        return EXIT_OK
    return EXIT_USAGE


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "edge":
            return _cmd_edge(args)
    except EnergyShareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
