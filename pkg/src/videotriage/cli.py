"""Command-line front door.

Subcommands: synth (generate a dataset), eval (metrics for one operating
condition), sweep (threshold table), pipeline (run the ingestion pipeline),
serve (start the HTTP gateway). The flags --seed, --out, and --format are
accepted both before and after the subcommand.

Exit codes: 0 success; 1 configuration or input errors; 2 evaluation on a
dataset with no positive labels.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import service, vmp
from .core import DatasetError, TriageError, read_dataset, write_dataset
from .harness import run_eval, run_sweep
from .metrics import DEFAULT_TARGETS, NoPositivesError
from .synth import SynthSpec, generate

__all__ = ["build_parser", "main"]


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    # Shared flags use SUPPRESS defaults on the subcommand side so a value
    # given before the subcommand is not clobbered by the subparser default.
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="random seed (synth)")
    shared.add_argument("--out", default=argparse.SUPPRESS,
                        help="write the result to this path")
    shared.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS,
                        help="serialization for --out (default json)")

    parser = argparse.ArgumentParser(
        prog="videotriage",
        description="Two-stage cascaded scoring: datasets, metrics, sweeps, "
        "pipeline, and HTTP gateway.",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None)
    parser.add_argument("--format", choices=("csv", "json"), default="json")
    commands = parser.add_subparsers(dest="command", required=True)

    p_synth = commands.add_parser("synth", parents=[shared],
                                  help="generate a synthetic scored dataset")
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--prevalence", type=float, default=0.1)
    p_synth.add_argument("--stage1-sep", type=float, default=1.0)
    p_synth.add_argument("--stage2-sep", type=float, default=4.0)

    p_eval = commands.add_parser("eval", parents=[shared],
                                 help="metrics for stage1, stage2, or the cascade")
    p_eval.add_argument("dataset")
    p_eval.add_argument("--which", choices=("stage1", "stage2", "cascade"),
                        default="cascade")
    p_eval.add_argument("--tau", type=float, default=0.6)
    p_eval.add_argument("--targets", type=_float_list, default=list(DEFAULT_TARGETS))

    p_sweep = commands.add_parser("sweep", parents=[shared],
                                  help="metric rows across gate thresholds")
    p_sweep.add_argument("dataset")
    p_sweep.add_argument("--taus", type=_float_list, required=True)
    p_sweep.add_argument("--gate", choices=("entropy", "confidence", "both"),
                         default="entropy")
    p_sweep.add_argument("--targets", type=_float_list, default=list(DEFAULT_TARGETS))

    p_pipe = commands.add_parser("pipeline", parents=[shared],
                                 help="run the ingestion pipeline over a stream")
    p_pipe.add_argument("--config", required=True)
    p_pipe.add_argument("--stream", default=None,
                        help="JSONL message stream; defaults to the config dataset")
    p_pipe.add_argument("--max-batches", type=int, default=None)

    p_serve = commands.add_parser("serve", parents=[shared],
                                  help="start the HTTP scoring gateway")
    p_serve.add_argument("--config", required=True)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=0)

    return parser


def _write_out(args, csv_text: str, json_text: str) -> None:
    if args.out is None:
        return
    text = csv_text if args.format == "csv" else json_text
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)


def _cmd_synth(args) -> int:
    if args.out is None:
        print("synth requires --out <dataset path>", file=sys.stderr)
        return 1
    spec = SynthSpec(
        n=args.n,
        prevalence=args.prevalence,
        stage1_sep=args.stage1_sep,
        stage2_sep=args.stage2_sep,
        seed=args.seed,
    )
    write_dataset(args.out, generate(spec))
    print(f"wrote {args.n} examples to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    examples = read_dataset(args.dataset)
    report, batch = run_eval(examples, which=args.which, tau=args.tau,
                             targets=args.targets)
    print(f"condition: {args.which}" + (f" (tau={args.tau:g})" if args.which == "cascade" else ""))
    if batch is not None:
        print(f"qps_ratio_pct: {batch.qps_ratio_pct:.1f}")
    print(f"f1: {100.0 * report.f1:.1f} (threshold {report.f1_threshold:g})")
    for target in sorted(report.r_at_p):
        print(f"r_at_p {target:g}: {100.0 * report.r_at_p[target]:.1f}")
    if report.max_beta_variance is None:
        print("max_beta_variance: n/a (no operating point met any target)")
    else:
        print(f"max_beta_variance: {report.max_beta_variance:.3e}")
    _write_out(args, report.to_csv(), report.to_json())
    return 0


def _cmd_sweep(args) -> int:
    examples = read_dataset(args.dataset)
    report = run_sweep(examples, taus=args.taus, targets=args.targets,
                       gate_kind=args.gate)
    print(report.format_table())
    _write_out(args, report.to_csv(), report.to_json())
    return 0


def _cmd_pipeline(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    base_dir = os.path.dirname(os.path.abspath(args.config))
    config = vmp.load_config(data, base_dir=base_dir)
    try:
        if args.stream is not None:
            stream = vmp.MessageStream.from_jsonl(args.stream)
        else:
            dataset_path = os.path.join(base_dir, data["clients"]["dataset"])
            stream = vmp.stream_from_examples(read_dataset(dataset_path))
        report = vmp.run_pipeline(stream, config, max_batches=args.max_batches)
    finally:
        config.index.close()
    text = json.dumps(report.to_json_dict(), indent=2)
    print(text)
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


def _cmd_serve(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    base_dir = os.path.dirname(os.path.abspath(args.config))
    config = service.load_gateway_config(data, base_dir=base_dir)
    server = service.create_server(config, host=args.host, port=args.port)
    print(f"listening on http://{args.host}:{server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "pipeline": _cmd_pipeline,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NoPositivesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, TriageError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
