"""
Command-line runner.

    python -m dynabatch.cli simulate <config> [--emit-steps PATH] [--summary PATH] [--seed N]
    python -m dynabatch.cli sweep <config> --axis batch_size|qps|d_sla --values 1,2,4 [--out PATH] [--workers N]
    python -m dynabatch.cli capacity <config> [--lo Q] [--hi Q] [--tol T] [--policies static,sla]
    python -m dynabatch.cli calibrate <csv>
    python -m dynabatch.cli schema

Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or usage,
3 missing input file, 4 infeasible constraint, 5 simulation aborted.
"""

import argparse
import json
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

from . import configure_logging
from .config import config_schema, load_config
from .errors import ConfigurationError, DynabatchError
from .runner import SWEEP_AXES, ExperimentRunner
from .tools.costmodel import calibrate
from .tools.metrics import write_table

logger = logging.getLogger(__name__)


def parse_values(text: str) -> List[float]:
    """Comma-separated numbers, or an inclusive integer range `lo..hi`"""
    text = text.strip()
    if not text:
        raise ConfigurationError("--values is empty")
    if '..' in text:
        lo, _, hi = text.partition('..')
        try:
            start, stop = int(lo), int(hi)
        except ValueError as e:
            raise ConfigurationError(f"invalid range '{text}'") from e
        if stop < start:
            raise ConfigurationError(f"empty range '{text}'")
        return [float(v) for v in range(start, stop + 1)]
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise ConfigurationError(f"invalid value list '{text}'") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dynabatch', description='LLM continuous-batching simulator')
    parser.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR')
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = sub.add_parser('simulate', help='run one experiment')
    simulate.add_argument('config')
    simulate.add_argument('--emit-steps', default=None, help='write the per-step CSV here')
    simulate.add_argument('--summary', default=None, help='write the summary JSON here')
    simulate.add_argument('--summary-csv', default=None, help='write the summary as a one-row CSV here')
    simulate.add_argument('--policy', choices=['static', 'memory', 'sla', 'combined'], default=None)
    simulate.add_argument('--seed', type=int, default=None)

    sweep = sub.add_parser('sweep', help='run one experiment per axis value')
    sweep.add_argument('config')
    sweep.add_argument('--axis', choices=SWEEP_AXES, required=True)
    sweep.add_argument('--values', required=True, help="e.g. '16,64,256' or '1..256'")
    sweep.add_argument('--out', default=None, help='sweep CSV path')
    sweep.add_argument('--workers', type=int, default=1)
    sweep.add_argument('--seed', type=int, default=None)

    capacity = sub.add_parser('capacity', help='largest SLA-compliant arrival rate')
    capacity.add_argument('config')
    capacity.add_argument('--lo', type=float, default=None)
    capacity.add_argument('--hi', type=float, default=None)
    capacity.add_argument('--tol', type=float, default=None)
    capacity.add_argument('--policies', default=None, help='comma-separated policy kinds')
    capacity.add_argument('--seed', type=int, default=None)

    calibrate_cmd = sub.add_parser('calibrate', help='fit the decode latency line from a CSV')
    calibrate_cmd.add_argument('csv')

    sub.add_parser('schema', help='print the experiment config JSON schema')
    return parser


def cmd_simulate(args) -> int:
    config = load_config(args.config, seed=args.seed)
    if args.policy:
        config = config.updated(policy={'kind': args.policy})
    runner = ExperimentRunner(config)
    outcome = runner.run()
    runner.write_outputs(outcome, summary_path=args.summary, steps_path=args.emit_steps,
                         summary_csv_path=args.summary_csv)
    if not (args.summary or config.output.summary_json):
        sys.stdout.write(outcome.to_json())
    print(outcome.headline())
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config, seed=args.seed)
    if args.workers < 1:
        raise ConfigurationError(f"--workers must be >= 1 (got {args.workers})")
    rows = ExperimentRunner(config).sweep(args.axis, parse_values(args.values), workers=args.workers)
    out = args.out or config.output.table_csv
    if out:
        write_table(rows, out)
        logger.info(f"Sweep table written to {out}")
    for row in rows:
        key = next(iter(row))
        print(f"{key}={row[key]:g} throughput={row['throughput_tps']:.1f} tok/s "
              f"tbt_mean={row['tbt_mean_ms']:.2f} ms tbt_p99={row['tbt_p99_ms']:.2f} ms")
    return 0


def cmd_capacity(args) -> int:
    config = load_config(args.config, seed=args.seed)
    policies = [p.strip() for p in args.policies.split(',') if p.strip()] if args.policies else None
    report = ExperimentRunner(config).capacity(args.lo, args.hi, args.tol, policies)
    print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    for kind, qps in report.capacities.items():
        print(f"capacity[{kind}] = {qps:.2f} qps at D_SLA={report.d_sla_ms:g} ms ({report.statistic})")
    if report.improvement is not None:
        print(f"improvement: {report.improvement * 100:.1f}%")
    return 0


def cmd_calibrate(args) -> int:
    model = calibrate(args.csv)
    print(json.dumps({'decode_base_ms': model.decode_base_ms, 'decode_per_seq_ms': model.decode_per_seq_ms},
                     sort_keys=True, indent=2))
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(config_schema(), sort_keys=True, indent=2))
    return 0


COMMANDS = {
    'simulate': cmd_simulate,
    'sweep': cmd_sweep,
    'capacity': cmd_capacity,
    'calibrate': cmd_calibrate,
    'schema': cmd_schema,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except DynabatchError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {str(e)}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
