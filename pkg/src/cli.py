"""
Command-Line Interface
Evaluate kernels, write tables, classify boundaries, simulate, compute
mass loss and run the self-test.

    python -m src.cli eval --family power --alpha 1 --x 1 --y 1 --t 1
    python -m src.cli table --a "x" --b "0.5" --x-grid 0.1:2:5 --y-grid 0.1:2:5 --t-grid 1
    python -m src.cli selftest --quick
"""

import argparse
import json
import logging
import sys
from typing import Dict, List, Optional, TextIO

from src.analyzer import FAMILIES, KernelAnalyzer
from src.batch_processor import BatchEvaluator
from src.errors import EXIT_DOMAIN, EXIT_OK, EXIT_USAGE, DegenKernelError, exit_code_for
from src.selftest import format_report, report_json, run_selftest
from src.utils import export_records_to_csv, format_number, parse_grid_spec, setup_logger


logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _grid(spec: str):
    try:
        return parse_grid_spec(spec)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _add_coefficient_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group('coefficients')
    group.add_argument('--a', help='Diffusion coefficient a(x) as an expression in x')
    group.add_argument('--b', help='Drift coefficient b(x) (default: 0)')
    group.add_argument('--family', choices=FAMILIES, help='Preset coefficient family')
    group.add_argument('--alpha', type=float, help='Exponent of a = x^alpha')
    group.add_argument('--beta', type=float, help='Exponent of b = x^beta phi(x)')
    group.add_argument('--phi', help='phi(x) of the power+drift family')


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog='degenkernel',
        description='Fundamental solutions of degenerate diffusions on (0, inf) with absorption at 0'
    )
    parser.add_argument('--config', default='config/config.yaml',
                        help='Path to configuration file (YAML or JSON)')
    parser.add_argument('--verbose', action='store_true', help='Enable debug logging')
    parser.add_argument('--threads', type=_positive_int, help='Worker threads')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    p = sub.add_parser('eval', help='Evaluate p(x, y, t)')
    _add_coefficient_flags(p)
    p.add_argument('--x', type=_positive_float, required=True)
    p.add_argument('--y', type=_positive_float, required=True)
    p.add_argument('--t', type=_positive_float, required=True)
    p.add_argument('--order', type=int, help='Duhamel order (default: from the tail bound)')
    p.add_argument('--approx', action='store_true', help='Evaluate p_approx (q_nu in place of q_nu^V)')
    p.add_argument('--json', action='store_true', help='Print a JSON object')

    p = sub.add_parser('table', help='Evaluate p on a grid')
    _add_coefficient_flags(p)
    p.add_argument('--x-grid', type=_grid, required=True, help='lo:hi:n[:log] or a single value')
    p.add_argument('--y-grid', type=_grid, required=True)
    p.add_argument('--t-grid', type=_grid, required=True)
    p.add_argument('--order', type=int)
    p.add_argument('--out', help='Output file (default: stdout)')
    p.add_argument('--format', choices=['csv', 'json'], help='Output format (default: from config)')
    p.add_argument('--progress', action='store_true', help='Show a progress bar')

    p = sub.add_parser('classify', help='Classify the boundary 0')
    _add_coefficient_flags(p)
    p.add_argument('--x0', type=_positive_float, help='Anchor point (default: from config)')

    p = sub.add_parser('simulate', help='Monte Carlo simulation of the absorbed process')
    _add_coefficient_flags(p)
    p.add_argument('--model', action='store_true', help='Simulate the model process in z')
    p.add_argument('--nu', type=float, help='Model index for --model')
    p.add_argument('--x0', type=_positive_float, required=True)
    p.add_argument('--t', type=_positive_float, required=True)
    p.add_argument('--paths', type=_positive_int)
    p.add_argument('--dt', type=_positive_float)
    p.add_argument('--seed', type=int)
    p.add_argument('--bridge', action=argparse.BooleanOptionalAction, default=None,
                   help='Brownian-bridge crossing correction')
    p.add_argument('--bins', type=_positive_int)
    p.add_argument('--scheme', choices=['lamperti', 'euler'])
    p.add_argument('--hist', help='Write the survivor histogram as CSV')
    p.add_argument('--progress', action='store_true')

    p = sub.add_parser('massloss', help='Mass loss of the x^alpha family')
    p.add_argument('--alpha', type=float, required=True)
    p.add_argument('--x', type=_positive_float, required=True)
    p.add_argument('--t', type=_positive_float, required=True)
    p.add_argument('--asymptotic', action='store_true',
                   help='Also print the near-alpha=2 asymptotics and ratios')

    p = sub.add_parser('selftest', help='Run the acceptance checks')
    p.add_argument('--quick', action='store_true', help='Reduced sizes')
    p.add_argument('--filter', help='Run only checks whose name contains this text')
    p.add_argument('--json', action='store_true', help='Machine-readable report')
    p.add_argument('--timings', action='store_true', help='Report wall time per check')
    return parser


def configure_logging(config: Dict, verbose: bool):
    level = logging.DEBUG if verbose else getattr(logging, str(config.get('level', 'INFO')).upper(),
                                                  logging.INFO)
    setup_logger('src', config.get('file'), level, bool(config.get('console', True)))


def _coefficients(analyzer: KernelAnalyzer, args):
    return analyzer.coefficients(a=args.a, b=args.b, family=args.family, alpha=args.alpha,
                                 beta=args.beta, phi=args.phi)


def _print_pairs(pairs, precision: int, out: TextIO):
    for key, value in pairs:
        if isinstance(value, float):
            value = format_number(value, precision)
        out.write(f"{key} {value}\n")


def cmd_eval(analyzer: KernelAnalyzer, args, out: TextIO) -> int:
    result = analyzer.evaluate(_coefficients(analyzer, args), args.x, args.y, args.t,
                               order=args.order, approx=args.approx)
    if args.json:
        out.write(json.dumps(result, indent=2) + '\n')
    else:
        _print_pairs(result.items(), analyzer.precision, out)
    return EXIT_OK


def cmd_table(analyzer: KernelAnalyzer, args, out: TextIO) -> int:
    evaluator = BatchEvaluator(analyzer)
    evaluator.evaluate_grid(_coefficients(analyzer, args), args.x_grid, args.y_grid, args.t_grid,
                            order=args.order, progress=args.progress)
    fmt = args.format or analyzer.config['output'].get('format', 'csv')
    if args.out:
        evaluator.save_table(args.out, fmt)
    else:
        evaluator.write_table(out, fmt)
    stats = evaluator.get_statistics()
    logger.info(f"Table: {stats['successful_points']}/{stats['total_points']} points evaluated")
    return evaluator.exit_code


def cmd_classify(analyzer: KernelAnalyzer, args, out: TextIO) -> int:
    report = analyzer.classify(_coefficients(analyzer, args), args.x0)
    out.write(json.dumps(report.to_dict(), indent=2) + '\n')
    return EXIT_OK


def cmd_simulate(analyzer: KernelAnalyzer, args, out: TextIO) -> int:
    overrides = dict(n_paths=args.paths, dt=args.dt, seed=args.seed, bridge_correction=args.bridge,
                     n_bins=args.bins, scheme=args.scheme, progress=args.progress)
    if args.model:
        if args.nu is None:
            raise argparse.ArgumentTypeError('--model needs --nu')
        result = analyzer.simulate(args.x0, args.t, nu=args.nu, **overrides)
    else:
        result = analyzer.simulate(args.x0, args.t, coeffs=_coefficients(analyzer, args), **overrides)
    out.write(json.dumps(result.to_dict(), indent=2) + '\n')
    if args.hist:
        export_records_to_csv(result.histogram_records(), args.hist,
                              ['bin_lo', 'bin_hi', 'mass', 'se'], analyzer.precision)
        logger.info(f"Histogram saved to: {args.hist}")
    return EXIT_OK


def cmd_massloss(analyzer: KernelAnalyzer, args, out: TextIO) -> int:
    result = analyzer.mass_loss(args.alpha, args.x, args.t)
    keys = ['T', 'mass_loss']
    if args.asymptotic:
        keys += ['asymptotic', 'ratio', 'log_ratio', 'log_ratio_budget', 'log_ratio_within_budget']
    _print_pairs(((k, result[k]) for k in keys), analyzer.precision, out)
    return EXIT_OK


def cmd_selftest(analyzer: KernelAnalyzer, args, out: TextIO) -> int:
    results = run_selftest(analyzer, quick=args.quick, name_filter=args.filter)
    if not results:
        raise argparse.ArgumentTypeError(f"no check matches --filter {args.filter!r}")
    if args.json:
        out.write(report_json(results, args.timings))
    else:
        out.write(format_report(results, analyzer.precision, args.timings))
    return EXIT_OK if all(r.passed for r in results) else EXIT_DOMAIN


COMMANDS = {
    'eval': cmd_eval,
    'table': cmd_table,
    'classify': cmd_classify,
    'simulate': cmd_simulate,
    'massloss': cmd_massloss,
    'selftest': cmd_selftest,
}


def main(argv: Optional[List[str]] = None, out: Optional[TextIO] = None) -> int:
    """
    Main entry point.

    Args:
        argv: Arguments (sys.argv[1:] when None)
        out: Stream for results (stdout when None); logs go to stderr

    Returns:
        Process exit code
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    out = out if out is not None else sys.stdout

    overrides = {'performance': {'num_threads': args.threads}}
    try:
        analyzer = KernelAnalyzer(args.config, overrides)
    except DegenKernelError as e:
        sys.stderr.write(f"error: {e}\n")
        return exit_code_for(e)
    configure_logging(analyzer.config['logging'], args.verbose)

    try:
        return COMMANDS[args.command](analyzer, args, out)
    except argparse.ArgumentTypeError as e:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    except DegenKernelError as e:
        sys.stderr.write(f"error: {e}\n")
        return exit_code_for(e)


if __name__ == '__main__':
    sys.exit(main())
