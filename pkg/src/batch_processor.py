"""
Batch Kernel Evaluator
Evaluate p(x, y, t) over grids and write tables and reports
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from itertools import product
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from tqdm import tqdm

from src.analyzer import KernelAnalyzer
from src.errors import exit_code_for
from src.transform import Coefficients
from src.utils import export_records_to_csv, export_records_to_json, resolve_threads, write_csv


TABLE_FIELDS = ['x', 'y', 't', 'p', 'quad_err', 'trunc_err']


class BatchEvaluator:
    """
    Grid evaluation of a kernel.

    Work is split into (x, t) groups that share one vectorised call over y;
    groups run on a thread pool and records come back in grid order.
    """

    def __init__(self, analyzer: Optional[KernelAnalyzer] = None,
                 config_path: str = 'config/config.yaml'):
        """
        Initialize batch evaluator.

        Args:
            analyzer: Shared analyzer (built from config_path if None)
            config_path: Path to configuration file
        """
        self.logger = logging.getLogger(__name__)
        self.analyzer = analyzer if analyzer is not None else KernelAnalyzer(config_path)
        self.records: List[Dict] = []
        self.failures: List[BaseException] = []

    def _evaluate_group(self, coeffs: Coefficients, x: float, ys: np.ndarray, t: float,
                        order: Optional[int]) -> Tuple[List[Dict], Optional[BaseException]]:
        try:
            gk = self.analyzer.general_kernel(coeffs)
            values = gk.p_many_y(x, ys, t, order)
            return [{'x': float(x), 'y': float(y), 't': float(t), 'p': kv.value,
                     'quad_err': kv.quadrature_estimate, 'trunc_err': kv.truncation_error,
                     'status': 'success', 'error': None}
                    for y, kv in zip(ys, values)], None
        except Exception as e:
            self.logger.error(f"Error evaluating x={x}, t={t}: {e}")
            return [{'x': float(x), 'y': float(y), 't': float(t), 'p': float('nan'),
                     'quad_err': float('nan'), 'trunc_err': float('nan'),
                     'status': 'error', 'error': str(e)}
                    for y in ys], e

    def evaluate_group(self, coeffs: Coefficients, x: float, ys: np.ndarray, t: float,
                       order: Optional[int] = None) -> List[Dict]:
        """
        Evaluate p(x, y, t) for all y of one group.

        Args:
            coeffs: Coefficient pair
            x: Backward point
            ys: Forward points
            t: Time
            order: Duhamel order (default per t)

        Returns:
            Records with status 'success' or 'error'
        """
        records, error = self._evaluate_group(coeffs, x, ys, t, order)
        if error is not None:
            self.failures.append(error)
        return records

    def evaluate_grid(self, coeffs: Coefficients, xs: Sequence[float], ys: Sequence[float],
                      ts: Sequence[float], order: Optional[int] = None,
                      progress: bool = False) -> List[Dict]:
        """
        Evaluate p on the grid xs × ys × ts.

        Records are ordered by x, then y, then t.

        Returns:
            List of records with fields x, y, t, p, quad_err, trunc_err, status, error
        """
        xs, ys, ts = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (xs, ys, ts))
        # fail early on the transform so every group does not log the same error
        self.analyzer.general_kernel(coeffs)
        groups = list(product(xs, ts))
        self.failures = []
        workers = min(resolve_threads(self.analyzer.threads), max(1, len(groups)))
        self.logger.info(f"Evaluating {xs.size * ys.size * ts.size} grid points "
                         f"in {len(groups)} groups on {workers} threads")

        def run(group):
            x, t = group
            return self._evaluate_group(coeffs, x, ys, t, order)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(run, groups), total=len(groups),
                                desc="Evaluating", disable=not progress))

        # failures in grid order, independent of which worker finished first
        self.failures = [error for _, error in results if error is not None]
        by_group = {group: group_records for group, (group_records, _) in zip(groups, results)}
        records = []
        for x in xs:
            for j in range(ys.size):
                for t in ts:
                    records.append(by_group[(x, t)][j])
        self.records = records
        return records

    @property
    def exit_code(self) -> int:
        """Exit code of the first failure, 0 when everything succeeded."""
        return exit_code_for(self.failures[0]) if self.failures else 0

    def write_table(self, stream: TextIO, fmt: str = 'csv'):
        """Write the table (csv or json) to an open text stream."""
        precision = self.analyzer.precision
        if fmt == 'csv':
            write_csv(self.records, stream, TABLE_FIELDS, precision)
        elif fmt == 'json':
            rows = [{k: r[k] for k in TABLE_FIELDS} for r in self.records]
            json.dump(rows, stream, indent=2)
            stream.write('\n')
        else:
            raise ValueError(f"unknown table format {fmt!r}")

    def save_table(self, output_file: str, fmt: str = 'csv'):
        """Write the table to a file."""
        if fmt == 'csv':
            export_records_to_csv(self.records, output_file, TABLE_FIELDS, self.analyzer.precision)
        else:
            export_records_to_json([{k: r[k] for k in TABLE_FIELDS} for r in self.records], output_file)
        self.logger.info(f"Table saved to: {output_file}")

    def get_statistics(self) -> Dict:
        """
        Get evaluation statistics.

        Returns:
            Dictionary with statistics
        """
        if not self.records:
            return {}
        ok = [r for r in self.records if r['status'] == 'success']
        return {
            'total_points': len(self.records),
            'successful_points': len(ok),
            'failed_points': len(self.records) - len(ok),
            'max_quad_err': max((r['quad_err'] for r in ok), default=0.0),
            'max_trunc_err': max((r['trunc_err'] for r in ok), default=0.0),
        }
