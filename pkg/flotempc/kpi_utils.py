from __future__ import division
from builtins import object
import dataclasses

import numpy as np

from flotempc.errors import ComparisonError


@dataclasses.dataclass(eq=False)
class DwellKpi(object):
    feed_lpm: float
    start_s: float
    end_s: float
    mean_recovery: float
    mean_grade: float
    mean_air_recovery: float
    mean_pulp_height_setpoint: float
    grade_floor_fraction: float
    samples: int

    def as_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass(eq=False)
class KpiSummary(object):
    """
    Per-dwell KPIs of a run and, when a baseline was given, the recovery
    uplift (%) of each dwell relative to it.
    """
    dwells: list
    grade_floor_fraction: float
    p95_solver_ms: float = None
    baseline_dwells: list = None
    baseline_grade_floor_fraction: float = None
    uplift_percent: list = None

    def as_dict(self):
        out = {'dwells': [d.as_dict() for d in self.dwells],
               'grade_floor_fraction': self.grade_floor_fraction,
               'p95_solver_ms': self.p95_solver_ms}
        if self.uplift_percent is not None:
            out['baseline_dwells'] = [d.as_dict() for d in self.baseline_dwells]
            out['baseline_grade_floor_fraction'] = self.baseline_grade_floor_fraction
            out['uplift_percent'] = list(self.uplift_percent)
        return out


def _mean(values):
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    return float(np.mean(values)) if values.size else float('nan')


def floor_fraction(grades, floor):
    """Fraction of samples with grade >= floor; undefined grades count as misses."""
    grades = np.asarray(grades, dtype=float)
    if grades.size == 0:
        return float('nan')
    with np.errstate(invalid='ignore'):
        return float(np.mean(grades >= floor))


def dwell_kpis(rows, schedule, grade_floor=0.20):
    """
    Time averages over each dwell of a trace.

    Inputs:
    - rows: trace rows (dicts keyed by the CSV columns)
    - schedule: list of (feed_lpm, dwell_s[, feed_grade_factor])
    - grade_floor: threshold for the floor-satisfaction fraction

    Returns a list of DwellKpi, one per schedule entry. A row with time t
    belongs to the dwell whose interval (start, end] holds t.
    """
    times = np.array([r['time_s'] for r in rows], dtype=float)
    out = []
    start = 0.0
    for entry in schedule:
        feed, dwell = entry[0], entry[1]
        end = start + dwell
        sel = [r for r, t in zip(rows, times) if start < t <= end + 1e-9]
        out.append(DwellKpi(
            feed_lpm=float(feed), start_s=start, end_s=end,
            mean_recovery=_mean([r['recovery'] for r in sel]),
            mean_grade=_mean([r['grade'] for r in sel]),
            mean_air_recovery=_mean([r['alpha'] for r in sel]),
            mean_pulp_height_setpoint=_mean([r['hp_sp_m'] for r in sel]),
            grade_floor_fraction=floor_fraction([r['grade'] for r in sel], grade_floor),
            samples=len(sel)))
        start = end
    return out


def p95(values):
    values = np.asarray([v for v in values if v is not None], dtype=float)
    if values.size == 0:
        return None
    return float(np.percentile(values, 95))


def summarize(rows, schedule, solver_ms=(), grade_floor=0.20):
    grades = [r['grade'] for r in rows]
    return KpiSummary(dwells=dwell_kpis(rows, schedule, grade_floor),
                      grade_floor_fraction=floor_fraction(grades, grade_floor),
                      p95_solver_ms=p95(solver_ms))


def _dwells_of(run):
    if isinstance(run, KpiSummary):
        return run.dwells, run.grade_floor_fraction
    if hasattr(run, 'kpis'):
        return run.kpis.dwells, run.kpis.grade_floor_fraction
    if isinstance(run, dict):
        kpis = run.get('kpis', run)
        return ([DwellKpi(**d) for d in kpis['dwells']],
                kpis['grade_floor_fraction'])
    raise ComparisonError('cannot read KPIs from %r' % type(run).__name__)


def compare_baseline(empc_run, baseline_run):
    """
    Recovery uplift of one run over a baseline run.

    Inputs:
    - empc_run, baseline_run: RunRecord, KpiSummary or a summary dict as
      written to summary.json

    Returns a KpiSummary of empc_run carrying the baseline dwells and the
    per-dwell uplift (Rec - Rec_baseline) / Rec_baseline * 100. Runs over
    different schedules raise ComparisonError.
    """
    dwells, fraction = _dwells_of(empc_run)
    base, base_fraction = _dwells_of(baseline_run)
    if len(dwells) != len(base) or any(
            a.feed_lpm != b.feed_lpm or a.start_s != b.start_s or a.end_s != b.end_s
            for a, b in zip(dwells, base)):
        raise ComparisonError('runs cover different disturbance schedules')
    uplift = []
    for a, b in zip(dwells, base):
        if not b.mean_recovery > 0:
            raise ComparisonError('baseline recovery of the %.1f lpm dwell is not '
                                  'positive' % b.feed_lpm)
        uplift.append(100.0 * (a.mean_recovery - b.mean_recovery) / b.mean_recovery)
    p = getattr(getattr(empc_run, 'kpis', empc_run), 'p95_solver_ms', None)
    if isinstance(empc_run, dict):
        p = empc_run.get('kpis', empc_run).get('p95_solver_ms')
    return KpiSummary(dwells=dwells, grade_floor_fraction=fraction, p95_solver_ms=p,
                      baseline_dwells=base, baseline_grade_floor_fraction=base_fraction,
                      uplift_percent=uplift)
