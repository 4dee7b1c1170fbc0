"""
Emits a self-contained matplotlib script that redraws the three run figures
from trace.csv:

- time-averaged recovery and grade against feed flowrate
- air recovery and superficial gas velocity (with its setpoint) against time
- pulp height, its setpoint and the tails flowrate against time
"""
from __future__ import print_function
import os
import re

import jinja2

from flotempc.data_utils import CSV_COLUMNS


# Every column the script reads; checked against the CSV header when rendering.
PLOT_COLUMNS = ['time_s', 'q_feed_lpm', 'jg_sp', 'jg', 'hp_sp_m', 'hp_m',
                'q_tails_lps', 'alpha', 'grade', 'recovery']

_TEMPLATE = jinja2.Template('''\
#!/usr/bin/env python
"""Figures of flotation run {{ title }}; reads {{ csv_name }} next to this file."""
import csv
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
COLUMNS = {{ columns }}


def load(path):
    data = {c: [] for c in COLUMNS}
    with open(path, newline='') as f:
        for row in csv.DictReader(f):
            for c in COLUMNS:
                data[c].append(float(row[c]) if row[c] != '' else float('nan'))
    return data


def dwell_means(data, name):
    sums, counts = {}, {}
    for q, v in zip(data['q_feed_lpm'], data[name]):
        if v == v:
            sums[q] = sums.get(q, 0.0) + v
            counts[q] = counts.get(q, 0) + 1
    feeds = sorted(sums)
    return feeds, [sums[q] / counts[q] for q in feeds]


data = load(os.path.join(HERE, '{{ csv_name }}'))
t_min = [t / 60.0 for t in data['time_s']]

fig, ax = plt.subplots()
feeds, recovery = dwell_means(data, 'recovery')
_, grade = dwell_means(data, 'grade')
ax.plot(feeds, [100 * r for r in recovery], 'o-', label='recovery')
ax.plot(feeds, [100 * g for g in grade], 's-', label='grade')
ax.axhline({{ 100 * grade_floor }}, color='r', linestyle='--', label='grade floor')
ax.set_xlabel('Feed flowrate (lpm)')
ax.set_ylabel('%')
ax.legend()
fig.savefig(os.path.join(HERE, 'recovery_grade.png'), dpi={{ dpi }})

fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True)
ax1.plot(t_min, data['alpha'])
ax1.set_ylabel('Air recovery (-)')
ax2.plot(t_min, data['jg'], label='jg')
ax2.plot(t_min, data['jg_sp'], 'r', label='jg setpoint')
ax2.set_ylabel('jg (m/s)')
ax2.set_xlabel('Time (min)')
ax2.legend()
fig.savefig(os.path.join(HERE, 'air_recovery.png'), dpi={{ dpi }})

fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True)
ax1.plot(t_min, data['hp_m'], label='pulp height')
ax1.plot(t_min, data['hp_sp_m'], 'r', label='setpoint')
ax1.set_ylabel('Pulp height (m)')
ax1.legend()
ax2.plot(t_min, data['q_tails_lps'])
ax2.set_ylabel('Tails flowrate (L/s)')
ax2.set_xlabel('Time (min)')
fig.savefig(os.path.join(HERE, 'pulp_height.png'), dpi={{ dpi }})
''')

_COLUMN_REF = re.compile(r"data\['([a-z_]+)'\]|dwell_means\(data, '([a-z_]+)'\)")


def render_plot_script(title='run', csv_name='trace.csv', header=CSV_COLUMNS,
                       grade_floor=0.20, dpi=120):
    missing = [c for c in PLOT_COLUMNS if c not in header]
    if missing:
        raise ValueError('plot columns missing from the CSV header: %s'
                         % ', '.join(missing))
    return _TEMPLATE.render(title=title, csv_name=csv_name, columns=repr(PLOT_COLUMNS),
                            grade_floor=grade_floor, dpi=dpi)


def referenced_columns(script):
    """Column names a rendered script reads from its data table."""
    found = set()
    for a, b in _COLUMN_REF.findall(script):
        found.add(a or b)
    return found


def emit_plot_script(record, path):
    """Write the figure script of a RunRecord to path."""
    script = render_plot_script(title=record.name, header=CSV_COLUMNS,
                                grade_floor=record.grade_floor)
    try:
        with open(path, 'w') as f:
            f.write(script)
    except (IOError, OSError) as e:
        raise IOError('cannot write plot script %s: %s' % (path, e))
    try:
        os.chmod(path, 0o755)
    except OSError:
        pass
    return path
