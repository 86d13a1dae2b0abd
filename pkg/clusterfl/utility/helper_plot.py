"""Loss / accuracy and bound overlay figures for a run bundle."""
import logging
from os import path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from clusterfl.utility.helper import ensure_dir, read_frame

HISTORY_COLUMNS = ('round', 'loss', 'accuracy')
BOUND_COLUMNS = ('round', 'bound')


def check_columns(frame, columns, name):
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ValueError("{} is missing columns {}".format(name, missing))
    if frame.empty:
        raise ValueError("{} is empty".format(name))


def _series(frame):
    """One (label, frame) pair per variant and seed"""
    keys = [k for k in ('variant', 'seed') if k in frame.columns]
    if not keys:
        return [('run', frame)]
    return [(", ".join(str(v) for v in (key if isinstance(key, tuple) else (key,))), group)
            for key, group in frame.groupby(keys, sort=True)]


def plot_history(frame):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    series = _series(frame)
    for label, group in series:
        ax1.plot(group['round'], group['loss'], label=label)
        ax2.plot(group['round'], group['accuracy'], label=label)
    ax1.set_xlabel('Global round')
    ax1.set_ylabel('Global loss')
    ax2.set_xlabel('Global round')
    ax2.set_ylabel('Test accuracy')
    ax1.set_xlim(1, frame['round'].max())
    ax2.set_xlim(1, frame['round'].max())
    if len(series) <= 10:
        ax2.legend(fontsize='small')
    fig.tight_layout()
    return fig


def plot_bound(bound):
    """Bound curve with the measured optimality gap, when recorded"""
    fig, ax = plt.subplots(1, 1, figsize=(5, 4))
    ax.plot(bound['round'], bound['bound'], label='upper bound')
    if 'measured_gap' in bound.columns:
        ax.plot(bound['round'], bound['measured_gap'], label='measured gap')
    ax.set_xlabel('Global round')
    ax.set_ylabel('F(w) - F(w*)')
    ax.set_yscale('log')
    ax.legend()
    fig.tight_layout()
    return fig


def emit_plots(bundle_dir):
    """Writes plots/history.png (and plots/bound.png when bound.csv exists)

    Arguments:
        bundle_dir {str} -- Directory holding history.csv

    Returns:
        list[str] -- Written image files
    """
    history = read_frame(path.join(bundle_dir, 'history.csv'))
    check_columns(history, HISTORY_COLUMNS, 'history.csv')
    bound = None
    bound_file = path.join(bundle_dir, 'bound.csv')
    if path.exists(bound_file):
        bound = read_frame(bound_file)
        check_columns(bound, BOUND_COLUMNS, 'bound.csv')

    plot_dir = ensure_dir(path.join(bundle_dir, 'plots'))
    written = []
    figures = [('history.png', plot_history(history))]
    if bound is not None:
        figures.append(('bound.png', plot_bound(bound)))
    for name, fig in figures:
        file_path = path.join(plot_dir, name)
        fig.savefig(file_path, dpi=100)
        plt.close(fig)
        written.append(file_path)
    logging.info("Wrote %d plots to %s", len(written), plot_dir)
    return written
