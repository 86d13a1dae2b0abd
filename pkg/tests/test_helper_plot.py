from os import path

import numpy as np
import pandas as pd
import pytest

from clusterfl.utility.helper import write_frame
from clusterfl.utility.helper_plot import emit_plots, plot_history, plot_bound


def history_frame(rounds=50, variants=('a',)):
    frames = [pd.DataFrame(dict(round=np.arange(1, rounds + 1), loss=np.linspace(2.0, 0.5, rounds),
                                accuracy=np.linspace(0.1, 0.9, rounds), seed=0, variant=v)) for v in variants]
    return pd.concat(frames, ignore_index=True)


def test_empty_history_writes_nothing(tmp_path):
    (tmp_path / 'history.csv').write_text("round,loss,accuracy\n")
    with pytest.raises(ValueError, match='empty'):
        emit_plots(str(tmp_path))
    assert not (tmp_path / 'plots').exists()


def test_missing_columns(tmp_path):
    write_frame(pd.DataFrame(dict(round=[1], loss=[0.5])), str(tmp_path / 'history.csv'))
    with pytest.raises(ValueError, match='accuracy'):
        emit_plots(str(tmp_path))


def test_history_axis_spans_all_rounds():
    fig = plot_history(history_frame(variants=('a', 'b')))
    assert fig.axes[0].get_xlim() == (1.0, 50.0)
    assert len(fig.axes[0].lines) == 2


def test_bound_overlay(tmp_path):
    write_frame(history_frame(rounds=5), str(tmp_path / 'history.csv'))
    bound = pd.DataFrame(dict(round=np.arange(1, 6), bound=np.linspace(1.0, 0.2, 5),
                              measured_gap=np.linspace(0.5, 0.05, 5)))
    write_frame(bound, str(tmp_path / 'bound.csv'))
    written = emit_plots(str(tmp_path))
    assert [path.basename(f) for f in written] == ['history.png', 'bound.png']
    assert all(path.getsize(f) > 0 for f in written)
    assert len(plot_bound(bound).axes[0].lines) == 2
