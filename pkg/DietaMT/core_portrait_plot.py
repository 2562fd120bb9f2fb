# - Interactive leaderboard portrait plot of metric reports using Bokeh.
# - Rows are systems, columns are metrics; each cell is split into an upper
#   triangle (en→it) and a lower triangle (it→en).

import math
from typing import List, Optional, Sequence, Tuple, Union

import matplotlib.pyplot as plt
import numpy as np
from bokeh.colors import RGB
from bokeh.io import export_png
from bokeh.models import (
    BasicTicker,
    ColorBar,
    ColumnDataSource,
    LinearColorMapper,
    Patches,
)
from bokeh.plotting import figure, show

from .core_metrics import (
    DIRECTION_LABELS,
    METRIC_POLARITY,
    REPORT_DIRECTIONS,
    MetricReport,
    metric_header,
    report_frame,
)
from .support_functions import ContractError, debug_print

# -------------
# Main function
# -------------


def report_portrait_plot(
    reports: Sequence[MetricReport],
    metrics: Optional[List[str]] = None,
    normalize: bool = True,
    width: Union[int, str] = "auto",
    height: Union[int, str] = "auto",
    title: Optional[str] = None,
    cmap: str = "RdBu",
    vrange: Optional[Tuple[float, float]] = None,
    xaxis_rotation: int = 45,
    missing_color: str = "grey",
    line_color: str = "grey",
    static: bool = False,
    static_filename: str = "./leaderboard_portrait_plot.png",
    show_plot: bool = True,
    bokeh_toolbar: bool = True,
    bokeh_logo: bool = True,
    debug: bool = False,
):
    """
    Leaderboard heat-map of several systems over several metrics.

    Parameters
    ----------
    reports : sequence of MetricReport
        One report per system.
    metrics : list of str, optional
        Metric columns to draw, in order. Defaults to every metric present.
    normalize : bool, optional
        If True (default), colour each metric by its z-score across systems
        and directions, sign-flipped for lower-is-better metrics so that a
        higher value always means a better system.
    width, height : int or 'auto', optional
        Figure size in pixels; 'auto' sizes from the table shape.
    title : str, optional
    cmap : str, optional
        Matplotlib colormap name. Default is 'RdBu'.
    vrange : tuple of float, optional
        Colour range; defaults to the data range.
    xaxis_rotation : int, optional
        Rotation of the metric labels in degrees.
    missing_color : str, optional
        Colour of absent scores.
    line_color : str, optional
    static : bool, optional
        Export the figure as PNG to ``static_filename`` (needs selenium).
    show_plot : bool, optional
        Open the figure in a browser. Default is True.
    bokeh_toolbar, bokeh_logo : bool, optional
    debug : bool, optional

    Returns
    -------
    bokeh.plotting.figure
    """
    actual, systems, metrics = prepare_data(reports, metrics, debug)
    shown = normalize_scores(actual, metrics) if normalize else actual

    xs, ys = [], []
    field, field2 = [], []
    xname, yname, direction_name = [], [], []
    n_systems = len(systems)
    for k, direction in enumerate(REPORT_DIRECTIONS):
        xpts, ypts = get_triangle_points(k)
        for iy, system in enumerate(systems):
            row = n_systems - 1 - iy  # first system at the top
            for ix, metric in enumerate(metrics):
                xs.append([x + ix for x in xpts])
                ys.append([y + row for y in ypts])
                field.append(shown[k, iy, ix])
                field2.append(actual[k, iy, ix])
                xname.append(metric_header(metric))
                yname.append(system)
                direction_name.append(DIRECTION_LABELS[direction])

    source = ColumnDataSource(
        dict(
            xs=xs,
            ys=ys,
            field=field,
            field2=field2,
            xname=xname,
            yname=yname,
            direction=direction_name,
        )
    )
    debug_print(debug, f"portrait plot: {len(field)} patches")

    plot_width = len(metrics) * 60 + 200 if width == "auto" else width
    plot_height = n_systems * 40 + 150 if height == "auto" else height

    tooltips = [
        ("System", "@yname"),
        ("Metric", "@xname"),
        ("Direction", "@direction"),
        ("Value (Nor.)" if normalize else "Value", "@field"),
    ]
    if normalize:
        tooltips.append(("Value (Act.)", "@field2"))

    plot = figure(
        title=title,
        x_range=(0, len(metrics)),
        y_range=(0, n_systems),
        width=plot_width,
        height=plot_height,
        min_border=50,
        tools="hover, save",
        tooltips=None if static else tooltips,
        x_axis_location="above",
    )

    colormap = plt.get_cmap(cmap, 255)
    rgb_values = (255 * colormap(range(255))[:, :3]).astype(int)
    colors = [RGB(*rgb).to_hex() for rgb in rgb_values]
    finite = np.asarray(shown)[np.isfinite(shown)]
    if vrange is not None:
        vmin, vmax = min(vrange), max(vrange)
    elif finite.size:
        vmin, vmax = float(finite.min()), float(finite.max())
    else:
        vmin, vmax = 0.0, 1.0
    if vmin == vmax:
        vmin, vmax = vmin - 1.0, vmax + 1.0
    mapper = LinearColorMapper(
        palette=colors, low=vmin, high=vmax, nan_color=missing_color
    )

    glyph = Patches(
        xs="xs",
        ys="ys",
        fill_color={"field": "field", "transform": mapper},
        line_color=line_color,
        line_width=0.5,
    )
    plot.add_glyph(source, glyph, selection_glyph=glyph, nonselection_glyph=glyph)

    plot.xaxis.ticker = [i + 0.5 for i in range(len(metrics))]
    plot.xaxis.major_label_overrides = {
        i + 0.5: metric_header(m) for i, m in enumerate(metrics)
    }
    plot.xaxis.major_label_orientation = math.radians(xaxis_rotation)
    plot.yaxis.ticker = [i + 0.5 for i in range(n_systems)]
    plot.yaxis.major_label_overrides = {
        n_systems - 1 - i + 0.5: s for i, s in enumerate(systems)
    }

    color_bar = ColorBar(
        color_mapper=mapper,
        ticker=BasicTicker(desired_num_ticks=10),
        label_standoff=6,
        border_line_color=None,
        location=(0, 0),
    )
    plot.add_layout(color_bar, "right")

    if bokeh_logo is False:
        plot.toolbar.logo = None
    if static or bokeh_toolbar is False:
        plot.toolbar_location = None
    if title is not None:
        plot.title.align = "center"

    if show_plot:
        show(plot)
    if static:
        export_png(plot, filename=static_filename)
    return plot


# -----------------
# Support functions
# -----------------


def prepare_data(
    reports: Sequence[MetricReport],
    metrics: Optional[List[str]] = None,
    debug: bool = False,
) -> Tuple[np.ndarray, List[str], List[str]]:
    """
    Stack the reports into a (direction, system, metric) array.

    Returns
    -------
    numpy.ndarray, list of str, list of str
        Scores with NaN for absent entries, the system order of the
        leaderboard table and the metric order.
    """
    frame = report_frame(reports)
    present = list(dict.fromkeys(frame.columns.get_level_values("metric")))
    if metrics is None:
        metrics = present
    else:
        metrics = [m.lower() for m in metrics]
        unknown = [m for m in metrics if m not in present]
        if unknown:
            raise ContractError(f"metrics {unknown} are absent from every report")
    systems = list(frame.index)
    data = np.full((len(REPORT_DIRECTIONS), len(systems), len(metrics)), np.nan)
    for k, direction in enumerate(REPORT_DIRECTIONS):
        for ix, metric in enumerate(metrics):
            if (direction, metric) in frame.columns:
                data[k, :, ix] = frame[(direction, metric)].to_numpy(dtype=float)
    debug_print(debug, f"data.shape: {data.shape}, metrics: {metrics}")
    return data, systems, metrics


def normalize_scores(data: np.ndarray, metrics: Sequence[str]) -> np.ndarray:
    """
    Z-score each metric over all systems and directions; lower-is-better
    metrics are negated first. Constant columns map to 0, NaN stays NaN.
    """
    out = np.full_like(data, np.nan, dtype=float)
    for ix, metric in enumerate(metrics):
        column = data[..., ix].astype(float)
        if not METRIC_POLARITY.get(metric, True):
            column = -column
        finite = column[np.isfinite(column)]
        if finite.size == 0:
            continue
        std = finite.std()
        centered = column - finite.mean()
        if std > 0:
            out[..., ix] = centered / std
        else:
            out[..., ix] = np.where(np.isfinite(column), 0.0, np.nan)
    return out


def get_triangle_points(position: int) -> Tuple[List[float], List[float]]:
    """
    Unit-cell triangle split along the main diagonal: 0 is the upper-left
    triangle, 1 the lower-right one.
    """
    if position == 0:
        return [0.0, 0.0, 1.0], [0.0, 1.0, 1.0]
    if position == 1:
        return [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]
    raise ContractError(f"a cell has two triangles, got position {position}")
