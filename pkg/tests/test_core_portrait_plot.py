import unittest

import numpy as np
from bokeh.plotting import figure

from DietaMT import MetricReport, report_portrait_plot
from DietaMT.core_portrait_plot import (
    get_triangle_points,
    normalize_scores,
    prepare_data,
)
from DietaMT.support_functions import ContractError


def leaderboard():
    dieta = MetricReport("DIETA")
    dieta.set("en-it", "bleu", 30.0)
    dieta.set("it-en", "bleu", 34.0)
    dieta.set("en-it", "metricx", 4.0)
    tower = MetricReport("Tower-7B")
    tower.set("en-it", "bleu", 28.0)
    tower.set("en-it", "metricx", 2.0)
    return [dieta, tower]


class TestPortraitPlot(unittest.TestCase):
    def test_minimal_valid_input(self):
        plot = report_portrait_plot(leaderboard(), show_plot=False)
        self.assertIsInstance(plot, figure)

    def test_without_normalization(self):
        plot = report_portrait_plot(
            leaderboard(),
            normalize=False,
            title="Leaderboard",
            vrange=(0, 40),
            show_plot=False,
            bokeh_logo=False,
        )
        self.assertIsInstance(plot, figure)
        self.assertIsNone(plot.toolbar.logo)

    def test_metric_selection(self):
        plot = report_portrait_plot(leaderboard(), metrics=["BLEU"], show_plot=False)
        self.assertEqual(plot.x_range.end, 1)

    def test_unknown_metric(self):
        with self.assertRaises(ContractError):
            report_portrait_plot(leaderboard(), metrics=["comet"], show_plot=False)

    def test_prepare_data(self):
        data, systems, metrics = prepare_data(leaderboard())
        self.assertEqual(systems, ["Tower-7B", "DIETA"])
        self.assertEqual(metrics, ["bleu", "metricx"])
        self.assertEqual(data.shape, (2, 2, 2))
        self.assertEqual(data[1, 1, 0], 34.0)
        # Tower-7B has no it-en scores
        self.assertTrue(np.isnan(data[1, 0, 0]))

    def test_lower_is_better_metrics_are_flipped(self):
        data = np.array([[[1.0, 1.0], [3.0, 3.0]]])
        out = normalize_scores(data, ["bleu", "metricx"])
        np.testing.assert_allclose(out[0, :, 0], [-1.0, 1.0])
        np.testing.assert_allclose(out[0, :, 1], [1.0, -1.0])

    def test_constant_and_missing_columns(self):
        data = np.array([[[2.0, np.nan], [2.0, np.nan]]])
        out = normalize_scores(data, ["chrf", "comet"])
        np.testing.assert_array_equal(out[0, :, 0], [0.0, 0.0])
        self.assertTrue(np.isnan(out[0, :, 1]).all())

    def test_triangle_points(self):
        self.assertEqual(get_triangle_points(0), ([0.0, 0.0, 1.0], [0.0, 1.0, 1.0]))
        self.assertEqual(get_triangle_points(1), ([1.0, 1.0, 0.0], [1.0, 0.0, 0.0]))
        with self.assertRaises(ContractError):
            get_triangle_points(2)


if __name__ == "__main__":
    unittest.main()
