import os
import tempfile
import unittest

import numpy as np

from skvq.calibration import (CalibrationContext, CalibrationSet, ClipSchedule, _LayerSearch, check_grid,
                              evaluate_clip_loss, search_group_alpha, smoothing_factors)
from skvq.engine.model import Model, ModelConfig
from skvq.exceptions import CalibrationError, PlanError
from skvq.quant.codecs import make_codec
from skvq.quant.spec import QuantSpec
from skvq.reorder import ChannelStats, ReorderPlan
from skvq.utils.binary import BinaryReader, BinaryWriter

CONFIG = ModelConfig(n_layers=2, hidden=32, n_heads=4, n_kv_heads=2, vocab=16, mlp_hidden=32)
SPEC = QuantSpec(2, 4)


def context(seed=0, spec=SPEC):
    model = Model.random(CONFIG, seed=seed)
    return CalibrationContext(model, CalibrationSet.random(3, 12, CONFIG.vocab, seed), spec, spec, 4, seed)


class GridTestCase(unittest.TestCase):
    def test_always_contains_one(self):
        self.assertEqual(check_grid([0.5]), [0.5, 1.0])
        self.assertEqual(check_grid([1.0, 0.5, 0.5]), [0.5, 1.0])
        self.assertEqual(check_grid([0.9]), [float(np.float32(0.9)), 1.0])

    def test_errors(self):
        for grid in ([], [0.0], [1.1], [-0.5, 1.0]):
            with self.subTest(grid=grid):
                with self.assertRaises(CalibrationError):
                    check_grid(grid)


class GroupSearchTestCase(unittest.TestCase):
    def test_outlier_is_clipped(self):
        values = np.append(np.linspace(0.0, 1.0, 63), 1.5)
        alpha, errors = search_group_alpha(values, QuantSpec(2, 64), np.linspace(0.5, 1.0, 11))
        self.assertLess(alpha, 1.0)
        self.assertLess(errors[alpha], errors[1.0])

    def test_uniform_group_keeps_full_range(self):
        values = np.linspace(0.0, 3.0, 4)
        alpha, errors = search_group_alpha(values, QuantSpec(2, 4), [0.5, 0.8])
        self.assertEqual(alpha, 1.0)
        self.assertEqual(errors[1.0], 0.0)


class ScheduleTestCase(unittest.TestCase):
    def setUp(self):
        self.plan = ReorderPlan.identity(2, 2, 8, 4)

    def test_ones(self):
        schedule = ClipSchedule.ones(self.plan, SPEC, SPEC)
        self.assertEqual(schedule.n_layers, 2)
        np.testing.assert_array_equal(schedule.layers[0][0], np.ones(4))
        self.assertEqual(len(schedule.codecs(self.plan)), 2)

    def test_round_trip(self):
        layers = [(np.linspace(0.5, 1.0, 4), np.ones(4)), (np.ones(4), np.full(4, 0.75))]
        schedule = ClipSchedule(layers, SPEC, QuantSpec(4, 4, 'fp8'), self.plan.checksum())
        writer = BinaryWriter(b'TEST', 1)
        schedule.write(writer)
        reader = BinaryReader(writer.getvalue(), b'TEST', (1,))
        self.assertEqual(ClipSchedule.read(reader), schedule)
        reader.finish()

    def test_plan_mismatch(self):
        schedule = ClipSchedule.ones(self.plan, SPEC, SPEC)
        with self.assertRaises(PlanError):
            schedule.check(ReorderPlan.identity(2, 2, 8, 2))
        with self.assertRaises(PlanError):
            schedule.codecs(ReorderPlan.identity(1, 2, 8, 4))

    def test_scale_range(self):
        for bad in (0.0, 1.5, np.nan):
            with self.subTest(bad=bad):
                with self.assertRaises(CalibrationError):
                    ClipSchedule([(np.array([bad]), np.ones(1))], SPEC, SPEC, 0)


class CalibrationSetTestCase(unittest.TestCase):
    def test_from_file(self):
        with tempfile.TemporaryDirectory() as dir:
            path = os.path.join(dir, 'calib.txt')
            with open(path, 'w') as f:
                f.write('# two sequences\n1 2 3\n\n4 5 6 7\n')
            calib = CalibrationSet.from_file(path)
            self.assertEqual(calib.shape, (2, 4))
            calib.require(3, 8)
            with self.assertRaises(CalibrationError):
                calib.require(4, 8)
            with self.assertRaises(CalibrationError):
                calib.require(2, 7)

            with open(path, 'w') as f:
                f.write('1 two 3\n')
            with self.assertRaises(CalibrationError):
                CalibrationSet.from_file(path)
            with self.assertRaises(CalibrationError):
                CalibrationSet.from_file(os.path.join(dir, 'missing.txt'))

    def test_errors(self):
        with self.assertRaises(CalibrationError):
            CalibrationSet([])
        with self.assertRaises(CalibrationError):
            CalibrationSet([[1]])

    def test_random_deterministic(self):
        first = CalibrationSet.random(2, 5, 10, seed=3)
        second = CalibrationSet.random(2, 5, 10, seed=3)
        for a, b in zip(first.sequences, second.sequences):
            np.testing.assert_array_equal(a, b)


class SmoothingTestCase(unittest.TestCase):
    def test_factors(self):
        stats = ChannelStats(np.array([-2.0, 0.0, 1.0]), np.array([1.0, 0.0, 3.0]))
        np.testing.assert_array_equal(smoothing_factors(stats), [2.0, 1.0, 3.0])
        np.testing.assert_allclose(smoothing_factors(stats, power=0.5), [np.sqrt(2), 1.0, np.sqrt(3)], rtol=1e-6)


class ClipSearchTestCase(unittest.TestCase):
    def test_unit_grid_gives_ones(self):
        calibration = context(seed=1)
        plan = calibration.plan(reorder=True)
        schedule = calibration.calibrate(plan, [1.0])
        for key, value in schedule.layers:
            np.testing.assert_array_equal(key, 1.0)
            np.testing.assert_array_equal(value, 1.0)
        for before, after in schedule.losses:
            self.assertEqual(before, after)

    def test_never_worse_than_no_clipping(self):
        for seed in range(3):
            with self.subTest(seed=seed):
                calibration = context(seed=seed)
                plan = calibration.plan(reorder=seed % 2 == 0)
                schedule = calibration.calibrate(plan, np.linspace(0.5, 1.0, 6), workers=2)
                schedule.check(plan)
                for before, after in schedule.losses:
                    self.assertLessEqual(after, before)

    def test_deterministic(self):
        first = context(seed=2)
        second = context(seed=2)
        grid = [0.6, 0.8, 1.0]
        self.assertEqual(first.calibrate(first.plan(), grid), second.calibrate(second.plan(), grid, workers=2))

    def test_loss_matches_codec_round_trip(self):
        calibration = context(seed=4)
        model = calibration.model
        plan = ReorderPlan.identity(2, 2, 8, 4)
        schedule = calibration.calibrate(plan, np.linspace(0.5, 1.0, 6))
        for index in range(CONFIG.n_layers):
            with self.subTest(layer=index):
                search = _LayerSearch(model, index, calibration.traces[index], SPEC, SPEC)
                before = search.run(plan.layers[index], [1.0])[2]
                ones = ClipSchedule.ones(plan, SPEC, SPEC).codecs(plan)[index]
                self.assertAlmostEqual(evaluate_clip_loss(model, index, ones, calibration.traces[index]) / before,
                                       1.0, places=6)
                after = evaluate_clip_loss(model, index, schedule.codecs(plan)[index], calibration.traces[index])
                self.assertAlmostEqual(after / schedule.losses[index][1], 1.0, places=6)

    def test_full_precision_loss_is_zero(self):
        calibration = context(seed=5)
        plan = ReorderPlan.identity(2, 2, 8, 4)
        full = QuantSpec(16, 4)
        codecs = (make_codec(full, plan.layers[0].key.boundaries), make_codec(full, plan.layers[0].value.boundaries))
        self.assertEqual(evaluate_clip_loss(calibration.model, 0, codecs, calibration.traces[0]), 0.0)
        schedule = context(seed=5, spec=full).calibrate(plan, [0.5, 1.0])
        self.assertEqual(schedule.losses, [(0.0, 0.0), (0.0, 0.0)])
        for key, value in schedule.layers:
            np.testing.assert_array_equal(key, 1.0)
