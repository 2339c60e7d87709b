import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arcreg.grid import GridError, LabelGrid, LandmarkSet, VectorFieldGrid, identity_coords
from arcreg.metrics import MetricReport, dice, evaluate, folding_ratio, std_log_jacobian, tre
from arcreg.transforms import jacobian_determinant


def shifted_boxes():
    a = np.zeros((10, 8, 8), dtype=int)
    b = np.zeros_like(a)
    a[1:5, 2:6, 2:6] = 1
    b[3:7, 2:6, 2:6] = 1
    return LabelGrid(a), LabelGrid(b)


def jdet_3_in_1000():
    jd = np.ones((10, 10, 10))
    jd.flat[[7, 400, 999]] = [-0.5, 0.0, -2.0]
    return jd


def constant_offset_landmarks():
    pts = np.array([[2.0, 3.0, 4.0], [5.0, 5.0, 5.0], [1.0, 7.0, 2.5]])
    ids = ("a", "b", "c")
    return LandmarkSet(pts, ids), LandmarkSet(pts + [2.0, 0.0, 0.0], ids)


class TestDice:
    def test_identical(self):
        a, _ = shifted_boxes()
        per, mean = dice(a, a)
        assert per == {1: 1.0} and mean == 1.0

    def test_disjoint(self):
        a = np.zeros((6, 6, 6), dtype=int)
        b = np.zeros_like(a)
        a[:2], b[3:5] = 1, 1
        assert dice(LabelGrid(a), LabelGrid(b))[1] == 0.0

    def test_shifted_box_fixture(self):
        assert dice(*shifted_boxes())[1] == pytest.approx(0.5)

    def test_label_missing_from_one_side_scores_zero(self):
        a = np.zeros((4, 4, 4), dtype=int)
        b = a.copy()
        a[0, 0, 0], a[1, 1, 1], b[1, 1, 1] = 2, 1, 1
        per, mean = dice(LabelGrid(a), LabelGrid(b))
        assert per == {1: 1.0, 2: 0.0} and mean == 0.5

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_symmetric(self, seed):
        r = np.random.default_rng(seed)
        a, b = LabelGrid(r.integers(0, 4, (5, 5, 5))), LabelGrid(r.integers(0, 4, (5, 5, 5)))
        assert dice(a, b)[0] == dice(b, a)[0]

    def test_dims_mismatch(self):
        with pytest.raises(GridError):
            dice(LabelGrid(np.zeros((3, 3, 3), int)), LabelGrid(np.zeros((3, 3, 4), int)))


class TestTre:
    def test_constant_offset_fixture(self):
        f, m = constant_offset_landmarks()
        mean, p95 = tre(f, m, VectorFieldGrid.zeros((10, 10, 10)), (1.5, 1.5, 1.5))
        assert mean == pytest.approx(3.0) and p95 == pytest.approx(3.0)

    def test_exact_displacement(self):
        f, m = constant_offset_landmarks()
        disp = VectorFieldGrid(np.broadcast_to([2.0, 0.0, 0.0], (10, 10, 10, 3)))
        assert tre(f, m, disp, (1, 1, 1))[0] == pytest.approx(0.0)

    def test_hand_computed_norm(self, rng):
        pts = rng.uniform(2, 7, (6, 3))
        f = LandmarkSet(pts)
        m = LandmarkSet(pts + [1.0, -2.0, 0.5])
        disp = VectorFieldGrid(np.broadcast_to([0.5, -1.0, 0.0], (10, 10, 10, 3)))
        want = np.linalg.norm(np.array([-0.5, 1.0, -0.5]) * [2.0, 1.0, 0.5])
        mean, p95 = tre(f, m, disp, (2.0, 1.0, 0.5))
        assert mean == pytest.approx(want) and p95 == pytest.approx(want)

    def test_translation_consistent(self, rng):
        pts = rng.uniform(2, 6, (5, 3))
        f = LandmarkSet(pts)
        m = LandmarkSet(pts + rng.uniform(-1, 1, (5, 3)))
        disp = rng.uniform(-0.5, 0.5, (10, 10, 10, 3))
        t = np.array([0.7, -0.3, 0.2])
        base = tre(f, m, VectorFieldGrid(disp), (1.2, 1.0, 0.8))[0]
        moved = tre(f, LandmarkSet(m.points + t, m.ids), VectorFieldGrid(disp + t), (1.2, 1.0, 0.8))[0]
        assert moved == pytest.approx(base, abs=1e-6)

    def test_unmatched_ids_listed(self):
        f = LandmarkSet([[1, 1, 1], [2, 2, 2]], ("a", "b"))
        m = LandmarkSet([[1, 1, 1], [2, 2, 2]], ("a", "z"))
        with pytest.raises(GridError, match="b, z"):
            tre(f, m, VectorFieldGrid.zeros((4, 4, 4)), (1, 1, 1))


class TestJacobianStats:
    def test_folding_identity(self):
        assert folding_ratio(np.ones((4, 4, 4))) == 0.0

    def test_folding_all(self):
        assert folding_ratio(-np.ones((4, 4, 4))) == 100.0

    def test_folding_3_in_1000(self):
        assert folding_ratio(jdet_3_in_1000()) == pytest.approx(0.3)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_folding_matches_recount_and_is_order_free(self, seed):
        r = np.random.default_rng(seed)
        d = VectorFieldGrid(r.uniform(-0.8, 0.8, (5, 6, 7, 3)))
        jd = jacobian_determinant(d)
        count = sum(1 for v in jd.ravel().tolist() if v <= 0)
        assert folding_ratio(jd) == 100.0 * count / jd.size
        perm = r.permutation(jd.size)
        assert folding_ratio(jd.ravel()[perm]) == folding_ratio(jd)
        assert std_log_jacobian(jd.ravel()[perm])[0] == pytest.approx(std_log_jacobian(jd)[0], rel=1e-12)

    def test_std_identity(self):
        assert std_log_jacobian(np.ones((3, 3, 3))) == (0.0, 0)

    def test_std_uniform_expansion(self):
        jd = jacobian_determinant(VectorFieldGrid(0.1 * identity_coords((6, 6, 6))))
        assert std_log_jacobian(jd)[0] == pytest.approx(0.0, abs=1e-12)

    def test_std_two_halves(self):
        jd = np.concatenate([np.ones(50), np.full(50, np.e ** 2)])
        assert std_log_jacobian(jd)[0] == pytest.approx(1.0)

    def test_std_clamps_and_counts(self):
        sd, clamped = std_log_jacobian(np.array([1.0, -1.0, 0.0, 1e-7]))
        assert clamped == 3
        assert sd == pytest.approx(np.std([0.0] + [np.log(1e-6)] * 3))

    @pytest.mark.parametrize("fn", [folding_ratio, std_log_jacobian])
    def test_empty(self, fn):
        with pytest.raises(ValueError):
            fn(np.array([]))


class TestReport:
    def test_evaluate_full_and_round_trip(self):
        a, b = shifted_boxes()
        f, m = constant_offset_landmarks()
        rep = evaluate(VectorFieldGrid.zeros(a.dims), a, b, f, m, (1.5, 1.5, 1.5))
        assert rep.dice_mean == pytest.approx(0.5) and rep.tre_mean_mm == pytest.approx(3.0)
        assert rep.folding_ratio_pct == 0.0 and rep.std_log_j == 0.0
        assert MetricReport.from_dict(rep.to_dict()) == rep

    def test_evaluate_regularity_only(self):
        rep = evaluate(VectorFieldGrid.zeros((4, 4, 4)))
        assert rep.dice_mean is None and rep.tre_mean_mm is None

    def test_csv(self):
        rep = MetricReport(0.3, 0.1, 2, {1: 0.9}, 0.9, 1.0, 2.0)
        lines = rep.to_csv().splitlines()
        assert lines[0] == "dice_mean,tre_mean_mm,tre_p95_mm,folding_ratio_pct,std_log_j,clamped_jdet_count"
        assert lines[1] == "0.9,1.0,2.0,0.3,0.1,2"
