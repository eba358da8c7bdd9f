import math

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from bevkd.config import DistillConfig
from bevkd.geometry import (
    BETA_CAP,
    EllipseParams,
    ObjectBox,
    compute_rakd_radii,
    compute_tkd_ellipse,
    eval_elliptical_gaussian,
    length_axis,
    normalize_angle,
    normalized_ego_distance,
    rotate_into_box_frame,
)

coord = st.floats(-100, 100, allow_nan=False)
angle = st.floats(-math.pi, math.pi, exclude_max=True)
radius = st.floats(0.2, 20)


def scalar_gaussian(px, py, cx, cy, heading, r1, r2):
    # quadratic-form route: rotation folded into the coefficients
    c, s = math.cos(heading), math.sin(heading)
    a = (c / r1) ** 2 + (s / r2) ** 2
    b = (-c * s / r1 ** 2) + (s * c / r2 ** 2)
    d = (s / r1) ** 2 + (c / r2) ** 2
    dx, dy = px - cx, py - cy
    return math.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + d * dy * dy))


class TestRotate:
    def test_identity(self):
        assert rotate_into_box_frame((11, 5), (10, 5), 0.0) == (1, 0)

    def test_quarter_turn(self):
        x, y = rotate_into_box_frame((11, 5), (10, 5), math.pi / 2)
        assert x == pytest.approx(0.0, abs=1e-15)
        assert y == pytest.approx(1.0, abs=1e-15)

    @given(angle)
    def test_center_maps_to_origin(self, theta):
        assert rotate_into_box_frame((3.5, -2.0), (3.5, -2.0), theta) == (0.0, 0.0)


class TestRadii:
    cfg = DistillConfig(alpha_l=8.0, alpha_w=4.0)

    def test_beta_zero_gives_box_size(self):
        box = ObjectBox(0, 0, 0, 4.0, 2.0)
        assert compute_rakd_radii(box, 0.0, DistillConfig(alpha_l=123.0)) == (4.0, 2.0)

    def test_half_beta(self):
        r1, _ = compute_rakd_radii(ObjectBox(0, 0, 0, 4.0, 2.0), 0.5, self.cfg)
        assert r1 == pytest.approx(4 * math.sqrt(2), rel=1e-14)

    @given(st.floats(0, 0.999))
    def test_base_one(self, beta):
        r1, r2 = compute_rakd_radii(ObjectBox(0, 0, 0, 8.0, 4.0), beta, self.cfg)
        assert (r1, r2) == (8.0, 4.0)

    @pytest.mark.parametrize("beta", [-0.1, 1.0, 1.5])
    def test_rejects_bad_beta(self, beta):
        with pytest.raises(ValueError):
            compute_rakd_radii(ObjectBox(0, 0, 0, 4.0, 2.0), beta, self.cfg)

    @given(st.floats(0.5, 20), st.floats(0.5, 20), st.floats(0, 0.9), st.floats(0.01, 0.09))
    def test_monotone_towards_alpha(self, length, alpha, beta, dbeta):
        # at l ~ alpha the change drops below one ulp
        assume(abs(length - alpha) > 1e-3 * alpha)
        cfg = DistillConfig(alpha_l=alpha)
        box = ObjectBox(0, 0, 0, length, 1.0)
        lo, _ = compute_rakd_radii(box, beta, cfg)
        hi, _ = compute_rakd_radii(box, beta + dbeta, cfg)
        if length < alpha:
            assert hi > lo
        elif length > alpha:
            assert hi < lo


class TestEgoDistance:
    def test_origin(self):
        assert normalized_ego_distance((0, 0), 51.2) == 0.0

    def test_three_four_five(self):
        assert normalized_ego_distance((30, 40), 100) == 0.5

    def test_cap(self):
        assert normalized_ego_distance((300, 400), 100) == BETA_CAP

    def test_rejects_nonpositive_rmax(self):
        with pytest.raises(ValueError):
            normalized_ego_distance((1, 1), 0)


class TestGaussian:
    def test_center_is_one(self):
        e = EllipseParams(3.0, -1.0, 0.7, 2.0, 1.0)
        assert eval_elliptical_gaussian((3.0, -1.0), e) == 1.0

    def test_unit_offset(self):
        e = EllipseParams(3.0, -1.0, 0.0, 2.0, 1.0)
        assert eval_elliptical_gaussian((5.0, -1.0), e) == pytest.approx(math.exp(-0.5), rel=1e-15)

    def test_off_axis_against_scalar_formula(self):
        e = EllipseParams(0.0, 0.0, 0.0, 2.0, 1.0)
        p = (2.0, 1.0 * math.sqrt(3.0))
        expected = math.exp(-0.5 * (1.0 + 3.0))
        assert eval_elliptical_gaussian(p, e) == pytest.approx(expected, rel=1e-14)

    @given(coord, coord, coord, coord, angle, radius, radius)
    def test_matches_quadratic_form(self, px, py, cx, cy, th, r1, r2):
        e = EllipseParams(cx, cy, th, r1, r2)
        assert eval_elliptical_gaussian((px, py), e) == pytest.approx(
            scalar_gaussian(px, py, cx, cy, th, r1, r2), rel=1e-9, abs=1e-300)

    @given(coord, coord, coord, coord, angle, radius, radius, angle)
    def test_rigid_rotation_invariance(self, px, py, cx, cy, th, r1, r2, phi):
        # rotating the scene by +phi turns headings by -phi under this convention
        c, s = math.cos(phi), math.sin(phi)
        rot = lambda x, y: (c * x - s * y, s * x + c * y)  # noqa: E731
        before = eval_elliptical_gaussian((px, py), EllipseParams(cx, cy, th, r1, r2))
        after = eval_elliptical_gaussian(rot(px, py), EllipseParams(*rot(cx, cy), th - phi, r1, r2))
        assert after == pytest.approx(before, abs=1e-12)

    @given(coord, coord, radius, radius)
    def test_point_reflection_symmetry(self, dx, dy, r1, r2):
        at_origin = EllipseParams(0.0, 0.0, 0.0, r1, r2)
        assert eval_elliptical_gaussian((dx, dy), at_origin) == eval_elliptical_gaussian((-dx, -dy), at_origin)
        # off-origin centers add one rounding in the offset subtraction; that is a
        # relative error in the exponent, so compare exponents rather than values
        e = EllipseParams(1.5, -2.5, 0.0, r1, r2)
        a = eval_elliptical_gaussian((1.5 + dx, -2.5 + dy), e)
        b = eval_elliptical_gaussian((1.5 - dx, -2.5 - dy), e)
        if a == 0.0 or b == 0.0:
            assert a == b == 0.0 or max(a, b) < 1e-300
        else:
            assert math.log(a) == pytest.approx(math.log(b), rel=1e-13, abs=1e-15)

    def test_pure(self):
        e = EllipseParams(0.1, 0.2, 0.3, 1.7, 0.9)
        assert eval_elliptical_gaussian((1.0, 1.0), e) == eval_elliptical_gaussian((1.0, 1.0), e)


class TestTkdEllipse:
    def test_moving_example(self):
        cfg = DistillConfig(tau_v=0.25, t_s=1.0)
        e = compute_tkd_ellipse(ObjectBox(10, 5, 0.0, 4.0, 2.0, 2.0, 0.0), cfg)
        assert (e.cx, e.cy, e.r_major, e.r_minor, e.heading) == (9.0, 5.0, 5.0, 2.0, 0.0)

    @pytest.mark.parametrize("v", [(0.0, 0.0), (0.3, 0.4), (0.5, 0.0)])
    def test_slow_or_static_is_box_shaped(self, v):
        # |v|^2 <= tau_v keeps the center; 0.5**2 == 0.25 sits exactly on the gate
        cfg = DistillConfig(tau_v=0.25, t_s=1.0)
        e = compute_tkd_ellipse(ObjectBox(10, 5, 0.3, 4.0, 2.0, *v), cfg)
        assert (e.cx, e.cy, e.r_major, e.r_minor) == (10, 5, 4.0, 2.0)

    @settings(max_examples=200)
    @given(coord, coord, angle, st.floats(1, 6), st.floats(0.5, 3), st.floats(0.6, 30), st.floats(0.1, 3))
    def test_trajectory_within_one_sigma(self, px, py, th, length, width, speed, t_s):
        cfg = DistillConfig(t_s=t_s)
        ax, ay = length_axis(th)
        box = ObjectBox(px, py, th, length, width, speed * ax, speed * ay)
        e = compute_tkd_ellipse(box, cfg)
        for i in range(21):
            s = 0.5 * t_s * i / 20
            p = (px - s * box.vx, py - s * box.vy)
            assert eval_elliptical_gaussian(p, e) >= math.exp(-0.5) * (1 - 1e-9)


class TestBoxValidation:
    def test_rejects_tiny(self):
        with pytest.raises(ValueError):
            ObjectBox(0, 0, 0, 1e-4, 1.0)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            ObjectBox(float("nan"), 0, 0, 1.0, 1.0)

    @given(st.floats(-50, 50))
    def test_heading_normalized(self, theta):
        h = ObjectBox(0, 0, theta, 1.0, 1.0).heading
        assert -math.pi <= h < math.pi
        assert math.cos(h) == pytest.approx(math.cos(theta), abs=1e-9)
        assert math.sin(h) == pytest.approx(math.sin(theta), abs=1e-9)

    def test_in_range_heading_untouched(self):
        assert normalize_angle(0.123456789) == 0.123456789
        assert normalize_angle(math.pi) == -math.pi
