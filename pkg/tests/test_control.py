import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evtrack.control import PurePursuitConfig, pure_pursuit
from evtrack.core import DT_WP, N_W, recompute_headings

CFG = PurePursuitConfig()


def traj_through(points):
    return recompute_headings(np.asarray(points, dtype=float))


def straight_ahead(length=3.0):
    t = np.linspace(length / N_W, length, N_W)
    return traj_through(np.stack([t, np.zeros(N_W)], axis=1))


class TestConfig:
    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            PurePursuitConfig(lookahead=0.0)
        with pytest.raises(ValueError):
            PurePursuitConfig(v_max=-1.0)


class TestPurePursuit:
    def test_goal_reached_zero_command(self):
        t = np.full(N_W, 0.05)
        cmd = pure_pursuit(traj_through(np.stack([t, np.zeros(N_W)], axis=1)))
        assert cmd.v == 0.0 and cmd.omega == 0.0

    def test_straight_ahead_no_turn(self):
        cmd = pure_pursuit(straight_ahead())
        assert cmd.omega == pytest.approx(0.0, abs=1e-9)
        assert cmd.v > 0.0

    def test_speed_tracks_trajectory_pace(self):
        # a 3 m trajectory over the N_W * DT_WP horizon -> 1 m/s
        cmd = pure_pursuit(straight_ahead(3.0))
        assert cmd.v == pytest.approx(3.0 / (N_W * DT_WP))

    def test_speed_capped_at_v_max(self):
        cmd = pure_pursuit(straight_ahead(12.0))
        assert cmd.v == CFG.v_max

    def test_curvature_formula_oracle(self):
        # single far waypoint at 45 degrees, repeated: lookahead point known
        p = (2.0, 2.0)
        traj = traj_through([p] * N_W)
        cmd = pure_pursuit(traj)
        ld = math.hypot(*p)
        arc = ld  # first hop covers the whole arc, rest coincident
        v_nom = min(CFG.v_max, max(arc / (N_W * DT_WP),
                                   arc / (CFG.pace_window * DT_WP)))
        assert cmd.v == pytest.approx(v_nom)
        assert cmd.omega == pytest.approx(v_nom * 2.0 * p[1] / ld ** 2)

    def test_left_turn_positive_omega(self):
        traj = traj_through([(1.0, 0.5 + 0.1 * i) for i in range(N_W)])
        assert pure_pursuit(traj).omega > 0.0

    def test_right_turn_negative_omega(self):
        traj = traj_through([(1.0, -0.5 - 0.1 * i) for i in range(N_W)])
        assert pure_pursuit(traj).omega < 0.0

    def test_turn_in_place_off_heading(self):
        # 80 degrees off-heading: between the creep and reverse thresholds
        p = (2.0 * math.cos(math.radians(80)), 2.0 * math.sin(math.radians(80)))
        cmd = pure_pursuit(traj_through([p] * N_W))
        heading_err = math.radians(80)
        assert cmd.omega == pytest.approx(
            max(-CFG.omega_max, min(CFG.omega_max, 2.0 * heading_err)))
        full = min(CFG.v_max, max(2.0 / (N_W * DT_WP),
                                  2.0 / (CFG.pace_window * DT_WP)))
        assert cmd.v == pytest.approx(full * CFG.turn_in_place_scale)

    def test_reverse_toward_plan_behind(self):
        traj = traj_through([(-2.0, 0.3)] * N_W)
        cmd = pure_pursuit(traj)
        assert cmd.v < 0.0
        heading_err = math.atan2(0.3, -2.0)
        back_err = heading_err - math.pi
        back_err = math.atan2(math.sin(back_err), math.cos(back_err))
        assert cmd.omega == pytest.approx(
            max(-CFG.omega_max, min(CFG.omega_max, 2.0 * back_err)))

    def test_lookahead_selects_first_beyond(self):
        # near points inside lookahead, then a point beyond at +y
        pts = [(0.1 * (i + 1), 0.0) for i in range(5)]
        pts += [(0.0, 1.5)] * (N_W - 5)
        cmd = pure_pursuit(traj_through(pts))
        # lookahead point (0, 1.5) is 90 degrees left -> turn in place left
        assert cmd.omega > 0.0
        assert cmd.v < 0.2

    @given(st.floats(-math.pi, math.pi), st.floats(0.5, 4.0))
    @settings(max_examples=60)
    def test_limits_always_respected(self, ang, length):
        t = np.linspace(length / N_W, length, N_W)
        pts = np.stack([t * math.cos(ang), t * math.sin(ang)], axis=1)
        cmd = pure_pursuit(traj_through(pts))
        assert abs(cmd.v) <= CFG.v_max + 1e-12
        assert abs(cmd.omega) <= CFG.omega_max + 1e-12
        if abs(ang) <= math.radians(90):
            assert cmd.v >= 0.0

    @given(st.floats(0.3, 3.0))
    @settings(max_examples=40)
    def test_mirror_symmetry(self, y):
        up = traj_through([(1.0, y)] * N_W)
        dn = traj_through([(1.0, -y)] * N_W)
        a, b = pure_pursuit(up), pure_pursuit(dn)
        assert a.v == pytest.approx(b.v)
        assert a.omega == pytest.approx(-b.omega)
