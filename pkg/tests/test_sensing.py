import math

import numpy as np
import pytest

from evtrack.avatars import AttributeVector
from evtrack.core import Pose2D, SeededRng
from evtrack.sensing import (C_FEAT, COARSE_TOKENS, FINE_TOKENS, FOV,
                             GRID_AZ, GRID_DIST, SENSE_RANGE, WINDOW_K,
                             ObservationBuffer, Sensor, VisibleEntity,
                             assemble_track_sequence, assemble_vqa_sequence,
                             featurize, grid_pool, pool_frame)
from evtrack.world import OccupancyGrid, Scene

ATTRS = AttributeVector(2, 1, 3)


def free_scene():
    return Scene(id="free", grid=OccupancyGrid(0.1, np.zeros((120, 120), dtype=bool)))


def ent(eid, x, y, attrs=ATTRS):
    return (eid, (x, y), attrs)


class TestSensor:
    def test_entity_ahead_visible(self):
        s = Sensor(free_scene())
        vis = s.sense([ent("t", 4.0, 2.0)], Pose2D(2.0, 2.0, 0.0))
        assert len(vis) == 1
        assert vis[0].bearing == pytest.approx(0.0)
        assert vis[0].distance == pytest.approx(2.0)

    def test_entity_behind_not_visible(self):
        s = Sensor(free_scene())
        assert s.sense([ent("t", 1.0, 2.0)], Pose2D(3.0, 2.0, 0.0)) == []

    def test_entity_beyond_range_not_visible(self):
        s = Sensor(free_scene())
        assert s.sense([ent("t", 10.0, 2.0)], Pose2D(2.0, 2.0, 0.0)) == []

    def test_occluded_entity_not_visible(self):
        cells = np.zeros((120, 120), dtype=bool)
        cells[18:24, 40] = True     # wall at x = 4.0..4.1
        scene = Scene(id="wall", grid=OccupancyGrid(0.1, cells))
        s = Sensor(scene)
        agent = Pose2D(2.0, 2.0, 0.0)
        assert s.sense([ent("t", 6.0, 2.0)], agent) == []
        # same entity with no wall in between
        assert len(Sensor(free_scene()).sense([ent("t", 6.0, 2.0)], agent)) == 1

    def test_first_seen_ranks_persist(self):
        s = Sensor(free_scene())
        agent = Pose2D(2.0, 2.0, 0.0)
        vis = s.sense([ent("a", 4.0, 2.0)], agent)
        assert vis[0].first_seen_rank == 0
        vis = s.sense([ent("a", 4.0, 2.0), ent("b", 5.0, 2.0)], agent)
        ranks = {v.id: v.first_seen_rank for v in vis}
        assert ranks == {"a": 0, "b": 1}
        # ranks stay put even when b is now closer
        vis = s.sense([ent("a", 5.0, 2.0), ent("b", 4.0, 2.0)], agent)
        ranks = {v.id: v.first_seen_rank for v in vis}
        assert ranks == {"a": 0, "b": 1}

    def test_simultaneous_debut_ranked_by_distance(self):
        s = Sensor(free_scene())
        vis = s.sense([ent("far", 6.0, 2.0), ent("near", 3.0, 2.0)],
                      Pose2D(2.0, 2.0, 0.0))
        ranks = {v.id: v.first_seen_rank for v in vis}
        assert ranks == {"near": 0, "far": 1}


class TestFeaturize:
    def test_empty_is_zero_grid(self):
        g = featurize([])
        assert g.shape == (GRID_DIST, GRID_AZ, C_FEAT)
        assert not g.any()

    def test_single_entity_localized(self):
        v = VisibleEntity("t", 0.0, 2.0, ATTRS, 0)
        g = featurize([v])
        occupied = np.argwhere(g[:, :, 0] > 0)
        assert len(occupied) >= 1
        di = int(2.0 / (SENSE_RANGE / GRID_DIST))
        assert set(occupied[:, 0]) == {di}
        # attribute channels set where occupancy is set
        for iy, ix in occupied:
            assert g[iy, ix, 2 + ATTRS.garment_color] > 0
            assert g[iy, ix, 10 + ATTRS.build] > 0
            assert g[iy, ix, 1] == pytest.approx(2.0 / SENSE_RANGE)

    def test_headwear_binary_encoding(self):
        v = VisibleEntity("t", 0.0, 2.0, AttributeVector(0, 0, 3), 0)
        g = featurize([v])
        cell = np.argwhere(g[:, :, 0] > 0)[0]
        assert g[cell[0], cell[1], 14] == 1.0 and g[cell[0], cell[1], 15] == 1.0

    def test_superposition_of_disjoint_entities(self):
        a = VisibleEntity("a", -0.5, 2.0, ATTRS, 0)
        b = VisibleEntity("b", 0.5, 6.0, AttributeVector(5, 2, 0), 1)
        assert np.allclose(featurize([a, b]), featurize([a]) + featurize([b]))


class TestGridPool:
    def test_constant_grid(self):
        g = np.full((GRID_DIST, GRID_AZ, C_FEAT), 3.25)
        for n in (FINE_TOKENS, COARSE_TOKENS):
            assert np.allclose(grid_pool(g, n), 3.25)

    def test_output_shapes(self):
        g = np.zeros((GRID_DIST, GRID_AZ, C_FEAT))
        assert grid_pool(g, FINE_TOKENS).shape == (64, C_FEAT)
        assert grid_pool(g, COARSE_TOKENS).shape == (4, C_FEAT)

    def test_matches_nested_loop_oracle(self):
        rng = SeededRng(5)
        g = rng.normal(size=(GRID_DIST, GRID_AZ, C_FEAT))
        for n, block in ((FINE_TOKENS, 2), (COARSE_TOKENS, 8)):
            got = grid_pool(g, n)
            side = GRID_DIST // block
            for bi in range(side):
                for bj in range(side):
                    expect = g[bi * block:(bi + 1) * block,
                               bj * block:(bj + 1) * block].mean(axis=(0, 1))
                    assert np.allclose(got[bi * side + bj], expect, atol=1e-6)

    def test_mean_preserved_across_scales(self):
        rng = SeededRng(6)
        g = rng.normal(size=(GRID_DIST, GRID_AZ, C_FEAT))
        assert np.allclose(grid_pool(g, FINE_TOKENS).mean(axis=0),
                           g.mean(axis=(0, 1)), atol=1e-6)
        assert np.allclose(grid_pool(g, COARSE_TOKENS).mean(axis=0),
                           g.mean(axis=(0, 1)), atol=1e-6)

    def test_rejects_non_square_tiling(self):
        g = np.zeros((GRID_DIST, GRID_AZ, C_FEAT))
        with pytest.raises(ValueError):
            grid_pool(g, 8)


def push_frames(buffer, n, start=0):
    rng = SeededRng(1000 + start)
    for i in range(n):
        g = rng.normal(size=(GRID_DIST, GRID_AZ, C_FEAT))
        buffer.push(pool_frame(g))


class TestObservationBuffer:
    def test_window_capped_at_k(self):
        b = ObservationBuffer()
        push_frames(b, 40)
        assert len(b) == WINDOW_K
        assert b.frame_count == 40

    def test_oldest_retained_after_overflow(self):
        b = ObservationBuffer(k=32)
        frames = []
        rng = SeededRng(2)
        for i in range(40):
            g = np.full((GRID_DIST, GRID_AZ, C_FEAT), float(i))
            b.push(pool_frame(g))
        # frame 9 (1-indexed) = value 8.0 should be the oldest retained
        assert b.window[0].fine[0, 0] == pytest.approx(8.0)


class TestAssembly:
    def test_track_single_frame(self):
        b = ObservationBuffer()
        push_frames(b, 1)
        assert assemble_track_sequence(b).shape == (64, C_FEAT)

    def test_track_full_window(self):
        b = ObservationBuffer()
        push_frames(b, 32)
        assert assemble_track_sequence(b).shape == (4 * 31 + 64, C_FEAT)

    def test_track_k_limit(self):
        b = ObservationBuffer()
        push_frames(b, 32)
        assert assemble_track_sequence(b, k=4).shape == (4 * 3 + 64, C_FEAT)

    def test_track_order_coarse_history_fine_latest(self):
        b = ObservationBuffer()
        for i in range(3):
            b.push(pool_frame(np.full((GRID_DIST, GRID_AZ, C_FEAT), float(i))))
        seq = assemble_track_sequence(b)
        assert np.allclose(seq[:4], 0.0)
        assert np.allclose(seq[4:8], 1.0)
        assert np.allclose(seq[8:], 2.0)

    def test_vqa_lengths(self):
        b = ObservationBuffer()
        push_frames(b, 1)
        assert assemble_vqa_sequence(b).shape == (4, C_FEAT)
        push_frames(b, 31, start=1)
        assert assemble_vqa_sequence(b).shape == (128, C_FEAT)

    def test_vqa_equals_per_frame_coarse_pool(self):
        b = ObservationBuffer()
        rng = SeededRng(3)
        grids = [rng.normal(size=(GRID_DIST, GRID_AZ, C_FEAT)) for _ in range(5)]
        for g in grids:
            b.push(pool_frame(g))
        expect = np.concatenate([grid_pool(g, COARSE_TOKENS) for g in grids])
        assert np.allclose(assemble_vqa_sequence(b), expect)

    def test_empty_buffer_raises(self):
        with pytest.raises(ValueError):
            assemble_track_sequence(ObservationBuffer())
