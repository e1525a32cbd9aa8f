import json
import math

import pytest

from evtrack.core import SeededRng, wrap_angle
from evtrack.episodes import (EpisodeGenConfig, EpisodeSchemaError,
                              EpisodeSpec, Instruction, attribute_pool,
                              episode_from_json, episode_to_json,
                              generate_episode, load_episode, make_instruction,
                              save_episode)


@pytest.fixture(scope="module")
def cfg():
    return EpisodeGenConfig()


def gen_many(scene, task, cfg, n, base_seed=0):
    rng = SeededRng(base_seed)
    return [generate_episode(scene, task, cfg, rng.spawn(i)) for i in range(n)]


class TestInstruction:
    def test_modes(self):
        assert make_instruction("STT", None).mode == "any_person"
        assert make_instruction("AT", None).mode == "first_seen"

    def test_by_attributes_requires_attributes(self):
        with pytest.raises(ValueError):
            Instruction("by_attributes", None, "x")


class TestGenerateEpisode:
    def test_route_spacing_at_least_d_min(self, small_scene, cfg):
        for ep in gen_many(small_scene, "STT", cfg, 60):
            route = ep.target.route
            for a, b in zip(route, route[1:]):
                assert math.hypot(b[0] - a[0], b[1] - a[1]) >= cfg.d_min

    def test_agent_heading_within_offset(self, small_scene, cfg):
        for ep in gen_many(small_scene, "STT", cfg, 60, base_seed=1):
            tx, ty = ep.target.route[0]
            bearing = math.atan2(ty - ep.agent_start.y, tx - ep.agent_start.x)
            err = abs(wrap_angle(ep.agent_start.theta - bearing))
            assert err <= math.radians(30.0) + 1e-9

    def test_agent_within_spawn_radius(self, small_scene, cfg):
        for ep in gen_many(small_scene, "STT", cfg, 30, base_seed=2):
            tx, ty = ep.target.route[0]
            d = math.hypot(tx - ep.agent_start.x, ty - ep.agent_start.y)
            assert d <= cfg.agent_spawn_radius + 1e-9

    def test_at_distractors_identical_attributes(self, small_scene, cfg):
        for ep in gen_many(small_scene, "AT", cfg, 30, base_seed=3):
            assert 1 <= len(ep.distractors) <= 2
            for d in ep.distractors:
                assert d.attributes == ep.target.attributes

    def test_dt_distractors_differ_from_target(self, small_scene, cfg):
        for ep in gen_many(small_scene, "DT", cfg, 30, base_seed=4):
            assert 1 <= len(ep.distractors) <= 3
            for d in ep.distractors:
                assert d.attributes != ep.target.attributes
            assert ep.instruction.mode == "by_attributes"
            assert ep.instruction.attributes == ep.target.attributes

    def test_distractor_route_crosses_target_route(self, small_scene, cfg):
        for ep in gen_many(small_scene, "DT", cfg, 30, base_seed=5):
            mids = [((a[0] + b[0]) / 2, (a[1] + b[1]) / 2)
                    for a, b in zip(ep.target.route, ep.target.route[1:])]
            for d in ep.distractors:
                assert any(math.hypot(p[0] - m[0], p[1] - m[1]) <= 1.0
                           for p in d.route for m in mids)

    def test_deterministic(self, small_scene, cfg):
        a = generate_episode(small_scene, "STT", cfg, SeededRng(55))
        b = generate_episode(small_scene, "STT", cfg, SeededRng(55))
        assert episode_to_json(a) == episode_to_json(b)

    def test_unknown_task(self, small_scene, cfg):
        with pytest.raises(ValueError):
            generate_episode(small_scene, "XYZ", cfg, SeededRng(0))


class TestSplitHygiene:
    def test_attribute_pools_disjoint_and_cover(self):
        train = {a.as_tuple() for a in attribute_pool("train")}
        test = {a.as_tuple() for a in attribute_pool("test")}
        assert train.isdisjoint(test)
        assert len(train) + len(test) == 8 * 4 * 4

    def test_pool_respected(self, small_scene, cfg):
        pool = attribute_pool("test")
        allowed = {a.as_tuple() for a in pool}
        for ep in gen_many(small_scene, "DT", cfg, 10, base_seed=6):
            pass  # unpooled baseline; now check pooled generation
        rng = SeededRng(8)
        for i in range(10):
            ep = generate_episode(small_scene, "DT", cfg, rng.spawn(i),
                                  attr_pool=pool)
            assert ep.target.attributes.as_tuple() in allowed


class TestSerialization:
    def test_round_trip_equality(self, small_scene, cfg, tmp_path):
        ep = generate_episode(small_scene, "DT", cfg, SeededRng(91))
        path = tmp_path / "ep.json"
        save_episode(ep, path)
        assert load_episode(path) == ep

    def test_missing_seed_names_field(self, small_scene, cfg, tmp_path):
        ep = generate_episode(small_scene, "STT", cfg, SeededRng(92))
        d = episode_to_json(ep)
        del d["seed"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(d))
        with pytest.raises(EpisodeSchemaError, match="seed"):
            load_episode(path)

    def test_missing_actor_field_names_path(self, small_scene, cfg):
        ep = generate_episode(small_scene, "STT", cfg, SeededRng(93))
        d = episode_to_json(ep)
        del d["target"]["speed"]
        with pytest.raises(EpisodeSchemaError, match="target.speed"):
            episode_from_json(d)

    def test_corpus_content_stable_across_runs(self, small_scene, cfg):
        import hashlib

        def corpus_hash():
            rng = SeededRng(1234)
            blob = json.dumps(
                [episode_to_json(generate_episode(small_scene, "STT", cfg,
                                                  rng.spawn(i)))
                 for i in range(20)], sort_keys=True)
            return hashlib.sha256(blob.encode()).hexdigest()

        assert corpus_hash() == corpus_hash()
