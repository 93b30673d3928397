import json
import os

import numpy as np
import pytest

from weathermatch.degrade import FogConfig, RainConfig, WeatherSpec
from weathermatch.episodes import (
    SPLIT_EVAL,
    SPLIT_SUPPORT,
    Pair,
    build_dataset,
    load_manifest,
    meta_test_rounds,
    sample_episode,
)
from weathermatch.errors import ParameterError


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    spec = WeatherSpec([RainConfig()], seed=3)
    manifest = build_dataset(spec, count=10, seed=17, out_dir=str(out), condition_id="rain", size=32)
    return out, manifest


class TestBuildDataset:
    def test_file_count(self, small_dataset):
        out, _ = small_dataset
        pngs = [f for f in os.listdir(out) if f.endswith(".png")]
        assert len(pngs) == 20
        assert os.path.exists(out / "manifest.json")

    def test_rebuild_is_identical(self, tmp_path, small_dataset):
        out, _ = small_dataset
        spec = WeatherSpec([RainConfig()], seed=3)
        build_dataset(spec, count=10, seed=17, out_dir=str(tmp_path), condition_id="rain", size=32)
        a = (out / "manifest.json").read_text()
        b = (tmp_path / "manifest.json").read_text()
        assert a == b

    def test_split_tags(self, small_dataset):
        _, manifest = small_dataset
        splits = [r.split for r in manifest.pairs]
        assert splits[:1] == [SPLIT_SUPPORT]  # ceil(10% of 10) = 1
        assert all(s == SPLIT_EVAL for s in splits[1:])

    def test_split_ceil(self, tmp_path):
        spec = WeatherSpec([FogConfig()], seed=1)
        m = build_dataset(spec, count=11, seed=2, out_dir=str(tmp_path), size=32)
        assert len(m.split_records(SPLIT_SUPPORT)) == 2  # ceil(1.1)

    def test_too_few_pairs(self, tmp_path):
        with pytest.raises(ParameterError):
            build_dataset(WeatherSpec([RainConfig()], seed=0), 1, 0, str(tmp_path))

    def test_manifest_roundtrip(self, small_dataset):
        out, manifest = small_dataset
        loaded = load_manifest(str(out))
        assert loaded.condition_id == manifest.condition_id
        assert [r.id for r in loaded.pairs] == [r.id for r in manifest.pairs]
        pair = loaded.load_pair(loaded.pairs[0])
        assert pair.degraded.shape == (32, 32, 3)

    def test_manifest_is_valid_json_with_fields(self, small_dataset):
        out, _ = small_dataset
        data = json.loads((out / "manifest.json").read_text())
        assert set(data) == {"version", "condition_id", "spec", "pairs"}
        assert set(data["pairs"][0]) == {"id", "degraded_path", "clean_path", "seed", "split"}


class TestSampleEpisode:
    def test_sizes_match_batch_convention(self, small_dataset):
        _, manifest = small_dataset
        ep = sample_episode([manifest], n_support=1, n_query=7, seed=0)
        assert len(ep.support) == 1 and len(ep.query) == 7

    def test_disjoint(self, small_dataset):
        _, manifest = small_dataset
        ep = sample_episode([manifest], 2, 5, seed=1)
        support_ids = {p.id for p in ep.support}
        query_ids = {p.id for p in ep.query}
        assert not support_ids & query_ids

    def test_deterministic(self, small_dataset):
        _, manifest = small_dataset
        a = sample_episode([manifest], 1, 3, seed=9)
        b = sample_episode([manifest], 1, 3, seed=9)
        assert [p.id for p in a.support + a.query] == [p.id for p in b.support + b.query]

    def test_insufficient_pairs(self, small_dataset):
        _, manifest = small_dataset
        with pytest.raises(ParameterError):
            sample_episode([manifest], 5, 7, seed=0)

    def test_single_condition(self, small_dataset):
        _, manifest = small_dataset
        ep = sample_episode([manifest], 1, 2, seed=4)
        assert all(p.condition_id == ep.condition_id for p in ep.support + ep.query)


def fake_pair(name):
    img = np.zeros((4, 4, 3), np.float32)
    return Pair(id=name, degraded=img, clean=img, condition_id="c")


class TestMetaTestRounds:
    def test_single_pair_duplicates(self):
        p = fake_pair("a")
        rounds = meta_test_rounds([p])
        assert len(rounds) == 1
        q, s = rounds[0]
        assert [x.id for x in q] == ["a"] and [x.id for x in s] == ["a"]

    def test_two_pairs_swap(self):
        a, b = fake_pair("a"), fake_pair("b")
        rounds = meta_test_rounds([a, b])
        ids = [([x.id for x in q], [x.id for x in s]) for q, s in rounds]
        assert ids == [(["a"], ["b"]), (["b"], ["a"])]

    def test_four_pairs_half_split_swap(self):
        ps = [fake_pair(n) for n in "abcd"]
        rounds = meta_test_rounds(ps)
        ids = [([x.id for x in q], [x.id for x in s]) for q, s in rounds]
        assert ids == [(["a", "b"], ["c", "d"]), (["c", "d"], ["a", "b"])]

    def test_odd_count_ceil_floor(self):
        ps = [fake_pair(n) for n in "abcde"]
        rounds = meta_test_rounds(ps)
        (q1, s1), (q2, s2) = rounds
        assert len(q1) == 3 and len(s1) == 2
        assert [x.id for x in q2] == [x.id for x in s1]

    def test_union_preserved(self):
        ps = [fake_pair(str(i)) for i in range(6)]
        for q, s in meta_test_rounds(ps):
            assert {x.id for x in q} | {x.id for x in s} == {x.id for x in ps}

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            meta_test_rounds([])
