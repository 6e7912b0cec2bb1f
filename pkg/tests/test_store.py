import json
from dataclasses import replace

import numpy as np
import pytest

from latact import store, world
from latact.episodes import episodes_equal
from latact.store import StoreError

from conftest import make_episode


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("store")
    episodes = [make_episode(500 + i, world.SKILLS[i % 4]) for i in range(8)]
    paths = [store.write_episode(ep, root) for ep in episodes]
    return root, episodes, paths


def test_round_trip_bit_exact(corpus):
    root, episodes, paths = corpus
    for ep, path in zip(episodes, paths):
        assert episodes_equal(store.read_episode(path), ep)


def test_write_is_deterministic(tmp_path):
    ep = make_episode(77, "push")
    store.write_episode(ep, tmp_path / "a")
    store.write_episode(ep, tmp_path / "b")
    for f in ("manifest.json", "head.blob", "left_wrist.blob",
              "right_wrist.blob", "lowdim.blob"):
        a = (tmp_path / "a" / ep.episode_id / f).read_bytes()
        b = (tmp_path / "b" / ep.episode_id / f).read_bytes()
        assert a == b, f


def test_duplicate_id_rejected(tmp_path):
    ep = make_episode(78, "pick")
    store.write_episode(ep, tmp_path)
    with pytest.raises(StoreError):
        store.write_episode(ep, tmp_path)
    store.write_episode(ep, tmp_path, overwrite=True)  # explicit overwrite ok


def test_invalid_episode_rejected(tmp_path):
    ep = make_episode(79, "pick")
    frames = list(ep.frames)
    frames[1], frames[2] = frames[2], frames[1]
    with pytest.raises(StoreError):
        store.write_episode(replace(ep, frames=frames), tmp_path)


def test_checksum_detects_blob_corruption(tmp_path):
    ep = make_episode(80, "place")
    path = store.write_episode(ep, tmp_path)
    blob = path / "head.blob"
    data = bytearray(blob.read_bytes())
    data[-1] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(StoreError):
        store.read_episode(path)


def test_manifest_tamper_detected(tmp_path):
    ep = make_episode(81, "stack")
    path = store.write_episode(ep, tmp_path)
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["checksums"]["lowdim.blob"] = "0" * 64
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(StoreError):
        store.read_episode(path)


def test_list_manifests_sorted(corpus):
    root, _, paths = corpus
    manifests = store.list_manifests(root)
    assert len(manifests) == len(paths)
    assert manifests == sorted(manifests)


def test_filter_by_quality(corpus, tmp_path):
    root, episodes, _ = corpus
    unv = replace(episodes[0], episode_id="ep-unv",
                  quality=type(episodes[0].quality)("unverified"))
    store.write_episode(unv, tmp_path)
    store.write_episode(episodes[1], tmp_path)
    manifests = store.list_manifests(tmp_path)
    assert len(store.filter_by_quality(manifests, "unverified")) == 1
    assert len(store.filter_by_quality(manifests, "verified")) == 1
    with pytest.raises(ValueError):
        store.filter_by_quality(manifests, "shiny")


def test_compute_stats(corpus):
    root, episodes, _ = corpus
    stats = store.compute_stats(store.list_manifests(root))
    assert stats.trajectory_count == len(episodes)
    assert stats.unreadable == []
    assert sum(stats.skill_histogram.values()) == len(episodes)
    assert sum(stats.duration_histogram.values()) == len(episodes)
    expected = sum(len(ep) / ep.frame_rate_hz for ep in episodes)
    assert stats.total_duration_s == pytest.approx(expected)


def test_compute_stats_skips_unreadable(tmp_path):
    ep = make_episode(90, "pick")
    path = store.write_episode(ep, tmp_path)
    (tmp_path / "junk").mkdir()
    (tmp_path / "junk" / "manifest.json").write_text("{not json")
    stats = store.compute_stats(store.list_manifests(tmp_path))
    assert stats.trajectory_count == 1
    assert len(stats.unreadable) == 1


def test_pixel_quantization_round_trip(corpus):
    """Renderer pixels are k/255 so uint8 storage is lossless."""
    root, episodes, paths = corpus
    ep, path = episodes[0], paths[0]
    back = store.read_episode(path)
    o0, _ = ep.frames[0]
    o1, _ = back.frames[0]
    assert np.array_equal(o0.head_view, o1.head_view)
    assert o1.head_view.dtype == np.float32
