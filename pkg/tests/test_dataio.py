import json

import numpy as np
import pytest

from refineloc.dataio import (
    DatasetManifest,
    FeatureFormatError,
    GroundTruthSegment,
    ManifestError,
    SyntheticConfig,
    VideoRecord,
    generate_synthetic,
    load_features,
    load_manifest,
    manifest_from_json,
    sample_prototypes,
    split_dataset,
    write_features,
)


def _cfg(**kw):
    base = dict(N=3, D=8, video_count=12, T_range=(20, 30), segments_per_video_range=(1, 3),
                segment_len_range=(2, 5), noise_sigma=0.5, seed=3)
    base.update(kw)
    return SyntheticConfig(**base)


def test_empty_synthetic(tmp_path):
    m = generate_synthetic(_cfg(video_count=0), tmp_path)
    assert m.videos == [] and m.split == {}
    assert not (tmp_path / "features").exists()


def test_synthetic_is_byte_deterministic(tmp_path):
    generate_synthetic(_cfg(), tmp_path / "a")
    generate_synthetic(_cfg(), tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_zero_noise_planted_snippets_equal_prototype(tmp_path):
    cfg = _cfg(noise_sigma=0.0)
    m = generate_synthetic(cfg, tmp_path)
    protos = sample_prototypes(cfg).astype(np.float32).astype(np.float64)
    for v in m.videos:
        F = load_features(v, m.root)
        fg = v.foreground_mask()
        c = int(np.argmax(v.y))
        assert np.array_equal(F[fg], np.broadcast_to(protos[c], F[fg].shape))
        assert np.array_equal(F[~fg], np.broadcast_to(protos[-1], F[~fg].shape))


def test_synthetic_invariants(tmp_path):
    m = generate_synthetic(_cfg(video_count=30), tmp_path)
    m.validate()
    for v in m.videos:
        assert v.y.sum() == 1.0 and v.y.max() == 1.0
        segs = sorted((s.start, s.end) for s in v.gt_segments)
        assert all(a[1] + 1 < b[0] for a, b in zip(segs, segs[1:]))
        planted = sum(e - s + 1 for s, e in segs)
        assert v.foreground_mask().mean() == planted / v.T
        assert all(s.class_id == int(np.argmax(v.y)) for s in v.gt_segments)


def test_infeasible_planting_errors(tmp_path):
    with pytest.raises(ValueError, match="100 attempts"):
        generate_synthetic(_cfg(T_range=(5, 6), segment_len_range=(10, 12)), tmp_path)


def test_feature_roundtrip_and_zero_file(tmp_path):
    F = np.random.default_rng(0).standard_normal((7, 5))
    write_features(tmp_path / "f.f32", F)
    rec = VideoRecord("v", 7, np.array([1.0]), [], "f.f32", 5)
    assert np.allclose(load_features(rec, tmp_path), F, rtol=1e-6, atol=1e-6)
    (tmp_path / "z.f32").write_bytes(bytes(4 * 7 * 5))
    rec = VideoRecord("v", 7, np.array([1.0]), [], "z.f32", 5)
    assert not load_features(rec, tmp_path).any()


def test_truncated_feature_file(tmp_path):
    (tmp_path / "t.f32").write_bytes(bytes(10))
    rec = VideoRecord("v", 2, np.array([1.0]), [], "t.f32", 3)
    with pytest.raises(FeatureFormatError, match="expected 24 bytes.*got 10"):
        load_features(rec, tmp_path)


def _tiny_manifest(n):
    vids = [VideoRecord(f"v{i}", 4, np.array([1.0]), [], f"v{i}.f32", 2) for i in range(n)]
    return DatasetManifest("t", 1, 2, ["a"], vids)


def test_split_counts():
    m = split_dataset(_tiny_manifest(10), 0.2, 0.2, seed=0)
    counts = {s: list(m.split.values()).count(s) for s in ("train", "val", "test")}
    assert counts == {"train": 6, "val": 2, "test": 2}
    assert set(m.split) == {f"v{i}" for i in range(10)}


def test_split_all_train_and_deterministic():
    assert set(split_dataset(_tiny_manifest(5), 0, 0, 1).split.values()) == {"train"}
    a = split_dataset(_tiny_manifest(20), 0.3, 0.1, 9).split
    b = split_dataset(_tiny_manifest(20), 0.3, 0.1, 9).split
    assert a == b


def test_manifest_schema_keys(tmp_path):
    m = generate_synthetic(_cfg(video_count=3), tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert set(doc) == {"name", "N", "D", "class_names", "videos", "split"}
    assert set(doc["videos"][0]) == {"id", "T", "y", "gt_segments", "feature_path"}
    assert set(doc["videos"][0]["gt_segments"][0]) == {"start", "end", "class_id"}
    assert load_manifest(tmp_path).ids() == m.ids()


def test_manifest_rejects_bad_segment_with_video_id(tmp_path):
    generate_synthetic(_cfg(video_count=3), tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["videos"][1]["gt_segments"][0]["end"] = doc["videos"][1]["T"]
    with pytest.raises(ManifestError, match=doc["videos"][1]["id"]):
        manifest_from_json(doc, tmp_path).validate()


def test_manifest_rejects_wrong_file_size(tmp_path):
    m = generate_synthetic(_cfg(video_count=2), tmp_path)
    (tmp_path / m.videos[0].feature_path).write_bytes(b"\0" * 8)
    with pytest.raises(ManifestError, match=m.videos[0].id):
        load_manifest(tmp_path)


def test_manifest_rejects_unnormalized_label(tmp_path):
    generate_synthetic(_cfg(video_count=2), tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["videos"][0]["y"] = [0.5, 0.0, 0.0]
    with pytest.raises(ManifestError, match="probability"):
        manifest_from_json(doc, tmp_path).validate()


def test_segment_start_after_end():
    with pytest.raises(ManifestError):
        GroundTruthSegment(5, 4, 0)
