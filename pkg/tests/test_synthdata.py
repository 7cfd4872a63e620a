import hashlib
import json
import os

import numpy as np
import pytest

from panoos.errors import ContractError, FormatError, NumericDomainError
from panoos.synthdata import (
    IGNORE,
    OUTLIER,
    SceneConfig,
    SceneSample,
    class_means,
    distortion_field,
    generate_scene,
    load_dataset,
    make_outlier_bank,
    parse_raster,
    raster_bytes,
    read_manifest,
    read_raster,
    write_manifest,
    write_raster,
    write_scene,
)

GOLDEN = json.load(open(os.path.join(os.path.dirname(__file__), "golden", "seed7.json")))
SMALL = SceneConfig(height=32, width=64)


def sha(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def test_generate_scene_golden():
    s = generate_scene(SceneConfig(), 7)
    assert sha(s.features) == GOLDEN["scene"]["features_sha256"]
    assert sha(s.labels) == GOLDEN["scene"]["labels_sha256"]
    assert s.name == "scene_00007"


def test_generate_scene_is_deterministic_and_seed_sensitive():
    a, b, c = generate_scene(SMALL, 3), generate_scene(SMALL, 3), generate_scene(SMALL, 4)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.features, c.features)


def test_scene_shapes_and_label_codes():
    s = generate_scene(SceneConfig(), 11)
    assert s.features.shape == (16, 64, 256)
    assert s.labels.dtype == np.uint8
    codes = set(np.unique(s.labels).tolist())
    assert codes <= set(range(6)) | {IGNORE}
    assert OUTLIER not in codes


def test_distortion_field_endpoints():
    f = distortion_field(256, 0.5)
    assert f[128] == 1.0
    assert f[0] == 1.5
    assert f.min() == 1.0
    np.testing.assert_array_equal(distortion_field(8, 0.0), 1.0)


def test_noise_grows_towards_the_seam():
    cfg = SceneConfig(distortion=2.0)
    s = generate_scene(cfg, 1)
    means = class_means(cfg)
    resid = s.features.copy()
    valid = s.labels < cfg.num_classes
    resid -= np.where(valid, means[np.minimum(s.labels, 5)].transpose(2, 0, 1), 0.0)
    centre = resid[:, :, 112:144][:, valid[:, 112:144]].std()
    edge = resid[:, :, :16][:, valid[:, :16]].std()
    assert edge > 1.5 * centre


def test_outlier_pools_are_distinct():
    inl = class_means(SMALL, "inlier")
    bank = class_means(SMALL, "bank")
    ev = class_means(SMALL, "eval")
    assert not np.allclose(bank, ev)
    for pool in (bank, ev):
        for mu in pool:
            assert np.min(np.linalg.norm(inl - mu, axis=1)) > 1e-3


def test_outlier_bank_patches_fit_the_scene():
    bank = make_outlier_bank(SMALL, 10, 0)
    for p in bank:
        assert p.mask.dtype == bool and p.mask.any()
        assert p.features.shape == (SMALL.feature_dim,) + p.mask.shape
        assert p.mask.shape[0] <= SMALL.height and p.mask.shape[1] <= SMALL.width


@pytest.mark.parametrize("kw", [{"height": 30}, {"width": 0}, {"num_classes": 1}, {"snr": 0.0}])
def test_invalid_scene_config(kw):
    with pytest.raises(ContractError):
        generate_scene(SceneConfig(**kw), 0)


def test_pyramid_is_average_pooling():
    s = generate_scene(SMALL, 2)
    pyr = s.pyramid()
    assert pyr[8].shape == (16, 4, 8)
    np.testing.assert_allclose(pyr[8][:, 1, 2], s.features[:, 8:16, 16:24].mean(axis=(1, 2)))
    with pytest.raises(ContractError):
        SceneSample(np.zeros((1, 6, 6)), np.zeros((6, 6), np.uint8)).pyramid((4,))


@pytest.mark.parametrize("kind, arr", [
    ("score", np.arange(6, dtype=np.float32).reshape(2, 3) / 7),
    ("label", np.array([[0, 254], [255, 3]], dtype=np.uint8)),
    ("embedding", np.random.default_rng(0).standard_normal((4, 5))),
])
def test_raster_round_trip(tmp_path, kind, arr):
    path = tmp_path / "r.bin"
    write_raster(path, arr, kind)
    back = read_raster(path, kind)
    np.testing.assert_array_equal(back, arr)
    magic = {"score": b"POSM", "label": b"POSL", "embedding": b"POSE"}[kind]
    assert path.read_bytes().startswith(magic + b" %d %d\n" % arr.shape)


def test_raster_errors_report_offsets():
    good = raster_bytes(np.zeros((2, 2), np.uint8), "label")
    with pytest.raises(FormatError, match="offset 0"):
        parse_raster(good, "score")
    with pytest.raises(FormatError, match="offset 0"):
        parse_raster(b"garbage", "label")
    with pytest.raises(FormatError, match="truncated") as e:
        parse_raster(good[:-1], "label")
    assert e.value.offset == len(good) - 1
    with pytest.raises(FormatError, match="trailing") as e:
        parse_raster(good + b"x", "label")
    assert e.value.offset == len(good)
    with pytest.raises(FormatError, match="overflow"):
        parse_raster(b"POSL 999999999 999999999\n", "label")


def test_nonfinite_scores_are_refused():
    with pytest.raises(NumericDomainError, match=r"\(1, 0\)"):
        raster_bytes(np.array([[0.0], [np.nan]]), "score")


def test_dataset_round_trip(tmp_path):
    scenes = [generate_scene(SMALL, i) for i in range(3)]
    pairs = [write_scene(tmp_path, s) for s in scenes]
    write_manifest(tmp_path / "manifest.txt", pairs)
    assert read_manifest(tmp_path / "manifest.txt") == pairs
    back = load_dataset(tmp_path)
    for a, b in zip(scenes, back):
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.name == b.name


def test_manifest_rejects_bad_lines(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("a b\n# comment\n\nonly-one\n")
    with pytest.raises(FormatError, match=":4:"):
        read_manifest(p)
