import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turbmit.datagen import (
    DatagenConfig, DatasetManifest, DegradeConfig, ManifestEntry, TextSample, build_dataset,
    degrade, random_sample, render_text_image, split_counts, word_list,
)
from turbmit.errors import ConfigError, GenerationError
from turbmit.metrics import psnr
from turbmit.turbsim import load_sequence

BLACK_ON_WHITE = TextSample("turbulence", 0, 14, 0.0, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def test_word_list_lengths():
    words = word_list()
    assert len(words) >= 100
    assert all(3 <= len(w) <= 12 for w in words)


def test_text_sample_validation():
    with pytest.raises(ConfigError):
        TextSample("", 0, 12, 0.0)
    with pytest.raises(ConfigError):
        TextSample("abc", 0, 7, 0.0)


def test_render_black_on_white_is_bimodal():
    img = render_text_image(BLACK_ON_WHITE, (48, 96), 0)
    gray = img.mean(axis=2).ravel()
    hist, _ = np.histogram(gray, bins=10, range=(0, 1))
    # the two most populated bins are the extremes
    assert set(np.argsort(hist)[-2:]) == {0, 9}


def test_render_angle_periodic_and_deterministic():
    a = render_text_image(TextSample("wave", 1, 16, 0.0), (64, 64), 5)
    b = render_text_image(TextSample("wave", 1, 16, 360.0), (64, 64), 5)
    np.testing.assert_array_equal(a, b)
    c = render_text_image(TextSample("wave", 1, 16, 25.0), (64, 64), 5)
    d = render_text_image(TextSample("wave", 1, 16, 25.0), (64, 64), 5)
    np.testing.assert_array_equal(c, d)


def test_render_shrinks_to_fit_then_fails():
    big = TextSample("wave", 0, 40, 0.0)
    img = render_text_image(big, (40, 64), 0)
    assert img.shape == (40, 64, 3)
    with pytest.raises(GenerationError) as err:
        render_text_image(TextSample("extraordinary", 0, 200, 45.0), (16, 16), 0)
    assert "extraordinary" in str(err.value)


def test_render_over_background(scene_dir):
    from turbmit.datagen import list_images, scene_crop

    bg = scene_crop(list_images(scene_dir)[0], (40, 50), 1)
    img = render_text_image(BLACK_ON_WHITE, (40, 50), 2, background=bg)
    assert img.shape == (40, 50, 3)
    assert np.mean(np.isclose(img, bg)) > 0.5


def test_degrade_disabled_is_identity():
    img = np.random.default_rng(0).random((16, 16, 3))
    np.testing.assert_array_equal(degrade(img, 3, DegradeConfig.disabled()), img)


def test_degrade_noise_only_std():
    cfg = DegradeConfig(p_blur=0.0, p_noise=1.0, p_brightness=0.0, noise_sigma=(0.03, 0.03))
    out = degrade(np.full((128, 128, 3), 0.5), 0, cfg)
    assert 0.025 <= out.std() <= 0.035


@pytest.mark.parametrize("which", ["p_blur", "p_noise", "p_brightness"])
def test_degrade_changes_image(which):
    rng = np.random.default_rng(1)
    img = rng.uniform(0.2, 0.8, (24, 24, 3))
    cfg = DegradeConfig(**{k: (1.0 if k == which else 0.0) for k in ("p_blur", "p_noise", "p_brightness")},
                        brightness=(0.8, 0.9))
    assert psnr(degrade(img, 4, cfg), img) < 100.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_degrade_stays_in_range(seed):
    img = np.random.default_rng(seed).random((12, 12, 3))
    out = degrade(img, seed, DegradeConfig(p_blur=1, p_noise=1, p_brightness=1))
    assert out.min() >= 0 and out.max() <= 1


def test_random_sample_in_config_ranges():
    rng = np.random.default_rng(0)
    cfg = DatagenConfig()
    for _ in range(50):
        s = random_sample(rng, cfg)
        assert s.text in word_list()
        assert cfg.size_range[0] <= s.size_px <= cfg.size_range[1]
        assert cfg.orientation_range[0] <= s.orientation_deg <= cfg.orientation_range[1]


def test_split_counts_reference_ratios():
    c = split_counts(100)
    clean = c[("pretrain", "clean")] + c[("finetune", "clean")]
    scene = c[("pretrain", "scene")] + c[("finetune", "scene")]
    pre = c[("pretrain", "clean")] + c[("pretrain", "scene")]
    assert (clean, scene) == (77, 23)
    assert (pre, 100 - pre) == (82, 18)


def test_split_counts_total_twenty():
    c = split_counts(20)
    clean = c[("pretrain", "clean")] + c[("finetune", "clean")]
    assert (clean, 20 - clean) == (15, 5)


def test_split_counts_single_entry():
    c = split_counts(1)
    assert c[("pretrain", "clean")] == 1 and sum(c.values()) == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5000), st.booleans())
def test_split_counts_within_rounding(total, scene_domain):
    c = split_counts(total, scene_domain)
    assert sum(c.values()) == total and min(c.values()) >= 0
    clean = c[("pretrain", "clean")] + c[("finetune", "clean")]
    pre = c[("pretrain", "clean")] + c[("pretrain", "scene")]
    if scene_domain:
        assert abs(clean - total * 8706 / 11275) <= 1
    else:
        assert clean == total
    assert abs(pre - total * 9275 / 11275) <= 1


def test_manifest_rejects_duplicates():
    e = ManifestEntry("00000", "pretrain/00000", "clean", "pretrain", "pretrain/00000/params.json")
    with pytest.raises(ConfigError):
        DatasetManifest(seed=0, entries=[e, e])


SMALL = DatagenConfig(total=6, canvas=(32, 32), n_frames=3, size_range=(10, 14))


def test_build_dataset_layout_and_determinism(tmp_path, scene_dir):
    m1 = build_dataset(SMALL, scene_dir, tmp_path / "a", 9)
    m2 = build_dataset(SMALL, scene_dir, tmp_path / "b", 9)
    assert m1.to_json() == m2.to_json()
    assert len(m1.entries) == 6
    for e in m1.entries:
        d1, d2 = m1.sequence_dir(e), m2.sequence_dir(e)
        assert d1.parent.name == e.split
        for f in d1.iterdir():
            assert f.read_bytes() == (d2 / f.name).read_bytes()
        seq = load_sequence(d1)
        assert len(seq.frames) == 3 and seq.gt.shape == (32, 32, 3)
        assert psnr(seq.gt, seq.gt) == 100.0
        meta = json.loads((tmp_path / "a" / e.params).read_text())
        assert meta["domain"] == e.domain and meta["entry_seed"] == 9 + int(e.id)
    loaded = DatasetManifest.load(tmp_path / "a")
    assert loaded.to_json() == m1.to_json()
    doc = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(doc) == {"version", "seed", "entries"}


def test_build_dataset_counts_match_split(tmp_path, scene_dir):
    cfg = DatagenConfig(total=20, canvas=(32, 32), n_frames=1, size_range=(10, 12))
    m = build_dataset(cfg, scene_dir, tmp_path, 0)
    assert m.counts() == {k: v for k, v in split_counts(20).items() if v}


def test_build_dataset_single_entry(tmp_path):
    cfg = DatagenConfig(total=1, canvas=(32, 32), n_frames=2, scene_domain=True)
    m = build_dataset(cfg, None, tmp_path, 0)
    assert [(e.split, e.domain) for e in m.entries] == [("pretrain", "clean")]


def test_build_dataset_needs_scenes(tmp_path):
    with pytest.raises(ConfigError):
        build_dataset(SMALL, tmp_path / "missing", tmp_path / "out", 0)
    assert not (tmp_path / "out" / "manifest.json").exists()


def test_build_dataset_clean_only_needs_no_scenes(tmp_path):
    cfg = DatagenConfig(total=3, canvas=(32, 32), n_frames=1, scene_domain=False)
    m = build_dataset(cfg, None, tmp_path, 1)
    assert {e.domain for e in m.entries} == {"clean"}
