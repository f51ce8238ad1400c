import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seldlab import dsp, synth
from seldlab.accdoa import FrameLabels
from seldlab.config import PRESETS, ExperimentConfig, apply_overrides, build_config
from seldlab.data import ClipRecord, DataError, Dataset, build_arrays, chunk_clip, write_dataset
from seldlab.model import ConfigError, ModelConfig


# -- config -------------------------------------------------------------------
def test_defaults_and_presets():
    cfg = ExperimentConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, len(cfg.seeds)) == (100, 32, 0.001, 10)
    desk = build_config(preset="desk")
    assert (desk.epochs, desk.clips, desk.seeds) == (15, 60, [0, 1, 2])
    full = build_config(preset="full")
    assert (full.epochs, len(full.seeds)) == (100, 10)
    assert set(PRESETS) == {"desk", "full"}


def test_round_trip_and_hash():
    cfg = build_config(preset="desk", overrides=["--n_blocks", "3", "--n_heads", "4",
                                                 "--attn_dims", "[128,256,128]"])
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()
    other = build_config(preset="desk", overrides=["--epochs", "3"])
    # the hash identifies the model, not the training schedule
    assert other.config_hash() == ExperimentConfig(model=ModelConfig()).config_hash()
    assert cfg.config_hash() != other.config_hash()


def test_overrides():
    out = apply_overrides({}, ["--epochs", "7", "--model.use_pos_emb", "no", "--n-heads", "12",
                               "--selection", "seld"])
    assert out == {"epochs": 7, "selection": "seld",
                   "model": {"use_pos_emb": False, "n_heads": 12}}
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides({}, ["--bogus", "1"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["--epochs"])
    with pytest.raises(ConfigError):
        build_config(overrides=["--epochs", "0"])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"nope": 1})


def test_config_file_merges_with_preset(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"epochs": 2, "model": {"n_heads": 4}}))
    cfg = build_config(str(path), "desk", ["--batch_size", "8"])
    assert (cfg.epochs, cfg.batch_size, cfg.model.n_heads, cfg.seeds) == (2, 8, 4, [0, 1, 2])


# -- chunking -----------------------------------------------------------------
def record(n_feat, n_lab, seed=0):
    rng = np.random.default_rng(seed)
    det = rng.uniform(size=(n_lab, 12)) < 0.2
    doa = rng.standard_normal((n_lab, 12, 3))
    doa /= np.linalg.norm(doa, axis=-1, keepdims=True)
    return ClipRecord("x", rng.standard_normal((7, n_feat, 64)),
                      FrameLabels(det, doa * det[..., None]))


@settings(max_examples=30, deadline=None)
@given(st.integers(250, 1600))
def test_chunking_consumes_whole_chunks_once(n_feat):
    rec = record(n_feat, n_feat // 5 + 1)
    feats, labels = chunk_clip(rec, 250)
    k = n_feat // 250
    assert len(feats) == len(labels) == k
    assert sum(lab.n_frames for lab in labels) == 50 * k
    for i, (f, lab) in enumerate(zip(feats, labels)):
        assert np.array_equal(f, rec.features[:, 250 * i:250 * (i + 1)])
        assert lab == rec.labels.slice(50 * i, 50 * (i + 1))


def test_ten_second_clip_gives_one_chunk():
    rec = record(dsp.n_frames(240000), 100)
    feats, labels = chunk_clip(rec, 250)
    assert feats.shape == (1, 7, 250, 64)
    assert labels[0].n_frames == 50


def test_chunking_errors():
    with pytest.raises(DataError):
        chunk_clip(record(500, 60), 250)  # two chunks need 100 label frames
    with pytest.raises(DataError):
        build_arrays([record(100, 20)], 250, dsp.FeatureStats.identity())


def test_build_arrays_standardizes_and_encodes():
    recs = [record(260, 52, s) for s in range(3)]
    stats = dsp.FeatureStats(np.full(7, 1.0), np.full(7, 2.0))
    x, y = build_arrays(recs, 250, stats)
    assert x.shape == (3, 7, 250, 64) and y.shape == (3, 50, 12, 3)
    np.testing.assert_allclose(x[1], (recs[1].features[:, :250] - 1.0) / 2.0)
    np.testing.assert_array_equal(np.linalg.norm(y, axis=-1) > 0.5, np.stack(
        [r.labels.det[:50] for r in recs]))


# -- dataset on disk ----------------------------------------------------------
@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    write_dataset(root, synth.SceneSpec(seed=4, n_clips=6, clip_len_s=6.0))
    return root


def test_dataset_layout(small_dataset):
    ds = Dataset(small_dataset)
    assert ds.n_label_frames == 60
    assert len(ds.ids()) == 6
    assert sorted(ds.ids("train") + ds.ids("val") + ds.ids("eval")) == sorted(ds.ids())
    cid = ds.ids()[0]
    assert ds.audio(cid).samples.shape == (4, 144000)
    assert ds.labels(cid).n_frames == 60
    with pytest.raises(DataError):
        ds.ids("test")
    with pytest.raises(DataError):
        Dataset(small_dataset / "audio")


def test_feature_cache_matches_direct_extraction(small_dataset):
    ds = Dataset(small_dataset)
    cid = ds.ids()[1]
    direct = ds.features(cid)
    ds.write_feature_cache()
    cached = Dataset(small_dataset).features(cid)
    assert np.array_equal(direct, cached)
