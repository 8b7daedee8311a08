import numpy as np
import pytest

from dcal.data import SyntheticSpec, _background, class_cues, gen_synthetic, load_dataset, save_dataset


def small_spec(**kw):
    base = dict(num_classes=4, samples_per_class=10, image_height=16, image_width=16, patch_size=4, cue_size=4)
    base.update(kw)
    return SyntheticSpec(**base)


def test_deterministic_in_spec_and_seed():
    a, b = gen_synthetic(small_spec(), 3), gen_synthetic(small_spec(), 3)
    assert a.train.images.tobytes() == b.train.images.tobytes()
    assert a.test.labels.tobytes() == b.test.labels.tobytes()
    assert gen_synthetic(small_spec(), 4).train.images.tobytes() != a.train.images.tobytes()


def test_split_is_stratified_80_20():
    ds = gen_synthetic(SyntheticSpec(), 0)
    assert len(ds.train) == 320 and len(ds.test) == 80
    assert np.bincount(ds.train.labels).tolist() == [40] * 8
    assert np.bincount(ds.test.labels).tolist() == [10] * 8


def test_pixels_are_8bit_levels_in_unit_range():
    px = gen_synthetic(small_spec(), 0).train.images
    assert px.dtype == np.float32 and px.min() >= 0 and px.max() <= 1
    levels = px.astype(np.float64) * 255
    np.testing.assert_allclose(levels, np.round(levels), atol=1e-4)


def test_cue_must_fit():
    with pytest.raises(ValueError):
        gen_synthetic(small_spec(cue_size=16), 0)
    with pytest.raises(ValueError):
        gen_synthetic(small_spec(samples_per_class=1), 0)


def test_default_jitter_is_one_patch():
    assert SyntheticSpec().jitter == SyntheticSpec().patch_size


def test_classes_share_background():
    spec = small_spec(cue_contrast=0.0, noise_std=0.0)
    ds = gen_synthetic(spec, 0)
    expected = np.floor(np.clip(_background(spec), 0, 1) * 255 + 0.5) / 255
    for img in ds.train.images[::7]:
        np.testing.assert_allclose(img[:, :, 0], expected, atol=1e-6)


def nearest_centroid_accuracy(ds, feats):
    train, test = feats(ds.train.images), feats(ds.test.images)
    cents = np.stack([train[ds.train.labels == c].mean(0) for c in range(ds.num_classes)])
    pred = ((test[:, None] - cents[None]) ** 2).sum(-1).argmin(1)
    return float((pred == ds.test.labels).mean())


def test_zero_contrast_is_chance():
    ds = gen_synthetic(SyntheticSpec(num_classes=2, samples_per_class=100, cue_contrast=0.0), 0)
    acc = nearest_centroid_accuracy(ds, lambda x: x.reshape(len(x), -1))
    assert 0.25 <= acc <= 0.75


def cue_oracle_predict(spec, images):
    """Knows the background, every class pattern and its jitter window."""
    bg = _background(spec)
    patterns, anchors = class_cues(spec)
    s, j = spec.cue_size, spec.jitter
    preds = []
    for img in images[:, :, :, 0]:
        best = (np.inf, -1)
        for c in range(spec.num_classes):
            for dr in range(-j, j + 1):
                for dc in range(-j, j + 1):
                    r0 = int(np.clip(anchors[c][0] + dr, 0, spec.image_height - s))
                    c0 = int(np.clip(anchors[c][1] + dc, 0, spec.image_width - s))
                    region = bg[r0 : r0 + s, c0 : c0 + s]
                    stamp = (1 - spec.cue_contrast) * region + spec.cue_contrast * patterns[c]
                    err = ((img[r0 : r0 + s, c0 : c0 + s] - stamp) ** 2).sum()
                    best = min(best, (err, c))
        preds.append(best[1])
    return np.array(preds)


def test_linear_probe_trails_cue_aware_oracle():
    spec = SyntheticSpec()
    ds = gen_synthetic(spec, 0)
    x = ds.train.images.reshape(len(ds.train), -1).astype(np.float64)
    xt = ds.test.images.reshape(len(ds.test), -1).astype(np.float64)
    onehot = np.eye(spec.num_classes)[ds.train.labels]
    xb = np.hstack([x, np.ones((len(x), 1))])
    w = np.linalg.solve(xb.T @ xb + 1.0 * np.eye(xb.shape[1]), xb.T @ onehot)
    probe = float((np.hstack([xt, np.ones((len(xt), 1))]) @ w).argmax(1).__eq__(ds.test.labels).mean())
    oracle = float((cue_oracle_predict(spec, ds.test.images) == ds.test.labels).mean())
    assert probe < oracle
    assert oracle >= 0.9


def test_save_load_round_trip(tmp_path):
    ds = gen_synthetic(small_spec(), 1)
    save_dataset(ds, tmp_path)
    lines = (tmp_path / "manifest.tsv").read_bytes().decode("utf-8").split("\n")
    assert lines[0] == "path\tlabel\tsplit" and lines[1].startswith("train/") and b"\r" not in (tmp_path / "manifest.tsv").read_bytes()
    back = load_dataset(tmp_path, 4)
    assert back.train.images.tobytes() == ds.train.images.tobytes()
    assert back.test.labels.tolist() == ds.test.labels.tolist()


def test_load_rejects_bad_manifest(tmp_path):
    (tmp_path / "manifest.tsv").write_text("path\tlabel\tsplit\nx.pgm\t0\tvalid\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_dataset(tmp_path)
