import colorsys
from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone

from kinseg.segmenter import (
    N_FEATURES,
    N_PARAMS,
    PixelSegmenter,
    SegmenterModel,
    TrainConfig,
    augment,
    extract_features,
    forward,
    hsv_to_rgb,
    infer,
    load_model,
    loss,
    loss_and_grad,
    rgb_to_hsv,
    save_model,
    threshold,
    train,
)


def two_tone(seed, shape=(48, 64), fg_frac=0.25, overlap=0.0):
    """Noisy two-colour frames with a random vertical band as foreground."""
    rng = np.random.default_rng(seed)
    H, W = shape
    lab = np.zeros(shape, bool)
    w = max(1, int(W * fg_frac))
    x0 = int(rng.integers(0, W - w))
    lab[:, x0:x0 + w] = True
    img = np.empty(shape + (3,))
    img[:] = (180, 100, 90)
    img[lab] = (70, 80, 100)
    img += rng.normal(0, 10 + 80 * overlap, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8), lab


def test_parameter_count():
    assert N_PARAMS == 449 and N_FEATURES == 12


def test_constant_image_features():
    f = extract_features(np.full((20, 25, 3), 77, np.uint8))
    assert f.shape == (20, 25, 12) and np.all(np.isfinite(f))
    np.testing.assert_allclose(f[..., 6:9], 0, atol=1e-7)
    assert np.all(f[..., 11] == 0)
    np.testing.assert_allclose(f[..., 9:11], 77 / 255)


def test_step_edge_gradient():
    img = np.zeros((10, 20, 3), np.uint8)
    img[:, 10:] = 200
    g = extract_features(img)[..., 11]
    assert set(np.argmax(g, axis=1)) <= {9, 10}
    assert g[:, 9].max() == g.max()


def test_features_deterministic_and_flip_equivariant():
    img = np.random.default_rng(0).integers(0, 256, (31, 40, 3), dtype=np.uint8)
    f = extract_features(img)
    assert np.array_equal(f, extract_features(img))
    np.testing.assert_allclose(extract_features(img[:, ::-1]), f[:, ::-1], atol=1e-12)
    np.testing.assert_allclose(extract_features(img[::-1]), f[::-1], atol=1e-12)


def test_hsv_matches_colorsys():
    rgb = np.random.default_rng(1).random((200, 3))
    ref = np.array([colorsys.rgb_to_hsv(*c) for c in rgb])
    np.testing.assert_allclose(rgb_to_hsv(rgb), ref, atol=1e-12)
    np.testing.assert_allclose(hsv_to_rgb(rgb_to_hsv(rgb)), rgb, atol=1e-12)


def test_forward_examples():
    f = np.random.default_rng(2).random((5, 7, N_FEATURES))
    _, p = forward(SegmenterModel.zeros(), f)
    assert p.shape == (5, 7) and np.all(p == 0.5)
    v = np.zeros(N_PARAMS)
    v[-1] = 10.0
    assert np.all(forward(SegmenterModel.from_vector(v), f)[1] > 0.9999)
    m = SegmenterModel.initialize(3)
    flat = f.reshape(-1, N_FEATURES)
    perm = np.random.default_rng(3).permutation(len(flat))
    np.testing.assert_allclose(forward(m, flat[perm])[1], forward(m, flat)[1][perm], rtol=1e-14)


def test_loss_examples():
    f = np.zeros((1, N_FEATURES))
    m = SegmenterModel.zeros()
    cfg = TrainConfig(weight_decay=0.0)
    assert loss(m, f, [1], cfg) == pytest.approx(3 * np.log(2), abs=1e-12)
    assert loss(m, f, [0], cfg) == pytest.approx(np.log(2), abs=1e-12)
    v = np.zeros(N_PARAMS)
    v[-1] = 40.0
    perfect = loss(SegmenterModel.from_vector(v), np.zeros((4, N_FEATURES)), [1, 1, 1, 1], cfg)
    assert 0 <= perfect <= 4 * 3 * abs(np.log(1 - 1e-12)) + 1e-15
    with pytest.raises(ValueError):
        loss(m, np.zeros((0, N_FEATURES)), [], cfg)


def test_l2_covers_every_parameter():
    v = np.random.default_rng(4).normal(size=N_PARAMS)
    m = SegmenterModel.from_vector(v)
    f = np.zeros((3, N_FEATURES))
    a = loss_and_grad(m, f, [0, 1, 0], 3.0, 0.0)[0]
    b = loss_and_grad(m, f, [0, 1, 0], 3.0, 1e-4)[0]
    assert b - a == pytest.approx(0.5e-4 * v @ v, rel=1e-9)


def test_gradient_small_sample():
    rng = np.random.default_rng(5)
    for _ in range(10):
        m = SegmenterModel.from_vector(rng.normal(0, 0.5, N_PARAMS))
        f = rng.random((6, N_FEATURES))
        y = rng.random(6) < 0.5
        _, g = loss_and_grad(m, f, y, 3.0, 1e-4)
        th = m.to_vector()
        num = np.empty(N_PARAMS)
        for i in range(N_PARAMS):
            e = np.zeros(N_PARAMS)
            e[i] = 1e-5
            num[i] = (loss_and_grad(SegmenterModel.from_vector(th + e), f, y, 3.0, 1e-4)[0]
                      - loss_and_grad(SegmenterModel.from_vector(th - e), f, y, 3.0, 1e-4)[0]) / 2e-5
        assert np.linalg.norm(g - num) / max(np.linalg.norm(g) + np.linalg.norm(num), 1e-12) < 1e-4


def test_threshold_and_constant_map():
    assert not threshold(np.full((4, 4), 0.4)).any()
    m = SegmenterModel.initialize(0)
    p = infer(m, np.full((9, 9, 3), 120, np.uint8))
    assert np.ptp(p) == 0


def test_augment_keeps_label_aligned():
    rng = np.random.default_rng(6)
    img, lab = two_tone(0)
    cfg = TrainConfig(color_jitter=False)
    for _ in range(10):
        a_img, a_lab = augment(img, lab, rng, cfg)
        assert a_img.shape[:2] == a_lab.shape == (43, 58)
        # foreground pixels are the bluish ones in this fixture
        blue = a_img[..., 2] > a_img[..., 0]
        assert (blue == a_lab).mean() > 0.97


def test_colour_jitter_bounds():
    rng = np.random.default_rng(7)
    img = np.random.default_rng(8).integers(30, 220, (20, 20, 3), dtype=np.uint8)
    cfg = TrainConfig(flips=False, crops=False, contrast_range=0.0, saturation_range=0.0)
    base = rgb_to_hsv(img / 255.0)
    for _ in range(20):
        out, _ = augment(img, np.zeros((20, 20), bool), rng, cfg)
        dh = (rgb_to_hsv(out)[..., 0] - base[..., 0] + 0.5) % 1.0 - 0.5
        assert np.abs(dh).max() <= 0.01 + 1e-9


def test_flip_consistent_loss():
    img, lab = two_tone(1)
    m = SegmenterModel.initialize(1)
    f = extract_features(img)
    flipped = loss(m, extract_features(img[:, ::-1]), lab[:, ::-1])
    assert flipped == pytest.approx(loss(m, f[:, ::-1], lab[:, ::-1]), rel=1e-12)
    assert flipped == pytest.approx(loss(m, f, lab), rel=1e-12)


def test_separable_training_and_determinism():
    frames = [two_tone(s) for s in range(3)]
    cfg = TrainConfig(epochs=200, batch_size=1024, seed=3)
    m1, hist = train([f[0] for f in frames], [f[1] for f in frames], cfg)
    acc = np.mean([(threshold(infer(m1, im)) == lb).mean() for im, lb in frames])
    assert acc >= 0.99
    assert hist[-1] < hist[0] and len(hist) == 200
    m2, _ = train([f[0] for f in frames], [f[1] for f in frames], cfg)
    assert np.array_equal(m1.to_vector(), m2.to_vector())


def test_fg_weight_raises_recall():
    def recall_for(delta, seed):
        tr = [two_tone(100 + seed * 10 + i, fg_frac=0.12, overlap=0.6) for i in range(3)]
        te = [two_tone(500 + seed * 10 + i, fg_frac=0.12, overlap=0.6) for i in range(2)]
        cfg = TrainConfig(epochs=150, batch_size=1024, fg_weight=delta, seed=seed)
        m, _ = train([t[0] for t in tr], [t[1] for t in tr], cfg)
        tp = sum((threshold(infer(m, im)) & lb).sum() for im, lb in te)
        return tp / sum(lb.sum() for _, lb in te)

    r3 = np.median([recall_for(3.0, s) for s in range(5)])
    r1 = np.median([recall_for(1.0, s) for s in range(5)])
    assert r3 >= r1


def test_weight_decay_shrinks():
    frames = [two_tone(s, overlap=0.3) for s in range(2)]
    base = TrainConfig(epochs=150, batch_size=512, seed=0)
    m0, _ = train([f[0] for f in frames], [f[1] for f in frames], replace(base, weight_decay=0.0))
    m1, _ = train([f[0] for f in frames], [f[1] for f in frames], base)
    assert np.linalg.norm(m1.to_vector()) <= np.linalg.norm(m0.to_vector())


def test_degenerate_labels_rejected():
    img, lab = two_tone(0)
    with pytest.raises(ValueError, match="nothing to learn"):
        train([img], [np.zeros_like(lab)], TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train([img], [lab[:10]], TrainConfig(epochs=1))


def test_model_file_roundtrip(tmp_path):
    m = SegmenterModel.initialize(9)
    cfg = TrainConfig(epochs=12)
    save_model(m, tmp_path / "m.bin", cfg, extra={"labels": "labels"})
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:8] == b"KSEGMLP\0" and len(raw) == 8 + 8 + 12 + 8 * N_PARAMS
    m2, meta = load_model(tmp_path / "m.bin")
    assert np.array_equal(m.to_vector(), m2.to_vector())
    assert meta["train_config"]["epochs"] == 12 and meta["labels"] == "labels"
    (tmp_path / "bad.bin").write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        load_model(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_model(tmp_path / "short.bin")


def test_estimator_api():
    frames = [two_tone(s) for s in range(2)]
    est = PixelSegmenter(epochs=60, batch_size=512, seed=1)
    assert clone(est).get_params() == est.get_params()
    est.fit([f[0] for f in frames], [f[1] for f in frames])
    assert est.predict(frames[0][0]).shape == frames[0][1].shape
    assert 0 <= est.score([f[0] for f in frames], [f[1] for f in frames]) <= 1
    with pytest.raises(Exception):
        PixelSegmenter().predict(frames[0][0])


def test_config_validation():
    for kw in ({"learning_rate": 0}, {"fg_weight": 0.5}, {"beta1": 1.0}, {"crop_fraction": 0},
               {"batch_size": 0}, {"weight_decay": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)
