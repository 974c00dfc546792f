import numpy as np
import pytest

from poq.errors import ConfigError
from poq.mixup import (Batch, MixupConfig, MixupMode, apply_mixup, hard_mixup,
                       restricted_hard_mixup, soft_mixup)


def make_batch(n=4, c=5, epoch=0, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(n, 4, 4, 3)).astype(np.float32)
    labels = [frozenset(rng.choice(c, size=int(rng.integers(1, 3)), replace=False).tolist())
              for _ in range(n)]
    return Batch(images, labels, c, epoch)


class TestRestrictedHard:
    def test_four_sample_construction(self):
        b = make_batch(4)
        i, t = b.images, b.labels
        out = restricted_hard_mixup(b)
        np.testing.assert_array_equal(out.images[0], (i[0] + i[2]) / 2)
        np.testing.assert_array_equal(out.images[1], (i[1] + i[3]) / 2)
        np.testing.assert_array_equal(out.images[2], i[2])
        np.testing.assert_array_equal(out.images[3], i[3])
        assert out.labels == [t[0] | t[2], t[1] | t[3], t[2], t[3]]

    def test_identical_halves_unchanged(self):
        b = make_batch(2)
        b = Batch(np.concatenate([b.images, b.images]), b.labels * 2, b.num_classes)
        out = restricted_hard_mixup(b)
        np.testing.assert_array_equal(out.images, b.images)
        assert out.labels == b.labels

    @pytest.mark.parametrize("n", [2, 6, 32])
    def test_only_first_half_modified(self, n):
        b = make_batch(n, seed=n)
        out = restricted_hard_mixup(b)
        assert out.images[n // 2:].tobytes() == b.images[n // 2:].tobytes()
        assert out.labels[n // 2:] == b.labels[n // 2:]
        for k in range(n // 2):
            assert len(out.labels[k]) >= max(len(b.labels[k]), len(b.labels[k + n // 2]))

    def test_applied_every_epoch(self):
        for epoch in range(3):
            b = make_batch(4, epoch=epoch)
            assert restricted_hard_mixup(b).labels[0] == b.labels[0] | b.labels[2]

    def test_odd_batch_rejected(self):
        with pytest.raises(ConfigError):
            restricted_hard_mixup(make_batch(3))


class TestHard:
    def test_even_epoch_identity(self):
        b = make_batch(6, epoch=4)
        assert hard_mixup(b, MixupConfig("hard"), np.random.default_rng(0)) is b

    def test_odd_epoch_mixes_everything(self):
        b = make_batch(6, epoch=3)
        out = hard_mixup(b, MixupConfig("hard"), np.random.default_rng(0))
        for k in range(6):
            matches = [j for j in range(6) if j != k
                       and np.array_equal(out.images[k], (b.images[k] + b.images[j]) / 2)]
            assert matches, f"sample {k} is not an average with another sample"
            assert out.labels[k] == b.labels[k] | b.labels[matches[0]]

    def test_union(self):
        b = Batch(np.zeros((2, 1, 1, 3)), [frozenset({0}), frozenset({0, 1})], 2, epoch=1)
        out = hard_mixup(b, MixupConfig("hard"), np.random.default_rng(0))
        assert out.labels == [frozenset({0, 1}), frozenset({0, 1})]

    def test_pixel_average_exact(self):
        imgs = np.zeros((2, 1, 1, 3), dtype=np.float32)
        imgs[0] = 0.8
        imgs[1] = 0.4
        b = Batch(imgs, [frozenset({0}), frozenset({1})], 2, epoch=1)
        out = hard_mixup(b, MixupConfig("hard"), np.random.default_rng(0))
        np.testing.assert_array_equal(out.images, np.full((2, 1, 1, 3), np.float32(0.6)))


class TestSoft:
    def test_lambda_one_is_identity(self):
        b = make_batch(4)
        out = soft_mixup(b, MixupConfig("soft"), np.random.default_rng(0), lam=1.0)
        np.testing.assert_array_equal(out.images, b.images)
        np.testing.assert_array_equal(out.weights, b.label_matrix())

    def test_half_weights(self):
        b = Batch(np.zeros((2, 1, 1, 3)), [frozenset({0}), frozenset({1})], 2)
        out = soft_mixup(b, MixupConfig("soft"), np.random.default_rng(0), lam=0.5)
        np.testing.assert_array_equal(out.weights, [[0.5, 0.5], [0.5, 0.5]])

    def test_pixel_arithmetic(self):
        imgs = np.array([0.8, 0.4]).reshape(2, 1, 1, 1)
        b = Batch(imgs, [frozenset({0}), frozenset({1})], 2)
        out = soft_mixup(b, MixupConfig("soft"), np.random.default_rng(0), lam=0.25)
        assert out.images[0, 0, 0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_labels_are_the_image_convex_combination(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            b = make_batch(8, seed=trial)
            out = soft_mixup(b, MixupConfig("soft", alpha=0.4), rng)
            x = b.images.reshape(8, -1).astype(np.float64)
            t = b.label_matrix()
            assert ((out.weights >= 0) & (out.weights <= 1)).all()
            for k in range(8):
                # recover partner and lambda from the pixels: out_k - x_j = lam (x_k - x_j)
                y = out.images[k].reshape(-1).astype(np.float64)
                fits = []
                for j in range(8):
                    if j != k:
                        d = x[k] - x[j]
                        lam = d @ (y - x[j]) / (d @ d)
                        fits.append((np.abs(y - x[j] - lam * d).max(), j, lam))
                err, j, lam = min(fits)
                assert err < 1e-6 and -1e-6 <= lam <= 1 + 1e-6
                np.testing.assert_allclose(out.weights[k], lam * t[k] + (1 - lam) * t[j], atol=1e-5)

    def test_sum_identity_with_fixed_lambda(self):
        b = make_batch(6, seed=9)
        lam = np.linspace(0.1, 0.9, 6)
        rng = np.random.default_rng(3)
        out = soft_mixup(b, MixupConfig("soft"), rng, lam=lam)
        partners = (np.arange(6) + np.random.default_rng(3).integers(1, 6, size=6)) % 6
        t = b.label_matrix()
        np.testing.assert_array_equal(out.weights, lam[:, None] * t + (1 - lam[:, None]) * t[partners])
        np.testing.assert_allclose(out.weights.sum(1), lam * t.sum(1) + (1 - lam) * t[partners].sum(1),
                                   atol=1e-15)

    def test_alpha_must_be_positive(self):
        with pytest.raises(ConfigError):
            MixupConfig("soft", alpha=0.0)
        with pytest.raises(ConfigError):
            soft_mixup(make_batch(2), MixupConfig("none", alpha=-1.0), np.random.default_rng(0))


def test_never_self_paired():
    rng = np.random.default_rng(0)
    b = make_batch(2, epoch=1)
    for _ in range(20):
        out = hard_mixup(b, MixupConfig("hard"), rng)
        assert out.labels[0] == out.labels[1] == b.labels[0] | b.labels[1]


@pytest.mark.parametrize("mode", ["soft", "hard"])
def test_same_seed_same_draws(mode):
    b = make_batch(8, epoch=1)
    cfg = MixupConfig(mode)
    a = apply_mixup(b, cfg, np.random.default_rng(11))
    c = apply_mixup(b, cfg, np.random.default_rng(11))
    assert a.images.tobytes() == c.images.tobytes()
    assert a.labels == c.labels


def test_dispatch_none_is_identity():
    b = make_batch(4)
    assert apply_mixup(b, MixupConfig(), np.random.default_rng(0)) is b
    assert MixupConfig(None).mode is MixupMode.NONE
    with pytest.raises(ConfigError):
        MixupConfig("cutmix")
