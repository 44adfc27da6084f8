"""Feature-tap classifiers: tap geometry, gradient flow, training gates."""

import numpy as np
import pytest

import gwnet.tensor as T
from gwnet import glyphs as G
from gwnet import percep as P
from gwnet.gradcheck import grad_check
from gwnet.tensor import Tensor


def pack_arrays(pack, styles):
    imgs, cs, ss = [], [], []
    for (s, c), img in sorted(pack.images.items()):
        if s in styles:
            imgs.append(img.pixels)
            cs.append(c - 1)
            ss.append(s - 1)
    return np.stack(imgs), np.array(cs), np.array(ss)


class TestTapGeometry:
    def test_tap_names_and_shapes_64(self, rng):
        net = P.TapClassifier(64, n_content=4, rng=np.random.default_rng(0))
        x = Tensor(rng.uniform(-1, 1, (2, 1, 64, 64)))
        feats = net.extract_features(x)
        assert set(feats) == set(P.TAP_NAMES)
        assert feats["phi1_2"].shape == (2, 16, 64, 64)  # pre-pool
        assert feats["phi2_2"].shape == (2, 32, 32, 32)
        assert feats["phi3_3"].shape == (2, 64, 16, 16)
        assert feats["phi4_3"].shape == (2, 128, 8, 8)
        assert feats["phi5_3"].shape == (2, 128, 4, 4)

    def test_subset_request(self, rng):
        net = P.TapClassifier(32, n_content=4, rng=np.random.default_rng(0))
        feats = net.extract_features(Tensor(rng.uniform(-1, 1, (1, 1, 32, 32))),
                                     taps=P.DEEP_TAPS)
        assert set(feats) == {"phi4_3", "phi5_3"}

    def test_unknown_tap_rejected(self, rng):
        net = P.TapClassifier(32, n_content=4, rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="unknown tap"):
            net.extract_features(Tensor(rng.uniform(-1, 1, (1, 1, 32, 32))),
                                 taps=["phi9_9"])

    def test_identical_inputs_identical_taps(self, rng):
        net = P.TapClassifier(32, n_content=4, rng=np.random.default_rng(0))
        x = rng.uniform(-1, 1, (1, 1, 32, 32))
        a = net.extract_features(Tensor(x))
        b = net.extract_features(Tensor(x))
        for tap in P.TAP_NAMES:
            assert np.array_equal(a[tap].data, b[tap].data)


class TestGradientFlow:
    def test_grad_check_through_taps(self, rng):
        net = P.TapClassifier(32, n_content=2, rng=np.random.default_rng(1))
        net.freeze()
        x = rng.uniform(-0.5, 0.5, (1, 1, 32, 32))

        def op(a):
            feats = net.extract_features(a, taps=["phi3_3"])
            return (feats["phi3_3"] * feats["phi3_3"]).mean()

        assert grad_check(op, [x]) < 1e-4

    def test_frozen_params_receive_no_gradients(self, rng):
        net = P.TapClassifier(32, n_content=2, rng=np.random.default_rng(1))
        net.freeze()
        x = Tensor(rng.uniform(-1, 1, (1, 1, 32, 32)), requires_grad=True)
        feats = net.extract_features(x, taps=["phi5_3"])
        feats["phi5_3"].sum().backward()
        assert x.grad is not None
        for _, p in net.named_parameters():
            assert p.grad is None


class TestTraining:
    def test_small_pack_gate(self, small_pack):
        imgs, cs, ss = pack_arrays(small_pack, small_pack.train_styles)
        trained = P.train_classifier(imgs, cs, ss, small_pack.size,
                                     n_content=small_pack.J,
                                     n_style=small_pack.I, epochs=40,
                                     batch=24, seed=5, dtype=np.float32)
        assert trained.content_accuracy >= 0.95
        assert trained.style_accuracy >= 0.95

    def test_permuted_labels_stay_at_chance(self, small_pack):
        imgs, cs, _ = pack_arrays(small_pack, small_pack.train_styles)
        rng = np.random.default_rng(0)
        shuffled = rng.permutation(cs)
        trained = P.train_classifier(imgs, shuffled, None, small_pack.size,
                                     n_content=small_pack.J, epochs=2,
                                     batch=24, seed=5, dtype=np.float32)
        # two epochs cannot memorize destroyed labels; near chance level
        assert trained.content_accuracy < 0.5

    def test_zero_epochs_chance_level(self, small_pack):
        imgs, cs, _ = pack_arrays(small_pack, small_pack.train_styles)
        trained = P.train_classifier(imgs, cs, None, small_pack.size,
                                     n_content=small_pack.J, epochs=0,
                                     seed=5, dtype=np.float32)
        assert trained.net is not None
        assert trained.content_accuracy < 0.5

    def test_single_class_rejected(self, small_pack):
        imgs, cs, _ = pack_arrays(small_pack, small_pack.train_styles)
        with pytest.raises(ValueError, match="2 distinct"):
            P.train_classifier(imgs, np.zeros_like(cs), None, small_pack.size,
                               n_content=small_pack.J, epochs=1)

    def test_deterministic_per_seed(self, small_pack):
        imgs, cs, _ = pack_arrays(small_pack, small_pack.train_styles)
        a = P.train_classifier(imgs, cs, None, small_pack.size,
                               n_content=small_pack.J, epochs=1, seed=9)
        b = P.train_classifier(imgs, cs, None, small_pack.size,
                               n_content=small_pack.J, epochs=1, seed=9)
        for (na, pa), (nb, pb) in zip(sorted(a.net.state_arrays().items()),
                                      sorted(b.net.state_arrays().items())):
            assert na == nb and np.array_equal(pa, pb)


class TestPersistence:
    def test_roundtrip(self, rng, tmp_path, small_pack):
        imgs, cs, _ = pack_arrays(small_pack, small_pack.train_styles)
        trained = P.train_classifier(imgs, cs, None, small_pack.size,
                                     n_content=small_pack.J, epochs=1, seed=3)
        path = str(tmp_path / "phi.gwnp")
        P.save_classifier(path, trained.net, {"role": "content"})
        loaded = P.load_classifier(path)
        x = rng.uniform(-1, 1, (2, 1, small_pack.size, small_pack.size))
        a = trained.net.extract_features(Tensor(x))
        b = loaded.extract_features(Tensor(x.astype(np.float64)))
        for tap in P.TAP_NAMES:
            assert np.allclose(a[tap].data, b[tap].data, atol=1e-6)

    def test_dtype_cast_on_load(self, tmp_path, small_pack):
        imgs, cs, _ = pack_arrays(small_pack, small_pack.train_styles)
        trained = P.train_classifier(imgs, cs, None, small_pack.size,
                                     n_content=small_pack.J, epochs=0, seed=3)
        path = str(tmp_path / "phi.gwnp")
        P.save_classifier(path, trained.net)
        loaded = P.load_classifier(path, dtype=np.float32)
        assert all(p.data.dtype == np.float32
                   for _, p in loaded.named_parameters())
