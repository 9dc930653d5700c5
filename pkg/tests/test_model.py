import json

import numpy as np
import pytest

from horde import sketch as S
from horde.losses import LossConfig, pair_feed
from horde.model import (BackboneConfig, CheckpointError, ConfigMismatchError, HordeModel, ModelConfig,
                         first_order_representation, horde_branch, load_checkpoint, save_checkpoint)
from horde.numkernel import finite_diff_check


def small_cfg(**kw):
    base = dict(backbone=BackboneConfig(filters=[3, 4, 5], strides=[2, 1, 1], input_shape=[6, 6]),
                embedding_dim=4, K=3, d=6, order_embedding_dim=3)
    base.update(kw)
    return ModelConfig(**base)


def images(n, hw=6, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, hw, hw, 1))


class TestConfig:
    def test_output_shape(self):
        bb = BackboneConfig()
        assert bb.output_hw == (7, 7) and bb.channels == 64

    def test_too_small_output(self):
        with pytest.raises(ValueError):
            BackboneConfig(filters=[4, 4], strides=[2, 2], input_shape=[6, 6])

    def test_bad_values(self):
        with pytest.raises(ValueError):
            ModelConfig(stack_mode="cascade")
        with pytest.raises(ValueError):
            ModelConfig(K=1)
        with pytest.raises(ValueError):
            ModelConfig(embedding_dim=1)


class TestBackbone:
    def test_default_shape(self):
        m = HordeModel(ModelConfig(), seed=0)
        out = m.run(images(2, 28), ("features",))["features"]
        assert out.shape == (2, 7, 7, 64)
        assert out.min() >= 0.0

    def test_zero_image_zero_final_conv(self):
        m = HordeModel(small_cfg(), seed=0)
        m.params["conv2.w"][...] = 0.0
        out = m.run(np.zeros((2, 6, 6, 1)), ("features",))["features"]
        assert not out.any()

    def test_shape_mismatch(self):
        m = HordeModel(small_cfg(), seed=0)
        with pytest.raises(ValueError):
            m.embed(np.zeros((2, 6, 6, 3)))

    def test_first_conv_gradient(self):
        m = HordeModel(small_cfg(), seed=1)
        g, _ = m.build_graph(loss_cfg=LossConfig(), outputs=("loss",))
        y = np.array([0, 0, 1, 1])
        g.forward({"images": images(4, seed=2), **pair_feed(y, "contrastive")})
        assert finite_diff_check(g, "conv0.w") <= 1e-5


class TestRepresentations:
    def test_first_order(self):
        v = np.array([0.3, -1.0, 2.0])
        np.testing.assert_allclose(first_order_representation(np.broadcast_to(v, (4, 5, 3))), v, rtol=1e-15)
        fmap = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        np.testing.assert_array_equal(first_order_representation(fmap), [0.5, 0.5])

    def test_zero_map_gives_normalized_bias(self):
        st_ = S.sample_rademacher(3, 5, 3, seed=0)
        b = np.array([3.0, 4.0])
        heads = {2: (np.ones((5, 2)), b), 3: (np.ones((5, 2)), b)}
        out = horde_branch(np.zeros((2, 2, 3)), st_, heads)
        for k in (2, 3):
            np.testing.assert_allclose(out[k], [0.6, 0.8], rtol=1e-15)

    def test_k2_single_output(self):
        st_ = S.sample_rademacher(3, 5, 2, seed=0)
        out = horde_branch(np.ones((2, 2, 3)), st_, {2: (np.ones((5, 2)), np.zeros(2))})
        assert list(out) == [2]

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            horde_branch(np.ones((2, 2, 4)), S.sample_rademacher(3, 5, 2, 0), {2: (np.ones((5, 2)), np.zeros(2))})

    def test_graph_matches_numpy_branch(self):
        m = HordeModel(small_cfg(), seed=3)
        x = images(2, seed=4)
        out = m.run(x, ("features", "moment2", "moment3", "order2", "order3"), include_horde=True)
        st_ = m.stack()
        heads = {k: (m.params[f"head{k}.w"], m.params[f"head{k}.b"]) for k in (2, 3)}
        for i in range(2):
            ref = horde_branch(out["features"][i], st_, heads)
            for k in (2, 3):
                np.testing.assert_allclose(out[f"moment{k}"][i],
                                           S.empirical_moment_sketch(out["features"][i].reshape(-1, 5), st_, k),
                                           rtol=1e-12, atol=1e-15)
                np.testing.assert_allclose(out[f"order{k}"][i], ref[k], rtol=1e-12, atol=1e-15)

    def test_cyclic_shift_invariance(self):
        # integer features and d=4 keep every sum exact
        st_ = S.sample_rademacher(3, 4, 3, seed=1)
        fmap = np.random.default_rng(0).integers(0, 4, size=(4, 5, 3)).astype(float)
        shifted = np.roll(fmap, shift=(1, 2), axis=(0, 1))
        assert np.array_equal(first_order_representation(fmap), first_order_representation(shifted))
        for k in (2, 3):
            a = S.empirical_moment_sketch(fmap.reshape(-1, 3), st_, k)
            b = S.empirical_moment_sketch(shifted.reshape(-1, 3), st_, k)
            assert np.array_equal(a, b)


class TestModes:
    def test_frozen_has_no_sketch_parameters(self):
        m = HordeModel(small_cfg(stack_mode="frozen"), seed=0)
        assert m.sketch_parameter_count() == 0 and m.buffers
        g, _ = m.build_graph()
        assert not any(n.startswith("sketch") for n in g.params)

    def test_parameter_counts(self):
        c, d, K = 5, 6, 3
        casc = HordeModel(small_cfg(stack_mode="trainable-cascaded"), seed=0).sketch_parameter_count()
        unc = HordeModel(small_cfg(stack_mode="trainable-uncascaded"), seed=0).sketch_parameter_count()
        assert casc == K * c * d and unc == (2 + 3) * c * d

    def test_shared_init_with_baseline(self):
        a = HordeModel(small_cfg(horde=True), seed=9)
        b = HordeModel(small_cfg(horde=False), seed=9)
        for name, v in b.params.items():
            assert np.array_equal(a.params[name], v)

    @pytest.mark.parametrize("mode", ["frozen", "trainable-uncascaded", "trainable-cascaded"])
    def test_objective_gradient_all_modes(self, mode):
        m = HordeModel(small_cfg(stack_mode=mode), seed=2)
        g, _ = m.build_graph(loss_cfg=LossConfig(), outputs=("loss",))
        y = np.array([0, 0, 1, 1])
        g.forward({"images": images(4, seed=5), **pair_feed(y, "contrastive")})
        names = ["conv2.w", "head2.w", "embed.w"]
        names += {"frozen": [], "trainable-uncascaded": ["sketch.o3.W2"], "trainable-cascaded": ["sketch.W3"]}[mode]
        for n in names:
            assert finite_diff_check(g, n, max_entries=12) <= 1e-5


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = HordeModel(small_cfg(stack_mode="frozen"), seed=4)
        save_checkpoint(m, tmp_path / "ck", step=17)
        loaded, manifest = load_checkpoint(tmp_path / "ck", expected=m.cfg)
        assert manifest["step"] == 17 and manifest["seeds"]["model"] == 4
        assert set(loaded.tensors()) == set(m.tensors())
        for name, v in m.tensors().items():
            assert loaded.tensors()[name].tobytes() == v.tobytes()
        x = images(3, seed=1)
        assert np.array_equal(loaded.embed(x), m.embed(x))
        save_checkpoint(loaded, tmp_path / "ck2", step=17)
        assert (tmp_path / "ck" / "model.bin").read_bytes() == (tmp_path / "ck2" / "model.bin").read_bytes()

    def test_offsets_partition_blob(self, tmp_path):
        m = HordeModel(small_cfg(), seed=0)
        save_checkpoint(m, tmp_path)
        man = json.loads((tmp_path / "model.json").read_text())
        end = 0
        for e in man["tensors"]:
            assert e["offset"] == end
            end += e["nbytes"]
        assert end == (tmp_path / "model.bin").stat().st_size

    def test_truncated(self, tmp_path):
        save_checkpoint(HordeModel(small_cfg(), seed=0), tmp_path)
        blob = (tmp_path / "model.bin").read_bytes()
        (tmp_path / "model.bin").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path)

    def test_config_mismatch(self, tmp_path):
        save_checkpoint(HordeModel(ModelConfig(K=4), seed=0), tmp_path)
        with pytest.raises(ConfigMismatchError, match="K"):
            load_checkpoint(tmp_path, expected=ModelConfig(K=5))

    def test_corrupt_manifest(self, tmp_path):
        save_checkpoint(HordeModel(small_cfg(), seed=0), tmp_path)
        (tmp_path / "model.json").write_text("{not json")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)

    def test_shape_tampering(self, tmp_path):
        save_checkpoint(HordeModel(small_cfg(), seed=0), tmp_path)
        man = json.loads((tmp_path / "model.json").read_text())
        man["config"]["embedding_dim"] = 5
        (tmp_path / "model.json").write_text(json.dumps(man))
        with pytest.raises(ConfigMismatchError):
            load_checkpoint(tmp_path)
