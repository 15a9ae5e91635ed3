import numpy as np
import pytest

import atseg.model as M
import atseg.tensor as T
from atseg.checkpoint import load_checkpoint, save_checkpoint
from atseg.errors import BadMagicError, ConfigError, DataError
from atseg.gradcheck import TINY, full_model_grad_check
from atseg.losses import one_hot, soft_dice_loss
from atseg.model import (AttentionRecord, Hyperparams, embed_sequence, ffn,
                         forward, init_weights, msa, parameter_count,
                         partition_block, assemble_block, segmentation_head,
                         pretraining_head, sinusoidal_table)
from atseg.tensor import Tensor, grad_check

SMALL = Hyperparams(W=6, n=3, c=1, K=2, D=8, D_h=4, n_h=2, n_class=2)


class TestHyperparams:
    def test_defaults_are_full_scale(self):
        hp = Hyperparams()
        assert (hp.K, hp.W, hp.n, hp.D, hp.D_h, hp.n_h) == (7, 24, 3, 1024, 256, 4)
        assert hp.w == 8 and hp.N == 27 and hp.center_index == 13

    def test_divisibility(self):
        with pytest.raises(ConfigError):
            Hyperparams(W=25, n=3)

    def test_odd_n(self):
        with pytest.raises(ConfigError):
            Hyperparams(W=24, n=2)

    def test_bad_modes(self):
        with pytest.raises(ConfigError):
            Hyperparams(pos_mode="other")
        with pytest.raises(ConfigError):
            Hyperparams(head_mode="tokens")


class TestPartition:
    def test_full_scale_patch_count(self):
        hp = Hyperparams(W=24, n=3, c=1)
        block = np.random.default_rng(0).normal(size=(24, 24, 24, 1))
        patches = partition_block(block, hp)
        assert patches.shape == (27, 512)

    def test_single_patch(self):
        hp = Hyperparams(W=8, n=1, c=2)
        block = np.random.default_rng(1).normal(size=(8, 8, 8, 2))
        patches = partition_block(block, hp)
        assert patches.shape == (1, 8 ** 3 * 2)
        np.testing.assert_array_equal(patches[0], block.ravel())

    def test_reconstruction_is_exact(self):
        hp = Hyperparams(W=12, n=3, c=2)
        block = np.random.default_rng(2).normal(size=(12, 12, 12, 2))
        np.testing.assert_array_equal(assemble_block(partition_block(block, hp), hp), block)

    def test_wrong_block_shape(self):
        hp = Hyperparams(W=12, n=3)
        with pytest.raises(Exception):
            partition_block(np.zeros((10, 12, 12, 1)), hp)

    def test_center_patch_offsets(self):
        hp = Hyperparams(W=24, n=3)
        assert M.patch_voxel_origin(hp.center_index, hp) == (8, 8, 8)


class TestEmbed:
    def test_zero_patches_give_positional_table(self):
        hp = SMALL
        weights = init_weights(hp, 0)
        weights.pos.data = np.random.default_rng(3).normal(size=(hp.D, hp.N))
        x = embed_sequence(np.zeros((hp.N, hp.patch_len)), weights, hp)
        np.testing.assert_array_equal(x.data, weights.pos.data)

    def test_identity_embedding_without_positions(self):
        hp = Hyperparams(W=6, n=3, c=1, K=1, D=8, D_h=4, n_h=2, pos_mode="none")
        weights = init_weights(hp, 0)
        weights.embed.data = np.eye(8)
        patches = np.random.default_rng(4).normal(size=(hp.N, 8))
        x = embed_sequence(patches, weights, hp)
        np.testing.assert_allclose(x.data, patches.T)

    def test_fixed_mode_adds_sinusoidal_table(self):
        hp = SMALL.with_overrides(pos_mode="fixed")
        weights = init_weights(hp, 0)
        assert weights.pos is None
        x = embed_sequence(np.zeros((hp.N, hp.patch_len)), weights, hp)
        np.testing.assert_allclose(x.data, sinusoidal_table(hp.D, hp.N))

    def test_paper_scale_shapes(self):
        hp = Hyperparams(W=24, n=3, c=1, K=1, D=1024, D_h=256, n_h=4)
        weights = init_weights(hp, 0)
        assert weights.embed.shape == (1024, 512)
        x = embed_sequence(np.zeros((27, 512)), weights, hp)
        assert x.shape == (1024, 27)


class TestMsa:
    def test_single_token_attention_is_one(self):
        hp = Hyperparams(W=4, n=1, c=1, K=1, D=6, D_h=3, n_h=2)
        weights = init_weights(hp, 1)
        x = Tensor(np.random.default_rng(5).normal(size=(6, 1)))
        _, attns = msa(x, weights.stages[0], hp)
        for a in attns:
            np.testing.assert_allclose(a, [[1.0]])

    def test_identical_tokens_give_uniform_rows(self):
        hp = SMALL
        weights = init_weights(hp, 2)
        token = np.random.default_rng(6).normal(size=(hp.D, 1))
        x = Tensor(np.repeat(token, hp.N, axis=1))
        _, attns = msa(x, weights.stages[0], hp)
        for a in attns:
            np.testing.assert_allclose(a, np.full((hp.N, hp.N), 1.0 / hp.N), atol=1e-12)

    def test_output_token_is_attention_weighted_value_sum(self):
        hp = Hyperparams(W=4, n=1, c=1, K=1, D=4, D_h=2, n_h=1, norm_mode="off")
        # n=1 means A=[[1]]: the MSA output must be reproj @ V + residual.
        weights = init_weights(hp, 3)
        x_val = np.random.default_rng(7).normal(size=(4, 1))
        out, _ = msa(Tensor(x_val), weights.stages[0], hp)
        head = weights.stages[0].heads[0]
        v = head.v.data @ x_val
        expected = weights.stages[0].reproj.data @ v + x_val
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestFfn:
    def test_zero_hidden_path_is_identity(self):
        hp = SMALL.with_overrides(norm_mode="off")
        weights = init_weights(hp, 4)
        stage = weights.stages[0]
        stage.ffn.w1.data[:] = 0.0
        stage.ffn.b1.data[:] = 0.0
        stage.ffn.b2.data[:] = 0.0
        x = np.random.default_rng(8).normal(size=(hp.D, hp.N))
        out = ffn(Tensor(x), stage, hp)
        np.testing.assert_array_equal(out.data, x)

    def test_constant_shift(self):
        hp = SMALL.with_overrides(norm_mode="off")
        weights = init_weights(hp, 4)
        stage = weights.stages[0]
        stage.ffn.w2.data[:] = 0.0
        shift = np.random.default_rng(9).normal(size=hp.D)
        stage.ffn.b2.data = shift.copy()
        x = np.random.default_rng(10).normal(size=(hp.D, hp.N))
        out = ffn(Tensor(x), stage, hp)
        np.testing.assert_allclose(out.data, x + shift[:, None], atol=1e-12)

    def test_gradient_matches_fd(self):
        hp = Hyperparams(W=4, n=1, c=1, K=1, D=5, D_h=2, n_h=1, norm_mode="off")
        weights = init_weights(hp, 11)
        stage = weights.stages[0]
        x = np.random.default_rng(12).normal(size=(hp.D, hp.N))
        report = grad_check(lambda: T.sum_all(ffn(Tensor(x), stage, hp)),
                            {"w1": stage.ffn.w1, "b1": stage.ffn.b1,
                             "w2": stage.ffn.w2, "b2": stage.ffn.b2}, h=1e-3)
        assert report.max_rel_err < 1e-4, report.summary()


class TestHeads:
    def test_voxel_head_shapes_and_normalization(self):
        hp = SMALL
        weights = init_weights(hp, 13)
        x = Tensor(np.random.default_rng(14).normal(size=(hp.D, hp.N)))
        probs = segmentation_head(x, weights, hp)
        assert probs.shape == (hp.w ** 3, hp.n_class)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)

    def test_patch_head_shape(self):
        hp = SMALL.with_overrides(head_mode="patch")
        weights = init_weights(hp, 15)
        x = Tensor(np.random.default_rng(16).normal(size=(hp.D, hp.N)))
        probs = segmentation_head(x, weights, hp)
        grid = M.probs_to_grid(probs.data, hp)
        assert probs.shape == (hp.N, hp.n_class)
        assert grid.shape == (3, 3, 3, 2)
        np.testing.assert_allclose(grid.sum(axis=3), 1.0, atol=1e-6)

    def test_zero_head_gives_uniform_probabilities(self):
        hp = SMALL
        weights = init_weights(hp, 17)
        weights.seg_head.w.data[:] = 0.0
        weights.seg_head.b.data[:] = 0.0
        x = Tensor(np.random.default_rng(18).normal(size=(hp.D, hp.N)))
        probs = segmentation_head(x, weights, hp)
        np.testing.assert_allclose(probs.data, 0.5, atol=1e-12)

    def test_pretraining_head_constant_output(self):
        hp = SMALL
        weights = init_weights(hp, 19, pretrain_head=True)
        weights.pre_head.w.data[:] = 0.0
        value = np.random.default_rng(20).normal(size=hp.patch_len)
        weights.pre_head.b.data = value.copy()
        x = Tensor(np.random.default_rng(21).normal(size=(hp.D, hp.N)))
        out = pretraining_head(x, weights, hp)
        np.testing.assert_allclose(out.data, value, atol=1e-12)

    def test_missing_head_raises(self):
        hp = SMALL
        weights = init_weights(hp, 22)
        with pytest.raises(ConfigError):
            pretraining_head(Tensor(np.zeros((hp.D, hp.N))), weights, hp)


class TestForward:
    def test_deterministic(self):
        hp = SMALL
        weights = init_weights(hp, 23)
        block = np.random.default_rng(24).normal(size=(hp.W, hp.W, hp.W, hp.c))
        out1, _ = forward(block, weights, hp)
        out2, _ = forward(block, weights, hp)
        np.testing.assert_array_equal(out1, out2)

    def test_attention_record_shape_and_stochasticity(self):
        hp = SMALL
        weights = init_weights(hp, 25)
        block = np.random.default_rng(26).normal(size=(hp.W, hp.W, hp.W, hp.c))
        _, record = forward(block, weights, hp, capture_attention=True)
        assert record.count == hp.K * hp.n_h
        for _, _, a in record.matrices():
            assert a.shape == (hp.N, hp.N)
            np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(a >= 0.0) and np.all(a <= 1.0)

    def test_record_absent_unless_requested(self):
        hp = SMALL
        weights = init_weights(hp, 27)
        block = np.zeros((hp.W, hp.W, hp.W, hp.c))
        _, record = forward(block, weights, hp, capture_attention=False)
        assert record is None

    def test_permutation_equivariance_without_positions(self):
        hp = SMALL.with_overrides(pos_mode="none")
        weights = init_weights(hp, 28)
        rng = np.random.default_rng(29)
        x = rng.normal(size=(hp.D, hp.N))
        base = M.encode(Tensor(x), weights, hp).data
        for _ in range(5):
            perm = rng.permutation(hp.N)
            permuted = M.encode(Tensor(x[:, perm]), weights, hp).data
            assert np.abs(permuted - base[:, perm]).max() < 1e-6


class TestInitAndCount:
    def test_seed_determinism(self):
        a = init_weights(SMALL, 31).named()
        b = init_weights(SMALL, 31).named()
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_different_seeds_differ(self):
        a = init_weights(SMALL, 31)
        b = init_weights(SMALL, 32)
        assert not np.array_equal(a.embed.data, b.embed.data)

    def test_biases_and_positions_start_at_zero(self):
        w = init_weights(SMALL, 33)
        np.testing.assert_array_equal(w.pos.data, 0.0)
        np.testing.assert_array_equal(w.stages[0].ffn.b1.data, 0.0)
        np.testing.assert_array_equal(w.seg_head.b.data, 0.0)

    @pytest.mark.parametrize("hp,pre", [
        (SMALL, False),
        (SMALL, True),
        (SMALL.with_overrides(pos_mode="none", norm_mode="off"), False),
        (SMALL.with_overrides(head_mode="patch"), False),
        (Hyperparams(W=10, n=5, c=2, K=3, D=16, D_h=4, n_h=3, n_class=4, d_ff=24), True),
    ])
    def test_parameter_count_matches_shape_walk(self, hp, pre):
        weights = init_weights(hp, 34, pretrain_head=pre)
        walked = sum(t.data.size for t in weights.named().values())
        assert walked == parameter_count(hp, pretrain_head=pre)


class TestFullModelGradients:
    def test_post_norm_full_model_fd(self):
        # Layer-norm path verified at a finer step than the acceptance run.
        hp = TINY.with_overrides(K=1, norm_mode="post")
        report = full_model_grad_check(hp, seed=0, objective="dice", h=1e-4)
        assert report.max_rel_err < 1e-4, report.summary()

    def test_pretraining_loss_fd(self):
        hp = TINY.with_overrides(K=1)
        report = full_model_grad_check(hp, seed=0, objective="l2", h=1e-4)
        assert report.max_rel_err < 1e-4, report.summary()


class TestCheckpoint:
    def test_roundtrip_values_and_bytes(self, tmp_path):
        weights = init_weights(SMALL, 35, pretrain_head=True)
        path = tmp_path / "model.atsg"
        save_checkpoint(path, weights)
        loaded = load_checkpoint(path)
        assert loaded.hp == SMALL
        for name, t in weights.named().items():
            np.testing.assert_array_equal(t.data, loaded.named()[name].data)
        path2 = tmp_path / "model2.atsg"
        save_checkpoint(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_pretrain_head_presence_is_persisted(self, tmp_path):
        with_head = init_weights(SMALL, 36, pretrain_head=True)
        save_checkpoint(tmp_path / "a.atsg", with_head)
        assert load_checkpoint(tmp_path / "a.atsg").pre_head is not None
        without = init_weights(SMALL, 36)
        save_checkpoint(tmp_path / "b.atsg", without)
        assert load_checkpoint(tmp_path / "b.atsg").pre_head is None
        manifest = (tmp_path / "b.atsg").read_bytes().split(b"\nend\n")[0]
        assert b"pre_head" not in manifest

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.atsg"
        path.write_bytes(b"NOPE1\nwhatever")
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "model.atsg"
        save_checkpoint(path, init_weights(SMALL, 37))
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(DataError):
            load_checkpoint(path)
