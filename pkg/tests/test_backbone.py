"""Backbone tests: receptive field arithmetic, causality, block algebra."""

from types import SimpleNamespace

import numpy as np
import pytest

from peterrec import rng as rng_mod
from peterrec import tensor as T
from peterrec.backbone import BackboneConfig, ReservedIds, SequenceModel, pretrain_logits, receptive_field
from peterrec.errors import ConfigError, VocabularyError
from peterrec.gradcheck import check_gradients
from peterrec.tensor import Tensor


def small_cfg(**kw):
    base = dict(vocab_size=20, embed_dim=4, dilations=(1, 2), max_len=16)
    base.update(kw)
    return BackboneConfig(**base)


class TestConfig:
    def test_defaults_match_published_setup(self):
        cfg = BackboneConfig(vocab_size=1000)
        assert cfg.embed_dim == 256
        assert cfg.kernel_size == 3
        assert cfg.dilations == (1, 2, 4, 8) * 4
        assert cfg.num_blocks == 8
        assert cfg.causal is True

    @pytest.mark.parametrize(
        "kw",
        [
            dict(vocab_size=3),
            dict(vocab_size=10, embed_dim=0),
            dict(vocab_size=10, kernel_size=1),
            dict(vocab_size=10, dilations=(1, 2, 4)),
            dict(vocab_size=10, dilations=(1, 0)),
            dict(vocab_size=10, kernel_size=4, causal=False),
            dict(vocab_size=10, layer_order="relu_first"),
            dict(vocab_size=10, dropout=1.0),
            dict(vocab_size=10, max_len=0),
        ],
    )
    def test_invalid_configs_rejected(self, kw):
        with pytest.raises(ConfigError):
            BackboneConfig(**kw)

    def test_reserved_id_values(self):
        assert (ReservedIds.PAD, ReservedIds.MASK, ReservedIds.TCL, ReservedIds.FIRST_ITEM) == (0, 1, 2, 3)


class TestReceptiveField:
    def test_published_stack_sees_121(self):
        cfg = BackboneConfig(vocab_size=100, embed_dim=8)
        assert receptive_field(cfg) == 121

    def test_empty_stack_sees_one(self):
        assert receptive_field(small_cfg(dilations=())) == 1

    def test_single_layer_formula(self):
        # the formula alone; a real config needs an even layer count
        fake = SimpleNamespace(kernel_size=3, dilations=(1,))
        assert receptive_field(fake) == 3


class TestConvStackJacobian:
    def test_causal_support_is_exactly_the_receptive_field(self):
        """Pure conv stack, dilations {1,2,4,8}x4: output[t] touches inputs
        [t-120, t] and nothing later. Checked via one backward pass."""
        gen = rng_mod.split(33, "jacobian")
        k, n, t = 2, 130, 126
        dilations = (1, 2, 4, 8) * 4
        x = Tensor(gen.standard_normal((1, n, k)), requires_grad=True)
        with T.Tape() as tape:
            h = x
            for d in dilations:
                w = Tensor(gen.standard_normal((3, k, k)))
                h = T.conv1d_dilated(h, w, None, dilation=d, causal=True)
            loss = T.reduce_sum(h[:, t, :])
        tape.backward(loss)
        g = x.grad[0]
        assert np.all(g[t + 1 :] == 0.0), "gradient leaked to future positions"
        window = g[t - 120 : t + 1]
        assert window.shape[0] == 121
        assert np.all(np.abs(window).max(axis=1) > 0), "receptive field has holes"
        assert np.all(g[: t - 120] == 0.0), "gradient reached beyond the receptive field"


class TestBlockForward:
    def test_zero_conv_weights_make_identity(self):
        model = SequenceModel(small_cfg(), seed=3)
        for name in model.params.names():
            if ".conv" in name:
                model.params[name].data[:] = 0.0
        ids = np.array([[3, 4, 5, 6]])
        hidden = model.hidden(ids)
        assert np.array_equal(hidden.data, model.embed(ids).data)

    def test_hand_block_matches_64bit_reference(self):
        cfg = small_cfg(embed_dim=2, dilations=(1, 1))
        model = SequenceModel(cfg, seed=5)
        gen = rng_mod.split(5, "hand")
        x64 = gen.standard_normal((1, 4, 2))

        def ref_conv(x, w, b, dilation):
            pad = (w.shape[0] - 1) * dilation
            xp = np.concatenate([np.zeros((pad, x.shape[1])), x])
            out = np.zeros((x.shape[0], w.shape[2]))
            for tap in range(w.shape[0]):
                out += xp[tap * dilation : tap * dilation + x.shape[0]] @ w[tap]
            return out + b

        def ref_ln(x, g, b):
            mu = x.mean(axis=-1, keepdims=True)
            var = x.var(axis=-1, keepdims=True)
            return (x - mu) / np.sqrt(var + 1e-8) * g + b

        p = {name: model.params[name].data.astype(np.float64) for name in model.params.names()}
        h = x64[0]
        for i in (1, 2):
            h = ref_conv(h, p[f"block0.conv{i}.weight"], p[f"block0.conv{i}.bias"], 1)
            h = ref_ln(h, p[f"block0.ln{i}.gain"], p[f"block0.ln{i}.bias"])
            h = np.maximum(h, 0.0)
        expect = x64[0] + h

        got = model.block_forward(0, Tensor(x64.astype(np.float32))).data[0]
        assert np.allclose(got, expect, atol=1e-4)

    def test_block_gradients(self):
        cfg = small_cfg(embed_dim=4, dilations=(1, 2))
        gen = rng_mod.split(6, "blockgrad")
        x = gen.standard_normal((1, 3, 4))
        model = SequenceModel(cfg, seed=6, dtype=np.float64)

        def f(arrays):
            out = model.block_forward(0, arrays[0])
            return T.reduce_sum(T.mul(out, out))

        assert check_gradients(f, [x], rng=gen) < 1e-3

    def test_every_layer_order_runs_and_differs(self):
        ids = np.array([[3, 4, 5, 6, 7]])
        outs = []
        for order in ("conv_ln_relu", "ln_conv_relu", "conv_relu_ln"):
            model = SequenceModel(small_cfg(layer_order=order), seed=9)
            outs.append(model.hidden(ids).data)
        assert outs[0].shape == outs[1].shape == outs[2].shape
        assert not np.allclose(outs[0], outs[1])
        assert not np.allclose(outs[0], outs[2])


class TestFullForward:
    def test_zero_blocks_pass_embeddings_through(self):
        model = SequenceModel(small_cfg(dilations=()), seed=1)
        ids = np.array([[3, 5, 7]])
        assert np.array_equal(model.hidden(ids).data, model.embed(ids).data)

    def test_out_of_vocab_id(self):
        model = SequenceModel(small_cfg(), seed=1)
        with pytest.raises(VocabularyError):
            model.hidden(np.array([[3, 20]]))

    def test_causal_net_past_is_bit_identical(self):
        model = SequenceModel(small_cfg(dilations=(1, 2, 1, 2)), seed=2)
        gen = rng_mod.split(2, "causal")
        n = 8
        for _ in range(10):
            ids = gen.integers(3, 20, size=(1, n))
            t = int(gen.integers(1, n))
            bumped = ids.copy()
            bumped[0, t] = 3 + (bumped[0, t] - 3 + 1) % 17
            h1 = model.hidden(ids).data
            h2 = model.hidden(bumped).data
            assert np.array_equal(h1[0, :t], h2[0, :t])
            assert not np.array_equal(h1[0, t:], h2[0, t:])

    def test_noncausal_net_leaks_backward(self):
        model = SequenceModel(small_cfg(causal=False), seed=2)
        ids = np.array([[3, 4, 5, 6, 7, 8]])
        bumped = ids.copy()
        bumped[0, 4] = 12
        h1 = model.hidden(ids).data
        h2 = model.hidden(bumped).data
        assert not np.array_equal(h1[0, :4], h2[0, :4])

    def test_shapes_preserved_for_all_lengths(self):
        model = SequenceModel(small_cfg(), seed=4)
        for n in (1, 2, 7, 16):
            ids = np.full((2, n), 3)
            assert model.hidden(ids).data.shape == (2, n, 4)

    def test_padding_neutrality_beyond_receptive_field(self):
        cfg = small_cfg(dilations=(1, 2), max_len=32)  # receptive field 7
        model = SequenceModel(cfg, seed=7)
        core = np.array([3, 4, 5, 6, 7, 8, 9, 10])
        short = np.concatenate([np.zeros(2, dtype=int), core])[None]
        long = np.concatenate([np.zeros(12, dtype=int), core])[None]
        l1 = model.logits(model.hidden(short)).data[0, -1]
        l2 = model.logits(model.hidden(long)).data[0, -1]
        assert np.allclose(l1, l2, atol=1e-5)


class TestPretrainHead:
    def test_identity_head(self):
        hidden = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        out = pretrain_logits(hidden, Tensor(np.eye(2)))
        assert np.array_equal(out.data, hidden.data)

    def test_hand_2x2(self):
        hidden = Tensor(np.array([[1.0, 2.0]]))
        head = Tensor(np.array([[1.0, 0.0], [1.0, 1.0]]))
        assert np.allclose(pretrain_logits(hidden, head).data, [[3.0, 2.0]])

    def test_head_is_not_tied_to_embedding(self):
        model = SequenceModel(small_cfg(), seed=8)
        emb = model.params["embed.items"].data
        head = model.params["pretrain_head.weight"].data
        assert emb.shape == (20, 4) and head.shape == (4, 20)
        assert not np.allclose(emb, head.T)

    def test_gradcheck_through_logits(self):
        gen = rng_mod.split(10, "head")
        hidden = gen.standard_normal((2, 3, 4))
        head = gen.standard_normal((4, 6))
        err = check_gradients(lambda ps: T.reduce_sum(T.relu(pretrain_logits(ps[0], ps[1]))), [hidden, head], rng=gen)
        assert err < 1e-3


class TestDeterminism:
    def test_same_seed_same_parameters(self):
        a = SequenceModel(small_cfg(), seed=11)
        b = SequenceModel(small_cfg(), seed=11)
        for name in a.params.names():
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self):
        a = SequenceModel(small_cfg(), seed=11)
        b = SequenceModel(small_cfg(), seed=12)
        assert not np.array_equal(a.params["embed.items"].data, b.params["embed.items"].data)
