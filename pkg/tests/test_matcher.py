import numpy as np
import pytest
from hypothesis import given, strategies as st

from iscmatch.errors import ArgumentError, FormatError, LengthError, SizeError
from iscmatch.imaging import Image, make_training_images, resize_bilinear
from iscmatch.learning.gradcheck import check_matcher_gradients
from iscmatch.learning.matcher import (
    PARAM_NAMES,
    MatcherConfig,
    PairExample,
    TinyMatcherParams,
    attention_weights,
    concat_pair,
    dumps_matcher,
    forward_tokens,
    loads_matcher,
    make_pair_examples,
    patchify,
    tiny_matcher_backward,
    tiny_matcher_forward,
    to_tokens,
    train_tiny_matcher,
)
from iscmatch.rng import Rng64

CFG = MatcherConfig()


def pair_image(seed: int) -> Image:
    return Image(np.random.default_rng(seed).integers(0, 256, (16, 32, 3), dtype=np.uint8))


def identity_augment(img, rng):
    return img, None


@pytest.fixture(scope="module")
def examples():
    images = list(make_training_images(24, 3).values())
    return make_pair_examples(images, Rng64(4))


class TestInputs:
    def test_default_shapes(self):
        shapes = CFG.shapes()
        assert CFG.tokens == 32 and CFG.patch_dim == 16
        assert shapes["patch_embed"] == (16, 16) and shapes["pos"] == (32, 16)
        assert shapes["w1"] == (32, 16) and shapes["w2"] == (16, 32) and shapes["head_b"] == ()

    def test_concat_halves(self):
        gen = np.random.default_rng(0)
        a = Image(gen.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        b = Image(gen.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        out = concat_pair(a, b, 32, 16)
        assert np.array_equal(out.pixels[:, :16], a.pixels)
        assert np.array_equal(out.pixels[:, 16:], b.pixels)
        same = concat_pair(a, a, 32, 16)
        assert np.array_equal(same.pixels[:, :16], same.pixels[:, 16:])

    def test_concat_resizes_each_half(self):
        a = Image(np.random.default_rng(1).integers(0, 256, (40, 30, 3), dtype=np.uint8))
        out = concat_pair(a, a, 224, 224)
        assert (out.width, out.height) == (224, 224)
        assert np.array_equal(out.pixels[:, :112], resize_bilinear(a, 112, 224).pixels)

    def test_concat_odd_width(self):
        with pytest.raises(ArgumentError):
            concat_pair(pair_image(0), pair_image(1), 31, 16)

    def test_patchify_row_major(self):
        gray = np.arange(8 * 8, dtype=float).reshape(8, 8)
        toks = patchify(gray, 4)
        assert toks.shape == (4, 16)
        np.testing.assert_array_equal(toks[1], gray[0:4, 4:8].ravel())
        np.testing.assert_array_equal(toks[2], gray[4:8, 0:4].ravel())

    def test_wrong_size(self):
        with pytest.raises(SizeError):
            to_tokens(Image.constant(16, 16, (0, 0, 0)), CFG)


class TestForward:
    def test_zero_network_gives_bias(self):
        params = TinyMatcherParams.zeros()
        params.blocks["head_b"] = np.asarray(0.37)
        assert tiny_matcher_forward(params, pair_image(0)) == 0.37

    def test_different_inputs_different_logits(self):
        params = TinyMatcherParams.init(Rng64(1), scale=0.5)
        logits = {tiny_matcher_forward(params, pair_image(s)) for s in range(10)}
        assert len(logits) == 10

    def test_position_sensitive(self):
        params = TinyMatcherParams.init(Rng64(2), scale=0.5)
        img = pair_image(3)
        before = tiny_matcher_forward(params, img)
        params.blocks["pos"] = params["pos"][np.random.default_rng(0).permutation(CFG.tokens)]
        assert tiny_matcher_forward(params, img) != before

    def test_attention_rows_and_global_reach(self):
        params = TinyMatcherParams.init(Rng64(3), scale=1.0)
        a = attention_weights(params, to_tokens(pair_image(4), CFG)[None])[0]
        assert a.shape == (32, 32)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, rtol=0, atol=1e-9)
        # Token columns 0-3 of each patch row are the query half: both halves see each other.
        left = np.array([t % 8 < 4 for t in range(32)])
        assert np.all(a[np.ix_(left, ~left)] > 0) and np.all(a[np.ix_(~left, left)] > 0)

    def test_right_half_logit_depends_on_left_half(self):
        params = TinyMatcherParams.init(Rng64(5), scale=1.0)
        img = pair_image(6)
        other = np.array(img.pixels)
        other[:, :16] = 255 - other[:, :16]
        assert tiny_matcher_forward(params, Image(other)) != tiny_matcher_forward(params, img)

    @given(st.integers(0, 2**31), st.integers(0, 2**31))
    def test_total_on_valid_inputs(self, pseed, iseed):
        params = TinyMatcherParams.init(Rng64(pseed), scale=1.0)
        tokens = np.random.default_rng(iseed).random((3, 32, 16))
        assert np.all(np.isfinite(forward_tokens(params, tokens)))
        a = attention_weights(params, tokens)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, rtol=0, atol=1e-9)

    def test_batched_equals_single(self):
        params = TinyMatcherParams.init(Rng64(7), scale=0.5)
        tokens = np.stack([to_tokens(pair_image(s), CFG) for s in range(4)])
        batched = forward_tokens(params, tokens)
        for i in range(4):
            assert abs(batched[i] - forward_tokens(params, tokens[i : i + 1])[0]) < 1e-13


class TestBackward:
    def test_zero_upstream(self):
        params = TinyMatcherParams.init(Rng64(0), scale=0.5)
        grads = tiny_matcher_backward(params, pair_image(0), 0.0)
        assert set(grads) == set(PARAM_NAMES)
        assert all(np.all(g == 0) for g in grads.values())

    def test_head_bias_gradient(self):
        params = TinyMatcherParams.init(Rng64(1), scale=0.5)
        for d in (1.0, -0.3, 2.5):
            assert float(tiny_matcher_backward(params, pair_image(1), d)["head_b"]) == d

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        params = TinyMatcherParams.init(Rng64(seed), scale=0.5)
        tokens = to_tokens(pair_image(seed), CFG)
        report = check_matcher_gradients(params, tokens, dloss_dlogit=0.7, h=1e-4)
        assert set(report.block_errors) == set(PARAM_NAMES)
        assert report.max_relative_error < 1e-3


class TestTraining:
    def test_lr_zero_and_zero_epochs_keep_init(self, examples):
        init = TinyMatcherParams.init(Rng64(9).spawn(), scale=0.5)
        p0, log0 = train_tiny_matcher(examples, epochs=0, seed=9)
        assert p0.equals(init) and len(log0.epoch_losses) == 1
        p1, log1 = train_tiny_matcher(examples, epochs=2, lr=0.0, seed=9)
        assert p1.equals(init)
        assert log1.epoch_losses == [log1.initial] * 3

    def test_deterministic(self, examples):
        a, la = train_tiny_matcher(examples, epochs=2, seed=5)
        b, lb = train_tiny_matcher(examples, epochs=2, seed=5)
        assert a.equals(b) and la.epoch_losses == lb.epoch_losses
        c, _ = train_tiny_matcher(examples, epochs=2, seed=6)
        assert not a.equals(c)

    def test_loss_decreases(self, examples):
        _, log = train_tiny_matcher(examples, epochs=30, seed=0)
        assert all(np.isfinite(log.epoch_losses)) and len(log.epoch_losses) == 31
        assert log.final < log.initial

    def test_single_class_rejected(self, examples):
        with pytest.raises(ArgumentError):
            train_tiny_matcher([e for e in examples if e.label == 1])
        with pytest.raises(ArgumentError):
            train_tiny_matcher([])

    def test_log_csv(self, examples):
        _, log = train_tiny_matcher(examples, epochs=1, seed=0)
        lines = log.to_csv().splitlines()
        assert lines[0] == "epoch,mean_loss" and len(lines) == 3
        assert float(lines[2].split(",")[1]) == log.final


class TestPairExamples:
    def test_labels_and_sources(self):
        images = [Image(np.full((16, 16, 3), 10 * i, dtype=np.uint8)) for i in range(6)]
        ex = make_pair_examples(images, Rng64(1), augment_fn=identity_augment)
        assert [e.label for e in ex] == [1, 0] * 6
        for i in range(6):
            pos, neg = ex[2 * i].input.pixels, ex[2 * i + 1].input.pixels
            assert np.all(pos == 10 * i)
            assert np.all(neg[:, 16:] == 10 * i) and not np.all(neg[:, :16] == 10 * i)

    def test_negative_choice_uniform(self):
        images = [Image(np.full((16, 16, 3), i, dtype=np.uint8)) for i in range(4)]
        counts = np.zeros((4, 4), int)
        rng = Rng64(2)
        for _ in range(300):
            ex = make_pair_examples(images, rng, augment_fn=identity_augment)
            for i in range(4):
                counts[i, int(ex[2 * i + 1].input.pixels[0, 0, 0])] += 1
        assert np.all(np.diag(counts) == 0)
        off = counts[~np.eye(4, dtype=bool)]
        assert off.min() > 70 and off.max() < 130

    def test_bad_label(self):
        with pytest.raises(ArgumentError):
            PairExample(pair_image(0), 2)


class TestIscm:
    def test_round_trip_and_layout(self):
        params = TinyMatcherParams.init(Rng64(3), scale=0.5)
        data = dumps_matcher(params)
        assert data[:4] == b"ISCM" and data[4:8] == (1).to_bytes(4, "little")
        assert len(data) == 28 + 4 * params.num_params()
        back = loads_matcher(data)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(back[name], params[name].astype(np.float32))
        assert dumps_matcher(back) == data

    def test_errors(self):
        data = dumps_matcher(TinyMatcherParams.zeros())
        with pytest.raises(FormatError):
            loads_matcher(b"ISCD" + data[4:])
        with pytest.raises(LengthError):
            loads_matcher(data[:-4])
        with pytest.raises(LengthError):
            loads_matcher(data + b"\0")
