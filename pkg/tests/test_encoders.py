import math

import numpy as np
import pytest

from agmask import nn
from agmask.encoders import (
    DualEncoder, Embedding, ImageEncoder, SimilarityScore, TextEncoder,
    contrastive_loss, normalize, similarity,
)
from agmask.errors import DegenerateEmbeddingError, DimensionError
from agmask.netpbm import Image
from agmask.rng import SplitMix64

from test_nn import finite_diff, max_rel_err, rand_array


def make_dual(seed=7, in_channels=3, feature_channels=8, embed_dim=16,
              tokens=("red", "circle", "blue", "square")) -> DualEncoder:
    img = ImageEncoder.init(seed, in_channels=in_channels,
                            feature_channels=feature_channels, embed_dim=embed_dim)
    txt = TextEncoder.init(seed, list(tokens), token_dim=8, embed_dim=embed_dim)
    return DualEncoder(image_encoder=img, text_encoder=txt, seed=seed)


def zero_image_encoder(feature_channels=4, embed_dim=6) -> ImageEncoder:
    return ImageEncoder(
        conv1_w=nn.Tensor(np.zeros((8, 3, 3, 3))), conv1_b=nn.Tensor(np.zeros(8)),
        conv2_w=nn.Tensor(np.zeros((feature_channels, 8, 3, 3))),
        conv2_b=nn.Tensor(np.zeros(feature_channels)),
        proj_w=nn.Tensor(np.zeros((embed_dim, feature_channels))),
        proj_b=nn.Tensor(np.zeros(embed_dim)),
    )


def random_image(seed, h=10, w=10):
    rng = SplitMix64(seed)
    pixels = np.array([[ [rng.randint(0, 255) for _ in range(3)]
                         for _ in range(w)] for _ in range(h)], dtype=np.uint8)
    return Image(pixels=pixels)


class TestEmbeddingTypes:
    def test_normalized_flag_checked(self):
        with pytest.raises(ValueError):
            Embedding(values=np.array([3.0, 4.0]), normalized=True)

    def test_similarity_range_checked(self):
        with pytest.raises(ValueError):
            SimilarityScore(value=1.5)


class TestNormalizeSimilarity:
    def test_normalize_hand(self):
        e = normalize(Embedding(values=np.array([3.0, 4.0])))
        assert e.normalized
        assert np.allclose(e.values, [0.6, 0.8], atol=1e-15)

    def test_normalize_unit_unchanged(self):
        e = normalize(Embedding(values=np.array([0.6, 0.8])))
        assert np.allclose(e.values, [0.6, 0.8], atol=1e-12)

    def test_normalize_zero_rejected(self):
        with pytest.raises(DegenerateEmbeddingError):
            normalize(Embedding(values=np.zeros(4)))

    def test_similarity_identical(self):
        e = normalize(Embedding(values=np.array([1.0, 2.0, -1.0])))
        assert similarity(e, e).value == pytest.approx(1.0, abs=1e-12)

    def test_similarity_orthogonal(self):
        a = Embedding(values=np.array([1.0, 0.0]), normalized=True)
        b = Embedding(values=np.array([0.0, 1.0]), normalized=True)
        assert similarity(a, b).value == 0.0

    def test_similarity_hand(self):
        a = Embedding(values=np.array([0.6, 0.8]), normalized=True)
        b = Embedding(values=np.array([0.8, 0.6]), normalized=True)
        assert similarity(a, b).value == pytest.approx(0.96, abs=1e-15)

    def test_similarity_requires_normalized(self):
        a = Embedding(values=np.array([3.0, 4.0]))
        b = Embedding(values=np.array([1.0, 0.0]), normalized=True)
        with pytest.raises(ValueError):
            similarity(a, b)

    def test_similarity_dim_mismatch(self):
        a = Embedding(values=np.array([1.0, 0.0]), normalized=True)
        b = Embedding(values=np.array([1.0, 0.0, 0.0]), normalized=True)
        with pytest.raises(DimensionError):
            similarity(a, b)

    def test_rescaling_invariance(self):
        dual = make_dual(seed=3)
        ev, _ = dual.image_encoder.encode(random_image(5))
        et = dual.text_encoder.encode("red circle")
        base = similarity(normalize(ev), normalize(et)).value
        scaled = similarity(
            normalize(Embedding(values=ev.values * 7.3)),
            normalize(Embedding(values=et.values * 7.3))).value
        assert abs(base - scaled) <= 1e-12


class TestImageEncoder:
    def test_zero_weights_zero_outputs(self):
        enc = zero_image_encoder()
        emb, feats = enc.encode(random_image(1))
        assert np.all(emb.values == 0.0)
        assert np.all(feats.data == 0.0)

    def test_deterministic(self):
        img = random_image(2)
        e1, f1 = make_dual(seed=9).image_encoder.encode(img)
        e2, f2 = make_dual(seed=9).image_encoder.encode(img)
        assert e1.values.tobytes() == e2.values.tobytes()
        assert f1.data.tobytes() == f2.data.tobytes()

    def test_features_match_manual_composition(self):
        enc = make_dual(seed=11).image_encoder
        img = random_image(3, h=9, w=7)
        x = img.to_tensor()
        h = nn.relu(nn.conv2d(x, enc.conv1_w, enc.conv1_b))
        f_manual = nn.relu(nn.conv2d(h, enc.conv2_w, enc.conv2_b))
        v_manual = nn.linear(enc.proj_w, enc.proj_b, nn.global_avg_pool(f_manual))
        emb, feats = enc.encode(img)
        assert np.array_equal(feats.data, f_manual.data)
        assert np.array_equal(emb.values, v_manual.data)

    def test_wrong_channel_count(self):
        enc = make_dual().image_encoder
        with pytest.raises(DimensionError):
            enc.encode(nn.Tensor(np.zeros((1, 8, 8))))

    def test_too_small_image(self):
        enc = make_dual().image_encoder
        with pytest.raises(DimensionError):
            enc.encode(nn.Tensor(np.zeros((3, 4, 8))))

    def test_feature_shape(self):
        enc = make_dual().image_encoder
        _, feats = enc.encode(random_image(4, h=12, w=9))
        assert feats.shape == (enc.feature_channels, 8, 5)
        assert enc.feature_shape(12, 9) == (8, 5)


class TestTextEncoder:
    def test_single_token_is_projected_row(self):
        txt = make_dual(seed=5).text_encoder
        emb = txt.encode("red")
        row = txt.table.data[txt.vocab["red"]]
        expected = txt.proj_w.data @ row + txt.proj_b.data
        assert np.allclose(emb.values, expected, atol=1e-15)

    def test_two_tokens_mean_then_projection(self):
        txt = make_dual(seed=5).text_encoder
        emb = txt.encode("red circle")
        mean = 0.5 * (txt.table.data[txt.vocab["red"]]
                      + txt.table.data[txt.vocab["circle"]])
        expected = txt.proj_w.data @ mean + txt.proj_b.data
        assert np.allclose(emb.values, expected, atol=1e-15)

    def test_unknown_tokens_use_unk_row(self):
        txt = make_dual(seed=5).text_encoder
        emb = txt.encode("zzz qqq")
        unk = txt.table.data[0]
        expected = txt.proj_w.data @ unk + txt.proj_b.data
        assert np.allclose(emb.values, expected, atol=1e-15)

    def test_empty_caption_rejected(self):
        txt = make_dual().text_encoder
        with pytest.raises(ValueError):
            txt.encode("   ")

    def test_tokenization_idempotent(self):
        txt = make_dual().text_encoder
        caption = "  Red   CIRCLE "
        rejoined = " ".join(caption.lower().split())
        assert np.array_equal(txt.encode(caption).values,
                              txt.encode(rejoined).values)


class TestFeatureGradients:
    def test_zero_projection_channel_has_zero_gradient(self):
        dual = make_dual(seed=13, feature_channels=4)
        pw = dual.image_encoder.proj_w.data.copy()
        pw[:, 2] = 0.0
        dual.image_encoder.proj_w = nn.Tensor(pw)
        grads = dual.feature_gradients(random_image(6), "red circle")
        assert np.all(grads.data[2] == 0.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_differences(self, seed):
        dual = make_dual(seed=17 + seed, feature_channels=2, embed_dim=5)
        img = random_image(20 + seed, h=8, w=8)
        x = img.to_tensor()
        enc = dual.image_encoder
        f0 = enc.features(x).data  # 2 channels, 4x4
        assert f0.shape == (2, 4, 4)
        et = normalize(dual.text_encoder.encode("red circle")).values
        analytic = dual.feature_gradients(img, "red circle").data

        def score_of_features(f):
            v = enc.proj_w.data @ f.mean(axis=(1, 2)) + enc.proj_b.data
            return float((v / np.linalg.norm(v)) @ et)

        fd = finite_diff(score_of_features, f0)
        assert max_rel_err(analytic, fd) < 1e-6

    def test_embed_dim_one_gives_zero_gradients(self):
        dual = make_dual(seed=23, embed_dim=1)
        grads = dual.feature_gradients(random_image(8), "red circle")
        assert np.allclose(grads.data, 0.0, atol=1e-12)

    def test_degenerate_image_embedding_raises(self):
        dual = make_dual(seed=29)
        dual.image_encoder = zero_image_encoder(
            feature_channels=dual.image_encoder.feature_channels,
            embed_dim=dual.image_encoder.embed_dim)
        with pytest.raises(DegenerateEmbeddingError):
            dual.feature_gradients(random_image(9), "red circle")


def unit_rows(mat):
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


class TestContrastiveLoss:
    def test_single_pair_zero_loss(self):
        e = np.array([[1.0, 0.0]])
        loss, gi, gt = contrastive_loss(e, e, temperature=0.07)
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_uniform_similarities_give_log_n(self):
        # identical unit rows: every pairwise similarity equals 1
        for n in (2, 3, 5):
            e = np.tile(unit_rows(np.array([[1.0, 2.0, 3.0]])), (n, 1))
            loss, _, _ = contrastive_loss(e, e.copy(), temperature=0.5)
            assert loss == pytest.approx(math.log(n), rel=1e-12)
        loss2, _, _ = contrastive_loss(
            np.tile([[1.0, 0.0]], (2, 1)), np.tile([[1.0, 0.0]], (2, 1)), 1.0)
        assert loss2 == pytest.approx(0.6931471805599453, rel=1e-12)

    def test_saturated_diagonal_loss_vanishes(self):
        e = np.eye(4)
        loss, _, _ = contrastive_loss(e, e.copy(), temperature=0.01)
        assert loss < 1e-10

    def test_loss_nonnegative(self):
        for seed in range(5):
            ei = unit_rows(rand_array((4, 6), seed=3000 + seed, avoid_zero=1e-3))
            et = unit_rows(rand_array((4, 6), seed=4000 + seed, avoid_zero=1e-3))
            loss, _, _ = contrastive_loss(ei, et, temperature=0.07)
            assert loss >= 0.0

    def test_nonpositive_temperature_rejected(self):
        e = np.array([[1.0, 0.0]])
        with pytest.raises(ValueError):
            contrastive_loss(e, e, temperature=0.0)

    def test_unnormalized_rejected(self):
        e = np.array([[3.0, 4.0]])
        with pytest.raises(ValueError):
            contrastive_loss(e, e, temperature=0.07)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_match_finite_differences(self, seed):
        ei = unit_rows(rand_array((3, 4), seed=5000 + seed, avoid_zero=1e-3))
        et = unit_rows(rand_array((3, 4), seed=6000 + seed, avoid_zero=1e-3))
        _, gi, gt = contrastive_loss(ei, et, temperature=0.3)

        # loss as a free function of the (unconstrained) embedding matrices;
        # renormalization is NOT applied, matching the op's contract that the
        # caller feeds pre-normalized rows and gets gradients w.r.t. them.
        def loss_of(ei_v, et_v):
            t = 0.3
            logits = ei_v @ et_v.T / t
            n = logits.shape[0]
            pr = np.exp(logits - logits.max(axis=1, keepdims=True))
            pr /= pr.sum(axis=1, keepdims=True)
            pc = np.exp(logits - logits.max(axis=0, keepdims=True))
            pc /= pc.sum(axis=0, keepdims=True)
            d = np.arange(n)
            return float(-0.5 * (np.log(pr[d, d]).mean() + np.log(pc[d, d]).mean()))

        fd_i = finite_diff(lambda v: loss_of(v, et), ei)
        fd_t = finite_diff(lambda v: loss_of(ei, v), et)
        assert max_rel_err(gi, fd_i) < 1e-6
        assert max_rel_err(gt, fd_t) < 1e-6


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        dual = make_dual(seed=31)
        path = tmp_path / "enc.agmw"
        dual.save(path)
        loaded = DualEncoder.load(path)
        for name, t in dual.params().items():
            assert np.array_equal(loaded.params()[name].data, t.data), name
        assert loaded.text_encoder.vocab == dual.text_encoder.vocab
        assert loaded.seed == dual.seed

    def test_resave_byte_identical(self, tmp_path):
        dual = make_dual(seed=37)
        p1, p2 = tmp_path / "a.agmw", tmp_path / "b.agmw"
        dual.save(p1)
        DualEncoder.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()
