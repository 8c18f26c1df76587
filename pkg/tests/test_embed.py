import hashlib
import math
import warnings

import numpy as np
import pytest

from klp.catalog import Attribute
from klp.embed import (
    EmbeddingStore,
    ProjectionHead,
    TrainerConfig,
    TrainingDivergedError,
    attribute_key,
    combine_product_embedding,
    contrastive_loss,
    contrastive_loss_from_sims,
    cosine_sim,
    hash_embed,
    image_key,
    load_embeddings,
    load_head,
    save_embeddings,
    save_head,
    text_key,
    train_projection,
)
from klp.errors import DegenerateInputError, DimensionMismatchError


class TestHashEmbed:
    def test_deterministic(self):
        a = hash_embed("soft blue cotton shirt", 64, seed=1)
        b = hash_embed("soft blue cotton shirt", 64, seed=1)
        np.testing.assert_array_equal(a, b)

    def test_unit_norm(self):
        for text in ("one", "two words", "a much longer string of words here"):
            assert abs(np.linalg.norm(hash_embed(text, 32)) - 1.0) <= 1e-9

    def test_seed_changes_vector(self):
        assert not np.allclose(hash_embed("same text", 64, 0), hash_embed("same text", 64, 1))

    def test_empty_text_rejected(self):
        with pytest.raises(DegenerateInputError):
            hash_embed("   ", 32)

    def test_small_dimension_rejected(self):
        with pytest.raises(ValueError):
            hash_embed("text", 4)

    def test_similarity_matches_scalar_reimplementation(self):
        # Independent scalar replay of the hashing rule for two strings with
        # disjoint token sets.
        d, seed = 48, 3
        left, right = "red velvet gown", "running trail shoes"

        def scalar_vector(text):
            toks = text.lower().split()
            feats = toks + [f"{a} {b}" for a, b in zip(toks, toks[1:])]
            vec = [0.0] * d
            for feat in feats:
                dig = hashlib.blake2b(f"{seed}\x1f{feat}".encode(), digest_size=9).digest()
                idx = int.from_bytes(dig[:8], "little") % d
                vec[idx] += 1.0 if dig[8] & 1 else -1.0
            norm = math.sqrt(sum(x * x for x in vec))
            return [x / norm for x in vec]

        lv, rv = scalar_vector(left), scalar_vector(right)
        expected = sum(x * y for x, y in zip(lv, rv))
        got = float(hash_embed(left, d, seed) @ hash_embed(right, d, seed))
        assert got == pytest.approx(expected, abs=1e-12)


class TestCombine:
    def test_equal_inputs_pass_through(self):
        u = np.zeros(8)
        u[3] = 1.0
        np.testing.assert_allclose(combine_product_embedding(u, u), u)

    def test_orthonormal_closed_form(self):
        e1 = np.array([1.0, 0.0])
        e2 = np.array([0.0, 1.0])
        np.testing.assert_allclose(
            combine_product_embedding(e1, e2), np.array([1.0, 1.0]) / np.sqrt(2)
        )

    def test_antiparallel_is_degenerate(self):
        u = np.ones(4) / 2.0
        with pytest.raises(DegenerateInputError):
            combine_product_embedding(u, -u)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            combine_product_embedding(np.ones(4), np.ones(5))

    def test_output_unit_norm(self, rng):
        for _ in range(50):
            img = rng.standard_normal(16)
            txt = rng.standard_normal(16)
            out = combine_product_embedding(img, txt)
            assert abs(np.linalg.norm(out) - 1.0) <= 1e-9


class TestCosine:
    def test_identity(self):
        u = np.array([0.6, 0.8])
        assert cosine_sim(u, u) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_reference_value(self):
        got = cosine_sim(np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0]))
        assert got == pytest.approx(0.974631846, abs=1e-6)

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateInputError):
            cosine_sim(np.zeros(3), np.ones(3))

    def test_clamped_to_range(self, rng):
        for _ in range(100):
            a, b = rng.standard_normal(8), rng.standard_normal(8)
            assert -1.0 <= cosine_sim(a, b) <= 1.0


class TestLossClosedForms:
    def test_batch_of_one_is_zero(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            loss, grad = contrastive_loss_from_sims(np.array([[0.37]]), [0], 0.5)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros((1, 1)))

    def test_degenerate_batch_warns(self):
        with pytest.warns(RuntimeWarning, match="degenerate"):
            contrastive_loss_from_sims(np.array([[0.1]]), [0], 0.5)

    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_uniform_similarities_give_log_n(self, n):
        sims = np.full((n, n), 0.3)
        pos = np.arange(n)
        for symmetric in (False, True):
            loss, _ = contrastive_loss_from_sims(sims, pos, 0.07, symmetric)
            assert loss == pytest.approx(math.log(n), abs=1e-9)

    def test_loss_nonnegative(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 10))
            sims = rng.uniform(-1, 1, size=(n, n))
            loss, _ = contrastive_loss_from_sims(sims, rng.permutation(n), 0.2)
            assert loss >= -1e-12

    def test_temperature_scale_property(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 8))
            sims = rng.uniform(-1, 1, size=(n, n))
            pos = rng.permutation(n)
            tau, c = 0.3, 1.7
            a, _ = contrastive_loss_from_sims(sims, pos, tau * c)
            b, _ = contrastive_loss_from_sims(sims / c, pos, tau)
            assert a == pytest.approx(b, abs=1e-9)

    def test_permutation_invariance(self, rng):
        n, d = 6, 12
        P = rng.standard_normal((n, d))
        A = rng.standard_normal((n, d))
        pos = rng.permutation(n)
        base, _, _ = contrastive_loss(P, A, pos, 0.1)
        perm = rng.permutation(n)
        shuffled, _, _ = contrastive_loss(P[perm], A, pos[perm], 0.1)
        assert shuffled == pytest.approx(base, abs=1e-9)

    def test_batch_size_mismatch_rejected(self):
        with pytest.raises(DimensionMismatchError):
            contrastive_loss(np.ones((3, 4)), np.ones((2, 4)), [0, 1, 2], 0.1)


def finite_difference_grads(P, A, pos, tau, symmetric, step=1e-5):
    def loss_at(Pm, Am):
        return contrastive_loss(Pm, Am, pos, tau, symmetric)[0]

    grads = []
    for which, M in (("p", P), ("a", A)):
        g = np.zeros_like(M)
        for i in range(M.shape[0]):
            for j in range(M.shape[1]):
                up, down = M.copy(), M.copy()
                up[i, j] += step
                down[i, j] -= step
                if which == "p":
                    g[i, j] = (loss_at(up, A) - loss_at(down, A)) / (2 * step)
                else:
                    g[i, j] = (loss_at(P, up) - loss_at(P, down)) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-300)
    return np.linalg.norm(analytic - numeric) / denom


class TestGradients:
    @pytest.mark.parametrize("symmetric", [False, True])
    def test_matches_finite_differences(self, symmetric):
        rng = np.random.default_rng(17 + symmetric)
        for _ in range(5):
            n = int(rng.integers(2, 8))
            d = int(rng.integers(4, 12))
            P = rng.standard_normal((n, d))
            A = rng.standard_normal((n, d))
            pos = rng.permutation(n)
            tau = float(rng.uniform(0.05, 1.0))
            _, gP, gA = contrastive_loss(P, A, pos, tau, symmetric)
            fdP, fdA = finite_difference_grads(P, A, pos, tau, symmetric)
            assert relative_error(gP, fdP) <= 1e-4
            assert relative_error(gA, fdA) <= 1e-4

    def test_gradient_zero_at_perfect_separation(self):
        # With the positive similarity far above every negative, softmax
        # saturates and the gradient (and loss) vanish.
        sims = np.full((3, 3), -1.0) + 2.0 * np.eye(3)
        loss, grad = contrastive_loss_from_sims(sims, np.arange(3), 0.01)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)


class TestEmbeddingStore:
    def test_roundtrip(self, tmp_path, rng):
        store = EmbeddingStore(8)
        store.add("attr::color:red", rng.standard_normal(8))
        store.add("img::p1", rng.standard_normal(8))
        path = tmp_path / "emb.jsonl"
        save_embeddings(store, path)
        loaded = load_embeddings(path)
        assert loaded.dimension == 8
        assert loaded.keys() == store.keys()
        for key in store.keys():
            np.testing.assert_array_equal(loaded.get(key), store.get(key))

    def test_dimension_enforced(self):
        store = EmbeddingStore(8)
        with pytest.raises(DimensionMismatchError):
            store.add("k", np.ones(9))

    def test_nonfinite_rejected(self):
        store = EmbeddingStore(4)
        with pytest.raises(ValueError):
            store.add("k", np.array([1.0, np.nan, 0.0, 0.0]))

    def test_resolve_fallback(self):
        store = EmbeddingStore(8)
        vec = store.resolve("missing", fallback=lambda key: np.ones(8))
        np.testing.assert_array_equal(vec, np.ones(8))
        assert "missing" not in store  # resolve never mutates

    def test_key_helpers(self):
        assert image_key("p1") == "img::p1"
        assert text_key("p1") == "txt::p1"
        assert attribute_key(Attribute("color", "red")) == "attr::color:red"


def _toy_store(rng, n_products=40, n_attrs=6, d=16):
    store = EmbeddingStore(d)
    attrs = [Attribute("color", f"c{i}") for i in range(n_attrs)]
    basis = rng.standard_normal((n_attrs, d))
    basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    pairs = []
    for p in range(n_products):
        idx = int(rng.integers(n_attrs))
        noise = 0.05 * rng.standard_normal(d)
        store.add(image_key(f"p{p}"), basis[idx] + noise)
        store.add(text_key(f"p{p}"), basis[idx] + 0.05 * rng.standard_normal(d))
        pairs.append((f"p{p}", attrs[idx]))
    for i, attr in enumerate(attrs):
        store.add(attribute_key(attr), basis[i])
    return store, pairs


class TestTrainProjection:
    def test_zero_learning_rate_returns_init(self, rng):
        store, pairs = _toy_store(rng)
        cfg = TrainerConfig(learning_rate=0.0, epochs=2, batch_size=8, seed=1)
        head = train_projection(store, pairs, cfg)
        np.testing.assert_array_equal(head.w_img, np.eye(16))
        np.testing.assert_array_equal(head.w_text, np.eye(16))
        np.testing.assert_array_equal(head.w_attr, np.eye(16))

    def test_same_seed_bit_identical(self, rng):
        store, pairs = _toy_store(rng)
        cfg = TrainerConfig(learning_rate=0.05, epochs=3, batch_size=8, seed=7)
        first = train_projection(store, pairs, cfg)
        second = train_projection(store, pairs, cfg)
        assert first.w_img.tobytes() == second.w_img.tobytes()
        assert first.w_text.tobytes() == second.w_text.tobytes()
        assert first.w_attr.tobytes() == second.w_attr.tobytes()

    def test_loss_decreases_over_epochs(self, rng):
        store, pairs = _toy_store(rng)
        cfg = TrainerConfig(learning_rate=0.05, epochs=4, batch_size=8, seed=3)
        head = train_projection(store, pairs, cfg)
        assert head.epoch_losses[-1] <= head.epoch_losses[0]

    def test_projected_dimension_change(self, rng):
        store, pairs = _toy_store(rng, d=16)
        cfg = TrainerConfig(learning_rate=0.01, epochs=1, batch_size=8, seed=2, dim=8)
        head = train_projection(store, pairs, cfg)
        assert head.d_base == 16 and head.dim == 8
        # random orthogonal init: columns orthonormal
        zero_lr = train_projection(
            store, pairs, TrainerConfig(learning_rate=0.0, epochs=1, batch_size=8, seed=2, dim=8)
        )
        np.testing.assert_allclose(zero_lr.w_img.T @ zero_lr.w_img, np.eye(8), atol=1e-9)

    def test_needs_two_distinct_attributes(self, rng):
        store, pairs = _toy_store(rng)
        only_one = [(pid, pairs[0][1]) for pid, _ in pairs]
        with pytest.raises(ValueError, match="distinct"):
            train_projection(store, only_one, TrainerConfig())

    def test_divergence_reports_diagnostics(self):
        store = EmbeddingStore(8)
        huge = np.full(8, 1e308)
        attrs = [Attribute("color", "a"), Attribute("color", "b")]
        for p in range(4):
            store.add(image_key(f"p{p}"), huge)
            store.add(text_key(f"p{p}"), huge)
        for attr in attrs:
            store.add(attribute_key(attr), np.ones(8))
        pairs = [(f"p{p}", attrs[p % 2]) for p in range(4)]
        cfg = TrainerConfig(learning_rate=0.1, epochs=1, batch_size=4, seed=0)
        with pytest.raises(TrainingDivergedError) as excinfo:
            train_projection(store, pairs, cfg)
        assert excinfo.value.epoch == 0
        assert excinfo.value.learning_rate == 0.1

    def test_missing_pair_key_rejected(self, rng):
        store, pairs = _toy_store(rng)
        bad = pairs + [("ghost", pairs[0][1])]
        with pytest.raises(Exception, match="ghost"):
            train_projection(store, bad, TrainerConfig())


class TestHeadSerialization:
    def test_roundtrip_exact(self, tmp_path, rng):
        head = ProjectionHead(
            rng.standard_normal((6, 4)),
            rng.standard_normal((6, 4)),
            rng.standard_normal((6, 4)),
        )
        path = tmp_path / "head.jsonl"
        save_head(head, path)
        loaded = load_head(path)
        assert loaded.d_base == 6 and loaded.dim == 4
        np.testing.assert_array_equal(loaded.w_img, head.w_img)
        np.testing.assert_array_equal(loaded.w_text, head.w_text)
        np.testing.assert_array_equal(loaded.w_attr, head.w_attr)

    def test_shapes_must_agree(self, rng):
        with pytest.raises(DimensionMismatchError):
            ProjectionHead(np.eye(4), np.eye(4), np.eye(5))


class TestTrainerConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainerConfig(temperature=0.0)
        with pytest.raises(ValueError):
            TrainerConfig(batch_size=1)
        with pytest.raises(ValueError):
            TrainerConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainerConfig(learning_rate=-1e-3)
