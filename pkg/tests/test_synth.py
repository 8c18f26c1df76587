import numpy as np
import pytest

from klp.catalog import load_annotations, load_catalog
from klp.embed import attribute_key, image_key, load_embeddings, text_key
from klp.synth import SynthSpec, generate
from klp.vocab import count_frequencies


def small_spec(**overrides):
    base = dict(
        n_products=80,
        attributes_per_category={"category_l2": 5, "color": 6, "style": 5, "season": 4},
        frequency_exponent=1.2,
        attrs_per_product=(3, 4),
        noise_rate=0.1,
        seed=5,
        embedding_dim=64,
    )
    base.update(overrides)
    return SynthSpec(**base)


class TestSpecValidation:
    def test_noise_rate_bounds(self):
        with pytest.raises(ValueError):
            small_spec(noise_rate=1.0)

    def test_needs_anchor_category(self):
        with pytest.raises(ValueError):
            small_spec(attributes_per_category={"color": 5})

    def test_attrs_per_product_fits_categories(self):
        with pytest.raises(ValueError):
            small_spec(attrs_per_product=(3, 9))


class TestGenerate:
    def test_zero_noise_nearest_attributes_are_truth(self, tmp_path):
        spec = small_spec(noise_rate=0.0, n_products=100)
        out = generate(spec, tmp_path)
        store = load_embeddings(out.embeddings_path)
        attr_list = sorted(
            (key for key in store.keys() if key.startswith("attr::")),
        )
        matrix = np.stack([store.get(k) for k in attr_list])
        for pid, truth in out.truth.items():
            emb = store.get(image_key(pid)) + store.get(text_key(pid))
            emb /= np.linalg.norm(emb)
            sims = matrix @ emb
            top = {attr_list[i] for i in np.argsort(-sims)[: len(truth)]}
            assert top == {attribute_key(a) for a in truth}

    def test_same_spec_identical_files(self, tmp_path):
        spec = small_spec()
        first = generate(spec, tmp_path / "a")
        second = generate(spec, tmp_path / "b")
        for left, right in (
            (first.catalog_path, second.catalog_path),
            (first.annotations_path, second.annotations_path),
            (first.embeddings_path, second.embeddings_path),
        ):
            assert left.read_bytes() == right.read_bytes()

    def test_power_law_heavy_tail(self, tmp_path):
        spec = small_spec(
            n_products=300,
            attributes_per_category={"category_l2": 20, "color": 30, "style": 30, "season": 20},
        )
        out = generate(spec, tmp_path)
        catalog = load_catalog(out.catalog_path)
        annotations = load_annotations(out.annotations_path, catalog)
        counts = sorted(count_frequencies(annotations).values(), reverse=True)
        assert counts == sorted(counts, reverse=True)
        median = counts[len(counts) // 2]
        assert counts[0] >= 10 * max(median, 1)

    def test_ingest_roundtrip_reproduces_truth(self, tmp_path):
        spec = small_spec()
        out = generate(spec, tmp_path)
        catalog = load_catalog(out.catalog_path)
        annotations = load_annotations(out.annotations_path, catalog)
        assert len(annotations) == spec.n_products
        for annotation in annotations:
            assert annotation.attributes == out.truth[annotation.product_id]

    def test_products_respect_category_uniqueness_and_anchor(self, tmp_path):
        out = generate(small_spec(), tmp_path)
        for truth in out.truth.values():
            categories = [a.category for a in truth]
            assert len(set(categories)) == len(categories)
            assert any(c.startswith("category_l") for c in categories)
