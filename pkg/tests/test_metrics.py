import pytest

from klp.feedgen import Collection, CollectionQuery, FeedEntry
from klp.matcher import ScoredAttribute
from klp.metrics import (
    LabeledExample,
    MetricError,
    MetricReport,
    distribution_alignment,
    precision_at_k,
    recall_at_k,
    render_precision_table,
    save_reports,
)
from klp.vocab import FrequencyTable

from conftest import attr


def example(pid, truth, ranked):
    predicted = tuple(ScoredAttribute.make(a, 1.0 - 0.01 * i, 1.0) for i, a in enumerate(ranked))
    return LabeledExample(pid, frozenset(truth), predicted)


RED = attr("color", "red")
BLUE = attr("color", "blue")
SILK = attr("material", "silk")
DRESS = attr("category_l2", "dress")


class TestRecallAtK:
    def test_perfect_predictor(self):
        examples = [example(f"p{i}", [RED], [RED, BLUE]) for i in range(5)]
        assert recall_at_k(examples, 1).value == 1.0

    def test_null_predictor(self):
        examples = [example(f"p{i}", [RED], [BLUE, SILK]) for i in range(5)]
        assert recall_at_k(examples, 2).value == 0.0

    def test_hits_at_ranks_1_3_11(self):
        filler = [attr("style", f"f{i}") for i in range(12)]
        ex1 = example("p1", [RED], [RED] + filler[:10])
        ex2 = example("p2", [RED], filler[:2] + [RED] + filler[2:])
        ex3 = example("p3", [RED], filler[:10] + [RED])
        report = recall_at_k([ex1, ex2, ex3], 10)
        assert report.value == pytest.approx(2 / 3)
        assert report.n == 3

    def test_nondecreasing_in_k(self, rng):
        pool = [attr("style", f"s{i}") for i in range(20)]
        examples = []
        for p in range(30):
            ranked = [pool[i] for i in rng.permutation(20)]
            truth = {pool[int(rng.integers(20))]}
            examples.append(example(f"p{p}", truth, ranked))
        values = [recall_at_k(examples, k).value for k in range(1, 21)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_all_must_hit_is_stricter(self):
        ex = example("p1", [RED, SILK], [RED, BLUE, SILK])
        assert recall_at_k([ex], 2).value == 1.0
        assert recall_at_k([ex], 2, all_must_hit=True).value == 0.0
        assert recall_at_k([ex], 3, all_must_hit=True).value == 1.0

    def test_empty_examples_rejected(self):
        with pytest.raises(MetricError):
            recall_at_k([], 5)


def collection(title, attrs, product_ids):
    entries = tuple(
        FeedEntry(pid, 1.0 - 0.01 * i, ()) for i, pid in enumerate(product_ids)
    )
    return Collection(CollectionQuery(title, attrs, 5), entries)


class TestPrecisionAtK:
    def test_perfect_feeds(self):
        attrs = (DRESS, RED, SILK)
        truth = {f"p{i}": {DRESS, RED, SILK} for i in range(10)}
        feeds = [collection("Q", attrs, [f"p{i}" for i in range(10)])]
        reports = precision_at_k(feeds, truth, 10)
        for report in reports:
            assert report.value == 1.0

    def test_one_of_ten_missing_color(self):
        attrs = (DRESS, RED, SILK)
        truth = {f"p{i}": {DRESS, RED, SILK} for i in range(10)}
        truth["p9"] = {DRESS, SILK}  # lacks the color attribute
        feeds = [collection("Q", attrs, [f"p{i}" for i in range(10)])]
        by_category = {r.category: r for r in precision_at_k(feeds, truth, 10)}
        assert by_category["color"].value == pytest.approx(0.9)
        assert by_category["category_l2"].value == 1.0
        assert by_category["overall"].value == pytest.approx((0.9 + 1.0 + 1.0) / 3)

    def test_k_beyond_feed_length_uses_actual_entries(self):
        attrs = (DRESS, RED, SILK)
        truth = {"p0": {DRESS, RED, SILK}}
        feeds = [collection("Q", attrs, ["p0"])]
        by_category = {r.category: r for r in precision_at_k(feeds, truth, 50)}
        assert by_category["color"].n == 1

    def test_missing_truth_is_error(self):
        feeds = [collection("Q", (DRESS, RED, SILK), ["p0"])]
        with pytest.raises(MetricError, match="p0"):
            precision_at_k(feeds, {}, 10)


class TestDistributionAlignment:
    def test_proportional_counts_give_one(self):
        attrs = [attr("color", f"c{i}") for i in range(6)]
        training = FrequencyTable({a: (i + 1) * 10 for i, a in enumerate(attrs)})
        predicted = {a: (i + 1) * 3 for i, a in enumerate(attrs)}
        rho, ratios = distribution_alignment(predicted, training)
        assert rho == pytest.approx(1.0)
        assert set(ratios) == set(attrs)

    def test_reversed_counts_give_minus_one(self):
        attrs = [attr("color", f"c{i}") for i in range(6)]
        training = FrequencyTable({a: (i + 1) * 10 for i, a in enumerate(attrs)})
        predicted = {a: (6 - i) for i, a in enumerate(attrs)}
        rho, _ = distribution_alignment(predicted, training)
        assert rho == pytest.approx(-1.0)

    def test_too_few_shared_attributes(self):
        training = FrequencyTable({RED: 5, BLUE: 3})
        with pytest.raises(MetricError):
            distribution_alignment({RED: 1, BLUE: 1}, training)

    def test_ratio_table_values(self):
        attrs = [attr("color", f"c{i}") for i in range(3)]
        training = FrequencyTable({attrs[0]: 10, attrs[1]: 4, attrs[2]: 2})
        predicted = {attrs[0]: 5, attrs[1]: 4, attrs[2]: 6}
        _, ratios = distribution_alignment(predicted, training)
        assert ratios[attrs[0]] == pytest.approx(0.5)
        assert ratios[attrs[2]] == pytest.approx(3.0)


class TestReports:
    def test_value_range_enforced(self):
        with pytest.raises(ValueError):
            MetricReport("recall", 5, 1.5, 10)

    def test_save_reports(self, tmp_path):
        reports = [
            MetricReport("recall", 1, 0.5, 10),
            MetricReport("precision", 10, 0.9, 40, "color"),
        ]
        path = tmp_path / "report.jsonl"
        assert save_reports(reports, path) == 2
        text = path.read_text()
        assert '"category":"color"' in text

    def test_render_table(self):
        reports = [
            MetricReport("precision", 10, 0.97, 100, "color"),
            MetricReport("precision", 10, 0.96, 300, "overall"),
        ]
        table = render_precision_table(reports)
        assert "color" in table and "0.97" in table
