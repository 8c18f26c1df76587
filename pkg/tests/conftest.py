import json

import numpy as np
import pytest

from klp.catalog import Attribute


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return path


def product_record(pid, title="A Test Product", **overrides):
    record = {
        "id": pid,
        "image_ref": f"https://img.example/{pid}.jpg",
        "title": title,
        "description": "a thing to wear",
        "price": {"amount": 19.99, "currency": "USD"},
        "merchant_tags": ["tagged"],
    }
    record.update(overrides)
    return record


def annotation_record(pid, attrs, source="fixture"):
    return {
        "product_id": pid,
        "attributes": [{"category": c, "value": v} for c, v in attrs],
        "source": source,
    }


def attr(category, value):
    return Attribute(category, value)
