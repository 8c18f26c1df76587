"""Product catalog and raw attribute-annotation ingestion.

The catalog file and the annotation file are both line-delimited JSON.
Attribute categories come from a closed schema; unknown names are rejected
at parse time.  New domains extend the schema through config-supplied extra
categories, never by editing this module.
"""

from __future__ import annotations

import decimal
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from .errors import KlpError
from .jsonl import read_jsonl

BASE_CATEGORIES: tuple[str, ...] = (
    "category_l1",
    "category_l2",
    "category_l3",
    "color",
    "material",
    "fit",
    "stretch",
    "shape",
    "style",
    "details",
    "gender",
    "age_group",
    "price_level",
    "season",
    "festival",
    "occasion",
    "brand",
)

# Categories that can anchor a collection title with a head noun.
ANCHOR_CATEGORIES: frozenset[str] = frozenset(
    {"category_l1", "category_l2", "category_l3"}
)


class CatalogError(KlpError):
    """Catalog file is malformed or violates a product invariant."""


class AnnotationError(KlpError):
    """Annotation record references unknown data or fails normalization."""


@dataclass(frozen=True)
class CategorySchema:
    """The closed category schema, optionally extended per deployment."""

    extra: tuple[str, ...] = ()

    @property
    def names(self) -> tuple[str, ...]:
        return BASE_CATEGORIES + self.extra

    def __contains__(self, name: str) -> bool:
        return name in BASE_CATEGORIES or name in self.extra

    def require(self, name: str) -> str:
        if name not in self:
            raise AnnotationError(f"unknown attribute category {name!r}")
        return name


DEFAULT_SCHEMA = CategorySchema()


def normalize_value(value: str) -> str:
    """Lowercase, strip, and collapse internal whitespace to single spaces."""
    return " ".join(value.split()).lower()


@dataclass(frozen=True)
class Attribute:
    """A (category, value) descriptor; equality is pair equality."""

    category: str
    value: str

    @property
    def text(self) -> str:
        return f"{self.category}:{self.value}"

    @classmethod
    def parse(
        cls,
        category: str,
        value: str,
        schema: CategorySchema = DEFAULT_SCHEMA,
    ) -> "Attribute":
        schema.require(category)
        norm = normalize_value(value)
        if not norm:
            raise AnnotationError(
                f"empty attribute value for category {category!r}"
            )
        return cls(category, norm)

    @classmethod
    def parse_text(
        cls, text: str, schema: CategorySchema = DEFAULT_SCHEMA
    ) -> "Attribute":
        """Parse the ``category:value`` form used by review-list files."""
        category, sep, value = text.partition(":")
        if not sep:
            raise AnnotationError(f"expected 'category:value', got {text!r}")
        return cls.parse(category.strip(), value, schema)


def attribute_sort_key(attr: Attribute) -> str:
    """Canonical ordering used for every deterministic tie-break."""
    return attr.text


@dataclass(frozen=True)
class Product:
    id: str
    image_ref: str
    title: str
    description: str
    price_amount: str
    price_currency: str
    merchant_tags: tuple[str, ...] = ()

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "image_ref": self.image_ref,
            "title": self.title,
            "description": self.description,
            "price": {
                "amount": float(self.price_amount),
                "currency": self.price_currency,
            },
            "merchant_tags": list(self.merchant_tags),
        }


@dataclass(frozen=True)
class ProductAnnotation:
    """One product's raw attribute list, from a fixture file or a VLM call."""

    product_id: str
    attributes: tuple[Attribute, ...]
    source: str = "fixture"

    def to_record(self) -> dict:
        return {
            "product_id": self.product_id,
            "attributes": [
                {"category": a.category, "value": a.value} for a in self.attributes
            ],
            "source": self.source,
        }


class Catalog:
    """Immutable product collection with O(1) id lookup.

    Iteration order is ascending product id so downstream stages are
    deterministic regardless of file order.
    """

    def __init__(self, products: Sequence[Product]):
        self._by_id: dict[str, Product] = {}
        for product in products:
            if product.id in self._by_id:
                raise CatalogError(f"duplicate product id {product.id!r}")
            self._by_id[product.id] = product
        self._ids = sorted(self._by_id)

    def __len__(self) -> int:
        return len(self._ids)

    def __iter__(self) -> Iterator[Product]:
        for pid in self._ids:
            yield self._by_id[pid]

    def __contains__(self, product_id: str) -> bool:
        return product_id in self._by_id

    def get(self, product_id: str) -> Product:
        try:
            return self._by_id[product_id]
        except KeyError:
            raise CatalogError(f"unknown product id {product_id!r}") from None

    @property
    def ids(self) -> list[str]:
        return list(self._ids)


_REQUIRED_PRODUCT_FIELDS = ("id", "image_ref", "title", "description", "price")


def _parse_product(record: object, lineno: int, path: str | Path) -> Product:
    if not isinstance(record, dict):
        raise CatalogError(f"{path}: line {lineno}: record is not an object")
    for name in _REQUIRED_PRODUCT_FIELDS:
        if name not in record:
            raise CatalogError(
                f"{path}: line {lineno}: missing required field {name!r}"
            )
    pid = record["id"]
    if not isinstance(pid, str) or not pid:
        raise CatalogError(f"{path}: line {lineno}: id must be a nonempty string")
    title = record["title"]
    if not isinstance(title, str) or not title.strip():
        raise CatalogError(f"{path}: line {lineno}: title must be nonempty")
    price = record["price"]
    if not isinstance(price, dict) or "amount" not in price or "currency" not in price:
        raise CatalogError(
            f"{path}: line {lineno}: price must carry 'amount' and 'currency'"
        )
    try:
        amount = str(decimal.Decimal(str(price["amount"])))
    except decimal.InvalidOperation:
        raise CatalogError(
            f"{path}: line {lineno}: price amount {price['amount']!r} is not decimal"
        ) from None
    tags = record.get("merchant_tags", [])
    if not isinstance(tags, list) or any(not isinstance(t, str) for t in tags):
        raise CatalogError(f"{path}: line {lineno}: merchant_tags must be strings")
    return Product(
        id=pid,
        image_ref=str(record["image_ref"]),
        title=title,
        description=str(record["description"]),
        price_amount=amount,
        price_currency=str(price["currency"]),
        merchant_tags=tuple(tags),
    )


def load_catalog(path: str | Path) -> Catalog:
    """Load and validate a catalog file.

    Raises :class:`CatalogError` with the offending line number on malformed
    records, duplicate ids, or missing required fields.  An empty file is an
    empty catalog, not an error.
    """
    products = []
    seen: set[str] = set()
    for lineno, record in read_jsonl(path):
        product = _parse_product(record, lineno, path)
        if product.id in seen:
            raise CatalogError(
                f"{path}: line {lineno}: duplicate product id {product.id!r}"
            )
        seen.add(product.id)
        products.append(product)
    return Catalog(products)


def load_annotations(
    path: str | Path,
    catalog: Catalog,
    schema: CategorySchema = DEFAULT_SCHEMA,
) -> list[ProductAnnotation]:
    """Load annotation records, validating ids against the catalog.

    Attribute values are normalized (lowercased, trimmed, internal whitespace
    collapsed).  Unknown product ids, unknown categories, and empty values are
    errors.
    """
    annotations = []
    for lineno, record in read_jsonl(path):
        if not isinstance(record, dict):
            raise AnnotationError(f"{path}: line {lineno}: record is not an object")
        pid = record.get("product_id")
        if not isinstance(pid, str) or not pid:
            raise AnnotationError(
                f"{path}: line {lineno}: product_id must be a nonempty string"
            )
        if pid not in catalog:
            raise AnnotationError(
                f"{path}: line {lineno}: unknown product id {pid!r}"
            )
        raw_attrs = record.get("attributes", [])
        if not isinstance(raw_attrs, list):
            raise AnnotationError(f"{path}: line {lineno}: attributes must be a list")
        attrs = []
        for item in raw_attrs:
            if not isinstance(item, dict) or "category" not in item or "value" not in item:
                raise AnnotationError(
                    f"{path}: line {lineno}: attribute entries need category and value"
                )
            try:
                attrs.append(Attribute.parse(item["category"], str(item["value"]), schema))
            except AnnotationError as exc:
                raise AnnotationError(f"{path}: line {lineno}: {exc}") from None
        source = record.get("source", "fixture")
        if source not in ("vlm_client", "fixture"):
            raise AnnotationError(
                f"{path}: line {lineno}: source must be 'vlm_client' or 'fixture'"
            )
        annotations.append(ProductAnnotation(pid, tuple(attrs), source))
    return annotations


def annotate_product(product, client, template=None, schema: CategorySchema = DEFAULT_SCHEMA):
    """Request attributes for one product from a vision-capable chat model.

    The response must contain a JSON object mapping category names to lists
    of values; categories absent from the response yield no attributes and
    unknown category keys are ignored.  The raw payload is preserved on parse
    errors for audit.
    """
    from . import clients

    if template is None:
        template = clients.attribute_extraction_template()
    prompt = template.render(
        title=product.title,
        description=product.description,
        price=f"{product.price_amount} {product.price_currency}",
        tags=", ".join(product.merchant_tags),
        categories=", ".join(schema.names),
    )
    raw = client.chat_complete(prompt, image_payload=product.image_ref)
    payload = clients.extract_first_object(raw)
    attrs: list[Attribute] = []
    for category, values in payload.items():
        if category not in schema:
            continue
        if isinstance(values, str):
            values = [values]
        if not isinstance(values, list):
            raise clients.ResponseParseError(
                f"category {category!r} does not hold a list of values", payload=raw
            )
        for value in values:
            if not isinstance(value, str):
                raise clients.ResponseParseError(
                    f"category {category!r} holds a non-string value", payload=raw
                )
            try:
                attrs.append(Attribute.parse(category, value, schema))
            except AnnotationError as exc:
                raise clients.ResponseParseError(str(exc), payload=raw) from None
    ordered = tuple(sorted(set(attrs), key=attribute_sort_key))
    return ProductAnnotation(product.id, ordered, source="vlm_client")


def save_catalog(catalog: Catalog, path: str | Path) -> int:
    from .jsonl import write_jsonl_atomic

    return write_jsonl_atomic(path, (p.to_record() for p in catalog))


def save_annotations(annotations: Sequence[ProductAnnotation], path: str | Path) -> int:
    from .jsonl import write_jsonl_atomic

    return write_jsonl_atomic(path, (a.to_record() for a in annotations))
