"""Catalog-to-collections batch pipeline.

Curates a product catalog's raw attribute annotations into a clean
vocabulary, trains a dual-encoder projection for product/attribute
matching, generates searchable collection titles from co-occurring
attribute combinations, and builds relevance-ranked product feeds.
"""

__version__ = "0.1.0"

from .catalog import Attribute, Catalog, Product, ProductAnnotation
from .errors import KlpError

__all__ = [
    "Attribute",
    "Catalog",
    "KlpError",
    "Product",
    "ProductAnnotation",
    "__version__",
]
