"""Shared embedding space: base vectors, projection heads, contrastive training.

Products and attributes live in one d-dimensional space.  Base vectors come
from a precomputed store or from a deterministic feature-hashing fallback;
three trainable projection matrices (image, product text, attribute text)
map base vectors into the shared space.  Training pulls matched
product/attribute pairs together and pushes in-batch negatives apart with a
temperature-scaled softmax objective, optionally averaged over both
directions.

Similarity is cosine everywhere: vectors are unit-normalized before any dot
product, and the loss differentiates through that normalization, so the
returned gradients are with respect to the raw input batches.
"""

from __future__ import annotations

import hashlib
import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .catalog import Attribute
from .errors import DegenerateInputError, DimensionMismatchError, InputFormatError, KlpError
from .jsonl import read_jsonl, write_jsonl_atomic

IMG_PREFIX = "img::"
TXT_PREFIX = "txt::"
ATTR_PREFIX = "attr::"


def image_key(product_id: str) -> str:
    return IMG_PREFIX + product_id


def text_key(product_id: str) -> str:
    return TXT_PREFIX + product_id


def attribute_key(attr: Attribute | str) -> str:
    text = attr.text if isinstance(attr, Attribute) else attr
    return ATTR_PREFIX + text


class MissingEmbeddingError(KlpError):
    """A required key is absent from the store and no fallback is enabled."""


class TrainingDivergedError(KlpError):
    def __init__(self, epoch: int, batch: int, learning_rate: float):
        self.epoch = epoch
        self.batch = batch
        self.learning_rate = learning_rate
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} "
            f"(learning_rate={learning_rate}); lower the learning rate"
        )


_TOKEN_RE = re.compile(r"[a-z0-9']+")


def hash_embed(text: str, d_base: int, seed: int = 0) -> np.ndarray:
    """Deterministic feature-hash embedding of word unigrams and bigrams.

    Each token is hashed (blake2b, so the result is stable across runs and
    platforms) to a bucket in ``[0, d_base)`` and a ±1 sign; the accumulated
    vector is unit-normalized.  Identical input always yields the identical
    vector.
    """
    if d_base < 8:
        raise ValueError("d_base must be at least 8")
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise DegenerateInputError(f"cannot embed text with no tokens: {text!r}")
    features = list(tokens)
    features.extend(f"{a} {b}" for a, b in zip(tokens, tokens[1:]))
    vec = np.zeros(d_base, dtype=np.float64)
    for feature in features:
        digest = hashlib.blake2b(
            f"{seed}\x1f{feature}".encode("utf-8"), digest_size=9
        ).digest()
        bucket = int.from_bytes(digest[:8], "little") % d_base
        sign = 1.0 if digest[8] & 1 else -1.0
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DegenerateInputError(f"hash features cancelled for text {text!r}")
    return vec / norm


def unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    return vec / norm


def combine_product_embedding(img: np.ndarray, text: np.ndarray) -> np.ndarray:
    """Element-wise sum of the image and text embeddings, unit-normalized."""
    img = np.asarray(img, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    if img.shape != text.shape:
        raise DimensionMismatchError(
            f"image dim {img.shape} != text dim {text.shape}"
        )
    total = img + text
    norm = float(np.linalg.norm(total))
    if norm < 1e-12:
        raise DegenerateInputError("image and text embeddings cancel to zero")
    return total / norm


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dim {a.shape} != dim {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


class EmbeddingStore:
    """Key → vector map where every vector shares one dimension."""

    def __init__(self, dimension: int, entries: Mapping[str, np.ndarray] | None = None):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = int(dimension)
        self._entries: dict[str, np.ndarray] = {}
        if entries:
            for key, vec in entries.items():
                self.add(key, vec)

    def add(self, key: str, vec: np.ndarray) -> None:
        arr = np.asarray(vec, dtype=np.float64)
        if arr.shape != (self.dimension,):
            raise DimensionMismatchError(
                f"vector for {key!r} has shape {arr.shape}, expected ({self.dimension},)"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"vector for {key!r} has non-finite entries")
        self._entries[key] = arr

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self) -> list[str]:
        return sorted(self._entries)

    def get(self, key: str) -> np.ndarray:
        try:
            return self._entries[key]
        except KeyError:
            raise MissingEmbeddingError(f"no embedding stored for key {key!r}") from None

    def resolve(self, key: str, fallback: Callable[[str], np.ndarray] | None = None) -> np.ndarray:
        if key in self._entries:
            return self._entries[key]
        if fallback is None:
            raise MissingEmbeddingError(
                f"no embedding for key {key!r} and fallback embedder disabled"
            )
        return np.asarray(fallback(key), dtype=np.float64)


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Read an embedding file: a dimension header line then key/vector lines."""
    store: EmbeddingStore | None = None
    for lineno, record in read_jsonl(path):
        if store is None:
            if not isinstance(record, dict) or "dimension" not in record:
                raise InputFormatError(
                    f"{path}: line {lineno}: expected header with 'dimension'"
                )
            store = EmbeddingStore(int(record["dimension"]))
            continue
        if not isinstance(record, dict) or "key" not in record or "vector" not in record:
            raise InputFormatError(
                f"{path}: line {lineno}: expected object with 'key' and 'vector'"
            )
        store.add(str(record["key"]), np.asarray(record["vector"], dtype=np.float64))
    if store is None:
        raise InputFormatError(f"{path}: empty embedding file (no dimension header)")
    return store


def save_embeddings(store: EmbeddingStore, path: str | Path) -> int:
    def rows():
        yield {"dimension": store.dimension}
        for key in store.keys():
            yield {"key": key, "vector": [float(x) for x in store.get(key)]}

    return write_jsonl_atomic(path, rows())


# ---------------------------------------------------------------------------
# Contrastive objective
# ---------------------------------------------------------------------------


def _normalize_rows(mat: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"zero-norm row in {label} batch")
    return mat / norms[:, None], norms


def _log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def contrastive_loss_from_sims(
    sims: np.ndarray,
    positives: Sequence[int],
    temperature: float,
    symmetric: bool = True,
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over a similarity matrix.

    ``sims[i, j]`` is the similarity between product ``i`` and attribute
    ``j``; ``positives[i]`` is the column holding product ``i``'s match.
    Returns the mean-per-example loss and its gradient with respect to
    ``sims``.  With ``symmetric=True`` the product→attribute direction is
    averaged with the mirrored attribute→product direction (for column
    ``positives[i]`` the positive row is ``i``).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    sims = np.asarray(sims, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.int64)
    n = sims.shape[0]
    if sims.shape != (n, n) or pos.shape != (n,):
        raise DimensionMismatchError(
            f"expected square sims with one positive per row, got {sims.shape}"
        )
    if n == 0:
        raise ValueError("empty batch")
    if n < 2:
        warnings.warn(
            "contrastive loss over a degenerate batch (size < 2) is identically zero",
            RuntimeWarning,
            stacklevel=2,
        )
    logits = sims / temperature
    rows = np.arange(n)

    log_p_rows = _log_softmax(logits, axis=1)
    loss = float(0.0 - log_p_rows[rows, pos].mean())  # 0.0 - x avoids -0.0
    grad = np.exp(log_p_rows)
    grad[rows, pos] -= 1.0
    grad /= n * temperature

    if symmetric:
        picked = logits[:, pos]  # column i holds logits of attribute pos[i]
        log_p_cols = _log_softmax(picked, axis=0)
        loss_rev = float(0.0 - log_p_cols[rows, rows].mean())
        grad_rev_cols = np.exp(log_p_cols)
        grad_rev_cols[rows, rows] -= 1.0
        grad_rev_cols /= n * temperature
        grad_rev = np.zeros_like(grad)
        np.add.at(grad_rev.T, pos, grad_rev_cols.T)
        loss = 0.5 * (loss + loss_rev)
        grad = 0.5 * (grad + grad_rev)

    return loss, grad


def contrastive_loss(
    products: np.ndarray,
    attributes: np.ndarray,
    positives: Sequence[int],
    temperature: float,
    symmetric: bool = True,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Bidirectional in-batch contrastive loss over raw embedding batches.

    Similarity is the cosine of the (not necessarily unit) input rows, so the
    analytic gradients returned for both batches include the normalization
    term.  Each product row ``i`` has exactly one in-batch positive,
    ``attributes[positives[i]]``.
    """
    products = np.asarray(products, dtype=np.float64)
    attributes = np.asarray(attributes, dtype=np.float64)
    if products.ndim != 2 or attributes.ndim != 2:
        raise DimensionMismatchError("batches must be 2-d arrays")
    if products.shape[0] != attributes.shape[0]:
        raise DimensionMismatchError(
            f"batch sizes differ: {products.shape[0]} products vs "
            f"{attributes.shape[0]} attributes"
        )
    if products.shape[1] != attributes.shape[1]:
        raise DimensionMismatchError(
            f"embedding dims differ: {products.shape[1]} vs {attributes.shape[1]}"
        )
    u, norms_p = _normalize_rows(products, "product")
    v, norms_a = _normalize_rows(attributes, "attribute")
    sims = u @ v.T
    loss, grad_s = contrastive_loss_from_sims(sims, positives, temperature, symmetric)

    # d sims[i,j] / d products[i] = (v_j - sims[i,j] * u_i) / |p_i|
    grad_p = (grad_s @ v - (grad_s * sims).sum(axis=1, keepdims=True) * u) / norms_p[:, None]
    grad_a = (grad_s.T @ u - (grad_s * sims).sum(axis=0)[:, None] * v) / norms_a[:, None]
    return loss, grad_p, grad_a


# ---------------------------------------------------------------------------
# Projection heads
# ---------------------------------------------------------------------------


@dataclass
class ProjectionHead:
    """Three linear maps from the base space into the shared space.

    ``w_img`` and ``w_text`` project a product's image and text base
    embeddings (their combined, normalized sum is the product embedding);
    ``w_attr`` projects attribute text embeddings.
    """

    w_img: np.ndarray
    w_text: np.ndarray
    w_attr: np.ndarray
    epoch_losses: list[float] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        shape = self.w_img.shape
        for name, mat in (("w_img", self.w_img), ("w_text", self.w_text), ("w_attr", self.w_attr)):
            if mat.ndim != 2 or mat.shape != shape:
                raise DimensionMismatchError(f"{name} has shape {mat.shape}, expected {shape}")
            if not np.all(np.isfinite(mat)):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def d_base(self) -> int:
        return self.w_img.shape[0]

    @property
    def dim(self) -> int:
        return self.w_img.shape[1]

    def project_image(self, base: np.ndarray) -> np.ndarray:
        return np.asarray(base, dtype=np.float64) @ self.w_img

    def project_text(self, base: np.ndarray) -> np.ndarray:
        return np.asarray(base, dtype=np.float64) @ self.w_text

    def project_attribute(self, base: np.ndarray) -> np.ndarray:
        return np.asarray(base, dtype=np.float64) @ self.w_attr

    def product_embedding(self, img_base: np.ndarray, text_base: np.ndarray) -> np.ndarray:
        return combine_product_embedding(self.project_image(img_base), self.project_text(text_base))


def save_head(head: ProjectionHead, path: str | Path) -> None:
    def rows():
        yield {"d_base": head.d_base, "d": head.dim}
        for name, mat in (("w_img", head.w_img), ("w_text", head.w_text), ("w_attr", head.w_attr)):
            yield {"name": name, "data": [float(x) for x in mat.ravel(order="C")]}

    write_jsonl_atomic(path, rows())


def load_head(path: str | Path) -> ProjectionHead:
    header = None
    mats: dict[str, np.ndarray] = {}
    for lineno, record in read_jsonl(path):
        if header is None:
            if not isinstance(record, dict) or "d_base" not in record or "d" not in record:
                raise InputFormatError(f"{path}: line {lineno}: expected dimensions header")
            header = (int(record["d_base"]), int(record["d"]))
            continue
        name = record.get("name")
        if name not in ("w_img", "w_text", "w_attr"):
            raise InputFormatError(f"{path}: line {lineno}: unknown matrix {name!r}")
        mats[name] = np.asarray(record["data"], dtype=np.float64).reshape(header)
    if header is None or set(mats) != {"w_img", "w_text", "w_attr"}:
        raise InputFormatError(f"{path}: head file is missing matrices")
    return ProjectionHead(mats["w_img"], mats["w_text"], mats["w_attr"])


@dataclass(frozen=True)
class TrainerConfig:
    temperature: float = 0.1
    learning_rate: float = 1e-2
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    symmetric_loss: bool = True
    momentum: float = 0.0
    dim: int | None = None  # shared dimension; None keeps the base dimension

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def _initial_matrices(d_base: int, dim: int, rng: np.random.Generator) -> list[np.ndarray]:
    if dim == d_base:
        return [np.eye(d_base) for _ in range(3)]
    mats = []
    for _ in range(3):
        gauss = rng.standard_normal((max(d_base, dim), min(d_base, dim)))
        q, r = np.linalg.qr(gauss)
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)  # fix QR sign ambiguity for determinism
        mats.append(np.ascontiguousarray(q if d_base >= dim else q.T))
    return mats


def train_projection(
    store: EmbeddingStore,
    pairs: Sequence[tuple[str, Attribute]],
    config: TrainerConfig,
) -> ProjectionHead:
    """Fit the projection heads on (product, positive attribute) pairs.

    Mini-batch gradient descent with in-batch negatives; all three matrices
    start from the identity when the shared dimension equals the base
    dimension, otherwise from a seeded random orthogonal map.  Fully
    deterministic for a fixed seed.  The returned head carries the mean
    per-example loss of every epoch in ``epoch_losses``.
    """
    if len(pairs) < 1:
        raise ValueError("no training pairs")
    if len({attr for _, attr in pairs}) < 2:
        raise ValueError("training needs at least 2 distinct positive attributes")

    img = np.stack([store.get(image_key(pid)) for pid, _ in pairs])
    txt = np.stack([store.get(text_key(pid)) for pid, _ in pairs])
    att = np.stack([store.get(attribute_key(attr)) for _, attr in pairs])

    d_base = store.dimension
    dim = config.dim if config.dim is not None else d_base
    rng = np.random.default_rng(config.seed)
    w_img, w_text, w_attr = _initial_matrices(d_base, dim, rng)
    v_img = np.zeros_like(w_img)
    v_text = np.zeros_like(w_text)
    v_attr = np.zeros_like(w_attr)

    n = len(pairs)
    epoch_losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        total_examples = 0
        for batch_idx, start in enumerate(range(0, n, config.batch_size)):
            sel = order[start : start + config.batch_size]
            if sel.size < 2:
                continue  # softmax over a single candidate carries no signal
            # let overflow/nan propagate silently; the finiteness check below
            # turns it into a diagnostic error
            with np.errstate(over="ignore", invalid="ignore"):
                p_batch = img[sel] @ w_img + txt[sel] @ w_text
                a_batch = att[sel] @ w_attr
                loss, grad_p, grad_a = contrastive_loss(
                    p_batch,
                    a_batch,
                    np.arange(sel.size),
                    config.temperature,
                    config.symmetric_loss,
                )
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, batch_idx, config.learning_rate)
            total_loss += loss * sel.size
            total_examples += sel.size

            g_img = img[sel].T @ grad_p
            g_text = txt[sel].T @ grad_p
            g_attr = att[sel].T @ grad_a
            v_img = config.momentum * v_img - config.learning_rate * g_img
            v_text = config.momentum * v_text - config.learning_rate * g_text
            v_attr = config.momentum * v_attr - config.learning_rate * g_attr
            w_img = w_img + v_img
            w_text = w_text + v_text
            w_attr = w_attr + v_attr
        epoch_losses.append(total_loss / max(total_examples, 1))

    return ProjectionHead(w_img, w_text, w_attr, epoch_losses=epoch_losses)
