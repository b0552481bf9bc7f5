"""Hierarchical item identifiers via residual k-means quantization.

Each item embedding is quantized level by level: the level-l codebook is fit
with k-means on the level-l residuals, and the chosen codeword is subtracted
to produce the next residual. Items that share all base-level tokens get one
extra disambiguation token so the item<->identifier map stays bijective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DecodeError, TrieLookupError

KMEANS_MAX_ITERS = 50
KMEANS_TOL = 1e-6


@dataclass
class Codebooks:
    levels: int
    codewords_per_level: int
    codebooks: list[np.ndarray]  # level -> (V, dim)


@dataclass
class IdentifierIndex:
    item_to_identifier: dict[int, tuple[int, ...]]
    identifier_to_item: dict[tuple[int, ...], int]
    trie: dict = field(repr=False)
    base_levels: int = 0
    base_vocab: int = 0
    max_extra_vocab: int = 0  # largest collision group size; 0 when no collisions

    def encode(self, item_id: int) -> tuple[int, ...]:
        try:
            return self.item_to_identifier[item_id]
        except KeyError:
            raise DecodeError(f"unknown item {item_id}") from None

    def decode(self, identifier) -> int:
        try:
            return self.identifier_to_item[tuple(int(t) for t in identifier)]
        except KeyError:
            raise DecodeError(f"unknown identifier {tuple(identifier)}") from None

    def valid_next(self, prefix) -> list[int]:
        """Tokens extending `prefix` toward at least one item, sorted.
        Empty list at a complete identifier."""
        node = self.trie
        for tok in prefix:
            children = node.get("children", {})
            if int(tok) not in children:
                raise TrieLookupError(f"prefix {tuple(prefix)} not in identifier trie")
            node = children[int(tok)]
        return sorted(node.get("children", {}).keys())

    def is_leaf(self, prefix) -> bool:
        node = self.trie
        for tok in prefix:
            children = node.get("children", {})
            if int(tok) not in children:
                raise TrieLookupError(f"prefix {tuple(prefix)} not in identifier trie")
            node = children[int(tok)]
        return "item" in node

    def step_limits(self, identifier) -> tuple[int, ...]:
        """Per-step token-space size along an identifier: full vocab V at base
        levels, collision-group size at the disambiguation step."""
        limits = []
        for level, _ in enumerate(identifier):
            if level < self.base_levels:
                limits.append(self.vocab_at(level))
            else:
                limits.append(len(self.valid_next(identifier[: self.base_levels])))
        return tuple(limits)

    def vocab_at(self, level: int) -> int:
        return self.base_vocab if level < self.base_levels else self.max_extra_vocab

    @property
    def max_identifier_len(self) -> int:
        return self.base_levels + (1 if self.max_extra_vocab > 0 else 0)


def _kmeans_pp_init(rng, data, k):
    """k-means++ style seeding."""
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    d2 = ((data - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = data[rng.integers(n)]
        else:
            centers[j] = data[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((data - centers[j]) ** 2).sum(axis=1))
    return centers


def _kmeans(rng, data, k):
    """Lloyd iterations with empty clusters reseeded to the farthest point."""
    n = data.shape[0]
    if n < k:
        # fewer points than codewords: pad with copies of points
        centers = data[rng.permutation(n)]
        pad = data[rng.integers(0, n, size=k - n)]
        centers = np.vstack([centers, pad + 1e-9 * rng.standard_normal(pad.shape)])
    else:
        centers = _kmeans_pp_init(rng, data, k)
    for _ in range(KMEANS_MAX_ITERS):
        d2 = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = data[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
            else:
                far = d2.min(axis=1).argmax()
                new_centers[j] = data[far]
        shift = np.linalg.norm(new_centers - centers)
        centers = new_centers
        if shift < KMEANS_TOL:
            break
    d2 = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return centers, d2.argmin(axis=1)


def _build_trie(item_to_identifier):
    root = {"children": {}}
    for item, ident in item_to_identifier.items():
        node = root
        for tok in ident:
            node = node["children"].setdefault(int(tok), {"children": {}})
        node["item"] = int(item)
    return root


def _make_index(codes, base_levels, base_vocab):
    groups = {}
    for item, code in enumerate(codes):
        groups.setdefault(tuple(code), []).append(item)
    item_to_identifier = {}
    max_extra = 0
    for prefix, items in groups.items():
        if len(items) == 1:
            item_to_identifier[items[0]] = prefix
        else:
            max_extra = max(max_extra, len(items))
            for rank, item in enumerate(sorted(items)):
                item_to_identifier[item] = prefix + (rank,)
    identifier_to_item = {ident: item for item, ident in item_to_identifier.items()}
    return IdentifierIndex(
        item_to_identifier=item_to_identifier,
        identifier_to_item=identifier_to_item,
        trie=_build_trie(item_to_identifier),
        base_levels=base_levels,
        base_vocab=base_vocab,
        max_extra_vocab=max_extra,
    )


def fit_tokenizer(universe, levels, vocab, seed):
    """Fit per-level codebooks on residuals and assign identifiers.

    Returns (Codebooks, IdentifierIndex). Requires vocab**levels >= num_items
    so the identifier space can hold every item.
    """
    if vocab**levels < universe.num_items:
        raise ConfigurationError(
            f"identifier space {vocab}^{levels} cannot hold {universe.num_items} items"
        )
    rng = np.random.default_rng(seed)
    residual = universe.item_embeddings.astype(np.float64).copy()
    books = []
    codes = np.empty((universe.num_items, levels), dtype=np.int64)
    for level in range(levels):
        centers, assign = _kmeans(rng, residual, vocab)
        books.append(centers)
        codes[:, level] = assign
        residual = residual - centers[assign]
    cb = Codebooks(levels, vocab, books)
    return cb, _make_index(codes, levels, vocab)


def reconstruction_error(universe, codebooks, index):
    """Sum of squared residuals after all quantization levels."""
    err = 0.0
    for item in range(universe.num_items):
        ident = index.encode(item)
        approx = np.zeros(universe.embedding_dim)
        for level in range(codebooks.levels):
            approx += codebooks.codebooks[level][ident[level]]
        err += float(((universe.item_embeddings[item] - approx) ** 2).sum())
    return err


def save_tokenizer(codebooks, index, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "levels": codebooks.levels,
                "codewords_per_level": codebooks.codewords_per_level,
                "codebooks": [b.tolist() for b in codebooks.codebooks],
                "identifiers": {str(i): list(ident) for i, ident in index.item_to_identifier.items()},
            },
            fh,
        )


def load_tokenizer(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    books = [np.array(b, dtype=np.float64) for b in obj["codebooks"]]
    cb = Codebooks(int(obj["levels"]), int(obj["codewords_per_level"]), books)
    item_to_identifier = {int(i): tuple(ident) for i, ident in obj["identifiers"].items()}
    max_extra = 0
    for ident in item_to_identifier.values():
        if len(ident) > cb.levels:
            group = [x for x in item_to_identifier.values() if x[: cb.levels] == ident[: cb.levels]]
            max_extra = max(max_extra, len(group))
    index = IdentifierIndex(
        item_to_identifier=item_to_identifier,
        identifier_to_item={ident: item for item, ident in item_to_identifier.items()},
        trie=_build_trie(item_to_identifier),
        base_levels=cb.levels,
        base_vocab=cb.codewords_per_level,
        max_extra_vocab=max_extra,
    )
    return cb, index
