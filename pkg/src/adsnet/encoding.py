"""Field embeddings plus field-weighted pairwise interactions (FwFM).

The encoded representation of a batch is the concatenation of every field's
embedding followed by one scalar ``r[i, j] * <e_i, e_j>`` per field pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class FieldSchema:
    fields: tuple  # ((name, vocab_size), ...)
    embedding_dim: int

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple((str(n), int(v)) for n, v in self.fields))
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise ValueError(f"field names must be unique: {names}")
        for name, vocab in self.fields:
            if vocab < 1:
                raise ValueError(f"field {name!r}: vocabulary size must be >= 1, got {vocab}")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")

    @classmethod
    def from_vocab(cls, vocab_sizes, embedding_dim, prefix="f_"):
        return cls(tuple((f"{prefix}{i}", v) for i, v in enumerate(vocab_sizes)), embedding_dim)

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def names(self):
        return [n for n, _ in self.fields]

    @property
    def vocab_sizes(self):
        return [v for _, v in self.fields]

    @property
    def pairs(self):
        return list(combinations(range(self.n_fields), 2))

    @property
    def encoded_dim(self) -> int:
        return self.n_fields * self.embedding_dim + len(self.pairs)

    def check_ids(self, X):
        """Raise ``IndexError`` naming the first field with an out-of-range id."""
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.n_fields:
            raise ValueError(f"expected ids of shape (n, {self.n_fields}), got {X.shape}")
        for col, (name, vocab) in enumerate(self.fields):
            bad = (X[:, col] < 0) | (X[:, col] >= vocab)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise IndexError(
                    f"field {name!r}: id {int(X[row, col])} out of range [0, {vocab}) (row {row})")


def init_embeddings(schema: FieldSchema, rng: np.random.Generator) -> dict:
    """Uniform(+-1/sqrt(dim)) tables, one per field, and a unit FwFM weight matrix."""
    bound = 1.0 / np.sqrt(schema.embedding_dim)
    params = {}
    for name, vocab in schema.fields:
        params[f"emb.{name}"] = dc.Parameter(
            rng.uniform(-bound, bound, size=(vocab, schema.embedding_dim)),
            name=f"emb.{name}", sparse=True)
    params["fwfm.r"] = dc.Parameter(np.ones((schema.n_fields, schema.n_fields)), name="fwfm.r")
    return params


def embed(X, params: dict, schema: FieldSchema) -> list:
    X = np.asarray(X, dtype=np.int64)
    if X.ndim == 1:
        X = X[None, :]
    return [dc.embedding(params[f"emb.{name}"], X[:, col])
            for col, name in enumerate(schema.names)]


def fwfm_interactions(field_embeddings, r) -> dc.Tensor:
    """Entry for pair (i, j), i < j, is ``r[i, j] * <e_i, e_j>``."""
    n = len(field_embeddings)
    if n < 2:
        raise ValueError("fwfm_interactions needs at least two fields")
    r = dc.as_tensor(r)
    if r.shape != (n, n):
        raise dc.ShapeError(f"fwfm: r has shape {r.shape}, expected {(n, n)}")
    flat = [i * n + j for i, j in combinations(range(n), 2)]
    return dc.mul(dc.pairwise_dots(field_embeddings), dc.take(r, flat))


def encode(X, params: dict, schema: FieldSchema) -> dc.Tensor:
    fields = embed(X, params, schema)
    parts = list(fields)
    if schema.n_fields >= 2:
        parts.append(fwfm_interactions(fields, params["fwfm.r"].tensor()))
    return dc.concat(parts, axis=1)
