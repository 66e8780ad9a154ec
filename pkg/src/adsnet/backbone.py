"""Single-network LTV predictor: experts, purchase head, ordinal amount head.

Segment convention: positive labels are split into equal-frequency buckets
whose upper edges are ``SegmentScheme.edges``. The ordinal ranks are
``[0, *edges]`` so the first binary label is ``1{y > 0}`` and
``segment_means[0] == 0`` is the mean of the zero segment.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .encoding import FieldSchema, encode, init_embeddings


@dataclass(frozen=True)
class SegmentScheme:
    edges: tuple
    segment_means: tuple

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        means = tuple(float(m) for m in self.segment_means)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "segment_means", means)
        ranks = self.ranks
        if any(b <= a for a, b in zip(ranks, ranks[1:])):
            raise ValueError(f"segment ranks must be strictly increasing and > 0: {ranks}")
        if len(means) != len(ranks) + 1:
            raise ValueError(f"need {len(ranks) + 1} segment means, got {len(means)}")
        if means[0] != 0.0:
            raise ValueError("segment_means[0] must be 0")
        if any(b < a for a, b in zip(means, means[1:])):
            raise ValueError(f"segment means must be non-decreasing: {means}")

    @property
    def ranks(self) -> tuple:
        return (0.0,) + self.edges

    @property
    def n_ordinal(self) -> int:
        return len(self.ranks)


def fit_segments(positive_ltvs, k: int) -> SegmentScheme:
    """Equal-frequency segments over positive labels (nearest-rank quantiles).

    Edge ``k`` is the ``ceil(k * n / K)``-th smallest value. Duplicate edges and
    edges that would leave an empty top bucket are dropped with a warning.
    """
    values = np.sort(np.asarray(positive_ltvs, dtype=np.float64))
    if values.size == 0:
        raise ValueError("fit_segments needs at least one positive label")
    if np.any(values <= 0):
        raise ValueError("fit_segments expects strictly positive labels")
    if k < 2:
        raise ValueError("k must be >= 2")
    n = values.size
    raw = [values[math.ceil(j * n / k) - 1] for j in range(1, k)]
    edges = []
    for e in raw:
        if (not edges or e > edges[-1]) and e < values[-1]:
            edges.append(float(e))
    if len(edges) < k - 1:
        warnings.warn(f"fit_segments: only {len(edges) + 1} distinct segments available "
                      f"(requested {k})", stacklevel=2)
    bounds = [0.0] + edges + [np.inf]
    means = [0.0]
    for lo, hi in zip(bounds, bounds[1:]):
        bucket = values[(values > lo) & (values <= hi)]
        means.append(float(bucket.mean()))
    return SegmentScheme(tuple(edges), tuple(means))


def ordinal_labels(y, scheme_or_ranks) -> np.ndarray:
    """``s^k = 1{y > r_k}`` for scalar or array ``y``; returns float 0/1 values."""
    ranks = (scheme_or_ranks.ranks if isinstance(scheme_or_ranks, SegmentScheme)
             else tuple(scheme_or_ranks))
    y = np.asarray(y, dtype=np.float64)
    return (y[..., None] > np.asarray(ranks)).astype(np.float64)


def loss_prob(p, y) -> float:
    purchased = float(np.asarray(y) > 0)
    return dc.bce(np.array([p], dtype=float), np.array([purchased])).item()


def loss_amount(pk, sk, y) -> float:
    if not y > 0:
        return 0.0
    pk = np.asarray(pk, dtype=float)
    return float(dc.bce(pk, np.asarray(sk, dtype=float)).data.sum())


def loss_pltv(p, pk, y, scheme_or_ranks) -> float:
    return loss_prob(p, y) + loss_amount(pk, ordinal_labels(y, scheme_or_ranks), y)


def predict_ltv(p, pk, segment_means):
    """``p * sum_k p^k * (mean_k - mean_{k-1})`` over the first len(pk)+1 means."""
    means = np.asarray(getattr(segment_means, "segment_means", segment_means), dtype=np.float64)
    pk = np.asarray(pk, dtype=np.float64)
    steps = np.diff(means[: pk.shape[-1] + 1])
    return np.asarray(p, dtype=np.float64) * (pk @ steps)


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class Architecture:
    schema: FieldSchema
    n_ordinal: int
    n_experts: int = 4
    expert_hidden: tuple = (128, 64)
    tower_hidden: int = 32


class NetworkParams:
    """Ordered name -> Parameter mapping for one backbone instance."""

    def __init__(self, params: dict):
        self.params = dict(params)

    def __getitem__(self, name) -> dc.Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def parameters(self):
        return list(self.params.values())

    def dense(self):
        return [p for p in self.params.values() if not p.sparse]

    def sparse(self):
        return [p for p in self.params.values() if p.sparse]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy_from(self, other: "NetworkParams"):
        for name, p in self.params.items():
            q = other.params[name]
            if p.shape != q.shape:
                raise ValueError(f"{name}: shape {p.shape} != {q.shape}")
            p.value[...] = q.value

    def clone(self) -> "NetworkParams":
        return NetworkParams({n: dc.Parameter(p.value, name=n, sparse=p.sparse)
                              for n, p in self.params.items()})

    def equal(self, other: "NetworkParams") -> bool:
        """Bitwise equality of every parameter value."""
        return self.names() == other.names() and all(
            p.value.tobytes() == other.params[n].value.tobytes() for n, p in self.params.items())

    def all_finite(self) -> bool:
        return all(np.isfinite(p.value).all() for p in self.params.values())

    def state_dict(self) -> dict:
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict):
        for n, p in self.params.items():
            p.value[...] = state[n]


def _dense_init(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_network(arch: Architecture, rng: np.random.Generator) -> NetworkParams:
    params = init_embeddings(arch.schema, rng)

    def linear(name, fan_in, fan_out):
        params[f"{name}.W"] = dc.Parameter(_dense_init(rng, fan_in, fan_out), name=f"{name}.W")
        params[f"{name}.b"] = dc.Parameter(np.zeros(fan_out), name=f"{name}.b")

    d_in = arch.schema.encoded_dim
    for j in range(arch.n_experts):
        sizes = (d_in,) + tuple(arch.expert_hidden)
        for layer, (a, b) in enumerate(zip(sizes, sizes[1:])):
            linear(f"expert{j}.{layer}", a, b)
    linear("gate", d_in, arch.n_experts)
    d_h = arch.expert_hidden[-1]
    linear("adapter", d_h, arch.tower_hidden)
    linear("prob", arch.tower_hidden, 1)
    linear("ordinal", arch.tower_hidden, arch.n_ordinal)
    linear("signif", arch.tower_hidden, 1)
    return NetworkParams(params)


def _linear(net, name, x):
    return dc.add(dc.matmul(x, net[f"{name}.W"].tensor()), net[f"{name}.b"].tensor())


class Outputs(NamedTuple):
    E: dc.Tensor
    h: dc.Tensor
    adapter: dc.Tensor
    p: dc.Tensor  # (B,)
    pk: dc.Tensor  # (B, n_ordinal)
    signif_logit: dc.Tensor  # (B,)


def expert_forward(E, net: NetworkParams, arch: Architecture) -> dc.Tensor:
    """Gate-weighted sum of the expert MLP outputs."""
    gates = dc.softmax(_linear(net, "gate", E))
    h = None
    for j in range(arch.n_experts):
        v = E
        for layer in range(len(arch.expert_hidden)):
            v = dc.relu(_linear(net, f"expert{j}.{layer}", v))
        term = dc.mul(dc.slice_cols(gates, j, j + 1), v)
        h = term if h is None else dc.add(h, term)
    return h


def forward(net: NetworkParams, arch: Architecture, X) -> Outputs:
    E = encode(X, net.params, arch.schema)
    h = expert_forward(E, net, arch)
    adapter = dc.relu(_linear(net, "adapter", h))
    n = E.shape[0]
    p = dc.reshape(dc.sigmoid(_linear(net, "prob", adapter)), (n,))
    pk = dc.sigmoid(_linear(net, "ordinal", adapter))
    signif = dc.reshape(_linear(net, "signif", adapter), (n,))
    return Outputs(E, h, adapter, p, pk, signif)


class Batch(NamedTuple):
    X: np.ndarray
    y: np.ndarray
    purchased: np.ndarray
    ordinal: np.ndarray

    def __len__(self):
        return len(self.y)


def make_batch(X, y, scheme: SegmentScheme) -> Batch:
    X = np.asarray(X, dtype=np.int64)
    y = np.asarray(y, dtype=np.float64)
    return Batch(X, y, (y > 0).astype(np.float64), ordinal_labels(y, scheme))


def per_example_loss(out: Outputs, batch: Batch) -> dc.Tensor:
    """Purchase BCE plus, for purchasers only, the summed ordinal BCE."""
    prob = dc.bce(out.p, batch.purchased)
    amount = dc.sum_(dc.bce(out.pk, batch.ordinal), axis=1)
    return dc.add(prob, dc.mul(amount, batch.purchased))


def predict(net: NetworkParams, arch: Architecture, scheme: SegmentScheme, X, chunk=4096):
    """Purchase probabilities and pLTV for ``X`` in inference mode."""
    X = np.asarray(X, dtype=np.int64)
    ps, ltvs = [], []
    for start in range(0, len(X), chunk):
        out = forward(net, arch, X[start:start + chunk])
        ps.append(out.p.data)
        ltvs.append(predict_ltv(out.p.data, out.pk.data, scheme))
    if not ps:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(ps), np.concatenate(ltvs)
