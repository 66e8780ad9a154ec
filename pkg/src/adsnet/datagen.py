"""Synthetic two-domain LTV data, CSV I/O and per-ad long-tail profiles.

Labels are zero-inflated: a Bernoulli purchase times an amount snapped to one
of the purchase tiers (6, 30, 98, 198) with +-10% jitter. Both the purchase
probability and the amount depend on a user-ad affinity score, so the label
is learnable from the categorical features. Intercepts are calibrated per
domain so the realised purchase rate and mean LTV match the requested targets
in expectation.

External examples differ from internal ones in two controllable ways:
``shift`` offsets the projections that produce the user feature ids (so the
same id means something different in the external source), and a
``noise_fraction`` of external labels is shuffled among themselves, which
keeps the external label marginal but destroys any link to the features.
"""

from __future__ import annotations

import dataclasses
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import norm

from .encoding import FieldSchema

TIERS = np.array([6.0, 30.0, 98.0, 198.0])
N_DAYS = 90
TRAIN_DAYS = 70
VAL_DAYS = 10
DOMAINS = ("internal", "external")


class DataError(ValueError):
    """Malformed input data (bad CSV row, out-of-range id, negative label)."""


@dataclass(frozen=True)
class Example:
    feature_ids: tuple
    domain: str
    domain_id: int
    ltv: float
    day: int = 0
    ad_id: int = 0

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DataError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if not self.ltv >= 0:
            raise DataError(f"ltv must be >= 0, got {self.ltv}")


@dataclass
class Dataset:
    """Column-oriented collection of examples."""

    X: np.ndarray
    ltv: np.ndarray
    external: np.ndarray
    domain_id: np.ndarray
    day: np.ndarray
    ad_id: np.ndarray

    def __post_init__(self):
        n = len(self.ltv)
        X = np.asarray(self.X, dtype=np.int64)
        self.X = X if X.ndim == 2 and X.shape[0] == n else X.reshape(n, -1)
        self.ltv = np.asarray(self.ltv, dtype=np.float64)
        self.external = np.asarray(self.external, dtype=bool)
        self.domain_id = np.asarray(self.domain_id, dtype=np.int64)
        self.day = np.asarray(self.day, dtype=np.int64)
        self.ad_id = np.asarray(self.ad_id, dtype=np.int64)

    def __len__(self):
        return len(self.ltv)

    @property
    def n_fields(self):
        return self.X.shape[1]

    def subset(self, mask) -> "Dataset":
        return Dataset(self.X[mask], self.ltv[mask], self.external[mask], self.domain_id[mask],
                       self.day[mask], self.ad_id[mask])

    def internal(self) -> "Dataset":
        return self.subset(~self.external)

    def external_only(self) -> "Dataset":
        return self.subset(self.external)

    @classmethod
    def empty(cls, n_fields):
        return cls(np.zeros((0, n_fields)), [], [], [], [], [])

    @classmethod
    def concat(cls, parts) -> "Dataset":
        parts = list(parts)
        return cls(np.concatenate([p.X for p in parts]), np.concatenate([p.ltv for p in parts]),
                   np.concatenate([p.external for p in parts]),
                   np.concatenate([p.domain_id for p in parts]),
                   np.concatenate([p.day for p in parts]),
                   np.concatenate([p.ad_id for p in parts]))

    @classmethod
    def from_examples(cls, examples, n_fields: Optional[int] = None) -> "Dataset":
        examples = list(examples)
        if not examples:
            return cls.empty(n_fields or 0)
        return cls(np.array([e.feature_ids for e in examples]), [e.ltv for e in examples],
                   [e.domain == "external" for e in examples],
                   [e.domain_id for e in examples], [e.day for e in examples],
                   [e.ad_id for e in examples])

    def to_examples(self) -> list:
        return [Example(tuple(int(v) for v in self.X[i]),
                        "external" if self.external[i] else "internal",
                        int(self.domain_id[i]), float(self.ltv[i]), int(self.day[i]),
                        int(self.ad_id[i]))
                for i in range(len(self))]


@dataclass
class DatasetSplit:
    train: Dataset
    validation: Dataset
    test: Dataset

    def __post_init__(self):
        if self.validation.external.any() or self.test.external.any():
            raise DataError("validation and test splits must be internal only")


@dataclass(frozen=True)
class SyntheticSpec:
    n_internal: int = 20000
    n_external: int = 60000
    purchase_rate_internal: float = 0.08
    purchase_rate_external: float = 0.15
    mean_ltv_internal: float = 2.0
    mean_ltv_external: float = 8.02
    shift: float = 0.0
    noise_fraction: float = 0.0
    n_fields: int = 6
    vocab_sizes: tuple = (500, 20, 12, 12, 12, 12)
    seed: int = 0
    n_internal_domains: int = 3
    # traffic shares of the internal domains, smallest to largest
    domain_weights: tuple = (9136.0, 15706.0, 34129.0)
    # purchase-logit offsets per internal domain
    domain_offsets: tuple = (-0.6, -0.3, 0.3)
    ad_popularity_exponent: float = 1.2
    # the external domain shows the same ads with its own popularity curve
    ad_popularity_exponent_external: float = 1.2
    latent_rank: int = 4
    affinity_scale: float = 1.5
    ad_bias_scale: float = 1.0
    feature_noise: float = 0.5
    amount_noise: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        object.__setattr__(self, "domain_weights", tuple(float(v) for v in self.domain_weights))
        object.__setattr__(self, "domain_offsets", tuple(float(v) for v in self.domain_offsets))
        for name in ("purchase_rate_internal", "purchase_rate_external", "noise_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.n_internal < 0 or self.n_external < 0:
            raise ValueError("counts must be >= 0")
        if min(self.ad_popularity_exponent, self.ad_popularity_exponent_external) < 0:
            raise ValueError("popularity exponents must be >= 0")
        if self.shift < 0:
            raise ValueError("shift must be >= 0")
        if self.n_fields < 3 or len(self.vocab_sizes) != self.n_fields:
            raise ValueError("need n_fields >= 3 and one vocabulary size per field")
        if min(self.vocab_sizes) < 2:
            raise ValueError("vocabulary sizes must be >= 2")
        if len(self.domain_weights) != self.n_internal_domains or \
                len(self.domain_offsets) != self.n_internal_domains:
            raise ValueError("domain_weights and domain_offsets need one entry per internal domain")
        for rate, mean, where in ((self.purchase_rate_internal, self.mean_ltv_internal, "internal"),
                                  (self.purchase_rate_external, self.mean_ltv_external, "external")):
            if rate > 0:
                per_buyer = mean / rate
                if not TIERS[0] < per_buyer < TIERS[-1]:
                    raise ValueError(f"{where}: mean_ltv / purchase_rate = {per_buyer:.3g} is "
                                     f"outside the reachable tier range")

    def schema(self, embedding_dim: int = 8) -> FieldSchema:
        return FieldSchema.from_vocab(self.vocab_sizes, embedding_dim)

    def replace(self, **changes) -> "SyntheticSpec":
        return dataclasses.replace(self, **changes)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _solve_intercept(score, target):
    """Intercept c with mean(sigmoid(c + score)) == target (bisection)."""
    if target <= 0.0:
        return -np.inf
    if target >= 1.0:
        return np.inf
    lo, hi = -40.0, 40.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _sigmoid(mid + score).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _snap(log_amount):
    idx = np.abs(log_amount[:, None] - np.log(TIERS)[None, :]).argmin(axis=1)
    return TIERS[idx]


def _solve_amount_shift(base, weights, eps, target):
    """Shift mu so the purchase-weighted mean snapped tier equals ``target``."""
    lo, hi = -10.0, 15.0
    w = weights / weights.sum()
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if (w * _snap(mid + base + eps)).sum() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class _World:
    """Shared ads, projections and bin edges for both domains."""

    def __init__(self, spec: SyntheticSpec, rng):
        r = spec.latent_rank
        n_ads = spec.vocab_sizes[0]
        self.ad_vec = rng.normal(size=(n_ads, r)) / math.sqrt(r)
        self.ad_bias = rng.normal(scale=spec.ad_bias_scale, size=n_ads)
        rank = np.arange(n_ads) + 1.0
        self.ad_pop = rank ** -spec.ad_popularity_exponent
        self.ad_pop /= self.ad_pop.sum()
        self.ad_pop_external = rank ** -spec.ad_popularity_exponent_external
        self.ad_pop_external /= self.ad_pop_external.sum()
        n_cat = spec.vocab_sizes[1]
        cat_edges = norm.ppf(np.arange(1, n_cat) / n_cat, scale=math.sqrt(1.0 / r))
        self.ad_cat = np.searchsorted(cat_edges, self.ad_vec[:, 0])
        n_user = spec.n_fields - 2
        proj = rng.normal(size=(n_user, r))
        self.proj = proj / np.linalg.norm(proj, axis=1, keepdims=True)
        sd = math.sqrt(1.0 + spec.feature_noise ** 2)
        self.user_edges = [norm.ppf(np.arange(1, v) / v, scale=sd) for v in spec.vocab_sizes[2:]]
        self.amount_slope = 0.5


def _draw(spec: SyntheticSpec, world: _World, n: int, rng, external: bool):
    r = spec.latent_rank
    pop = world.ad_pop_external if external else world.ad_pop
    ads = rng.choice(len(pop), size=n, p=pop)
    users = rng.normal(size=(n, r))
    raw = users @ world.proj.T + spec.feature_noise * rng.normal(size=(n, world.proj.shape[0]))
    if external:
        raw = raw + spec.shift
    X = np.empty((n, spec.n_fields), dtype=np.int64)
    X[:, 0] = ads
    X[:, 1] = world.ad_cat[ads]
    for j, edges in enumerate(world.user_edges):
        X[:, 2 + j] = np.searchsorted(edges, raw[:, j])
    affinity = spec.affinity_scale * np.einsum("nr,nr->n", users, world.ad_vec[ads]) * math.sqrt(r)
    score = affinity + world.ad_bias[ads]
    if external:
        domain_id = np.zeros(n, dtype=np.int64)
        offsets = np.zeros(n)
        days = rng.integers(0, TRAIN_DAYS, size=n)
    else:
        w = np.asarray(spec.domain_weights)
        domain_id = rng.choice(spec.n_internal_domains, size=n, p=w / w.sum())
        offsets = np.asarray(spec.domain_offsets)[domain_id]
        days = rng.integers(0, N_DAYS, size=n)
    logits = score + offsets
    amount_eps = spec.amount_noise * rng.normal(size=n)
    jitter = rng.uniform(0.9, 1.1, size=n)
    u = rng.uniform(size=n)
    return X, ads, domain_id, days, logits, amount_eps, jitter, u


def _labels(logits, amount_eps, jitter, u, rate, mean_ltv, slope):
    n = logits.size
    if n == 0 or rate <= 0:
        return np.zeros(n)
    c = _solve_intercept(logits, rate)
    p = _sigmoid(c + logits)
    base = slope * logits
    mu = _solve_amount_shift(base, p, amount_eps, mean_ltv / rate)
    amount = _snap(mu + base + amount_eps) * jitter
    return np.where(u < p, np.round(amount, 6), 0.0)


def generate(spec: SyntheticSpec) -> DatasetSplit:
    """Deterministic (per seed) internal/external data split by synthetic day."""
    world_seed, int_seed, ext_seed, noise_seed = np.random.SeedSequence(spec.seed).spawn(4)
    world = _World(spec, np.random.default_rng(world_seed))

    parts = []
    for n, seed, external in ((spec.n_internal, int_seed, False),
                              (spec.n_external, ext_seed, True)):
        X, ads, dom, days, logits, eps, jitter, u = _draw(
            spec, world, n, np.random.default_rng(seed), external)
        rate = spec.purchase_rate_external if external else spec.purchase_rate_internal
        mean = spec.mean_ltv_external if external else spec.mean_ltv_internal
        ltv = _labels(logits, eps, jitter, u, rate, mean, world.amount_slope)
        if external and spec.noise_fraction > 0 and n:
            rng = np.random.default_rng(noise_seed)
            noisy = np.flatnonzero(rng.uniform(size=n) < spec.noise_fraction)
            ltv[noisy] = ltv[rng.permutation(noisy)]
        parts.append(Dataset(X, ltv, np.full(n, external), dom, days, ads))
    data = Dataset.concat(parts)
    return split_by_day(data)


def split_by_day(data: Dataset) -> DatasetSplit:
    """70/10/10-day split; validation and test keep internal examples only."""
    train = data.subset(data.day < TRAIN_DAYS)
    rest = data.subset((data.day >= TRAIN_DAYS) & ~data.external)
    return DatasetSplit(train, rest.subset(rest.day < TRAIN_DAYS + VAL_DAYS),
                        rest.subset(rest.day >= TRAIN_DAYS + VAL_DAYS))


# ---------------------------------------------------------------------------
# CSV


def csv_header(schema: FieldSchema) -> list:
    return ["domain", "domain_id", "day", "ad_id", *schema.names, "ltv"]


def _fmt_ltv(v: float) -> str:
    s = f"{v:.6f}".rstrip("0").rstrip(".")
    return s or "0"


def write_csv(path, data: Dataset, schema: FieldSchema):
    buf = io.StringIO()
    buf.write(",".join(csv_header(schema)) + "\n")
    for i in range(len(data)):
        row = ["external" if data.external[i] else "internal", str(data.domain_id[i]),
               str(data.day[i]), str(data.ad_id[i]), *map(str, data.X[i]),
               _fmt_ltv(float(data.ltv[i]))]
        buf.write(",".join(row) + "\n")
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def load_csv(path, schema: FieldSchema) -> list:
    """Parse and validate a CSV file into a list of ``Example``."""
    return load_dataset(path, schema).to_examples()


def _int_field(value, line_no, col):
    try:
        v = int(value)
    except ValueError:
        raise DataError(f"line {line_no}, column {col!r}: expected an integer, got {value!r}") from None
    if v < 0:
        raise DataError(f"line {line_no}, column {col!r}: negative value {v}")
    return v


def load_dataset(path, schema: FieldSchema) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{path}: missing header")
    expected = csv_header(schema)
    header = lines[0].split(",")
    if header != expected:
        raise DataError(f"{path}: header {header} does not match schema {expected}")
    vocab = schema.vocab_sizes
    X, ltv, ext, dom, days, ads = [], [], [], [], [], []
    for line_no, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(expected):
            raise DataError(f"line {line_no}: expected {len(expected)} columns, got {len(cells)}")
        if cells[0] not in DOMAINS:
            raise DataError(f"line {line_no}, column 'domain': unknown domain {cells[0]!r}")
        ids = []
        for j, name in enumerate(schema.names):
            v = _int_field(cells[4 + j], line_no, name)
            if v >= vocab[j]:
                raise DataError(f"line {line_no}: field {name!r} id {v} out of range [0, {vocab[j]})")
            ids.append(v)
        try:
            y = float(cells[-1])
        except ValueError:
            raise DataError(f"line {line_no}, column 'ltv': not a number {cells[-1]!r}") from None
        if not (math.isfinite(y) and y >= 0):
            raise DataError(f"line {line_no}, column 'ltv': must be a finite value >= 0, got {y}")
        ext.append(cells[0] == "external")
        dom.append(_int_field(cells[1], line_no, "domain_id"))
        days.append(_int_field(cells[2], line_no, "day"))
        ads.append(_int_field(cells[3], line_no, "ad_id"))
        X.append(ids)
        ltv.append(y)
    if not X:
        return Dataset.empty(schema.n_fields)
    return Dataset(np.array(X), ltv, ext, dom, days, ads)


# ---------------------------------------------------------------------------
# long tail


@dataclass
class LongTailProfile:
    counts: dict  # ad_id -> record count
    edges: tuple
    histogram: list = field(default_factory=list)  # number of ads per interval

    def bucket_of(self, count) -> int:
        return bucket_index(count, self.edges)


def bucket_index(count, edges) -> int:
    """Interval index for ``count``: [0, e0], (e0, e1], ..., (e_last, inf)."""
    for i, e in enumerate(edges):
        if count <= e:
            return i
    return len(edges)


def bucket_labels(edges) -> list:
    labels = []
    lo = 0
    for i, e in enumerate(edges):
        labels.append(f"[{lo}:{e:g}]" if i == 0 else f"({lo:g}:{e:g}]")
        lo = e
    labels.append(f"({lo:g}:inf)" if edges else "[0:inf)")
    return labels


def long_tail_profile(data: Dataset, edges=(15,)) -> LongTailProfile:
    """Records per ad and how many ads fall in each count interval."""
    counts = dict(sorted(Counter(int(a) for a in data.ad_id).items()))
    hist = [0] * (len(edges) + 1)
    for c in counts.values():
        hist[bucket_index(c, edges)] += 1
    return LongTailProfile(counts, tuple(edges), hist)
