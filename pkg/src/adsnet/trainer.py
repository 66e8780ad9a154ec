"""Two-stage iterative alignment training, optimizers and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from .backbone import (Architecture, Batch, NetworkParams, SegmentScheme, fit_segments,
                       forward, init_network, make_batch, per_example_loss)
from .encoding import FieldSchema
from .siamese import GainReport, SiameseState, build_objective, objective_report

logger = logging.getLogger(__name__)

VARIANTS = (
    "adsnet",
    "backbone_internal_only",
    "joint_mix_baseline",
    "ablate_no_gain_eval",
    "ablate_no_domain_adapt",
    "ablate_no_iter_align",
)
SIAMESE_VARIANTS = ("adsnet", "ablate_no_gain_eval", "ablate_no_domain_adapt",
                    "ablate_no_iter_align")


@dataclass
class TrainConfig:
    warmup_steps: int = 1000
    total_steps: int = 3000
    sync_frequency: int = 500
    batch_size: int = 512
    external_microbatch: int = 64
    beta: float = 0.1
    lr_dense: float = 5e-3
    lr_sparse: float = 1e-2
    ftrl_beta: float = 1.0
    ftrl_l1: float = 0.0
    ftrl_l2: float = 0.0
    seed: int = 0
    k_segments: int = 8
    k_experts: int = 4
    embedding_dim: int = 32
    expert_hidden: tuple = (128, 64)
    tower_hidden: int = 32

    def __post_init__(self):
        self.expert_hidden = tuple(int(h) for h in self.expert_hidden)
        for name in ("batch_size", "external_microbatch", "sync_frequency", "k_experts",
                     "embedding_dim", "tower_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("warmup_steps", "total_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.k_segments < 2:
            raise ValueError("k_segments must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.lr_dense <= 0 or self.lr_sparse <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.ftrl_l1, self.ftrl_l2) < 0 or self.ftrl_beta < 0:
            raise ValueError("FTRL regularisation terms must be >= 0")
        if not self.expert_hidden or min(self.expert_hidden) < 1:
            raise ValueError("expert_hidden must list positive sizes")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, value):
        return cls(np.zeros_like(value), np.zeros_like(value))


def dense_update(value, grad, slot: AdamSlot, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected adaptive-moment step, in place on ``value`` and ``slot``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not np.isfinite(grad).all():
        raise FloatingPointError(f"non-finite gradient at optimizer step {slot.t + 1}")
    slot.t += 1
    slot.m *= beta1
    slot.m += (1.0 - beta1) * grad
    slot.v *= beta2
    slot.v += (1.0 - beta2) * grad * grad
    m_hat = slot.m / (1.0 - beta1 ** slot.t)
    v_hat = slot.v / (1.0 - beta2 ** slot.t)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return value


def ftrl_warm_z(row, n, lr, beta=1.0):
    """Linear-term value that makes the FTRL closed form reproduce ``row``."""
    return -np.asarray(row) * (beta + np.sqrt(n)) / lr


def sparse_update(row, grad_row, z, n, lr, l1=0.0, l2=0.0, beta=1.0):
    """One FTRL-proximal per-coordinate step; returns ``(row, z, n)``.

    Coordinates with ``|z| <= l1`` come out exactly zero.
    """
    if l1 < 0 or l2 < 0:
        raise ValueError("l1 and l2 must be >= 0")
    n_new = n + grad_row * grad_row
    sigma = (np.sqrt(n_new) - np.sqrt(n)) / lr
    z_new = z + grad_row - sigma * row
    denom = (beta + np.sqrt(n_new)) / lr + l2
    new_row = np.where(np.abs(z_new) <= l1, 0.0, -(z_new - np.sign(z_new) * l1) / denom)
    return new_row, z_new, n_new


class _FtrlSlot:
    def __init__(self, shape):
        self.z = np.zeros(shape)
        self.n = np.zeros(shape)
        self.live = np.zeros(shape[0], dtype=bool)


class NetworkOptimizer:
    """Adaptive-moment steps for dense parameters, FTRL-proximal for embedding rows."""

    def __init__(self, net: NetworkParams, config: TrainConfig):
        self.net = net
        self.config = config
        self.reset()

    def reset(self):
        self.dense = {p.name: AdamSlot.like(p.value) for p in self.net.dense()}
        self.sparse = {p.name: _FtrlSlot(p.shape) for p in self.net.sparse()}

    def step(self):
        cfg = self.config
        for p in self.net.dense():
            dense_update(p.value, p.grad, self.dense[p.name], cfg.lr_dense)
        for p in self.net.sparse():
            rows, grads = p.sparse_grad()
            if rows.size == 0:
                continue
            if not np.isfinite(grads).all():
                raise FloatingPointError(f"non-finite gradient in {p.name}")
            slot = self.sparse[p.name]
            fresh = rows[~slot.live[rows]]
            if fresh.size:
                slot.z[fresh] = ftrl_warm_z(p.value[fresh], slot.n[fresh], cfg.lr_sparse,
                                            cfg.ftrl_beta)
                slot.live[fresh] = True
            new, slot.z[rows], slot.n[rows] = sparse_update(
                p.value[rows], grads, slot.z[rows], slot.n[rows], cfg.lr_sparse,
                cfg.ftrl_l1, cfg.ftrl_l2, cfg.ftrl_beta)
            p.value[rows] = new


# ---------------------------------------------------------------------------
# data streams


class BatchStream:
    """Endless seeded batches over ``n`` rows, reshuffling at every wraparound."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n <= 0:
            raise ValueError("cannot stream from an empty dataset")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need > 0:
            if self._pos >= self.n:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            self._pos += take.size
            need -= take.size
            out.append(take)
        return np.concatenate(out)


@dataclass
class TrainData:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.X = np.asarray(self.X, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X must be 2-d with one row per label, got {self.X.shape} "
                             f"for {self.y.shape[0]} labels")
        if np.any(self.y < 0):
            raise ValueError("ltv labels must be >= 0")

    def __len__(self):
        return len(self.y)


@dataclass
class TrainResult:
    variant: str
    config: TrainConfig
    arch: Architecture
    scheme: SegmentScheme
    vanilla: NetworkParams
    gain: Optional[NetworkParams]
    reports: list = field(default_factory=list)
    sync_steps: list = field(default_factory=list)

    @property
    def model(self) -> NetworkParams:
        """Network used for evaluation: the gain network when there is one."""
        return self.gain if self.gain is not None else self.vanilla


def _logit(p):
    p = min(max(p, 1e-4), 1 - 1e-4)
    return math.log(p / (1 - p))


def _init_output_biases(net: NetworkParams, y: np.ndarray, scheme: SegmentScheme):
    pos = y[y > 0]
    net["prob.b"].value[:] = _logit(pos.size / max(y.size, 1))
    if pos.size:
        for k, r in enumerate(scheme.ranks):
            net["ordinal.b"].value[k] = _logit(float(np.mean(pos > r)))


def build_model(schema: FieldSchema, internal: TrainData, config: TrainConfig,
                scheme: Optional[SegmentScheme] = None):
    """Architecture, frozen segment scheme and a freshly initialised network."""
    if len(internal) == 0:
        raise ValueError("internal training data is empty")
    schema.check_ids(internal.X)
    if scheme is None:
        pos = internal.y[internal.y > 0]
        if pos.size == 0:
            raise ValueError("internal training data has no purchases; cannot fit segments")
        scheme = fit_segments(pos, config.k_segments)
    arch = Architecture(schema, scheme.n_ordinal, config.k_experts, config.expert_hidden,
                        config.tower_hidden)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    net = init_network(arch, rng)
    _init_output_biases(net, internal.y, scheme)
    return arch, scheme, net


def _rows(data: TrainData, idx, scheme) -> Batch:
    return make_batch(data.X[idx], data.y[idx], scheme)


def _check_finite(*nets):
    for net in nets:
        if not net.all_finite():
            bad = [p.name for p in net if not np.isfinite(p.value).all()]
            raise FloatingPointError(f"non-finite parameters after optimizer step: {bad}")


def single_step(net, opt, arch, internal: Batch, external: Optional[Batch] = None):
    """One step of the plain backbone on internal (plus unweighted external) data."""
    net.zero_grad()
    with dc.Tape() as tape:
        loss = dc.mean(per_example_loss(forward(net, arch, internal.X), internal))
        total = loss
        ext_loss = None
        if external is not None and len(external):
            ext_loss = dc.mean(per_example_loss(forward(net, arch, external.X), external))
            total = dc.add(loss, ext_loss)
    tape.backward(total)
    opt.step()
    _check_finite(net)
    return loss.item(), (ext_loss.item() if ext_loss is not None else float("nan"))


def warmup(net, opt, arch, scheme, internal: TrainData, stream: BatchStream, steps: int):
    """Train ``net`` on internal batches only for ``steps`` steps."""
    if len(internal) == 0:
        raise ValueError("internal training data is empty")
    for _ in range(steps):
        single_step(net, opt, arch, _rows(internal, stream.next(), scheme))
    return net


def joint_step(state: SiameseState, opt_vanilla: NetworkOptimizer, opt_gain: NetworkOptimizer,
               internal: Batch, external: Optional[Batch], beta: float, step: int,
               gate: Optional[bool] = None) -> GainReport:
    """Measure the gain, backpropagate the total loss and step both networks."""
    state.vanilla.zero_grad()
    state.gain.zero_grad()
    with dc.Tape() as tape:
        obj = build_objective(state, internal, external, beta, gate=gate)
    tape.backward(obj.total)
    opt_gain.step()
    opt_vanilla.step()
    _check_finite(state.vanilla, state.gain)
    return objective_report(obj, step, beta)


def sync(state: SiameseState, opt_vanilla: Optional[NetworkOptimizer] = None):
    """Copy the gain network into the vanilla one and reset the vanilla optimizer."""
    state.vanilla.copy_from(state.gain)
    if opt_vanilla is not None:
        opt_vanilla.reset()
    return state


def _baseline_report(step, loss_t, loss_s, used_external):
    return GainReport(step, loss_t, loss_t, loss_s, 0.0, False,
                      1.0 if used_external else float("nan"), 0.0)


def train(schema: FieldSchema, internal: TrainData, external: Optional[TrainData],
          config: TrainConfig, variant: str = "adsnet",
          scheme: Optional[SegmentScheme] = None, on_step=None) -> TrainResult:
    """Warmup on internal data, then ``total_steps`` joint steps for ``variant``.

    ``on_step(t, state, synced)`` is called after every joint step of the
    siamese variants, once any re-sync for that step has happened.

    Ablations each switch off one mechanism: ``ablate_no_gain_eval`` always
    uses the external batch, ``ablate_no_domain_adapt`` sets beta to 0 and
    ``ablate_no_iter_align`` never re-syncs after the initial copy.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    arch, scheme, vanilla = build_model(schema, internal, config, scheme)
    seeds = np.random.SeedSequence([config.seed, 1]).spawn(2)
    int_stream = BatchStream(len(internal), config.batch_size, np.random.default_rng(seeds[0]))
    use_external = variant != "backbone_internal_only" and external is not None and len(external)
    ext_stream = None
    if use_external:
        schema.check_ids(external.X)
        ext_stream = BatchStream(len(external), config.external_microbatch,
                                 np.random.default_rng(seeds[1]))

    opt_van = NetworkOptimizer(vanilla, config)
    warmup(vanilla, opt_van, arch, scheme, internal, int_stream, config.warmup_steps)
    logger.debug("warmup finished after %d steps", config.warmup_steps)

    result = TrainResult(variant, config, arch, scheme, vanilla, None)
    T = config.total_steps
    if variant in ("backbone_internal_only", "joint_mix_baseline"):
        for t in range(1, T + 1):
            ib = _rows(internal, int_stream.next(), scheme)
            eb = _rows(external, ext_stream.next(), scheme) if ext_stream else None
            lt, ls = single_step(vanilla, opt_van, arch, ib, eb)
            result.reports.append(_baseline_report(t, lt, ls, eb is not None))
        return result

    gain = vanilla.clone()
    opt_gain = NetworkOptimizer(gain, config)
    state = SiameseState(arch, vanilla, gain)
    result.gain = gain
    beta = 0.0 if variant == "ablate_no_domain_adapt" else config.beta
    gate = True if variant == "ablate_no_gain_eval" else None
    resync = variant != "ablate_no_iter_align"
    for t in range(1, T + 1):
        ib = _rows(internal, int_stream.next(), scheme)
        eb = _rows(external, ext_stream.next(), scheme) if ext_stream else None
        report = joint_step(state, opt_van, opt_gain, ib, eb, beta, t, gate)
        result.reports.append(report)
        if resync and t % config.sync_frequency == 0:
            sync(state, opt_van)
            result.sync_steps.append(t)
        if on_step is not None:
            on_step(t, state, bool(result.sync_steps) and result.sync_steps[-1] == t)
        if t % 500 == 0:
            logger.info("step %d: w_gain=%.5f accepted=%s", t, report.w_gain, report.accepted)
    return result


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"ADSNETCKPT 1\n"


def save_checkpoint(path, result: TrainResult):
    """Write a versioned checkpoint: magic line, JSON header line, float64 LE blob."""
    tensors = []
    blobs = []
    offset = 0
    nets = [("vanilla", result.vanilla)] + ([("gain", result.gain)] if result.gain else [])
    for prefix, net in nets:
        for p in net:
            data = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
            tensors.append({"name": f"{prefix}/{p.name}", "shape": list(p.shape),
                            "sparse": p.sparse, "offset": offset})
            blobs.append(data)
            offset += len(data)
    header = {
        "variant": result.variant,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in dataclasses.asdict(result.config).items()},
        "schema": {"fields": [list(f) for f in result.arch.schema.fields],
                   "embedding_dim": result.arch.schema.embedding_dim},
        "scheme": {"edges": list(result.scheme.edges),
                   "segment_means": list(result.scheme.segment_means)},
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> TrainResult:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path}: not an ADSNet checkpoint")
        header = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    config = TrainConfig(**header["config"])
    schema = FieldSchema(tuple(tuple(f) for f in header["schema"]["fields"]),
                         header["schema"]["embedding_dim"])
    scheme = SegmentScheme(tuple(header["scheme"]["edges"]),
                           tuple(header["scheme"]["segment_means"]))
    arch = Architecture(schema, scheme.n_ordinal, config.k_experts, config.expert_hidden,
                        config.tower_hidden)
    nets: dict = {}
    for t in header["tensors"]:
        prefix, name = t["name"].split("/", 1)
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        value = np.frombuffer(blob, dtype="<f8", count=count, offset=t["offset"])
        nets.setdefault(prefix, {})[name] = dc.Parameter(
            value.reshape(t["shape"]).astype(np.float64), name=name, sparse=t["sparse"])
    vanilla = NetworkParams(nets["vanilla"])
    gain = NetworkParams(nets["gain"]) if "gain" in nets else None
    return TrainResult(header["variant"], config, arch, scheme, vanilla, gain)
