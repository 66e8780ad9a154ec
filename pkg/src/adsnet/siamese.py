"""Vanilla/gain network pair: gain evaluation, gated external loss, distillation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import diffcore as dc
from .backbone import Architecture, Batch, NetworkParams, Outputs, forward, per_example_loss


@dataclass
class SiameseState:
    arch: Architecture
    vanilla: NetworkParams
    gain: NetworkParams

    def __post_init__(self):
        if self.vanilla.names() != self.gain.names():
            raise ValueError("vanilla and gain networks must have the same parameters")
        for name in self.vanilla.names():
            if self.vanilla[name].shape != self.gain[name].shape:
                raise ValueError(f"{name}: shape mismatch between networks")

    def swapped(self) -> "SiameseState":
        return SiameseState(self.arch, self.gain, self.vanilla)


@dataclass(frozen=True)
class GainReport:
    step: int
    loss_van_t: float
    loss_gain_t: float
    loss_gain_s: float
    w_gain: float
    accepted: bool
    mean_w_s: float
    l_domain: float = 0.0

    def __post_init__(self):
        if self.w_gain != self.loss_van_t - self.loss_gain_t:
            raise ValueError("w_gain must equal loss_van_t - loss_gain_t")
        if self.accepted != (self.w_gain > 0):
            raise ValueError("accepted must equal (w_gain > 0)")


def _check_internal(batch: Batch):
    if batch is None or len(batch) == 0:
        raise ValueError("internal batch must not be empty")


def compute_gain(internal: Batch, state: SiameseState, step: int = 0) -> GainReport:
    """Gain of the gain network over the vanilla one on the same internal batch."""
    _check_internal(internal)
    van = dc.mean(per_example_loss(forward(state.vanilla, state.arch, internal.X), internal)).item()
    gain = dc.mean(per_example_loss(forward(state.gain, state.arch, internal.X), internal)).item()
    w = van - gain
    return GainReport(step, van, gain, 0.0, w, w > 0, 0.0)


def external_weight(out_or_net, arch: Optional[Architecture] = None, X=None) -> dc.Tensor:
    """``W_s = 1 / exp(sigmoid(z))`` from the significance head on the adapter layer.

    Accepts either forward ``Outputs`` or a network plus ids.
    """
    out = out_or_net if isinstance(out_or_net, Outputs) else forward(out_or_net, arch, X)
    return significance_weight(out.signif_logit)


def significance_weight(logit) -> dc.Tensor:
    return dc.reciprocal(dc.exp(dc.sigmoid(logit)))


def _domain_terms(van_out, gain_out: Outputs):
    l_embed = dc.mse(dc.detach(van_out.E), gain_out.E)
    l_tower = dc.mse(dc.detach(van_out.adapter), gain_out.adapter)
    return l_embed, l_tower, dc.add(l_embed, l_tower)


class DomainTargets(NamedTuple):
    """Constant vanilla-side targets for the distillation terms."""

    E: np.ndarray
    adapter: np.ndarray


def domain_targets(internal: Batch, state: SiameseState) -> DomainTargets:
    out = forward(state.vanilla, state.arch, internal.X)
    return DomainTargets(out.E.data.copy(), out.adapter.data.copy())


def domain_losses(internal: Batch, state: SiameseState):
    """(L_embed, L_task_tower, L_domain); the vanilla side is a constant target."""
    _check_internal(internal)
    van_out = forward(state.vanilla, state.arch, internal.X)
    gain_out = forward(state.gain, state.arch, internal.X)
    return _domain_terms(van_out, gain_out)


class Objective(NamedTuple):
    total: dc.Tensor
    loss_van_t: dc.Tensor
    loss_gain_t: dc.Tensor
    loss_gain_s: Optional[dc.Tensor]
    l_domain: Optional[dc.Tensor]
    w_gain: float
    used_external: bool
    mean_w_s: float


def _external_term(state: SiameseState, external: Optional[Batch]):
    if external is None or len(external) == 0:
        return None, float("nan")
    out = forward(state.gain, state.arch, external.X)
    w_s = significance_weight(out.signif_logit)
    term = dc.mean(dc.mul(w_s, per_example_loss(out, external)))
    return term, float(w_s.data.mean())


def build_objective(state: SiameseState, internal: Batch, external: Optional[Batch],
                    beta: float, gate: Optional[bool] = None,
                    targets: Optional[DomainTargets] = None) -> Objective:
    """Forward both networks once and assemble the total loss.

    ``gate=None`` applies the strict ``W_G > 0`` rule; ``True``/``False`` force
    the external term on or off (the reported verdict stays ``W_G > 0``). The
    gain is always measured with the current parameters, before any update.

    The distillation targets are the vanilla outputs behind a stop-gradient.
    Passing ``targets`` pins them to fixed arrays instead, which gives the
    same value and gradient at the current point but makes the loss a plain
    function of the parameters (what a finite-difference check needs).
    """
    _check_internal(internal)
    if beta < 0:
        raise ValueError("beta must be >= 0")
    van_out = forward(state.vanilla, state.arch, internal.X)
    gain_out = forward(state.gain, state.arch, internal.X)
    l_van = dc.mean(per_example_loss(van_out, internal))
    l_gain_t = dc.mean(per_example_loss(gain_out, internal))
    w_gain = l_van.item() - l_gain_t.item()
    use = (w_gain > 0) if gate is None else bool(gate)

    ext, mean_w_s = _external_term(state, external)
    l_gain = l_gain_t
    if use and ext is not None:
        l_gain = dc.add(l_gain_t, ext)
    total = dc.add(l_gain, l_van)
    l_domain = None
    if beta > 0:
        l_domain = _domain_terms(targets or van_out, gain_out)[2]
        total = dc.add(total, dc.scale(l_domain, beta))
    return Objective(total, l_van, l_gain_t, ext, l_domain, w_gain, use, mean_w_s)


def gain_loss(external: Optional[Batch], internal: Batch, state: SiameseState,
              report: GainReport) -> dc.Tensor:
    """Gain-network loss: gated, significance-weighted external mean plus internal mean."""
    _check_internal(internal)
    l_gain_t = dc.mean(per_example_loss(forward(state.gain, state.arch, internal.X), internal))
    ext, _ = _external_term(state, external)
    if report.w_gain > 0 and ext is not None:
        return dc.add(l_gain_t, ext)
    return l_gain_t


def total_loss(internal: Batch, external: Optional[Batch], state: SiameseState,
               beta: float) -> dc.Tensor:
    return build_objective(state, internal, external, beta).total


def objective_report(obj: Objective, step: int, beta: float) -> GainReport:
    l_van = obj.loss_van_t.item()
    l_gain_t = obj.loss_gain_t.item()
    w_gain = l_van - l_gain_t
    return GainReport(
        step=step,
        loss_van_t=l_van,
        loss_gain_t=l_gain_t,
        loss_gain_s=obj.loss_gain_s.item() if obj.loss_gain_s is not None else float("nan"),
        w_gain=w_gain,
        accepted=w_gain > 0,
        mean_w_s=obj.mean_w_s,
        l_domain=beta * obj.l_domain.item() if obj.l_domain is not None else 0.0,
    )
