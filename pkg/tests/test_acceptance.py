"""End-to-end acceptance checks, one test per criterion.

The benchmark criteria (4 to 7) share one five-seed run of
``benchmarks/negative_transfer.cfg``. It takes roughly a quarter of an hour
on one core.
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from adsnet import diffcore as dc
from adsnet.backbone import Architecture, SegmentScheme, init_network, make_batch
from adsnet.encoding import FieldSchema
from adsnet.experiment import ExperimentPlan, run_bench
from adsnet.metrics import auc, normalized_gini
from adsnet.siamese import SiameseState, build_objective, compute_gain, domain_targets
from adsnet.trainer import TrainConfig, TrainData, train

from conftest import record_criterion
from oracles import auc_pairs, normalized_gini_lorenz

BENCH_PLAN = Path(__file__).resolve().parents[1] / "benchmarks" / "negative_transfer.cfg"
MAIN = ("backbone_internal_only", "joint_mix_baseline", "adsnet")
ABLATIONS = ("ablate_no_gain_eval", "ablate_no_domain_adapt", "ablate_no_iter_align")

SCHEME = SegmentScheme((5.0, 20.0), (0.0, 3.0, 10.0, 40.0))
SCHEMA = FieldSchema.from_vocab([6, 4, 3], 2)
ARCH = Architecture(SCHEMA, n_ordinal=3, n_experts=2, expert_hidden=(4,), tower_hidden=3)

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


def random_batch(rng, n):
    X = np.column_stack([rng.integers(0, v, size=n) for v in SCHEMA.vocab_sizes])
    y = np.where(rng.random(n) < 0.5, 0.0, rng.uniform(1, 40, size=n))
    return make_batch(X, y, SCHEME)


def random_state(seed, perturb=0.3):
    rng = np.random.default_rng(seed)
    van = init_network(ARCH, rng)
    gain = van.clone()
    for p in gain:
        p.value += perturb * rng.normal(size=p.shape)
    return SiameseState(ARCH, van, gain), rng


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        state, rng = random_state(seed)
        internal, external = random_batch(rng, 4), random_batch(rng, 4)
        params = state.vanilla.parameters() + state.gain.parameters()
        targets = domain_targets(internal, state)
        for gate in (None, True):
            loss = lambda: build_objective(state, internal, external, 0.3, gate=gate,
                                           targets=targets).total
            worst = max(worst, dc.finite_difference_check(loss, params))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60
    record_criterion(1, ok, f"max rel err {worst:.2e} (< 1e-5), {elapsed:.1f} s (< 60 s)")
    assert ok


def test_criterion_2_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        ltv = np.where(rng.random(n) < 0.4, rng.choice([1.0, 6.0, 30.0, 98.0], size=n), 0.0)
        score = rng.integers(0, max(2, n // 3), size=n) / 7.0
        for got, want in ((auc(ltv, score), auc_pairs(ltv, score)),
                          (normalized_gini(ltv, score),
                           normalized_gini_lorenz(list(ltv), list(score)))):
            assert (got is None) == (want is None)
            if want is not None:
                worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 10
    record_criterion(2, ok, f"max abs diff {worst:.1e} (<= 1e-12), {elapsed:.1f} s (< 10 s)")
    assert ok


def gain_grads(state, internal, external):
    state.gain.zero_grad()
    state.vanilla.zero_grad()
    with dc.Tape() as tape:
        loss = build_objective(state, internal, external, 0.5).total
    tape.backward(loss)
    return [p.grad.tobytes() for p in state.gain]


def test_criterion_3_rejection_zeroing():
    identical = 0
    for seed in range(50):
        state, rng = random_state(1000 + seed)
        internal, external = random_batch(rng, 5), random_batch(rng, 4)
        if compute_gain(internal, state).w_gain > 0:
            state = state.swapped()
        assert compute_gain(internal, state).w_gain <= 0
        identical += gain_grads(state, internal, external) == gain_grads(state, internal, None)
    record_criterion(3, identical == 50, f"{identical}/50 rejected states bitwise identical")
    assert identical == 50


def test_criterion_8_sync_conformance():
    rng = np.random.default_rng(8)
    schema = FieldSchema.from_vocab([4, 3], 2)
    X = np.column_stack([rng.integers(0, 4, 80), rng.integers(0, 3, 80)])
    y = np.where(rng.random(80) < 0.5, rng.uniform(1, 30, 80), 0.0)
    problems = []
    for _ in range(10):
        T, f = int(rng.integers(5, 60)), int(rng.integers(1, 15))
        cfg = TrainConfig(warmup_steps=3, total_steps=T, sync_frequency=f, batch_size=4,
                          external_microbatch=3, embedding_dim=2, expert_hidden=(3,),
                          tower_hidden=2, k_experts=2, k_segments=3, seed=int(rng.integers(99)))
        unequal = []

        def check(t, state, synced):
            if synced and not state.vanilla.equal(state.gain):
                unequal.append(t)

        result = train(schema, TrainData(X, y), TrainData(X[::-1], y[::-1]), cfg, "adsnet",
                       on_step=check)
        after = [result.reports[t].w_gain for t in result.sync_steps if t < T]
        if len(result.sync_steps) != T // f or unequal or any(w != 0.0 for w in after):
            problems.append((T, f, len(result.sync_steps), unequal, after))
    record_criterion(8, not problems, f"10 (T, f) pairs, {len(problems)} violations")
    assert not problems


# ---- benchmark criteria


@pytest.fixture(scope="module")
def bench():
    plan = ExperimentPlan.from_text(BENCH_PLAN.read_text())
    start = time.perf_counter()
    main = run_bench(replace(plan, variants=MAIN))
    main_time = time.perf_counter() - start
    ablations = run_bench(replace(plan, variants=ABLATIONS))
    runs = main + ablations

    def median(variant, attr, index=None):
        vals = [getattr(r, attr) if index is None else getattr(r, attr)[index]
                for r in runs if r.variant == variant]
        return float(np.median(vals))

    return plan, runs, median, main_time


def test_criterion_4_negative_transfer(bench):
    plan, _, median, main_time = bench
    back, joint, ads = (median(v, "gini") for v in MAIN)
    ok = joint < back and ads >= back + 0.01 and main_time < 15 * 60
    record_criterion(4, ok, f"median gini backbone {back:.4f}, joint {joint:.4f} (< backbone), "
                     f"adsnet {ads:.4f} (>= backbone + 0.01), {len(plan.seeds) * 3} runs "
                     f"in {main_time / 60:.1f} min (< 15)")
    assert ok


def test_criterion_5_rejection_dynamics(bench):
    _, _, median, _ = bench
    first, final = median("adsnet", "reject_first"), median("adsnet", "reject_final")
    ok = 0.4 <= final <= 0.8 and final > first
    record_criterion(5, ok, f"rejection rate first window {first:.3f}, final window {final:.3f} "
                     f"(in [0.4, 0.8] and > first)")
    assert ok


def test_criterion_6_ablation_order(bench):
    _, _, median, _ = bench
    ads = median("adsnet", "gini")
    gain_eval, domain, align = (median(v, "gini") for v in ABLATIONS)
    ok = ads >= domain >= gain_eval and ads >= align and ads - gain_eval >= 0.005
    record_criterion(6, ok, f"median gini adsnet {ads:.4f}, no_domain_adapt {domain:.4f}, "
                     f"no_gain_eval {gain_eval:.4f}, no_iter_align {align:.4f}")
    assert ok


def test_criterion_7_long_tail(bench):
    _, _, median, _ = bench
    tail = median("adsnet", "slice_gini", 0) - median("backbone_internal_only", "slice_gini", 0)
    head = median("adsnet", "slice_gini", -1) - median("backbone_internal_only", "slice_gini", -1)
    ok = tail > head
    record_criterion(7, ok, f"adsnet gini gain [0:15] {tail:+.4f}, largest bucket {head:+.4f} "
                     f"(tail > largest)")
    assert ok


def test_criterion_9_determinism(bench, tmp_path):
    plan, runs, _, _ = bench
    # a second full pass over the first benchmark seed, all variants
    again = run_bench(replace(plan, seeds=plan.seeds[:1], variants=MAIN + ABLATIONS))
    first = {r.variant: r for r in runs if r.seed == plan.seeds[0]}
    same = sum(first[r.variant].log_text == r.log_text and
               first[r.variant].report_text == r.report_text for r in again)
    ok = same == len(again)
    record_criterion(9, ok, f"{same}/{len(again)} runs with byte-identical logs and reports")
    assert ok
