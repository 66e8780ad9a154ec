"""Run variants on a dataset split, evaluate them and tabulate benchmarks."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from .backbone import predict
from .datagen import (Dataset, DatasetSplit, SyntheticSpec, generate, load_dataset,
                      long_tail_profile, write_csv)
from .encoding import FieldSchema
from .metrics import (EvalRecords, domain_report, fmt, format_domain_report,
                      format_slice_report, sliced_report)
from .trainer import VARIANTS, TrainConfig, TrainData, TrainResult, train

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss_van_t", "loss_gain_t", "loss_gain_s", "w_gain", "accepted",
               "mean_w_s", "l_domain")


@dataclass
class ExperimentPlan:
    variants: tuple = ("adsnet",)
    seeds: tuple = (0,)
    config: TrainConfig = field(default_factory=TrainConfig)
    spec: Optional[SyntheticSpec] = field(default_factory=SyntheticSpec)
    data_dir: Optional[str] = None
    slice_edges: tuple = (15.0,)
    window: int = 1000

    def __post_init__(self):
        self.variants = tuple(self.variants)
        for v in self.variants:
            if v not in VARIANTS:
                raise cfgmod.ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.slice_edges = tuple(float(e) for e in self.slice_edges)
        if self.window < 1:
            raise cfgmod.ConfigError("plan.window must be >= 1")

    @classmethod
    def from_dict(cls, cfg: dict) -> "ExperimentPlan":
        known = ("plan.", "train.", "data.")
        for key in cfg:
            if not key.startswith(known):
                raise cfgmod.ConfigError(f"unknown config key {key!r}")
        plan = cfgmod.section(cfg, "plan")
        allowed = {"variants", "seeds", "data_dir", "slice_edges", "window"}
        for key in plan:
            if key not in allowed:
                raise cfgmod.ConfigError(f"unknown config key {'plan.' + key!r}")
        config = cfgmod.build(TrainConfig, cfgmod.section(cfg, "train"), "train.")
        data_dir = plan.get("data_dir") or None
        spec = None if data_dir else cfgmod.build(SyntheticSpec, cfgmod.section(cfg, "data"),
                                                  "data.")
        kwargs = {"config": config, "spec": spec, "data_dir": data_dir}
        defaults = cls()
        for key in ("variants", "seeds", "slice_edges", "window"):
            if key in plan:
                kwargs[key] = cfgmod._convert("plan." + key, plan[key], getattr(defaults, key))
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentPlan":
        return cls.from_dict(cfgmod.parse(text))

    def to_dict(self) -> dict:
        out = {"plan.variants": cfgmod.format_value(self.variants),
               "plan.seeds": cfgmod.format_value(self.seeds),
               "plan.slice_edges": cfgmod.format_value(self.slice_edges),
               "plan.window": str(self.window)}
        if self.data_dir:
            out["plan.data_dir"] = self.data_dir
        out.update(cfgmod.dump(self.config, "train"))
        if self.spec is not None and not self.data_dir:
            out.update(cfgmod.dump(self.spec, "data"))
        return out


# ---------------------------------------------------------------------------
# data


def schema_text(schema: FieldSchema) -> str:
    return cfgmod.serialize({f"vocab.{n}": str(v) for n, v in schema.fields})


def read_schema(path, embedding_dim: int) -> FieldSchema:
    cfg = cfgmod.parse(Path(path).read_text(encoding="utf-8"))
    fields = []
    for key, value in cfg.items():
        if not key.startswith("vocab."):
            raise cfgmod.ConfigError(f"{path}: unknown key {key!r}")
        fields.append((key[len("vocab."):], int(value)))
    return FieldSchema(tuple(fields), embedding_dim)


def write_split(split: DatasetSplit, schema: FieldSchema, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "train.csv", split.train, schema)
    write_csv(out / "val.csv", split.validation, schema)
    write_csv(out / "test.csv", split.test, schema)
    (out / "schema.cfg").write_text(schema_text(schema), encoding="utf-8")


def read_split(data_dir, embedding_dim: int):
    d = Path(data_dir)
    schema = read_schema(d / "schema.cfg", embedding_dim)
    split = DatasetSplit(load_dataset(d / "train.csv", schema),
                         load_dataset(d / "val.csv", schema),
                         load_dataset(d / "test.csv", schema))
    return split, schema


def plan_data(plan: ExperimentPlan, seed: int):
    if plan.data_dir:
        return read_split(plan.data_dir, plan.config.embedding_dim)
    spec = plan.spec.replace(seed=seed)
    return generate(spec), spec.schema(plan.config.embedding_dim)


# ---------------------------------------------------------------------------
# running and evaluating


def train_variant(split: DatasetSplit, schema: FieldSchema, config: TrainConfig,
                  variant: str) -> TrainResult:
    internal = split.train.internal()
    external = split.train.external_only()
    ext = TrainData(external.X, external.ltv) if len(external) else None
    if variant == "backbone_internal_only":
        ext = None
    return train(schema, TrainData(internal.X, internal.ltv), ext, config, variant)


def eval_records(result: TrainResult, data: Dataset) -> EvalRecords:
    data = data.internal()
    p, pltv = predict(result.model, result.arch, result.scheme, data.X)
    return EvalRecords(pltv, data.ltv, p, data.domain_id, data.ad_id)


def evaluation_report(result: TrainResult, test: Dataset, train_data: Optional[Dataset],
                      edges=(15.0,)) -> str:
    """Comma-separated domain rows (per domain, average, pooled) and slice rows."""
    records = eval_records(result, test)
    text = format_domain_report(domain_report(records))
    counts = long_tail_profile(train_data.internal()).counts if train_data is not None else None
    text += format_slice_report(sliced_report(records, edges, counts))
    return text


def format_log(reports) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for r in reports:
        lines.append(",".join([str(r.step), repr(r.loss_van_t), repr(r.loss_gain_t),
                               repr(r.loss_gain_s), repr(r.w_gain), "1" if r.accepted else "0",
                               repr(r.mean_w_s), repr(r.l_domain)]))
    return "\n".join(lines) + "\n"


@dataclass
class RunSummary:
    variant: str
    seed: int
    auc: Optional[float]
    gini: Optional[float]
    gini_pooled: Optional[float]
    reject_first: Optional[float]
    reject_final: Optional[float]
    slice_gini: list
    log_text: str
    report_text: str
    sync_steps: list


def run_one(plan: ExperimentPlan, variant: str, seed: int, split=None, schema=None) -> RunSummary:
    if split is None:
        split, schema = plan_data(plan, seed)
    config = plan.config.replace(seed=seed)
    result = train_variant(split, schema, config, variant)
    records = eval_records(result, split.test)
    rows = domain_report(records)
    avg = next(r for r in rows if r.domain == "average")
    pooled = next(r for r in rows if r.domain == "pooled")
    counts = long_tail_profile(split.train.internal()).counts
    slices = sliced_report(records, plan.slice_edges, counts)
    reject_first = reject_final = None
    if result.gain is not None and result.reports:
        w = min(plan.window, len(result.reports))
        reject_first = float(np.mean([not r.accepted for r in result.reports[:w]]))
        reject_final = float(np.mean([not r.accepted for r in result.reports[-w:]]))
    report = format_domain_report(rows) + format_slice_report(slices)
    logger.info("%s seed=%d gini=%s", variant, seed, fmt(avg.gini))
    return RunSummary(variant, seed, avg.auc, avg.gini, pooled.gini, reject_first, reject_final,
                      [s.gini for s in slices], format_log(result.reports), report,
                      list(result.sync_steps))


def _run_seed(args):
    plan, seed = args
    split, schema = plan_data(plan, seed)
    return [run_one(plan, v, seed, split, schema) for v in plan.variants]


def run_bench(plan: ExperimentPlan, jobs: int = 1) -> list:
    """Every (seed, variant) run of ``plan``; seeds fan out over ``jobs`` processes."""
    tasks = [(plan, s) for s in plan.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(_run_seed, tasks))
    else:
        batches = [_run_seed(t) for t in tasks]
    return [run for batch in batches for run in batch]


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def bench_table(plan: ExperimentPlan, runs: list) -> str:
    n_slices = len(plan.slice_edges) + 1
    head = ["kind", "variant", "seed", "auc", "gini", "gini_pooled", "reject_first",
            "reject_final"] + [f"gini_slice_{i}" for i in range(n_slices)]
    lines = [",".join(head)]

    def row(kind, variant, seed, vals):
        lines.append(",".join([kind, variant, seed] + [fmt(v) for v in vals]))

    for r in runs:
        row("run", r.variant, str(r.seed), [r.auc, r.gini, r.gini_pooled, r.reject_first,
                                            r.reject_final, *r.slice_gini])
    medians = {}
    for v in plan.variants:
        rs = [r for r in runs if r.variant == v]
        vals = [_median([getattr(r, a) for r in rs])
                for a in ("auc", "gini", "gini_pooled", "reject_first", "reject_final")]
        vals += [_median([r.slice_gini[i] for r in rs]) for i in range(n_slices)]
        medians[v] = vals
        row("median", v, "", vals)
    a, b = "joint_mix_baseline", "backbone_internal_only"
    if a in medians and b in medians:
        delta = [None if x is None or y is None else x - y
                 for x, y in zip(medians[a], medians[b])]
        row("delta", "negative_transfer", "", delta)
    return "\n".join(lines) + "\n"
