"""Runs an :class:`~mvdssm.config.ExperimentSpec` over its builds and writes the artifacts."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentSpec, Variant, echo_config
from .data import build_data, build_eval_set
from .evaluation import make_evaluator
from .federation import Model, RoundLog, run_centralized, run_training
from .metrics import METRICS, summarize_builds
from .movielens import InteractionLog, ItemTable, Split, SplitSpec, UserTable, load_raw, make_split
from .nn import write_tower
from .privacy import account_epsilon

logger = logging.getLogger(__name__)

# a commonly quoted single figure for sigma=4, delta=1e-3, T=100 with every view sampled
REFERENCE_SPEND = {"sigma": 4.0, "delta": 1e-3, "rounds": 100, "q": 1.0, "reported_epsilon": 4.33}


@dataclass
class BuildResult:
    seed: int
    split: Split
    history: list[RoundLog]
    model: Model
    seconds: float

    @property
    def final(self) -> dict[str, float]:
        for entry in reversed(self.history):
            if entry.metrics:
                return entry.metrics
        raise ValueError("build produced no evaluation")


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    builds: list[BuildResult] = field(default_factory=list)

    def final_summary(self):
        return summarize_builds([b.final for b in self.builds])

    def eval_rounds(self) -> list[int]:
        rounds = [sorted(e.round for e in b.history if e.metrics) for b in self.builds]
        common = set(rounds[0]).intersection(*rounds[1:])
        return sorted(common)

    def metrics_at(self, round_no: int) -> list[dict[str, float]]:
        out = []
        for b in self.builds:
            out.extend(e.metrics for e in b.history if e.round == round_no and e.metrics)
        return out


def run_build(
    spec: ExperimentSpec,
    seed: int,
    raw: tuple[InteractionLog, UserTable, ItemTable],
) -> BuildResult:
    log, users, items = raw
    split = make_split(log, SplitSpec(spec.scenario, seed=seed), len(users.ids), len(items.ids))
    data = build_data(users, items, split, views=spec.federation.views, svd_seed=seed, svd_dim=spec.svd_dim)
    eval_set = build_eval_set(split, len(items.ids))
    cfg = spec.for_build(seed)
    evaluate = make_evaluator(
        data, eval_set, auc_negatives=spec.auc_negatives, seed=seed, predict_dp=cfg.predict_dp
    )
    start = time.perf_counter()
    if spec.variant is Variant.CENTRALIZED:
        result = run_centralized(cfg, data, spec.view, evaluate=evaluate)
    else:
        result = run_training(cfg, data, evaluate=evaluate)
    seconds = time.perf_counter() - start
    logger.info("%s build seed=%d done in %.1fs: %s", spec.label, seed, seconds, result.history[-1].metrics)
    return BuildResult(seed, split, result.history, result.model, seconds)


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    raw = load_raw(spec.data_dir)
    result = ExperimentResult(spec)
    for seed in spec.build_seeds():
        result.builds.append(run_build(spec, seed, raw))
    return result


def _num(x: float | None) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return f"{x:.10g}"


def metrics_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "variant", "metric", "mean", "std", "n_builds"])
    for r in result.eval_rounds():
        summary = summarize_builds(result.metrics_at(r))
        for m in METRICS:
            w.writerow([r, result.spec.label, m, _num(summary.mean[m]), _num(summary.std[m]), summary.n_builds])
    return buf.getvalue()


def curves_csv(result: ExperimentResult) -> str:
    """Long format, one value per row, for plotting training curves."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "build", "round", "metric", "value"])
    for b in result.builds:
        for e in b.history:
            w.writerow([result.spec.label, b.seed, e.round, "loss", _num(e.loss)])
            if e.epsilon is not None:
                w.writerow([result.spec.label, b.seed, e.round, "epsilon", _num(e.epsilon)])
            for m in METRICS:
                if e.metrics:
                    w.writerow([result.spec.label, b.seed, e.round, m, _num(e.metrics[m])])
    return buf.getvalue()


def summary_json(result: ExperimentResult) -> str:
    s = result.final_summary()
    doc = {
        "variant": result.spec.label,
        "scenario": result.spec.scenario.value,
        "n_builds": s.n_builds,
        "seeds": [b.seed for b in result.builds],
        "metrics": {m: {"mean": s.mean[m], "std": s.std[m]} for m in METRICS},
        "per_build": [{"seed": b.seed, **b.final} for b in result.builds],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def privacy_json(spec: ExperimentSpec) -> str:
    cfg = spec.federation
    doc: dict = {"dp": cfg.dp is not None}
    if cfg.dp is not None and spec.variant is not Variant.CENTRALIZED:
        n = len(cfg.views)
        q = cfg.dp.views_for(n) / n
        spend = account_epsilon(cfg.dp.sigma, cfg.dp.delta, cfg.rounds, q)
        doc.update(
            sigma=cfg.dp.sigma, clip=cfg.dp.clip, delta=cfg.dp.delta, q=q, rounds=cfg.rounds,
            epsilon=spend.epsilon, order=spend.order,
        )
    ref = REFERENCE_SPEND
    ours = account_epsilon(ref["sigma"], ref["delta"], ref["rounds"], ref["q"])
    doc["reference"] = {**ref, "epsilon": ours.epsilon, "order": ours.order}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_artifacts(result: ExperimentResult, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    spec = result.spec
    (out / "config.txt").write_text(echo_config(spec))
    (out / "metrics.csv").write_text(metrics_csv(result))
    (out / "curves.csv").write_text(curves_csv(result))
    (out / "summary.json").write_text(summary_json(result))
    (out / "privacy.json").write_text(privacy_json(spec))
    manifests = {str(b.seed): b.split.manifest() for b in result.builds}
    (out / "split_manifest.json").write_text(json.dumps(manifests, indent=1, sort_keys=True) + "\n")
    towers = out / "towers"
    towers.mkdir(exist_ok=True)
    for b in result.builds:
        with open(towers / f"build{b.seed}_item.mvtw", "wb") as fh:
            write_tower(b.model.item_tower, fh)
        for v, t in sorted(b.model.user_towers.items()):
            with open(towers / f"build{b.seed}_user_view{v}.mvtw", "wb") as fh:
                write_tower(t, fh)
    return out
