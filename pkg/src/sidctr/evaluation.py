"""Ranking metrics (AUC / GAUC), slice evaluation and the ablation harness.

AUC is tie-aware (ties credited 0.5), identical to the Mann-Whitney U
normalization. GAUC groups by user id and weights each group by its
impression count; groups with a single class are excluded from both the
numerator and the denominator.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import datagen, model as model_mod, quantizer
from .io import config_digest


class UndefinedMetricError(ValueError):
    """Metric requested on data where it is not defined."""


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs both classes present")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def gauc(scores, labels, group_ids, weights=None) -> float:
    """Weighted mean of per-group AUC; weight defaults to group size."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    group_ids = np.asarray(group_ids)
    total_w = 0.0
    total = 0.0
    for g in np.unique(group_ids):
        mask = group_ids == g
        gl = labels[mask]
        if gl.min() == gl.max():
            continue
        w = float(mask.sum()) if weights is None else float(weights[g])
        total += w * auc(scores[mask], gl)
        total_w += w
    if total_w == 0.0:
        raise UndefinedMetricError("gauc: no group contains both classes")
    return float(total / total_w)


# ---------------------------------------------------------------------------
# slice evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    variant: str
    seed: int
    slices: dict = field(default_factory=dict)  # name -> {auc, gauc, n}
    config_digest: str = ""

    def to_dict(self):
        return {"variant": self.variant, "seed": self.seed,
                "slices": self.slices, "config_digest": self.config_digest}


SLICES = ("All", "Warm", "Cold")


def evaluate(scores, test_ds: model_mod.Dataset,
             item_labels: dict[int, str]) -> dict:
    """Per-slice AUC/GAUC. Slice membership follows the item's cold/warm
    label; mid items appear in All only."""
    labels = test_ds.labels.astype(int)
    users = test_ds.users
    item_slice = np.array([item_labels[int(i)] for i in test_ds.items])
    out = {}
    for name in SLICES:
        mask = (np.ones(len(labels), bool) if name == "All"
                else item_slice == name.lower())
        if not mask.any():
            continue
        entry = {"n_samples": int(mask.sum())}
        try:
            entry["auc"] = auc(scores[mask], labels[mask])
            entry["gauc"] = gauc(scores[mask], labels[mask], users[mask])
        except UndefinedMetricError:
            entry["auc"] = entry["gauc"] = float("nan")
        out[name] = entry
    return out


# ---------------------------------------------------------------------------
# benchmark bundle + ablation matrix
# ---------------------------------------------------------------------------

@dataclass
class Benchmark:
    """Everything the ablation needs: shared data and quantizer artifacts."""
    catalog: datagen.Catalog
    train_ds: model_mod.Dataset
    test_ds: model_mod.Dataset
    neighbor_sets: dict
    item_labels: dict[int, str]
    dims: dict  # n_users, n_queries, n_items, rq_K, opq_K, d, context_dim, item_feat_dim
    config: dict


def prepare_benchmark(n_items=2000, n_users=500, n_queries=200,
                      n_events=200_000, d=16, rq_K=8, opq_K=256,
                      pareto_share=0.8, seed=0,
                      gen_cfg: datagen.GenConfig | None = None,
                      opq_iters=20, topk=10) -> Benchmark:
    """Generate data, train the quantizer, assign IDs, split, label.

    Default code granularity: coarse RQ levels (shared hierarchical
    clusters) and fine OPQ codes (near item-unique detail), so the two
    channels carry the qualitatively different information they are meant
    to carry.
    """
    cfg = gen_cfg or datagen.GenConfig()
    catalog = datagen.generate_catalog(n_items, d=d, seed=seed, cfg=cfg)
    log = datagen.generate_log(catalog, n_users, n_queries, n_events,
                               pareto_share=pareto_share, seed=seed, cfg=cfg)
    rq = quantizer.train_rq(catalog.content_embeddings, rq_K, seed=seed)
    _, residuals = quantizer.encode_rq_batch(rq, catalog.content_embeddings)
    opq = quantizer.train_opq(residuals, opq_K, iters=opq_iters, seed=seed)
    sids = quantizer.assign_semantic_ids(
        list(enumerate(catalog.content_embeddings)), rq, opq)
    table = quantizer.opq_code_similarity_topk(opq, topk)
    nsets = model_mod.neighbor_sets_from_table(table, opq_K)
    train, test = datagen.split_train_test(
        log, cfg.days - cfg.test_days, cfg.test_days)
    labels = datagen.label_cold_warm(
        catalog, datagen.impression_scale_factor(n_events))
    train_ds = model_mod.Dataset(train, catalog, sids, cfg.history_len)
    test_ds = model_mod.Dataset(test, catalog, sids, cfg.history_len)
    config = {"n_items": n_items, "n_users": n_users, "n_queries": n_queries,
              "n_events": n_events, "d": d, "rq_K": rq_K, "opq_K": opq_K,
              "pareto_share": pareto_share, "seed": seed,
              "gen": asdict(cfg)}
    dims = {"n_users": n_users, "n_queries": n_queries, "n_items": n_items,
            "rq_K": rq_K, "opq_K": opq_K, "dim": d,
            "context_dim": train_ds.context.shape[1],
            "item_feat_dim": train_ds.item_feats.shape[1]}
    return Benchmark(catalog=catalog, train_ds=train_ds, test_ds=test_ds,
                     neighbor_sets=nsets, item_labels=labels, dims=dims,
                     config=config)


def train_and_evaluate(bench: Benchmark, variant: str, seed: int,
                       hp: model_mod.HyperParams | None = None
                       ) -> tuple[MetricsReport, model_mod.TrainResult]:
    hp = hp or model_mod.HyperParams()
    mdl = model_mod.CTRModel(variant=variant, hp=hp, seed=seed,
                             **bench.dims)
    result = model_mod.train(mdl, bench.train_ds, bench.neighbor_sets,
                             seed=seed)
    scores = model_mod.predict(mdl, bench.test_ds)
    slices = evaluate(scores, bench.test_ds, bench.item_labels)
    digest = config_digest({"variant": variant, "seed": seed,
                            "bench": bench.config,
                            "hp": {k: list(v) if isinstance(v, tuple) else v
                                   for k, v in vars(hp).items()}})
    return (MetricsReport(variant=variant, seed=seed, slices=slices,
                          config_digest=digest), result)


def ablation(bench: Benchmark, variants=model_mod.VARIANTS,
             seeds=(0, 1, 2, 3, 4), hp: model_mod.HyperParams | None = None,
             verbose: bool = False) -> list[MetricsReport]:
    """Train every variant on shared data with shared seeds."""
    reports = []
    for variant in variants:
        if variant not in model_mod.VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        for seed in seeds:
            rep, _ = train_and_evaluate(bench, variant, seed, hp)
            reports.append(rep)
            if verbose:
                cold = rep.slices.get("Cold", {})
                print(f"  {variant} seed={seed} cold_auc="
                      f"{cold.get('auc', float('nan')):.4f}")
    return reports


def seeded_ablation(bench_factory, variants=model_mod.VARIANTS,
                    seeds=(0, 1, 2, 3, 4),
                    hp: model_mod.HyperParams | None = None,
                    verbose: bool = False) -> list[MetricsReport]:
    """Ablation where each seed regenerates the benchmark itself.

    `bench_factory(seed)` must return a Benchmark. Averaging over fresh
    data realizations (not just model initialisations on one shared
    dataset) is what makes small between-variant margins meaningful: the
    cold slice of a single realization carries a sizeable random quality
    tilt that all model seeds inherit.
    """
    for variant in variants:
        if variant not in model_mod.VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
    reports = []
    for seed in seeds:
        bench = bench_factory(seed)
        for variant in variants:
            rep, _ = train_and_evaluate(bench, variant, seed, hp)
            reports.append(rep)
            if verbose:
                cold = rep.slices.get("Cold", {})
                print(f"  seed={seed} {variant} cold_auc="
                      f"{cold.get('auc', float('nan')):.4f}")
    return reports


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def aggregate(reports: list[MetricsReport]) -> dict:
    """Mean and std per (variant, slice, metric) over seeds."""
    out = {}
    for rep in reports:
        out.setdefault(rep.variant, {})
        for sl, vals in rep.slices.items():
            d = out[rep.variant].setdefault(sl, {"auc": [], "gauc": []})
            d["auc"].append(vals["auc"])
            d["gauc"].append(vals["gauc"])
    agg = {}
    for variant, sls in out.items():
        agg[variant] = {}
        for sl, vals in sls.items():
            agg[variant][sl] = {
                "auc_mean": float(np.mean(vals["auc"])),
                "auc_std": float(np.std(vals["auc"])),
                "gauc_mean": float(np.mean(vals["gauc"])),
                "gauc_std": float(np.std(vals["gauc"])),
                "n_seeds": len(vals["auc"]),
            }
    return agg


def report(reports: list[MetricsReport], baseline: str | None = None) -> tuple[str, dict]:
    """Comparison matrix (rows = variants, cols = slice x metric) as
    aligned text plus a losslessly JSON-round-trippable dict."""
    if not reports:
        raise ValueError("no reports")
    agg = aggregate(reports)
    cols = [f"{sl} {m}" for sl in SLICES for m in ("AUC", "GAUC")]
    lines = []
    header = f"{'variant':<10}" + "".join(f"{c:>18}" for c in cols)
    lines.append(header)
    for variant, sls in agg.items():
        cells = []
        for sl in SLICES:
            for m in ("auc", "gauc"):
                if sl in sls:
                    cells.append(f"{sls[sl][m + '_mean']:.4f}"
                                 f"±{sls[sl][m + '_std']:.4f}")
                else:
                    cells.append("-")
        lines.append(f"{variant:<10}" + "".join(f"{c:>18}" for c in cells))
    deltas = {}
    if baseline is not None:
        if baseline not in agg:
            raise ValueError(f"baseline {baseline!r} not among reports")
        lines.append("")
        lines.append(f"deltas vs {baseline} (mean AUC):")
        for variant, sls in agg.items():
            deltas[variant] = {}
            row = [f"{variant:<10}"]
            for sl in SLICES:
                if sl in sls and sl in agg[baseline]:
                    dv = sls[sl]["auc_mean"] - agg[baseline][sl]["auc_mean"]
                    deltas[variant][sl] = dv
                    row.append(f"{sl} {dv:+.4f}")
            lines.append("  " + "  ".join(row))
    payload = {"aggregate": agg, "deltas": deltas,
               "reports": [r.to_dict() for r in reports]}
    return "\n".join(lines) + "\n", payload


def directional_checks(reports: list[MetricsReport],
                       min_margin: float = 0.005) -> dict:
    """Ablation-structure checks on the cold slice: the full model beats
    every reduced variant, orderings hold on seed means, and the full-model
    margin over the sid-only variant is at least min_margin."""
    agg = aggregate(reports)

    def cold(v):
        return agg[v]["Cold"]["auc_mean"]

    checks = {
        "smile>iid_rq": cold("smile") > cold("iid_rq"),
        "iid_rq>iid_sid": cold("iid_rq") > cold("iid_sid"),
        "iid_sid>only_sid": cold("iid_sid") > cold("only_sid"),
        "smile>iid_opq": cold("smile") > cold("iid_opq"),
        "smile-only_sid>=margin": cold("smile") - cold("only_sid") >= min_margin,
    }
    checks["all_pass"] = all(checks.values())
    return checks


def save_report(path: str, text: str, payload: dict):
    from . import io
    io.atomic_write_text(path + ".txt", text)
    io.atomic_write_json(path + ".json", payload)


def load_report(path: str) -> dict:
    with open(path + ".json") as f:
        return json.load(f)
