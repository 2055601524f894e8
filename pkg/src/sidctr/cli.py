"""Command-line orchestration of the pipeline.

Stages communicate through files: `gen` writes a catalog and an interaction
log, `quantize` turns the catalog into encoders / semantic IDs / a neighbor
table, `train` fits one model variant, `eval` scores a checkpoint, `ablate`
runs the five-variant comparison on a freshly built benchmark, and
`gradcheck` finite-difference-verifies the full objective for every
variant. Every output embeds (config digest, seed, tool version) so the
provenance chain is reconstructible from any artifact.

Exit codes: 0 success, 1 usage error, 2 artifact error, 3 acceptance
failure.
"""

from __future__ import annotations

import json
import os

import click
import numpy as np

from . import datagen, diffcore as dc, evaluation, io, model as model_mod, \
    quantizer


class AcceptanceFailure(Exception):
    """A requested acceptance check did not hold."""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

GEN_DEFAULTS = {
    "n_items": 2000, "n_users": 500, "n_queries": 200, "n_events": 200_000,
    "d": 16, "d_true": 8, "n_components": 12, "pareto_share": 0.8,
    "seed": 0, "gen": {},
}
QUANTIZE_DEFAULTS = {
    "catalog": "out/catalog", "rq_K": 8, "opq_K": 256, "opq_iters": 20,
    "topk": 10, "seed": 0,
}
TRAIN_DEFAULTS = {
    "catalog": "out/catalog", "log": "out/log.ndjson",
    "encoders": "out/encoders", "sids": "out/sids.json",
    "neighbors": "out/neighbors.json", "variant": "smile", "seed": 0,
    "test_days": 1, "hp": {},
}
EVAL_DEFAULTS = {**TRAIN_DEFAULTS, "checkpoint": "out/checkpoint"}
ABLATE_DEFAULTS = {
    **{k: GEN_DEFAULTS[k] for k in ("n_items", "n_users", "n_queries",
                                    "n_events", "d", "pareto_share", "gen")},
    "rq_K": 8, "opq_K": 256, "seed": 0, "seeds": [0, 1, 2, 3, 4],
    "variants": list(model_mod.VARIANTS), "hp": {}, "baseline": "only_sid",
    "check": False, "min_margin": 0.005, "gradcheck_tol": 1e-4,
}
GRADCHECK_DEFAULTS = {
    "seed": 0, "variants": list(model_mod.VARIANTS), "batch_size": 6,
    "tolerance": 1e-4, "max_coords": 8,
}


def _load_config(path: str | None, defaults: dict, seed: int | None) -> dict:
    cfg = {k: (dict(v) if isinstance(v, dict) else v)
           for k, v in defaults.items()}
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise click.ClickException(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise click.ClickException(f"config is not valid JSON: {e}")
        unknown = set(user) - set(defaults)
        if unknown:
            raise click.ClickException(
                f"unknown config keys: {sorted(unknown)}; "
                f"allowed: {sorted(defaults)}")
        cfg.update(user)
    if seed is not None:
        cfg["seed"] = seed
    for key, fields in (("gen", datagen.GenConfig.__dataclass_fields__),
                        ("hp", model_mod.HyperParams.__dataclass_fields__)):
        if key in cfg:
            bad = set(cfg[key]) - set(fields)
            if bad:
                raise click.ClickException(
                    f"unknown {key} config keys: {sorted(bad)}")
    return cfg


def _provenance(cfg: dict) -> dict:
    return {"config_digest": io.config_digest(cfg), "seed": cfg.get("seed"),
            "tool_version": io.TOOL_VERSION}


def _hp(cfg: dict) -> model_mod.HyperParams:
    hp = cfg.get("hp", {})
    if "tower_hidden" in hp:
        hp = {**hp, "tower_hidden": tuple(hp["tower_hidden"])}
    return model_mod.HyperParams(**hp)


def save_semantic_ids(path: str, sids: dict, meta: dict):
    io.atomic_write_json(path, {
        "meta": meta,
        "sids": {str(i): list(s.as_tuple()) for i, s in sids.items()}})


def load_semantic_ids(path: str) -> dict[int, quantizer.SemanticId]:
    if not os.path.exists(path):
        raise io.ArtifactError(f"missing semantic-id artifact: {path}")
    with open(path) as f:
        payload = json.load(f)
    return {int(i): quantizer.SemanticId(*codes)
            for i, codes in payload["sids"].items()}


def _load_pipeline(cfg: dict):
    """Shared artifact loading for train/eval."""
    catalog, _ = datagen.load_catalog(cfg["catalog"])
    if not os.path.exists(cfg["log"]):
        raise io.ArtifactError(f"missing log artifact: {cfg['log']}")
    rq, opq, _ = quantizer.load_encoders(cfg["encoders"])
    sids = load_semantic_ids(cfg["sids"])
    if not os.path.exists(cfg["neighbors"]):
        raise io.ArtifactError(f"missing neighbor table: {cfg['neighbors']}")
    table = quantizer.load_neighbor_table(cfg["neighbors"])
    hp = _hp(cfg)
    log = datagen.load_log(cfg["log"], history_len=hp.history_len)
    days = max(s.day for s in log) + 1
    train_split, test_split = datagen.split_train_test(
        log, days - cfg["test_days"], cfg["test_days"])
    train_ds = model_mod.Dataset(train_split, catalog, sids, hp.history_len)
    test_ds = model_mod.Dataset(test_split, catalog, sids, hp.history_len)
    opq_K = opq.sub_codebooks[0].K
    dims = {"n_users": max(s.user_id for s in log) + 1,
            "n_queries": max(s.query_id for s in log) + 1,
            "n_items": catalog.n_items,
            "rq_K": rq.codebooks[0].K, "opq_K": opq_K,
            "dim": rq.dim,
            "context_dim": train_ds.context.shape[1],
            "item_feat_dim": train_ds.item_feats.shape[1]}
    nsets = model_mod.neighbor_sets_from_table(table, opq_K)
    labels = datagen.label_cold_warm(
        catalog, datagen.impression_scale_factor(len(log)))
    return catalog, train_ds, test_ds, nsets, labels, dims, hp


def _tiny_benchmark(seed: int) -> evaluation.Benchmark:
    """Small shared instance for gradient checking; seconds, not minutes."""
    return evaluation.prepare_benchmark(
        n_items=120, n_users=40, n_queries=20, n_events=4000, d=16,
        rq_K=4, opq_K=8, seed=seed, opq_iters=5)


def _gradcheck_variant(bench: evaluation.Benchmark, variant: str, seed: int,
                       batch_size: int, max_coords: int) -> float:
    mdl = model_mod.CTRModel(variant=variant, seed=seed, **bench.dims)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(bench.train_ds), size=batch_size, replace=False)
    return model_mod.run_grad_check(mdl, bench.train_ds, idx,
                                    bench.neighbor_sets,
                                    max_coords=max_coords, seed=seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@click.group()
def cli():
    """Semantic-ID cold-start CTR workbench."""


def _common(fn):
    fn = click.option("--config", "config_path", type=str, default=None,
                      help="JSON config file; defaults used when omitted.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the config seed.")(fn)
    fn = click.option("--out", "out_dir", type=str, default="out",
                      help="Output directory.")(fn)
    return fn


@cli.command()
@_common
def gen(config_path, seed, out_dir):
    """Generate the synthetic catalog and interaction log."""
    cfg = _load_config(config_path, GEN_DEFAULTS, seed)
    prov = _provenance(cfg)
    gen_cfg = datagen.GenConfig(**cfg["gen"])
    catalog = datagen.generate_catalog(
        cfg["n_items"], d_true=cfg["d_true"], d=cfg["d"], seed=cfg["seed"],
        n_components=cfg["n_components"], cfg=gen_cfg)
    log = datagen.generate_log(catalog, cfg["n_users"], cfg["n_queries"],
                               cfg["n_events"], cfg["pareto_share"],
                               seed=cfg["seed"], cfg=gen_cfg)
    datagen.save_catalog(os.path.join(out_dir, "catalog"), catalog, prov)
    datagen.save_log(os.path.join(out_dir, "log.ndjson"), log)
    io.atomic_write_json(os.path.join(out_dir, "gen_meta.json"),
                         {**prov, "config": cfg, "n_samples": len(log)})
    click.echo(f"wrote catalog + {len(log)} events to {out_dir}/ "
               f"(digest {prov['config_digest']})")


@cli.command()
@_common
def quantize(config_path, seed, out_dir):
    """Train RQ/OPQ encoders, assign semantic IDs, build the neighbor table."""
    cfg = _load_config(config_path, QUANTIZE_DEFAULTS, seed)
    prov = _provenance(cfg)
    catalog, _ = datagen.load_catalog(cfg["catalog"])
    rq = quantizer.train_rq(catalog.content_embeddings, cfg["rq_K"],
                            seed=cfg["seed"])
    _, residuals = quantizer.encode_rq_batch(rq, catalog.content_embeddings)
    opq = quantizer.train_opq(residuals, cfg["opq_K"], iters=cfg["opq_iters"],
                              seed=cfg["seed"])
    sids = quantizer.assign_semantic_ids(
        list(enumerate(catalog.content_embeddings)), rq, opq)
    table = quantizer.opq_code_similarity_topk(opq, cfg["topk"])
    quantizer.save_encoders(os.path.join(out_dir, "encoders"), rq, opq, prov)
    save_semantic_ids(os.path.join(out_dir, "sids.json"), sids, prov)
    quantizer.save_neighbor_table(table,
                                  os.path.join(out_dir, "neighbors.json"),
                                  prov)
    click.echo(f"wrote encoders, {len(sids)} semantic IDs and a "
               f"{len(table)}-pair neighbor table to {out_dir}/ "
               f"(digest {prov['config_digest']})")


@cli.command()
@_common
@click.option("--variant", type=click.Choice(model_mod.VARIANTS),
              default=None, help="Override the config variant.")
def train(config_path, seed, out_dir, variant):
    """Train one model variant; writes a checkpoint and a training curve."""
    cfg = _load_config(config_path, TRAIN_DEFAULTS, seed)
    if variant is not None:
        cfg["variant"] = variant
    if cfg["variant"] not in model_mod.VARIANTS:
        raise click.ClickException(f"unknown variant {cfg['variant']!r}")
    prov = _provenance(cfg)
    _, train_ds, _, nsets, _, dims, hp = _load_pipeline(cfg)
    mdl = model_mod.CTRModel(variant=cfg["variant"], hp=hp,
                             seed=cfg["seed"], **dims)
    result = model_mod.train(mdl, train_ds, nsets, seed=cfg["seed"])
    meta = {**prov, "variant": cfg["variant"], "dims": dims}
    mdl.store.save(os.path.join(out_dir, "checkpoint"), meta)
    io.atomic_write_json(os.path.join(out_dir, "curve.json"),
                         {**meta, "curve": result.curve})
    click.echo(f"trained {cfg['variant']} for {hp.epochs} epochs; "
               f"final BCE {result.curve[-1]['L_bce']:.4f}; "
               f"checkpoint in {out_dir}/ (digest {prov['config_digest']})")


@cli.command(name="eval")
@_common
def eval_cmd(config_path, seed, out_dir):
    """Score a checkpoint on the test split; writes per-slice metrics."""
    cfg = _load_config(config_path, EVAL_DEFAULTS, seed)
    prov = _provenance(cfg)
    _, _, test_ds, _, labels, dims, hp = _load_pipeline(cfg)
    store, meta = dc.ParameterStore.load(cfg["checkpoint"])
    variant = meta.get("variant", cfg["variant"])
    mdl = model_mod.CTRModel(variant=variant, hp=hp, seed=cfg["seed"], **dims)
    if set(store.params) != set(mdl.store.params):
        raise io.ArtifactError(
            "checkpoint parameters do not match the model configuration")
    mdl.store = store
    scores = model_mod.predict(mdl, test_ds)
    slices = evaluation.evaluate(scores, test_ds, labels)
    payload = {**prov, "variant": variant, "slices": slices}
    io.atomic_write_json(os.path.join(out_dir, "metrics.json"), payload)
    cold = slices.get("Cold", {}).get("auc", float("nan"))
    click.echo(f"evaluated {variant}: "
               + " ".join(f"{sl}={v['auc']:.4f}" for sl, v in slices.items())
               + f" (cold {cold:.4f}); metrics in {out_dir}/")


@cli.command()
@_common
def ablate(config_path, seed, out_dir):
    """Run the five-variant ablation on a fresh benchmark instance."""
    cfg = _load_config(config_path, ABLATE_DEFAULTS, seed)
    prov = _provenance(cfg)
    for v in cfg["variants"]:
        if v not in model_mod.VARIANTS:
            raise click.ClickException(f"unknown variant {v!r}")
    bench_gc = _tiny_benchmark(cfg["seed"])
    for v in cfg["variants"]:
        err = _gradcheck_variant(bench_gc, v, cfg["seed"], 6, 8)
        if err >= cfg["gradcheck_tol"]:
            raise AcceptanceFailure(
                f"variant {v} failed grad_check: {err:.2e} "
                f">= {cfg['gradcheck_tol']:.0e}")
    def bench_factory(seed):
        return evaluation.prepare_benchmark(
            n_items=cfg["n_items"], n_users=cfg["n_users"],
            n_queries=cfg["n_queries"], n_events=cfg["n_events"], d=cfg["d"],
            rq_K=cfg["rq_K"], opq_K=cfg["opq_K"],
            pareto_share=cfg["pareto_share"], seed=seed,
            gen_cfg=datagen.GenConfig(**cfg["gen"]))

    reports = evaluation.seeded_ablation(bench_factory, cfg["variants"],
                                         seeds=tuple(cfg["seeds"]),
                                         hp=_hp(cfg), verbose=True)
    text, payload = evaluation.report(reports, baseline=cfg["baseline"])
    payload["provenance"] = prov
    evaluation.save_report(os.path.join(out_dir, "ablation"), text, payload)
    click.echo(text)
    if cfg["check"]:
        checks = evaluation.directional_checks(reports, cfg["min_margin"])
        for name, ok in checks.items():
            click.echo(f"  check {name}: {'pass' if ok else 'FAIL'}")
        if not checks["all_pass"]:
            raise AcceptanceFailure("directional ablation checks failed")


@cli.command()
@_common
def gradcheck(config_path, seed, out_dir):
    """Finite-difference check of the full objective for every variant."""
    cfg = _load_config(config_path, GRADCHECK_DEFAULTS, seed)
    bench = _tiny_benchmark(cfg["seed"])
    worst = 0.0
    for v in cfg["variants"]:
        err = _gradcheck_variant(bench, v, cfg["seed"], cfg["batch_size"],
                                 cfg["max_coords"])
        worst = max(worst, err)
        click.echo(f"  {v}: max relative error {err:.3e}")
    click.echo(f"max relative error {worst:.3e}")
    if worst >= cfg["tolerance"]:
        raise AcceptanceFailure(
            f"gradient check failed: {worst:.3e} >= {cfg['tolerance']:.0e}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except (io.ArtifactError, FileNotFoundError) as e:
        click.echo(f"artifact error: {e}", err=True)
        return 2
    except AcceptanceFailure as e:
        click.echo(f"acceptance failure: {e}", err=True)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
