"""Acceptance gate: the nine release criteria, one test each.

Each test prints a single PASS line (with its tolerance) on success; a
failure is an honest red. Criteria 7 and 8 run on the full default
benchmark and dominate the runtime of the suite.
"""

import math
import time

import numpy as np
import pytest

from sidctr import datagen, diffcore as dc, evaluation, io, model as M, \
    quantizer as Q
from sidctr.diffcore import Tensor

GRADCHECK_TOL = 1e-4
ORACLE_TOL = 1e-9
ORTHOGONALITY_TOL = 1e-6
COLD_MARGIN = 0.005
ABLATION_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def default_bench():
    """The default benchmark: 200k events, 2k items, frozen generator
    config. Used by criterion 8."""
    return evaluation.prepare_benchmark(seed=0)


def test_criterion_1_gradient_integrity(tiny_bench):
    """Full-objective grad_check < 1e-4 for all five variants, plus a
    corrupted-gradient canary, in under a minute."""
    t0 = time.time()
    worst = 0.0
    for variant in M.VARIANTS:
        d = tiny_bench.dims
        mdl = M.CTRModel(variant=variant, seed=0, **d)
        err = M.run_grad_check(mdl, tiny_bench.train_ds, np.arange(6),
                               tiny_bench.neighbor_sets, max_coords=6)
        assert err < GRADCHECK_TOL, f"{variant}: {err:.2e}"
        worst = max(worst, err)
    # canary: a deliberately doubled gradient must be flagged
    x = Tensor(np.random.default_rng(0).normal(size=4), requires_grad=True)

    def corrupted():
        out = dc.tsum(dc.mul(x, x))
        orig = out._backward
        out._backward = lambda g: orig(2.0 * g)
        return out

    assert dc.grad_check(corrupted, {"x": x}) > 0.4
    elapsed = time.time() - t0
    assert elapsed < 60.0
    print(f"\ncriterion 1 PASS: worst grad_check {worst:.2e} < 1e-4, "
          f"canary detected, {elapsed:.1f}s < 60s")


def test_criterion_2_stop_gradient_directionality(rng):
    """Gate forced to 1 => d(transfer)/d(id_emb) = 0 exactly; gate 0 =>
    d(transfer)/d(rq_emb) = 0 exactly."""
    for g_val, frozen_name in ((1.0, "id"), (0.0, "rq")):
        embs = {"id": Tensor(rng.normal(size=(6, 8)), requires_grad=True),
                "rq": Tensor(rng.normal(size=(6, 8)), requires_grad=True)}
        g = Tensor(np.full((6, 1), g_val))
        M.transfer_loss(embs["id"], embs["rq"], g, gate_grad=False).backward()
        frozen_grad = embs[frozen_name].grad
        assert frozen_grad is None or np.all(frozen_grad == 0.0)
    print("\ncriterion 2 PASS: stop-gradient directionality exact "
          "(gradients identically zero on the detached branch)")


def test_criterion_3_quantizer_monotonicity():
    """On seeded mixture data (2000 points, d=16, K=64): reconstruction MSE
    strictly ordered over RQ depth and further reduced by OPQ; rotation
    orthogonal to 1e-6."""
    t0 = time.time()
    cat = datagen.generate_catalog(2000, d=16, seed=0)
    X = cat.content_embeddings
    rq = Q.train_rq(X, K=64, seed=0, levels=3)
    mses = [Q.rq_reconstruction_mse(rq, X, levels=n) for n in (1, 2, 3)]
    assert mses[0] > mses[1] > mses[2], mses
    _, residuals = Q.encode_rq_batch(rq, X)
    opq = Q.train_opq(residuals, K=64, seed=0)
    codes = Q.encode_opq_batch(opq, residuals)
    rec = Q.opq_reconstruction(opq, codes)
    mse_opq = mses[2] - float(np.mean(np.sum(residuals ** 2, axis=1))) \
        + float(np.mean(np.sum((residuals - rec) ** 2, axis=1)))
    assert mse_opq < mses[2]
    ortho = np.abs(opq.rotation @ opq.rotation.T - np.eye(16)).max()
    assert ortho < ORTHOGONALITY_TOL
    elapsed = time.time() - t0
    assert elapsed < 120.0
    print(f"\ncriterion 3 PASS: MSE {mses[0]:.4f} > {mses[1]:.4f} > "
          f"{mses[2]:.4f} > {mse_opq:.4f} (with OPQ); orthogonality "
          f"{ortho:.1e} < 1e-6; {elapsed:.1f}s < 120s")


def test_criterion_4_opq_beats_identity_pq():
    """On 45-degree-rotated anisotropic data the learned rotation must cut
    quantization MSE versus identity-rotation PQ, 10/10 seeds."""
    theta = math.pi / 4
    R45 = np.eye(8)
    R45[:2, :2] = [[math.cos(theta), -math.sin(theta)],
                   [math.sin(theta), math.cos(theta)]]
    wins = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(600, 8)) * np.array([4, 0.2, 1, 1, 1, 1, 1, 1])
        X = X @ R45.T
        opq = Q.train_opq(X, K=8, seed=seed)
        codes = Q.encode_opq_batch(opq, X)
        mse = float(np.mean(np.sum((X - Q.opq_reconstruction(opq, codes))
                                   ** 2, axis=1)))
        pq = Q.train_opq(X, K=8, seed=seed, iters=0)  # identity rotation
        pq_codes = Q.encode_opq_batch(pq, X)
        pq_mse = float(np.mean(np.sum((X - Q.opq_reconstruction(pq, pq_codes))
                                      ** 2, axis=1)))
        wins += mse < pq_mse
    assert wins == 10
    print("\ncriterion 4 PASS: OPQ < identity-rotation PQ MSE on 10/10 seeds")


def test_criterion_5_oracle_equivalence(rng):
    """auc == brute force on 100 instances; encode_rq/encode_opq match
    exhaustive search on 1000 vectors; bce/contrastive match scalar
    re-implementations within 1e-9."""
    # auc vs brute force
    for _ in range(100):
        n = int(rng.integers(2, 51))
        labels = rng.integers(2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.choice(np.linspace(0, 1, 5), size=n)
        pos, neg = scores[labels == 1], scores[labels == 0]
        brute = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg) \
            / (len(pos) * len(neg))
        assert evaluation.auc(scores, labels) == pytest.approx(brute,
                                                               abs=1e-12)
    # encoders vs exhaustive nearest-centroid search
    X = rng.normal(size=(1000, 16))
    rq = Q.train_rq(X[:500], K=8, seed=0)
    codes, _ = Q.encode_rq_batch(rq, X)
    res = X.copy()
    for lvl, cb in enumerate(rq.codebooks):
        want = np.argmin(((res[:, None, :] - cb.centroids[None]) ** 2
                          ).sum(-1), axis=1)
        assert np.array_equal(codes[:, lvl], want)
        res = res - cb.centroids[want]
    opq = Q.train_opq(X[:500], K=8, seed=0)
    opq_codes = Q.encode_opq_batch(opq, X)
    rot = X @ opq.rotation.T
    half = X.shape[1] // 2
    for j, sub in enumerate(opq.sub_codebooks):
        part = rot[:, j * half:(j + 1) * half]
        want = np.argmin(((part[:, None, :] - sub.centroids[None]) ** 2
                          ).sum(-1), axis=1)
        assert np.array_equal(opq_codes[:, j], want)
    # bce scalar oracle
    p = rng.uniform(0.01, 0.99, size=64)
    y = rng.integers(2, size=64).astype(float)
    want = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(dc.bce_loss(Tensor(p), y).item() - want) < ORACLE_TOL
    # contrastive scalar oracle
    a = rng.normal(size=(5, 6))
    b = rng.normal(size=(5, 6))
    tau = 0.2
    loss, _ = M.contrastive_loss(Tensor(a), Tensor(b), tau)
    ua = a / np.linalg.norm(a, axis=1, keepdims=True)
    ub = b / np.linalg.norm(b, axis=1, keepdims=True)
    total = 0.0
    for i in range(5):
        pos = math.exp(np.dot(ua[i], ub[i]) / tau)
        negs = sum(math.exp(np.dot(ua[i], ua[j]) / tau)
                   for j in range(5) if j != i)
        total += -math.log(pos / (pos + negs))
    assert abs(loss.item() - total / 5) < ORACLE_TOL
    print("\ncriterion 5 PASS: auc == brute force (100 instances); encoders "
          "== exhaustive search (1000 vectors); bce/contrastive within 1e-9")


def test_criterion_6_endpoint_identities(rng):
    """Gate at {0,1} selects a single branch exactly; lambda = 0 drops the
    OPQ term exactly; alpha1 = alpha2 = 0 reduces the objective to BCE."""
    id_emb = Tensor(rng.normal(size=(4, 8)))
    rq_emb = Tensor(rng.normal(size=(4, 8)))
    np.testing.assert_array_equal(
        M.combine(id_emb, rq_emb, Tensor(np.ones((4, 1)))).values,
        id_emb.values)
    np.testing.assert_array_equal(
        M.combine(id_emb, rq_emb, Tensor(np.zeros((4, 1)))).values,
        rq_emb.values)
    opq_emb = Tensor(rng.normal(size=(4, 8)))
    np.testing.assert_array_equal(
        M.final_item_rep(id_emb, opq_emb, 0.0).values, id_emb.values)
    bench = evaluation.prepare_benchmark(n_items=80, n_users=30,
                                         n_queries=15, n_events=2000,
                                         rq_K=4, opq_K=8, seed=0,
                                         opq_iters=3)
    mdl = M.CTRModel(variant="smile", seed=0,
                     hp=M.HyperParams(alpha1=0.0, alpha2=0.0), **bench.dims)
    loss, parts = mdl.total_loss(bench.train_ds, np.arange(12),
                                 bench.neighbor_sets)
    assert loss.item() == parts["bce"]
    print("\ncriterion 6 PASS: gate/lambda/alpha endpoint identities exact")


def test_criterion_7_directional_ablation():
    """Mean cold AUC over 5 seeds (each seed regenerates the benchmark and
    the model): smile > iid_rq > iid_sid > only_sid, smile > iid_opq,
    smile - only_sid >= +0.005; runtime < 30 min."""
    t0 = time.time()
    reports = evaluation.seeded_ablation(
        lambda s: evaluation.prepare_benchmark(seed=s), seeds=ABLATION_SEEDS)
    elapsed = time.time() - t0
    agg = evaluation.aggregate(reports)
    means = {v: agg[v]["Cold"]["auc_mean"] for v in M.VARIANTS}
    checks = evaluation.directional_checks(reports, COLD_MARGIN)
    detail = " ".join(f"{v}={means[v]:.4f}" for v in M.VARIANTS)
    assert elapsed < 1800.0, f"ablation took {elapsed:.0f}s >= 1800s"
    assert checks["all_pass"], (
        f"directional checks failed: { {k: v for k, v in checks.items() if not v} }; "
        f"cold AUC means: {detail}")
    print(f"\ncriterion 7 PASS: cold AUC {detail}; "
          f"margin smile-only_sid = "
          f"{means['smile'] - means['only_sid']:+.4f} >= +0.005; "
          f"{elapsed:.0f}s < 1800s")


def test_criterion_8_dataset_calibration(default_bench):
    """Top-20% items get 80% +- 5% of train impressions; the temporal split
    is leakage-free; >= 5% of test rows involve genuinely cold items."""
    train_ds, test_ds = default_bench.train_ds, default_bench.test_ds
    counts = np.bincount(train_ds.items,
                         minlength=default_bench.catalog.n_items)
    top = int(0.2 * default_bench.catalog.n_items)
    share = np.sort(counts)[::-1][:top].sum() / counts.sum()
    assert 0.75 <= share <= 0.85, share
    # leakage-free: regenerate the same log and check the day boundary
    cfg = default_bench.config
    catalog = datagen.generate_catalog(
        cfg["n_items"], d=cfg["d"], seed=cfg["seed"],
        cfg=datagen.GenConfig(**cfg["gen"]))
    log = datagen.generate_log(catalog, cfg["n_users"], cfg["n_queries"],
                               cfg["n_events"], cfg["pareto_share"],
                               seed=cfg["seed"],
                               cfg=datagen.GenConfig(**cfg["gen"]))
    days = max(s.day for s in log) + 1
    train_split, test_split = datagen.split_train_test(log, days - 1, 1)
    assert max(s.day for s in train_split) < min(s.day for s in test_split)
    assert len(train_split) == len(train_ds)
    cold_rows = sum(1 for i in test_ds.items
                    if default_bench.item_labels.get(int(i)) == "cold")
    cold_share = cold_rows / len(test_ds)
    assert cold_share >= 0.05, cold_share
    print(f"\ncriterion 8 PASS: head share {share:.3f} in [0.75, 0.85]; "
          f"split leakage-free; cold test share {cold_share:.3f} >= 0.05")


def test_criterion_9_determinism(tmp_path):
    """Identical config + seed => bit-identical catalog, encoder, checkpoint
    and report artifacts."""
    paths = []
    for run in ("a", "b"):
        base = tmp_path / run
        cat = datagen.generate_catalog(100, seed=5)
        log = datagen.generate_log(cat, 30, 10, 3000, seed=5)
        datagen.save_catalog(str(base / "catalog"), cat, {"seed": 5})
        rq = Q.train_rq(cat.content_embeddings, 4, seed=5)
        _, res = Q.encode_rq_batch(rq, cat.content_embeddings)
        opq = Q.train_opq(res, 8, iters=5, seed=5)
        Q.save_encoders(str(base / "encoders"), rq, opq, {"seed": 5})
        sids = Q.assign_semantic_ids(
            list(enumerate(cat.content_embeddings)), rq, opq)
        table = Q.opq_code_similarity_topk(opq, 5)
        nsets = M.neighbor_sets_from_table(table, 8)
        days = max(s.day for s in log) + 1
        train_split, _ = datagen.split_train_test(log, days - 1, 1)
        ds = M.Dataset(train_split, cat, sids)
        mdl = M.CTRModel(n_users=30, n_queries=10, n_items=100, rq_K=4,
                         opq_K=8, dim=16, context_dim=ds.context.shape[1],
                         item_feat_dim=ds.item_feats.shape[1],
                         variant="smile", hp=M.HyperParams(epochs=1),
                         seed=5)
        M.train(mdl, ds, nsets, seed=5)
        mdl.store.save(str(base / "checkpoint"), {"seed": 5})
        rep = evaluation.MetricsReport(
            variant="smile", seed=5,
            slices={"All": {"auc": 0.5, "gauc": 0.5, "n_samples": 1}})
        text, payload = evaluation.report([rep])
        evaluation.save_report(str(base / "report"), text, payload)
        paths.append(base)
    a, b = paths
    for name in ("catalog.bin", "catalog.manifest.json", "encoders.bin",
                 "encoders.manifest.json", "checkpoint.bin",
                 "checkpoint.manifest.json", "report.json", "report.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    print("\ncriterion 9 PASS: catalog/encoder/checkpoint/report artifacts "
          "bit-identical across reruns")
