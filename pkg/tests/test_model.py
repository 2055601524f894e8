"""Loss-term oracles, variant graph-surgery contracts, and end-to-end
gradient checks for the CTR model."""

import math

import numpy as np
import pytest

from sidctr import diffcore as dc
from sidctr import model as M
from sidctr.diffcore import Tensor


def _gmax(param):
    return 0.0 if param.grad is None else float(np.abs(param.grad).max())


def _model(bench, variant, hp=None, seed=0):
    d = bench.dims
    return M.CTRModel(d["n_users"], d["n_queries"], d["n_items"],
                      d["rq_K"], d["opq_K"], d["dim"], d["context_dim"],
                      d["item_feat_dim"], variant=variant, hp=hp, seed=seed)


# ---------------------------------------------------------------------------
# combine / final_item_rep endpoints
# ---------------------------------------------------------------------------

def test_combine_endpoints(rng):
    id_emb = Tensor(rng.normal(size=(4, 6)))
    rq_emb = Tensor(rng.normal(size=(4, 6)))
    full = M.combine(id_emb, rq_emb, Tensor(np.ones((4, 1)))).values
    none = M.combine(id_emb, rq_emb, Tensor(np.zeros((4, 1)))).values
    np.testing.assert_allclose(full, id_emb.values)
    np.testing.assert_allclose(none, rq_emb.values)
    half = M.combine(id_emb, rq_emb, Tensor(np.full((4, 1), 0.5))).values
    np.testing.assert_allclose(half, 0.5 * (id_emb.values + rq_emb.values))


def test_final_item_rep_is_affine_in_lambda(rng):
    a = Tensor(rng.normal(size=(3, 5)))
    b = Tensor(rng.normal(size=(3, 5)))
    np.testing.assert_allclose(M.final_item_rep(a, b, 0.0).values, a.values)
    np.testing.assert_allclose(M.final_item_rep(a, b, 0.5).values,
                               a.values + 0.5 * b.values)


# ---------------------------------------------------------------------------
# transfer loss
# ---------------------------------------------------------------------------

def test_transfer_loss_zero_when_aligned(rng):
    e = Tensor(rng.normal(size=(5, 8)))
    g = Tensor(rng.uniform(size=(5, 1)))
    assert M.transfer_loss(e, e, g).item() == pytest.approx(0.0, abs=1e-12)


def test_transfer_loss_positive_when_misaligned(rng):
    a = Tensor(rng.normal(size=(5, 8)))
    b = Tensor(rng.normal(size=(5, 8)))
    g = Tensor(np.full((5, 1), 0.5))
    assert M.transfer_loss(a, b, g).item() > 0


def test_transfer_loss_direction_of_gradients(rng):
    """High gate => gradient flows into the rq branch (pulled toward id);
    low gate => gradient flows into the id branch."""
    for g_val, live, frozen_side in ((1.0, "rq", "id"), (0.0, "id", "rq")):
        embs = {"id": Tensor(rng.normal(size=(4, 6)), requires_grad=True),
                "rq": Tensor(rng.normal(size=(4, 6)), requires_grad=True)}
        g = Tensor(np.full((4, 1), g_val))
        loss = M.transfer_loss(embs["id"], embs["rq"], g, gate_grad=False)
        loss.backward()
        assert np.abs(embs[live].grad).max() > 1e-6
        assert np.abs(embs[frozen_side].grad).max() < 1e-12


def test_transfer_loss_gate_gradient_is_identically_zero(rng):
    """The two weighted KL branches have equal *value* (they differ only in
    stop-gradient placement), so the direct gradient through the gate
    vanishes: the gate is shaped by the BCE path, not the transfer term."""
    a = Tensor(rng.normal(size=(4, 6)))
    b = Tensor(rng.normal(size=(4, 6)))
    g_logit = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    loss = M.transfer_loss(a, b, dc.sigmoid(g_logit), gate_grad=True)
    loss.backward()
    np.testing.assert_allclose(g_logit.grad, 0.0, atol=1e-12)


def test_transfer_loss_scalar_oracle():
    # 2-dim embeddings: id = [z, 0] -> p_id = [s(z), 1-s(z)]; rq = [0, 0]
    # -> p_rq = [.5, .5]. The gate only picks which branch carries gradient,
    # so the loss *value* equals KL(p_id || p_rq) for every gate setting.
    z = 1.3
    p = 1.0 / (1.0 + math.exp(-z))
    want = p * math.log(p / 0.5) + (1 - p) * math.log((1 - p) / 0.5)
    a = Tensor(np.array([[z, 0.0]]))
    b = Tensor(np.array([[0.0, 0.0]]))
    for g_val in (0.0, 0.3, 1.0):
        got = M.transfer_loss(a, b, Tensor(np.full((1, 1), g_val))).item()
        assert got == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------------------
# contrastive loss
# ---------------------------------------------------------------------------

def test_contrastive_scalar_oracle():
    """Hand-computed two-anchor InfoNCE with cosine similarities."""
    tau = 0.5
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    pos = np.array([[1.0, 0.0], [1.0, 1.0]])
    loss, skipped = M.contrastive_loss(Tensor(a), Tensor(pos), tau)
    assert skipped == 0
    # anchor 0: pos sim 1, negative (anchor 1) sim 0
    l0 = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + math.exp(0.0)))
    # anchor 1: pos sim cos45 = 1/sqrt2, negative sim 0
    s = 1 / math.sqrt(2)
    l1 = -math.log(math.exp(s / tau) / (math.exp(s / tau) + math.exp(0.0)))
    assert loss.item() == pytest.approx((l0 + l1) / 2, abs=1e-9)


def test_contrastive_perfect_positive_lower_loss(rng):
    a = rng.normal(size=(6, 8))
    loss_same, _ = M.contrastive_loss(Tensor(a), Tensor(a.copy()), 0.1)
    loss_rand, _ = M.contrastive_loss(Tensor(a),
                                      Tensor(rng.normal(size=(6, 8))), 0.1)
    assert loss_same.item() < loss_rand.item()


def test_contrastive_scale_invariance_of_anchors(rng):
    """Cosine similarity => rescaling rows must not change the loss."""
    a = rng.normal(size=(5, 4))
    p = rng.normal(size=(5, 4))
    base, _ = M.contrastive_loss(Tensor(a), Tensor(p), 0.2)
    scaled, _ = M.contrastive_loss(Tensor(3.0 * a), Tensor(0.5 * p), 0.2)
    assert scaled.item() == pytest.approx(base.item(), abs=1e-9)


def test_contrastive_contrib_mask(rng):
    a = rng.normal(size=(4, 4))
    p = rng.normal(size=(4, 4))
    loss_all, sk = M.contrastive_loss(Tensor(a), Tensor(p), 0.1,
                                      contrib=np.ones(4))
    assert sk == 0
    loss_none, sk = M.contrastive_loss(Tensor(a), Tensor(p), 0.1,
                                       contrib=np.zeros(4))
    assert sk == 4 and loss_none.item() == 0.0
    # masked anchors contribute nothing: recompute mean by hand
    contrib = np.array([1.0, 0.0, 1.0, 0.0])
    loss_half, sk = M.contrastive_loss(Tensor(a), Tensor(p), 0.1,
                                       contrib=contrib)
    assert sk == 2


def test_contrastive_rejects_bad_args(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    with pytest.raises(ValueError):
        M.contrastive_loss(a, a, tau=0.0)
    with pytest.raises(ValueError):
        M.contrastive_loss(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))),
                           tau=0.1)


def test_contrastive_extra_negatives_increase_loss(rng):
    a = rng.normal(size=(5, 4))
    p = a + 0.01 * rng.normal(size=(5, 4))
    base, _ = M.contrastive_loss(Tensor(a), Tensor(p), 0.1)
    extra = Tensor(rng.normal(size=(5, 3, 4)))
    more, _ = M.contrastive_loss(Tensor(a), Tensor(p), 0.1, extra_embs=extra)
    assert more.item() > base.item()


# ---------------------------------------------------------------------------
# variant graph surgery
# ---------------------------------------------------------------------------

def test_unknown_variant_rejected(tiny_bench):
    with pytest.raises(ValueError):
        _model(tiny_bench, "bogus")


def test_only_sid_has_no_id_gradient(tiny_bench):
    """only_sid removes the id table from the item path: no gradient may
    reach id_table from the loss (history path included)."""
    m = _model(tiny_bench, "only_sid")
    ds = tiny_bench.train_ds
    idx = np.arange(16)
    loss, _ = m.total_loss(ds, idx, tiny_bench.neighbor_sets)
    loss.backward()
    assert _gmax(m.store["id_table"]) == 0.0
    # sanity: the sid tables do receive gradient
    assert _gmax(m.store["rq_table_1"]) > 0


def test_iid_sid_has_no_auxiliary_losses(tiny_bench):
    m = _model(tiny_bench, "iid_sid")
    idx = np.arange(16)
    _, parts = m.total_loss(tiny_bench.train_ds, idx,
                            tiny_bench.neighbor_sets)
    assert parts["trans"] == 0.0 and parts["cont"] == 0.0
    assert parts["bce"] > 0


def test_iid_rq_drops_opq_terms(tiny_bench):
    m = _model(tiny_bench, "iid_rq")
    idx = np.arange(16)
    loss, parts = m.total_loss(tiny_bench.train_ds, idx,
                               tiny_bench.neighbor_sets)
    assert parts["cont"] == 0.0 and parts["trans"] != 0.0
    loss.backward()
    assert _gmax(m.store["opq_table_1"]) == 0.0


def test_iid_opq_drops_rq_fusion_and_transfer(tiny_bench):
    m = _model(tiny_bench, "iid_opq")
    idx = np.arange(16)
    loss, parts = m.total_loss(tiny_bench.train_ds, idx,
                               tiny_bench.neighbor_sets)
    assert parts["trans"] == 0.0 and parts["cont"] != 0.0
    loss.backward()
    assert _gmax(m.store["rq_table_1"]) == 0.0
    assert _gmax(m.store["gate_W"]) == 0.0


def test_smile_uses_all_terms(tiny_bench):
    m = _model(tiny_bench, "smile")
    idx = np.arange(16)
    loss, parts = m.total_loss(tiny_bench.train_ds, idx,
                               tiny_bench.neighbor_sets)
    assert parts["trans"] != 0.0 and parts["cont"] != 0.0
    loss.backward()
    for name in ("id_table", "rq_table_1", "opq_table_1", "gate_W",
                 "gate_mlp_W1", "fuse_W"):
        assert _gmax(m.store[name]) > 0, name


def test_alpha_zero_reduces_to_bce(tiny_bench):
    hp0 = M.HyperParams(alpha1=0.0, alpha2=0.0)
    m = _model(tiny_bench, "smile", hp=hp0)
    idx = np.arange(16)
    loss, parts = m.total_loss(tiny_bench.train_ds, idx,
                               tiny_bench.neighbor_sets)
    assert loss.item() == pytest.approx(parts["bce"], abs=1e-12)


def test_gate_is_batched_scalar_in_unit_interval(tiny_bench):
    m = _model(tiny_bench, "smile")
    ds = tiny_bench.train_ds
    m.bind(ds)
    items = ds.items[np.arange(32)]
    g = m.transfer_gate(ds.conv_feats[items]).values
    assert g.shape == (32, 1)
    assert (g > 0).all() and (g < 1).all()


def test_gate_prior_prefers_id_for_high_traffic(tiny_bench):
    """At init the gate must be monotone in behavioural evidence: an item
    with heavy lifetime traffic gets a higher id weight than an unseen one."""
    m = _model(tiny_bench, "smile")
    heavy = np.log1p(np.array([[5000.0, 500.0, 50.0]]))
    unseen = np.zeros((1, 3))
    g_heavy = float(m.transfer_gate(heavy).values.squeeze())
    g_unseen = float(m.transfer_gate(unseen).values.squeeze())
    assert g_heavy > g_unseen
    assert g_unseen < 0.2


# ---------------------------------------------------------------------------
# end-to-end gradient checks (acceptance-critical)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("variant", M.VARIANTS)
def test_full_objective_grad_check(tiny_bench, variant):
    m = _model(tiny_bench, variant)
    idx = np.arange(6)
    err = M.run_grad_check(m, tiny_bench.train_ds, idx,
                           tiny_bench.neighbor_sets, max_coords=6)
    assert err < 1e-4, f"{variant}: {err}"


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_decreases_bce(tiny_bench):
    hp = M.HyperParams(epochs=2)
    m = _model(tiny_bench, "smile", hp=hp)
    res = M.train(m, tiny_bench.train_ds, tiny_bench.neighbor_sets, seed=0)
    assert res.curve[-1]["L_bce"] < res.curve[0]["L_bce"]
    assert res.config["variant"] == "smile"


def test_train_deterministic(tiny_bench):
    hp = M.HyperParams(epochs=1)
    outs = []
    for _ in range(2):
        m = _model(tiny_bench, "smile", hp=hp, seed=3)
        M.train(m, tiny_bench.train_ds, tiny_bench.neighbor_sets, seed=3)
        outs.append(M.predict(m, tiny_bench.test_ds))
    np.testing.assert_array_equal(outs[0], outs[1])


def test_train_lr_zero_is_noop(tiny_bench):
    hp = M.HyperParams(epochs=1, lr=0.0)
    m = _model(tiny_bench, "smile", hp=hp)
    before = {k: v.values.copy() for k, v in m.store.params.items()}
    M.train(m, tiny_bench.train_ds, tiny_bench.neighbor_sets, seed=0)
    for k, v in m.store.params.items():
        np.testing.assert_array_equal(v.values, before[k])


def test_predict_range_and_shape(tiny_bench):
    m = _model(tiny_bench, "only_sid")
    y = M.predict(m, tiny_bench.test_ds)
    assert y.shape == (len(tiny_bench.test_ds),)
    assert (y > 0).all() and (y < 1).all()


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        M.HyperParams(tau=0.0)
    with pytest.raises(ValueError):
        M.HyperParams(lambda_=-0.1)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def test_pair_id_and_neighbor_sets_roundtrip():
    codes = np.array([[1, 2], [0, 7], [3, 0]])
    pids = M.pair_id(codes, 8)
    np.testing.assert_array_equal(pids, [10, 7, 24])
    table = {(1, 2): [(0, 7), (3, 0)], (0, 7): [(1, 2)]}
    sets = M.neighbor_sets_from_table(table, 8)
    assert sets == {10: (7, 24), 7: (10,)}
