"""CTR model with semantic-ID enhanced item representations.

The item representation is assembled from three channels: the classic
per-item id embedding (collaborative), a fused embedding of the three
residual-quantization codes (shared semantics), and the sum of the two
product-quantization code embeddings (fine-grained detail). A per-sample
gate blends id against the RQ fusion, a directional KL loss transfers
information between the two (stop-gradient decides the direction per
sample), and an InfoNCE loss over OPQ code neighborhoods sharpens the
fine-grained channel. Ablation variants are pure graph surgery on this
assembly.

Total objective: BCE + alpha1 * transfer + alpha2 * contrastive.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, ParameterStore
from .quantizer import SemanticId

VARIANTS = ("only_sid", "iid_sid", "iid_rq", "iid_opq", "smile")


@dataclass
class HyperParams:
    alpha1: float = 0.01      # transfer loss weight
    alpha2: float = 0.05      # contrastive loss weight
    tau: float = 0.1          # InfoNCE temperature
    lambda_: float = 0.5      # OPQ fusion coefficient
    lr: float = 3e-3
    batch_size: int = 512
    epochs: int = 3
    kl_softmax_temp: float = 1.0
    extra_negatives: int = 4
    history_len: int = 20
    tower_hidden: tuple = (64, 32)
    gate_hidden: int = 32
    emb_init_sigma: float = 0.05
    # The fine OPQ table starts at a larger scale: in a production model it
    # is dominated by rows trained on other traffic, so an untrained row is
    # genuinely out-of-distribution noise rather than near-zero. Item ids
    # use a middle scale - large enough to learn per-item quality quickly,
    # small enough that an untrained id row does not drown the content
    # channels it is summed with. The dense coarse tables (RQ levels,
    # users, queries) keep the small init.
    id_init_sigma: float = 0.05
    opq_init_sigma: float = 0.15
    # Whether the gate output carries gradient inside the transfer loss;
    # the detached alternative is kept as a switch.
    gate_grad_in_transfer: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_ < 0 or self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------------------
# functional building blocks (batched; [B, d] rows)
# ---------------------------------------------------------------------------

def combine(id_emb: Tensor, rq_emb: Tensor, t_g: Tensor) -> Tensor:
    """Convex combination t_g * id + (1 - t_g) * rq; t_g is [B, 1]."""
    one_minus = dc.add(dc.scale(t_g, -1.0), Tensor(1.0))
    return dc.add(dc.mul(t_g, id_emb), dc.mul(one_minus, rq_emb))


def final_item_rep(i_c: Tensor, i_opq: Tensor, lambda_: float) -> Tensor:
    """i_c + lambda * i_opq."""
    return dc.add(i_c, dc.scale(i_opq, lambda_))


def transfer_loss(id_emb: Tensor, rq_emb: Tensor, t_g: Tensor,
                  kl_softmax_temp: float = 1.0,
                  gate_grad: bool = True,
                  frozen: dict | None = None) -> Tensor:
    """Directional KL between the softmax views of the two embeddings.

    Per sample: t_g * KL(sg(p_id), p_rq) + (1 - t_g) * KL(p_id, sg(p_rq)),
    averaged over the batch. The stop-gradient wraps the softmaxed
    distribution, so high-gate samples pull rq toward id and low-gate
    samples pull id toward rq.

    `frozen` optionally supplies the detached distributions ("p_id",
    "p_rq") as plain arrays captured at the current parameter point. This
    makes the function finite-difference consistent for gradient checking;
    training does not need it.
    """
    inv_t = 1.0 / kl_softmax_temp
    p_id = dc.softmax(dc.scale(id_emb, inv_t), axis=-1)
    p_rq = dc.softmax(dc.scale(rq_emb, inv_t), axis=-1)
    sg_p_id = Tensor(frozen["p_id"]) if frozen else dc.stop_gradient(p_id)
    sg_p_rq = Tensor(frozen["p_rq"]) if frozen else dc.stop_gradient(p_rq)
    kl_to_rq = dc.kl_divergence(sg_p_id, p_rq)   # [B]
    kl_to_id = dc.kl_divergence(p_id, sg_p_rq)   # [B]
    g = t_g if gate_grad else dc.stop_gradient(t_g)
    g = dc.reshape(g, (-1,))
    one_minus = dc.add(dc.scale(g, -1.0), Tensor(1.0))
    per_sample = dc.add(dc.mul(g, kl_to_rq), dc.mul(one_minus, kl_to_id))
    return dc.tmean(per_sample)


def contrastive_loss(opq_embs: Tensor, pos_embs: Tensor, tau: float,
                     extra_embs: Tensor | None = None,
                     contrib: np.ndarray | None = None):
    """InfoNCE over OPQ-channel embeddings with explicit positives.

    The positive for anchor i is pos_embs[i] (the embedding of a code pair
    drawn from the anchor's top-k OPQ neighbour list); the other batch
    anchors plus the optional per-anchor extra embeddings are negatives.
    All similarities are cosines scaled by 1/tau. `contrib` masks out
    anchors whose neighbour list is empty; they contribute zero. Returns
    (loss, n_skipped) where n_skipped counts masked anchors.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    B = opq_embs.shape[0]
    if B < 2:
        raise ValueError("contrastive_loss needs a batch of >= 2")
    if contrib is None:
        contrib = np.ones(B)
    contrib = np.asarray(contrib, dtype=np.float64)

    unit = dc.l2_normalize(opq_embs, axis=-1)
    pos_unit = dc.l2_normalize(pos_embs, axis=-1)
    pos_sim = dc.tsum(dc.mul(unit, pos_unit), axis=1)            # [B]
    pos_exp = dc.texp(dc.scale(pos_sim, 1.0 / tau))              # [B]

    sims = dc.matmul(unit, dc.transpose(unit))                   # [B, B]
    exp_s = dc.texp(dc.scale(sims, 1.0 / tau))
    neg_mask = 1.0 - np.eye(B)
    neg_sum = dc.tsum(dc.mul(exp_s, Tensor(neg_mask)), axis=1)   # [B]
    if extra_embs is not None:
        anchor = dc.reshape(unit, (B, 1, -1))
        extra_unit = dc.l2_normalize(extra_embs, axis=-1)
        extra_sims = dc.tsum(dc.mul(anchor, extra_unit), axis=2)  # [B, E]
        extra_exp = dc.texp(dc.scale(extra_sims, 1.0 / tau))
        neg_sum = dc.add(neg_sum, dc.tsum(extra_exp, axis=1))

    n_skipped = int(B - contrib.sum())
    if contrib.sum() == 0:
        return Tensor(0.0), n_skipped
    denom = dc.tlog(dc.add(pos_exp, neg_sum))
    numer = dc.tlog(pos_exp)
    per_anchor = dc.mul(Tensor(contrib), dc.add(denom, dc.scale(numer, -1.0)))
    return dc.scale(dc.tsum(per_anchor), 1.0 / contrib.sum()), n_skipped


# ---------------------------------------------------------------------------
# dataset preparation
# ---------------------------------------------------------------------------

class Dataset:
    """Struct-of-arrays view of a sample list, ready for batched lookup."""

    def __init__(self, samples, catalog, sid_map: dict[int, SemanticId],
                 history_len: int = 20):
        n = len(samples)
        self.users = np.array([s.user_id for s in samples], dtype=np.int64)
        self.queries = np.array([s.query_id for s in samples], dtype=np.int64)
        self.items = np.array([s.item_id for s in samples], dtype=np.int64)
        self.labels = np.array([s.label for s in samples], dtype=np.float64)
        self.context = np.stack([s.context for s in samples])
        self.history = np.zeros((n, history_len), dtype=np.int64)
        self.history_mask = np.zeros((n, history_len))
        for r, s in enumerate(samples):
            h = s.history[-history_len:]
            if h:
                self.history[r, :len(h)] = h
                self.history_mask[r, :len(h)] = 1.0

        n_items = catalog.n_items
        self.rq_codes = np.zeros((n_items, 3), dtype=np.int64)
        self.opq_codes = np.zeros((n_items, 2), dtype=np.int64)
        for item_id, sid in sid_map.items():
            self.rq_codes[item_id] = (sid.rq1, sid.rq2, sid.rq3)
            self.opq_codes[item_id] = (sid.opq1, sid.opq2)
        # item features: content embedding plus conversion-count slice
        conv = np.stack([np.log1p(catalog.impressions_7d),
                         np.log1p(catalog.clicks_7d),
                         np.log1p(catalog.orders_7d)], axis=1)
        self.item_feats = np.concatenate(
            [catalog.content_embeddings, conv], axis=1)
        # The gate sees lifetime counters: they proxy how much behavioural
        # evidence backs the item's id embedding, which is exactly the
        # quantity the adaptive blend should condition on.
        self.conv_feats = np.stack([np.log1p(catalog.impressions_life),
                                    np.log1p(catalog.clicks_life),
                                    np.log1p(catalog.orders_life)], axis=1)
        self.n_items = n_items

    def __len__(self):
        return len(self.items)


def pair_id(opq_codes: np.ndarray, k2: int) -> np.ndarray:
    return opq_codes[..., 0] * k2 + opq_codes[..., 1]


def neighbor_sets_from_table(table: dict, k2: int) -> dict[int, tuple]:
    """Flatten the (a, b) -> [(x, y), ...] neighbour table to pair-id keys,
    preserving the similarity order of each neighbour list."""
    return {a * k2 + b: tuple(x * k2 + y for x, y in nbrs)
            for (a, b), nbrs in table.items()}


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class CTRModel:
    """Click-probability model over (user, query, item, context, history).

    `variant` selects the graph surgery:
      smile    - gated id/RQ blend + lambda*OPQ, both auxiliary losses
      iid_rq   - gated id/RQ blend, transfer loss only (no OPQ channel)
      iid_opq  - id + lambda*OPQ, contrastive loss only (no RQ/gate)
      iid_sid  - id + RQ + OPQ embedding sum, no gate, no auxiliary losses
      only_sid - RQ + OPQ only, id table removed from the item path
    """

    def __init__(self, n_users, n_queries, n_items, rq_K, opq_K, dim,
                 context_dim, item_feat_dim, variant="smile",
                 hp: HyperParams | None = None, seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; one of {VARIANTS}")
        self.variant = variant
        self.hp = hp or HyperParams()
        self.dim = dim
        self.opq_K = opq_K
        rng = np.random.default_rng(seed)
        s = self.hp.emb_init_sigma
        p = ParameterStore()
        p.add("id_table", rng.normal(scale=self.hp.id_init_sigma,
                                     size=(n_items, dim)))
        for lvl in range(3):
            p.add(f"rq_table_{lvl + 1}", rng.normal(scale=s, size=(rq_K, dim)))
        for lvl in range(2):
            p.add(f"opq_table_{lvl + 1}",
                  rng.normal(scale=self.hp.opq_init_sigma, size=(opq_K, dim)))
        p.add("user_table", rng.normal(scale=s, size=(n_users, dim)))
        p.add("query_table", rng.normal(scale=s, size=(n_queries, dim)))
        p.add("context_W", rng.normal(scale=np.sqrt(2.0 / context_dim),
                                      size=(context_dim, dim)))
        p.add("context_b", np.zeros(dim))
        p.add("fuse_W", rng.normal(scale=np.sqrt(2.0 / dim), size=(dim, dim)))
        p.add("fuse_b", np.zeros(dim))
        # Gate = prior path + learned correction. The prior path is a single
        # sigmoid-input layer over the three log1p evidence counters:
        # monotone in each counter, so the blend extrapolates sensibly to
        # items with no behavioural history. It is initialized with the prior
        # "trust the id in proportion to evidence": positive weights and a
        # negative bias so a zero-history item starts near the content end.
        # The correction is a small-init MLP over (context, user, item
        # features) that lets the gate specialize per request; it starts
        # near zero so the prior dominates early training.
        p.add("gate_W", np.full((3, 1), 0.5))
        p.add("gate_b", np.array([-2.0]))
        gin = context_dim + dim + item_feat_dim
        gh = self.hp.gate_hidden
        p.add("gate_mlp_W1", rng.normal(scale=np.sqrt(2.0 / gin),
                                        size=(gin, gh)))
        p.add("gate_mlp_b1", np.zeros(gh))
        p.add("gate_mlp_W2", rng.normal(scale=0.01, size=(gh, 1)))
        p.add("gate_mlp_b2", np.zeros(1))
        self.item_rep_dim = dim
        tin = 3 * dim + 2 * self.item_rep_dim
        h1, h2 = self.hp.tower_hidden
        p.add("tower_W1", rng.normal(scale=np.sqrt(2.0 / tin), size=(tin, h1)))
        p.add("tower_b1", np.zeros(h1))
        p.add("tower_W2", rng.normal(scale=np.sqrt(2.0 / h1), size=(h1, h2)))
        p.add("tower_b2", np.zeros(h2))
        p.add("tower_W3", rng.normal(scale=np.sqrt(2.0 / h2), size=(h2, 1)))
        p.add("tower_b3", np.zeros(1))
        self.store = p
        self.skipped_contrastive_batches = 0

    # -- item-representation channels ---------------------------------------

    def fuse_rq(self, rq_codes: np.ndarray) -> Tensor:
        """RQ-channel representation of a batch of code triples.

        The gated variants fuse the three level embeddings through a
        residual dense layer; the sid-as-feature variants (iid_sid,
        only_sid) consume the raw embedding sum, treating the codes as
        plain ID-style features.
        """
        p = self.store
        s = dc.add(dc.add(dc.gather(p["rq_table_1"], rq_codes[:, 0]),
                          dc.gather(p["rq_table_2"], rq_codes[:, 1])),
                   dc.gather(p["rq_table_3"], rq_codes[:, 2]))
        if self.variant in ("smile", "iid_rq"):
            return dc.add(s, dc.linear(s, p["fuse_W"], p["fuse_b"]))
        return s

    def opq_embed(self, opq_codes: np.ndarray) -> Tensor:
        p = self.store
        return dc.add(dc.gather(p["opq_table_1"], opq_codes[:, 0]),
                      dc.gather(p["opq_table_2"], opq_codes[:, 1]))

    def transfer_gate(self, conv_feats: np.ndarray,
                      gate_x: Tensor | None = None) -> Tensor:
        """Per-sample scalar in (0, 1): how much to trust the id embedding.

        The pre-sigmoid logit is a monotone linear function of the item's
        interaction-volume statistics (how much behavioural evidence backs
        the id row) plus, when `gate_x` is given, an MLP correction over the
        request features (context, user, item feature vector)."""
        p = self.store
        logit = dc.linear(Tensor(conv_feats), p["gate_W"], p["gate_b"])
        if gate_x is not None:
            h = dc.relu(dc.linear(gate_x, p["gate_mlp_W1"], p["gate_mlp_b1"]))
            logit = dc.add(logit, dc.linear(h, p["gate_mlp_W2"],
                                            p["gate_mlp_b2"]))
        return dc.sigmoid(logit)  # [B, 1]

    def _item_rep(self, id_emb, i_rq, i_opq, t_g):
        """Variant-dependent final item representation.

        iid_sid adds the id embedding to the raw sid sum (id and sid as
        parallel ID-style features in one channel); the gated variants
        blend them with a learned mixing weight instead.
        """
        lam = self.hp.lambda_
        v = self.variant
        if v == "smile":
            return final_item_rep(combine(id_emb, i_rq, t_g), i_opq, lam)
        if v == "iid_rq":
            return combine(id_emb, i_rq, t_g)
        if v == "iid_opq":
            return final_item_rep(id_emb, i_opq, lam)
        if v == "iid_sid":
            return dc.add(id_emb, dc.add(i_rq, i_opq))
        return dc.add(i_rq, i_opq)  # only_sid

    def _history_rep(self, hist: np.ndarray, mask: np.ndarray) -> Tensor:
        """Mean-pooled item representations of recent clicks.

        Uses the variant's item channels with the gate fixed at 0.5 (the
        per-request gate inputs are undefined for past items).
        """
        p = self.store
        B, H = hist.shape
        flat = hist.reshape(-1)
        v = self.variant
        rq_c = self.dataset_rq_codes[flat]
        opq_c = self.dataset_opq_codes[flat]
        lam = self.hp.lambda_
        if v == "smile":
            half = dc.scale(dc.add(dc.gather(p["id_table"], flat),
                                   self.fuse_rq(rq_c)), 0.5)
            rep = dc.add(half, dc.scale(self.opq_embed(opq_c), lam))
        elif v == "iid_rq":
            rep = dc.scale(dc.add(dc.gather(p["id_table"], flat),
                                  self.fuse_rq(rq_c)), 0.5)
        elif v == "iid_opq":
            rep = dc.add(dc.gather(p["id_table"], flat),
                         dc.scale(self.opq_embed(opq_c), lam))
        elif v == "iid_sid":
            rep = dc.add(dc.gather(p["id_table"], flat),
                         dc.add(self.fuse_rq(rq_c), self.opq_embed(opq_c)))
        else:  # only_sid
            rep = dc.add(self.fuse_rq(rq_c), self.opq_embed(opq_c))
        rep = dc.reshape(rep, (B, H, self.item_rep_dim))
        masked = dc.mul(rep, Tensor(mask[:, :, None]))
        counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        return dc.mul(dc.tsum(masked, axis=1), Tensor(1.0 / counts))

    # -- forward / losses ----------------------------------------------------

    def bind(self, dataset: Dataset):
        """Attach per-item lookup arrays used by forward passes."""
        self.dataset_rq_codes = dataset.rq_codes
        self.dataset_opq_codes = dataset.opq_codes
        self.dataset_item_feats = dataset.item_feats
        self.dataset_conv_feats = dataset.conv_feats
        self.n_items = dataset.n_items

    def forward(self, ds: Dataset, idx: np.ndarray):
        """Forward pass over rows `idx`; returns (y_hat, internals)."""
        self.bind(ds)
        p = self.store
        items = ds.items[idx]
        user_emb = dc.gather(p["user_table"], ds.users[idx])
        query_emb = dc.gather(p["query_table"], ds.queries[idx])
        ctx = ds.context[idx]
        ctx_emb = dc.linear(Tensor(ctx), p["context_W"], p["context_b"])
        id_emb = dc.gather(p["id_table"], items)
        i_rq = self.fuse_rq(ds.rq_codes[items])
        i_opq = self.opq_embed(ds.opq_codes[items])
        gate_x = dc.concat([Tensor(ctx), user_emb,
                            Tensor(ds.item_feats[items])], axis=1)
        t_g = self.transfer_gate(ds.conv_feats[items], gate_x)
        i_f = self._item_rep(id_emb, i_rq, i_opq, t_g)
        h_emb = self._history_rep(ds.history[idx], ds.history_mask[idx])
        x = dc.concat([user_emb, query_emb, i_f, ctx_emb, h_emb], axis=1)
        h = dc.relu(dc.linear(x, p["tower_W1"], p["tower_b1"]))
        h = dc.relu(dc.linear(h, p["tower_W2"], p["tower_b2"]))
        y_hat = dc.sigmoid(dc.linear(h, p["tower_W3"], p["tower_b3"]))
        internals = {"id_emb": id_emb, "i_rq": i_rq, "i_opq": i_opq,
                     "t_g": t_g, "i_f": i_f, "items": items}
        return dc.reshape(y_hat, (-1,)), internals

    def sg_snapshot(self, ds: Dataset, idx: np.ndarray) -> dict:
        """Detached-branch values at the current parameter point; feed to
        total_loss(..., sg_frozen=...) when finite-difference checking."""
        _, it = self.forward(ds, idx)
        inv_t = 1.0 / self.hp.kl_softmax_temp
        return {
            "p_id": dc.softmax(dc.scale(Tensor(it["id_emb"].values), inv_t),
                               axis=-1).values,
            "p_rq": dc.softmax(dc.scale(Tensor(it["i_rq"].values), inv_t),
                               axis=-1).values,
        }

    def total_loss(self, ds: Dataset, idx: np.ndarray,
                   neighbor_sets: dict | None = None,
                   extra_neg_items: np.ndarray | None = None,
                   pos_choice: np.ndarray | None = None,
                   sg_frozen: dict | None = None):
        """BCE + alpha1 * transfer + alpha2 * contrastive (per variant)."""
        hp = self.hp
        y_hat, it = self.forward(ds, idx)
        l_bce = dc.bce_loss(y_hat, ds.labels[idx])
        loss = l_bce
        parts = {"bce": l_bce.item(), "trans": 0.0, "cont": 0.0}

        if self.variant in ("smile", "iid_rq") and hp.alpha1 > 0:
            l_trans = transfer_loss(it["id_emb"], it["i_rq"], it["t_g"],
                                    hp.kl_softmax_temp,
                                    hp.gate_grad_in_transfer,
                                    frozen=sg_frozen)
            loss = dc.add(loss, dc.scale(l_trans, hp.alpha1))
            parts["trans"] = l_trans.item()

        if (self.variant in ("smile", "iid_opq") and hp.alpha2 > 0
                and neighbor_sets is not None and len(idx) >= 2):
            pids = pair_id(ds.opq_codes[it["items"]], self.opq_K)
            nbrs = [neighbor_sets.get(int(p), ()) for p in pids]
            contrib = np.array([1.0 if len(x) else 0.0 for x in nbrs])
            if pos_choice is None:
                pos_choice = np.zeros(len(idx), dtype=np.int64)
            pos_pids = np.array(
                [x[int(c) % len(x)] if len(x) else 0
                 for x, c in zip(nbrs, pos_choice)], dtype=np.int64)
            pos_codes = np.stack([pos_pids // self.opq_K,
                                  pos_pids % self.opq_K], axis=1)
            pos_embs = self.opq_embed(pos_codes)
            extra = None
            if extra_neg_items is not None and extra_neg_items.size:
                codes = ds.opq_codes[extra_neg_items.reshape(-1)]
                extra = dc.reshape(self.opq_embed(codes),
                                   (len(idx), -1, self.dim))
            l_cont, skipped = contrastive_loss(it["i_opq"], pos_embs, hp.tau,
                                               extra, contrib)
            if skipped == len(idx):
                self.skipped_contrastive_batches += 1
            loss = dc.add(loss, dc.scale(l_cont, hp.alpha2))
            parts["cont"] = l_cont.item()
        return loss, parts


@dataclass
class TrainResult:
    store: ParameterStore
    curve: list = field(default_factory=list)   # per-epoch loss dicts
    config: dict = field(default_factory=dict)


def train(model: CTRModel, dataset: Dataset, neighbor_sets: dict,
          seed: int = 0, eval_fn=None, log_every: int = 0) -> TrainResult:
    """Epoch loop with seeded shuffled mini-batches and Adam steps.

    Aborts with diagnostics if a batch produces a non-finite loss. When
    eval_fn is given it is called after each epoch and its dict is merged
    into the curve entry.
    """
    hp = model.hp
    model.bind(dataset)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    curve = []
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        sums = {"bce": 0.0, "trans": 0.0, "cont": 0.0}
        n_batches = 0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            if len(idx) < 2:
                continue
            extra = rng.integers(model.n_items,
                                 size=(len(idx), hp.extra_negatives))
            pos_choice = rng.integers(1 << 30, size=len(idx))
            try:
                loss, parts = model.total_loss(dataset, idx, neighbor_sets,
                                               extra, pos_choice)
            except dc.NonFiniteError:
                raise dc.NonFiniteError(
                    f"non-finite loss at epoch {epoch} rows {idx[:8]}... "
                    f"(batch of {len(idx)})")
            loss.backward()
            model.store.adam_step(lr=hp.lr)
            for k in sums:
                sums[k] += parts[k]
            n_batches += 1
        entry = {"epoch": epoch,
                 **{f"L_{k}": sums[k] / max(1, n_batches) for k in sums}}
        if eval_fn is not None:
            entry.update(eval_fn(model))
        curve.append(entry)
        if log_every:
            print(f"epoch {epoch}: " + " ".join(
                f"{k}={v:.4f}" for k, v in entry.items() if k != "epoch"))
    return TrainResult(store=model.store, curve=curve,
                       config={"variant": model.variant, "seed": seed,
                               **asdict(model.hp)})


def run_grad_check(model: CTRModel, dataset: Dataset, idx: np.ndarray,
                   neighbor_sets: dict | None = None, h: float = 1e-5,
                   max_coords: int = 8, seed: int = 0) -> float:
    """Finite-difference check of the full objective on one batch.

    The stop-gradient branches are frozen at the current parameter point
    (sg_snapshot) so the analytic gradient and the central differences see
    the same function. Returns the max relative error.
    """
    model.bind(dataset)
    rng = np.random.default_rng(seed)
    extra = rng.integers(model.n_items,
                         size=(len(idx), model.hp.extra_negatives))
    pos_choice = rng.integers(1 << 30, size=len(idx))
    frozen = model.sg_snapshot(dataset, idx)

    def loss_fn():
        loss, _ = model.total_loss(dataset, idx, neighbor_sets, extra,
                                   pos_choice, sg_frozen=frozen)
        return loss

    return dc.grad_check(loss_fn, model.store.params, h=h,
                         max_coords=max_coords, seed=seed)


def predict(model: CTRModel, dataset: Dataset,
            batch_size: int = 4096) -> np.ndarray:
    """Click probabilities for every row of `dataset`."""
    model.bind(dataset)
    out = np.empty(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        y_hat, _ = model.forward(dataset, idx)
        out[idx] = y_hat.values
    return out
