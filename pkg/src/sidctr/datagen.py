"""Synthetic e-commerce interaction log with a ground-truth click model.

Items carry a latent vector drawn from a seeded gaussian mixture; the
observable content embedding is a noisy linear projection of it. Click
probability depends on latent item attractiveness, user-item and query-item
latent affinity, a per-item idiosyncratic quality term (never observable
from content, only learnable from interactions) and position noise. Item
exposure follows a Zipf-like popularity law calibrated so the top 20% of
items receive a configurable share of impressions, and a slice of items
arrives only late in the timeline so the test window contains genuinely
cold items.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import io


@dataclass
class Catalog:
    latents: np.ndarray             # [n, d_true] ground-truth item vectors
    content_embeddings: np.ndarray  # [n, d] observable noisy projection
    components: np.ndarray          # [n] mixture component of each item
    quality: np.ndarray             # [n] idiosyncratic quality (hidden)
    arrival_day: np.ndarray         # [n] first day the item can be shown
    impressions_7d: np.ndarray = field(default=None)
    clicks_7d: np.ndarray = field(default=None)
    orders_7d: np.ndarray = field(default=None)
    # lifetime counters up to the train/test boundary; these proxy how much
    # behavioural evidence exists for an item overall, as opposed to the
    # 7-day window used for the cold/warm labelling
    impressions_life: np.ndarray = field(default=None)
    clicks_life: np.ndarray = field(default=None)
    orders_life: np.ndarray = field(default=None)
    seed: int = 0

    @property
    def n_items(self) -> int:
        return self.latents.shape[0]


@dataclass
class TrainingSample:
    user_id: int
    query_id: int
    item_id: int
    day: int
    context: np.ndarray  # [c]
    history: list[int]   # item ids of recent clicks, oldest first
    label: int
    order_flag: int


@dataclass
class GenConfig:
    """Knobs of the ground-truth click model; defaults documented here."""
    days: int = 30
    test_days: int = 1
    base_ctr: float = 0.10
    order_given_click: float = 0.10
    w_attract: float = 1.5    # additive attractiveness a . z
    w_user: float = 0.8       # user-item latent affinity
    w_query: float = 0.5      # query-item latent affinity
    w_position: float = 0.4   # position noise
    # Per-item idiosyncratic quality: never observable from content, only
    # learnable from an item's own interactions. Sized comparably to the
    # affinity terms so behavioural embeddings carry real information that
    # content-derived codes cannot replicate.
    quality_sigma: float = 2.0
    cluster_quality_sigma: float = 1.5  # shared quality of a mixture component
    # High-frequency content quality: varies along a random latent direction
    # at a finer spatial scale than the cluster structure. Coarse codes
    # average it out within their cells while fine codes resolve it, and it
    # is smooth at the fine-cell scale, so geometric code neighborhoods
    # share similar values - the structure a neighborhood-contrastive loss
    # exists to exploit.
    hf_quality_weight: float = 1.0
    hf_quality_freq: float = 4.0
    # Observation noise on the content embeddings.
    content_noise_sigma: float = 0.3
    new_item_frac: float = 0.4
    explore_share: float = 0.70  # test-window traffic routed to cold items
    cold_boost_threshold: int = 5  # 7d-impression cutoff for that routing
    # New-item exploration during training: a share of traffic goes to
    # recently launched items until they reach the impression cap. It stops
    # when the 7-day counter window opens so the boost never leaks into the
    # labelling counters: an explored item ends up with trained embeddings
    # but quiet recent history, like a production item out of rotation.
    train_explore_share: float = 0.25
    train_cold_cutoff: int = 150   # cumulative-impression cap for the pool
    explore_age_days: int = 14     # only items this fresh are boosted
    history_len: int = 20
    n_context: int = 4


def generate_catalog(n_items: int, d_true: int = 8, d: int = 16,
                     noise_sigma: float | None = None, seed: int = 0,
                     n_components: int = 12,
                     cfg: GenConfig | None = None) -> Catalog:
    """Seeded gaussian-mixture catalog with noisy content embeddings."""
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    cfg = cfg or GenConfig()
    if noise_sigma is None:
        noise_sigma = cfg.content_noise_sigma
    rng = np.random.default_rng(seed)
    means = rng.normal(scale=2.5, size=(n_components, d_true))
    components = rng.integers(n_components, size=n_items)
    latents = means[components] + rng.normal(scale=0.4, size=(n_items, d_true))
    proj = rng.normal(size=(d_true, d)) / math.sqrt(d_true)
    content = latents @ proj + rng.normal(scale=noise_sigma, size=(n_items, d))
    # Quality has a component shared by the mixture cluster (learnable for a
    # cold item from its warm siblings) plus a per-item idiosyncratic part
    # (only learnable from the item's own interactions).
    cluster_quality = rng.normal(scale=cfg.cluster_quality_sigma,
                                 size=n_components)
    hf_dir = rng.normal(size=d_true)
    hf_dir /= np.linalg.norm(hf_dir)
    quality = (cluster_quality[components]
               + rng.normal(scale=cfg.quality_sigma, size=n_items)
               + cfg.hf_quality_weight
               * np.cos(cfg.hf_quality_freq * latents @ hf_dir))
    # A slice of the catalogue launches continuously through the timeline
    # instead of existing from day 0. Items launched late enough get little
    # or no training traffic, so the test window contains genuinely cold
    # items (some arrive on the very last day and are never seen at all).
    arrival = np.zeros(n_items, dtype=np.int64)
    n_new = int(round(cfg.new_item_frac * n_items))
    if n_new:
        new_ids = rng.choice(n_items, size=n_new, replace=False)
        arrival[new_ids] = rng.integers(1, cfg.days, size=n_new)
    return Catalog(latents=latents, content_embeddings=content,
                   components=components, quality=quality,
                   arrival_day=arrival, seed=seed)


def _calibrate_zipf(n: int, pareto_share: float) -> float:
    """Zipf exponent such that the top 20% of ranks carry pareto_share."""
    if not 0.5 < pareto_share < 1.0:
        raise ValueError("pareto_share must be in (0.5, 1)")
    ranks = np.arange(1, n + 1, dtype=np.float64)
    top = max(1, int(0.2 * n))

    def share(a):
        w = ranks ** -a
        return w[:top].sum() / w.sum()

    lo, hi = 0.01, 5.0
    if share(hi) < pareto_share:
        raise RuntimeError(
            f"pareto_share={pareto_share} infeasible for n={n}: "
            f"max attainable {share(hi):.3f}")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if share(mid) < pareto_share:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _realized_head_share(pop_weight: np.ndarray, arrival_day: np.ndarray,
                         events_per_day: list[int], train_end: int,
                         cfg: GenConfig, seed: int) -> float:
    """Simulate the training-window item draws (including the exploration
    boost) and report the top-20% impression share that actually results."""
    rng = np.random.default_rng(seed + 7)
    n = len(pop_weight)
    explore_end = max(0, train_end - 7)
    cum = np.zeros(n, dtype=np.int64)
    for day in range(train_end):
        live = arrival_day <= day
        w = np.where(live, pop_weight, 0.0)
        w = w / w.sum()
        m = events_per_day[day]
        items = rng.choice(n, size=m, p=w)
        if cfg.train_explore_share > 0 and day < explore_end:
            pool = np.flatnonzero(live & (arrival_day > 0)
                                  & (cum < cfg.train_cold_cutoff)
                                  & (day - arrival_day <= cfg.explore_age_days))
            if len(pool):
                boost = rng.random(m) < cfg.train_explore_share
                items[boost] = pool[rng.integers(len(pool), size=int(boost.sum()))]
        np.add.at(cum, items, 1)
    top = max(1, int(0.2 * n))
    order = np.argsort(-cum)
    return float(cum[order[:top]].sum() / cum.sum())


def _calibrate_bias(scores: np.ndarray, base_ctr: float) -> float:
    """Bias b with mean sigmoid(scores + b) == base_ctr, by bisection."""
    lo, hi = -20.0, 20.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if (1.0 / (1.0 + np.exp(-(scores + mid)))).mean() < base_ctr:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_log(catalog: Catalog, n_users: int, n_queries: int,
                 n_events: int, pareto_share: float = 0.8, seed: int = 0,
                 cfg: GenConfig | None = None) -> list[TrainingSample]:
    """Sample the interaction log and populate the catalog's 7-day counters.

    The counters cover the 7 days immediately before the train/test
    boundary, matching what a production snapshot would expose at
    inference time.
    """
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(seed + 1)
    n = catalog.n_items

    user_latents = rng.normal(size=(n_users, catalog.latents.shape[1]))
    query_latents = rng.normal(size=(n_queries, catalog.latents.shape[1]))
    attract_dir = rng.normal(size=catalog.latents.shape[1])
    attract_dir /= np.linalg.norm(attract_dir)

    train_end = cfg.days - cfg.test_days
    events_per_day = [n_events // cfg.days] * cfg.days
    for d in range(n_events % cfg.days):
        events_per_day[d] += 1

    # Popularity is assigned by seeded permutation, then Zipf-calibrated.
    # Exploration traffic flattens the realized distribution, so when it is
    # on, the Zipf target is adjusted by fixed-point iteration against a
    # simulation of the actual draw process until the realized training-
    # window head share matches pareto_share.
    rank_of_item = rng.permutation(n)
    target = pareto_share
    a = _calibrate_zipf(n, target)
    pop_weight = (rank_of_item + 1.0) ** -a
    if cfg.train_explore_share > 0:
        for _ in range(6):
            realized = _realized_head_share(
                pop_weight, catalog.arrival_day, events_per_day, train_end,
                cfg, seed)
            if abs(realized - pareto_share) < 0.005:
                break
            target = min(0.97, max(0.55, target + (pareto_share - realized)))
            a = _calibrate_zipf(n, target)
            pop_weight = (rank_of_item + 1.0) ** -a

    attract = catalog.latents @ attract_dir  # [n]

    # Calibrate the global bias on a score sample whose item marginal
    # matches the realized exposure: mostly the Zipf popularity weights,
    # with the exploration share redirected uniformly to late arrivals.
    # A uniform item sample would miss the (random) quality tilt of the
    # Zipf head and bias the realized CTR away from base_ctr.
    su = rng.integers(n_users, size=4096)
    sq = rng.integers(n_queries, size=4096)
    si = rng.choice(n, size=4096, p=pop_weight / pop_weight.sum())
    late = np.flatnonzero(catalog.arrival_day > 0)
    if cfg.train_explore_share > 0 and len(late):
        redirect = rng.random(4096) < cfg.train_explore_share
        si[redirect] = late[rng.integers(len(late), size=int(redirect.sum()))]
    sp = rng.normal(size=4096)
    sample_scores = (cfg.w_attract * attract[si]
                     + cfg.w_user * (user_latents[su] * catalog.latents[si]).sum(1)
                     + cfg.w_query * (query_latents[sq] * catalog.latents[si]).sum(1)
                     + catalog.quality[si]
                     + cfg.w_position * sp)
    bias = _calibrate_bias(sample_scores, cfg.base_ctr)

    counter_start = max(0, train_end - 7)
    impressions = np.zeros(n, dtype=np.int64)
    clicks = np.zeros(n, dtype=np.int64)
    orders = np.zeros(n, dtype=np.int64)
    cum_impressions = np.zeros(n, dtype=np.int64)
    cum_clicks = np.zeros(n, dtype=np.int64)
    cum_orders = np.zeros(n, dtype=np.int64)

    histories: list[list[int]] = [[] for _ in range(n_users)]

    samples: list[TrainingSample] = []
    for day in range(cfg.days):
        live = catalog.arrival_day <= day
        w = np.where(live, pop_weight, 0.0)
        w = w / w.sum()
        m = events_per_day[day]
        in_test = day >= train_end

        items = rng.choice(n, size=m, p=w)
        if (not in_test and cfg.train_explore_share > 0
                and day < counter_start):
            # Production-style new-item boost inside the training window: a
            # share of traffic goes uniformly to recently launched items
            # whose lifetime impression count is still below the cutoff, so
            # fresh items accumulate enough traffic to train on and then
            # age out of the pool.
            pool = np.flatnonzero(
                live & (catalog.arrival_day > 0)
                & (cum_impressions < cfg.train_cold_cutoff)
                & (day - catalog.arrival_day <= cfg.explore_age_days))
            if len(pool):
                boost = rng.random(m) < cfg.train_explore_share
                items[boost] = pool[rng.integers(len(pool), size=int(boost.sum()))]
        if in_test and cfg.explore_share > 0:
            # Cold-start exploration boost: most test-window traffic goes
            # to recently launched items with quiet recent counters,
            # mimicking the cold-heavy test logs of large platforms. The
            # 7-day counters are complete by now (their window ends at the
            # boundary).
            pool = np.flatnonzero(
                live & (impressions < cfg.cold_boost_threshold)
                & (catalog.arrival_day > 0))
            if len(pool):
                boost = rng.random(m) < cfg.explore_share
                items[boost] = pool[rng.integers(len(pool), size=int(boost.sum()))]
        users = rng.integers(n_users, size=m)
        queries = rng.integers(n_queries, size=m)
        positions = rng.normal(size=m)
        hour = rng.random(m)

        scores = (cfg.w_attract * attract[items]
                  + cfg.w_user * (user_latents[users] * catalog.latents[items]).sum(1)
                  + cfg.w_query * (query_latents[queries] * catalog.latents[items]).sum(1)
                  + catalog.quality[items]
                  + cfg.w_position * positions
                  + bias)
        p = 1.0 / (1.0 + np.exp(-scores))
        labels = (rng.random(m) < p).astype(np.int64)
        order_flags = labels * (rng.random(m) < cfg.order_given_click)
        if not in_test:
            np.add.at(cum_impressions, items, 1)
            np.add.at(cum_clicks, items, labels)
            np.add.at(cum_orders, items, order_flags)

        for e in range(m):
            u = int(users[e])
            it = int(items[e])
            ctx = np.array([positions[e],
                            math.sin(2 * math.pi * hour[e]),
                            math.cos(2 * math.pi * hour[e]),
                            rng.normal()])[: cfg.n_context]
            samples.append(TrainingSample(
                user_id=u, query_id=int(queries[e]), item_id=it,
                day=day, context=ctx,
                history=list(histories[u][-cfg.history_len:]),
                label=int(labels[e]), order_flag=int(order_flags[e])))
            if labels[e]:
                histories[u].append(it)
            if counter_start <= day < train_end:
                impressions[it] += 1
                clicks[it] += labels[e]
                orders[it] += order_flags[e]

    catalog.impressions_7d = impressions
    catalog.clicks_7d = clicks
    catalog.orders_7d = orders
    catalog.impressions_life = cum_impressions
    catalog.clicks_life = cum_clicks
    catalog.orders_life = cum_orders
    return samples


def label_cold_warm(catalog: Catalog, scale_factor: float) -> dict[int, str]:
    """Warm iff clicks_7d > 3 or orders_7d > 0; cold iff impressions_7d is
    below 200 scaled down to desk traffic (floor 5); everything else mid."""
    if catalog.impressions_7d is None:
        raise ValueError("catalog counters not populated; generate a log first")
    cold_threshold = max(5.0, 200.0 * scale_factor)
    labels = {}
    for i in range(catalog.n_items):
        if catalog.clicks_7d[i] > 3 or catalog.orders_7d[i] > 0:
            labels[i] = "warm"
        elif catalog.impressions_7d[i] < cold_threshold:
            labels[i] = "cold"
        else:
            labels[i] = "mid"
    return labels


def impression_scale_factor(n_events: int) -> float:
    """Desk-scale traffic relative to a 500M-sample production log."""
    return n_events / 5e8


def split_train_test(log: list[TrainingSample], train_days: int,
                     test_days: int):
    """Temporal split on day stamps; test events are strictly later."""
    train = [s for s in log if s.day < train_days]
    test = [s for s in log if train_days <= s.day < train_days + test_days]
    if not train or not test:
        raise ValueError("empty train or test split")
    return train, test


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_catalog(basepath: str, catalog: Catalog, meta: dict | None = None):
    io.save_arrays(basepath, {
        "latents": catalog.latents,
        "content_embeddings": catalog.content_embeddings,
        "components": catalog.components.astype(np.float64),
        "quality": catalog.quality,
        "arrival_day": catalog.arrival_day.astype(np.float64),
        "impressions_7d": catalog.impressions_7d.astype(np.float64),
        "clicks_7d": catalog.clicks_7d.astype(np.float64),
        "orders_7d": catalog.orders_7d.astype(np.float64),
        "impressions_life": catalog.impressions_life.astype(np.float64),
        "clicks_life": catalog.clicks_life.astype(np.float64),
        "orders_life": catalog.orders_life.astype(np.float64),
    }, {"kind": "catalog", "seed": catalog.seed, **(meta or {})})


def load_catalog(basepath: str) -> tuple[Catalog, dict]:
    arrays, meta = io.load_arrays(basepath)
    if meta.get("kind") != "catalog":
        raise io.ArtifactError(f"not a catalog artifact: {basepath}")
    return Catalog(
        latents=arrays["latents"],
        content_embeddings=arrays["content_embeddings"],
        components=arrays["components"].astype(np.int64),
        quality=arrays["quality"],
        arrival_day=arrays["arrival_day"].astype(np.int64),
        impressions_7d=arrays["impressions_7d"].astype(np.int64),
        clicks_7d=arrays["clicks_7d"].astype(np.int64),
        orders_7d=arrays["orders_7d"].astype(np.int64),
        impressions_life=arrays["impressions_life"].astype(np.int64),
        clicks_life=arrays["clicks_life"].astype(np.int64),
        orders_life=arrays["orders_life"].astype(np.int64),
        seed=int(meta["seed"])), meta


def save_log(path: str, log: list[TrainingSample]):
    """Newline-delimited JSON; histories are re-derivable from the click
    sequence, so they are not stored."""
    lines = []
    for s in log:
        lines.append(json.dumps({
            "user_id": s.user_id, "query_id": s.query_id,
            "item_id": s.item_id, "day": s.day,
            "context": [float(x) for x in s.context],
            "label": s.label, "order_flag": s.order_flag,
        }, separators=(",", ":")))
    io.atomic_write_text(path, "\n".join(lines) + "\n")


def load_log(path: str, history_len: int = 20) -> list[TrainingSample]:
    """Load NDJSON and re-derive per-user click histories in log order."""
    samples = []
    histories: dict[int, list[int]] = {}
    with open(path) as f:
        for line in f:
            r = json.loads(line)
            h = histories.setdefault(r["user_id"], [])
            samples.append(TrainingSample(
                user_id=r["user_id"], query_id=r["query_id"],
                item_id=r["item_id"], day=r["day"],
                context=np.array(r["context"]),
                history=list(h[-history_len:]),
                label=r["label"], order_flag=r["order_flag"]))
            if r["label"]:
                h.append(r["item_id"])
    return samples
