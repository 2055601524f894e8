"""Hierarchical item quantization: residual k-means plus rotated product
quantization on the leftover residuals.

An item's content embedding is encoded as a 5-tuple of code indices: three
residual-quantization levels capturing shared coarse-to-fine structure, then
two product-quantization codes (after a learned orthogonal rotation) on what
the three levels leave behind. All tie-breaks are lowest-index /
lexicographic so results are deterministic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import io

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SemanticId:
    """Five-layer discrete code of one item."""
    rq1: int
    rq2: int
    rq3: int
    opq1: int
    opq2: int

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.rq1, self.rq2, self.rq3, self.opq1, self.opq2)

    @property
    def opq_pair(self) -> tuple[int, int]:
        return (self.opq1, self.opq2)


@dataclass
class Codebook:
    level: int
    centroids: np.ndarray  # [K, d_sub]

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


@dataclass
class RQEncoder:
    codebooks: list[Codebook]  # exactly 3 levels, full dimension each

    @property
    def dim(self) -> int:
        return self.codebooks[0].centroids.shape[1]


@dataclass
class OPQEncoder:
    rotation: np.ndarray        # [d, d], orthogonal; encodes as R @ x
    sub_codebooks: list[Codebook]  # 2 books over contiguous halves of dim d/2

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _pairwise_sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact squared distances [N, K]; exact form keeps tie-breaks honest."""
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp_init(points, K, rng):
    n = points.shape[0]
    centers = np.empty((K, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, K):
        total = d2.sum()
        if total <= 0.0:  # all remaining mass at existing centers
            centers[j] = points[rng.integers(n)]
            continue
        centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(points, K: int, max_iters: int = 50, seed: int = 0,
           init_centroids: np.ndarray | None = None,
           tol: float = 1e-6) -> Codebook:
    """Lloyd's algorithm with k-means++ init.

    Deterministic given (points, K, seed). Empty clusters are reseeded to
    the point currently farthest from its assigned centroid. Converges when
    the max centroid shift drops below tol.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty [N, d] array")
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite input points")
    if K < 1 or K > points.shape[0]:
        raise ValueError(f"K={K} must be in [1, {points.shape[0]}]")

    rng = np.random.default_rng(seed)
    if init_centroids is not None:
        centroids = np.array(init_centroids, dtype=np.float64)
    else:
        centroids = _kmeanspp_init(points, K, rng)

    for _ in range(max_iters):
        d2 = _pairwise_sq_dists(points, centroids)
        assign = d2.argmin(axis=1)  # argmin takes the lowest index on ties
        new = centroids.copy()
        for j in range(K):
            mask = assign == j
            if mask.any():
                new[j] = points[mask].mean(axis=0)
            else:
                worst = d2[np.arange(len(points)), assign].argmax()
                new[j] = points[worst]
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift < tol:
            break
    return Codebook(level=0, centroids=centroids)


def assign_codes(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid index per point, lowest index on ties."""
    return _pairwise_sq_dists(np.atleast_2d(points), centroids).argmin(axis=1)


# ---------------------------------------------------------------------------
# residual quantization
# ---------------------------------------------------------------------------

def train_rq(embeddings, K: int, seed: int = 0, levels: int = 3,
             max_iters: int = 50) -> RQEncoder:
    """Train the hierarchical encoder: level 1 on the raw embeddings, each
    further level on the residuals the previous levels leave."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.shape[1] % 2 != 0:
        raise ValueError("embedding dimension must be even")
    codebooks = []
    residual = X.copy()
    for lvl in range(levels):
        cb = kmeans(residual, K, max_iters=max_iters, seed=seed + lvl)
        cb.level = lvl + 1
        codebooks.append(cb)
        codes = assign_codes(residual, cb.centroids)
        residual = residual - cb.centroids[codes]
    return RQEncoder(codebooks=codebooks)


def encode_rq(enc: RQEncoder, v) -> tuple[list[int], np.ndarray]:
    """Greedy per-level nearest-centroid codes plus the final residual."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (enc.dim,):
        raise ValueError(f"dimension mismatch: got {v.shape}, want ({enc.dim},)")
    codes = []
    residual = v.copy()
    for cb in enc.codebooks:
        j = int(assign_codes(residual[None, :], cb.centroids)[0])
        codes.append(j)
        residual = residual - cb.centroids[j]
    return codes, residual


def encode_rq_batch(enc: RQEncoder, X) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized encode_rq; returns (codes [N, 3], residuals [N, d])."""
    X = np.asarray(X, dtype=np.float64)
    residual = X.copy()
    codes = np.empty((X.shape[0], len(enc.codebooks)), dtype=np.int64)
    for lvl, cb in enumerate(enc.codebooks):
        c = assign_codes(residual, cb.centroids)
        codes[:, lvl] = c
        residual = residual - cb.centroids[c]
    return codes, residual


def rq_reconstruction_mse(enc: RQEncoder, X, levels: int | None = None) -> float:
    """Mean squared reconstruction error using the first `levels` levels."""
    X = np.asarray(X, dtype=np.float64)
    residual = X.copy()
    for cb in enc.codebooks[: levels if levels is not None else None]:
        c = assign_codes(residual, cb.centroids)
        residual = residual - cb.centroids[c]
    return float((residual ** 2).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# optimized product quantization
# ---------------------------------------------------------------------------

def _opq_assign(enc_rotation, books, X):
    """Codes [N, 2] of X under rotation + per-half nearest centroid."""
    Xr = X @ enc_rotation.T
    h = Xr.shape[1] // 2
    c1 = assign_codes(Xr[:, :h], books[0].centroids)
    c2 = assign_codes(Xr[:, h:], books[1].centroids)
    return np.stack([c1, c2], axis=1)


def _opq_mse(rotation, books, X, codes):
    Xr = X @ rotation.T
    h = Xr.shape[1] // 2
    rec = np.concatenate([books[0].centroids[codes[:, 0]],
                          books[1].centroids[codes[:, 1]]], axis=1)
    return float(((Xr - rec) ** 2).sum(axis=1).mean())


def train_opq(residuals, K: int, iters: int = 20, seed: int = 0,
              max_kmeans_iters: int = 50) -> OPQEncoder:
    """Alternating optimization of an orthogonal rotation and two half-space
    codebooks.

    Each alternation: (i) with the rotation fixed, refine the two codebooks
    by k-means on the rotated halves (warm-started from the previous
    codebooks so total error never increases); (ii) with assignments fixed,
    update the rotation to the orthogonal Procrustes solution.
    """
    X = np.asarray(residuals, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("residuals must be a non-empty [N, d] array")
    d = X.shape[1]
    if d % 2 != 0:
        raise ValueError("dimension must be even for two half-space codebooks")
    if K > X.shape[0]:
        raise ValueError(f"K={K} exceeds number of points {X.shape[0]}")
    h = d // 2

    R = np.eye(d)
    books = [kmeans(X[:, :h], K, max_iters=max_kmeans_iters, seed=seed),
             kmeans(X[:, h:], K, max_iters=max_kmeans_iters, seed=seed + 1)]
    books[0].level = 4
    books[1].level = 5

    for _ in range(iters):
        Xr = X @ R.T
        books = [kmeans(Xr[:, :h], K, max_iters=max_kmeans_iters, seed=seed,
                        init_centroids=books[0].centroids),
                 kmeans(Xr[:, h:], K, max_iters=max_kmeans_iters, seed=seed + 1,
                        init_centroids=books[1].centroids)]
        books[0].level = 4
        books[1].level = 5
        codes = _opq_assign(R, books, X)
        rec = np.concatenate([books[0].centroids[codes[:, 0]],
                              books[1].centroids[codes[:, 1]]], axis=1)
        # Procrustes: argmin_R ||X R^T - rec||_F over orthogonal R.
        U, _, Vt = np.linalg.svd(X.T @ rec)
        R = (U @ Vt).T
    return OPQEncoder(rotation=R, sub_codebooks=books)


def encode_opq(enc: OPQEncoder, residual) -> tuple[int, int]:
    """Rotate, split in half, nearest sub-centroid per half."""
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != (enc.dim,):
        raise ValueError(
            f"dimension mismatch: got {residual.shape}, want ({enc.dim},)")
    codes = _opq_assign(enc.rotation, enc.sub_codebooks, residual[None, :])
    return int(codes[0, 0]), int(codes[0, 1])


def encode_opq_batch(enc: OPQEncoder, X) -> np.ndarray:
    return _opq_assign(enc.rotation, enc.sub_codebooks,
                       np.asarray(X, dtype=np.float64))


def opq_reconstruction(enc: OPQEncoder, codes: np.ndarray) -> np.ndarray:
    """Rotated-space reconstruction mapped back: R^T (c1 ++ c2)."""
    rec = np.concatenate([enc.sub_codebooks[0].centroids[codes[:, 0]],
                          enc.sub_codebooks[1].centroids[codes[:, 1]]], axis=1)
    return rec @ enc.rotation


# ---------------------------------------------------------------------------
# semantic IDs
# ---------------------------------------------------------------------------

def assign_semantic_ids(items, rq: RQEncoder, opq: OPQEncoder) -> dict:
    """Map item_id -> SemanticId by RQ-encoding the embedding, then
    OPQ-encoding the RQ residual. `items` is an iterable of (item_id, vec)."""
    ids, vecs = [], []
    for item_id, v in items:
        ids.append(item_id)
        vecs.append(np.asarray(v, dtype=np.float64))
    if not ids:
        return {}
    X = np.stack(vecs)
    rq_codes, residuals = encode_rq_batch(rq, X)
    opq_codes = encode_opq_batch(opq, residuals)
    return {
        item_id: SemanticId(int(rc[0]), int(rc[1]), int(rc[2]),
                            int(oc[0]), int(oc[1]))
        for item_id, rc, oc in zip(ids, rq_codes, opq_codes)
    }


def reconstruct(sid: SemanticId, rq: RQEncoder, opq: OPQEncoder) -> np.ndarray:
    """Inverse mapping for diagnostics: sum of RQ centroids plus the
    un-rotated OPQ reconstruction."""
    out = np.zeros(rq.dim)
    for code, cb in zip((sid.rq1, sid.rq2, sid.rq3), rq.codebooks):
        if not 0 <= code < cb.K:
            raise ValueError(f"code {code} out of range [0, {cb.K})")
        out = out + cb.centroids[code]
    for code, cb in zip((sid.opq1, sid.opq2), opq.sub_codebooks):
        if not 0 <= code < cb.K:
            raise ValueError(f"code {code} out of range [0, {cb.K})")
    half = np.concatenate([opq.sub_codebooks[0].centroids[sid.opq1],
                           opq.sub_codebooks[1].centroids[sid.opq2]])
    return out + half @ opq.rotation


# ---------------------------------------------------------------------------
# neighbor table over OPQ code pairs
# ---------------------------------------------------------------------------

def opq_code_similarity_topk(enc: OPQEncoder, k: int = 10) -> dict:
    """Top-k most similar OPQ code pairs for every code pair.

    Similarity is the cosine between concatenated sub-centroid vectors.
    Pairs whose concatenated centroid has zero norm are excluded (logged).
    Ties break by lexicographic pair order; a pair is never its own
    neighbor.
    """
    K1 = enc.sub_codebooks[0].K
    K2 = enc.sub_codebooks[1].K
    n_pairs = K1 * K2
    if k >= n_pairs:
        raise ValueError(f"k={k} must be < number of code pairs {n_pairs}")

    c1 = enc.sub_codebooks[0].centroids
    c2 = enc.sub_codebooks[1].centroids
    # vectors[i*K2 + j] = c1[i] ++ c2[j]
    vecs = np.concatenate(
        [np.repeat(c1, K2, axis=0), np.tile(c2, (K1, 1))], axis=1)
    norms = np.sqrt((vecs ** 2).sum(axis=1))
    valid = norms > 0.0
    n_dropped = int((~valid).sum())
    if n_dropped:
        log.warning("excluding %d zero-norm OPQ code pairs from neighbor table",
                    n_dropped)
    unit = np.zeros_like(vecs)
    unit[valid] = vecs[valid] / norms[valid, None]

    valid_idx = np.flatnonzero(valid)
    n_valid = len(valid_idx)
    table: dict[tuple[int, int], list[tuple[int, int]]] = {}
    block = max(1, min(512, n_pairs))
    # Candidate pool wide enough that boundary ties almost never spill; a
    # full sort backs up the rare case where they do.
    m = min(n_valid, 4 * k + 8)
    for start in range(0, n_valid, block):
        rows = valid_idx[start:start + block]
        sims = unit[rows] @ unit[valid_idx].T  # [b, n_valid]
        sims[np.arange(len(rows)), start + np.arange(len(rows))] = -np.inf
        if m < n_valid:
            part = np.argpartition(-sims, m - 1, axis=1)[:, :m]
        else:
            part = np.broadcast_to(np.arange(n_valid), sims.shape)
        for r, row in enumerate(rows):
            cand = part[r]
            # exact order: descending sim, then lexicographic pair index
            order = np.lexsort((valid_idx[cand], -sims[r, cand]))
            chosen = cand[order[:k]]
            if m < n_valid and sims[r, chosen[-1]] == sims[r, cand[order[-1]]]:
                order = np.lexsort((valid_idx, -sims[r]))
                chosen = order[:k]
                top = valid_idx[chosen]
            else:
                top = valid_idx[chosen]
            table[(row // K2, row % K2)] = [(int(t) // K2, int(t) % K2)
                                            for t in top]
    return table


def save_neighbor_table(table: dict, path: str, meta: dict | None = None):
    payload = {
        "meta": meta or {},
        "neighbors": {f"{a},{b}": [[x, y] for x, y in nbrs]
                      for (a, b), nbrs in table.items()},
    }
    io.atomic_write_json(path, payload)


def load_neighbor_table(path: str) -> dict:
    with open(path) as f:
        payload = json.load(f)
    return {tuple(int(s) for s in key.split(",")): [tuple(p) for p in nbrs]
            for key, nbrs in payload["neighbors"].items()}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_encoders(basepath: str, rq: RQEncoder, opq: OPQEncoder,
                  meta: dict | None = None):
    arrays = {f"rq/level{i + 1}": cb.centroids
              for i, cb in enumerate(rq.codebooks)}
    arrays["opq/rotation"] = opq.rotation
    arrays["opq/sub1"] = opq.sub_codebooks[0].centroids
    arrays["opq/sub2"] = opq.sub_codebooks[1].centroids
    io.save_arrays(basepath, arrays, {"kind": "encoders", "dim": rq.dim,
                                      **(meta or {})})


def load_encoders(basepath: str) -> tuple[RQEncoder, OPQEncoder, dict]:
    arrays, meta = io.load_arrays(basepath)
    if meta.get("kind") != "encoders":
        raise io.ArtifactError(f"not an encoder artifact: {basepath}")
    rq = RQEncoder(codebooks=[
        Codebook(level=i + 1, centroids=arrays[f"rq/level{i + 1}"])
        for i in range(3)])
    opq = OPQEncoder(
        rotation=arrays["opq/rotation"],
        sub_codebooks=[Codebook(level=4, centroids=arrays["opq/sub1"]),
                       Codebook(level=5, centroids=arrays["opq/sub2"])])
    return rq, opq, meta
