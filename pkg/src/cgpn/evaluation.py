"""Retrieval evaluation: flip-averaged embedding extraction, Euclidean
distance matrices, and the single-query CMC / mAP protocol with the standard
junk-handling rules for surveillance re-identification benchmarks.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .data import load_image, augment

__all__ = [
    "EvalProtocol",
    "RankingResult",
    "extract_embeddings",
    "distance_matrix",
    "cmc_map",
    "rank_list",
    "metrics_report",
    "report_table",
]


@dataclass(frozen=True)
class EvalProtocol:
    """Single-query matching rules.

    Junk ids are removed from the ranking entirely; distractor ids stay in
    the ranking (they can push relevants down) but never count as relevant.
    Gallery entries sharing both identity and camera with the query are
    removed, so a query can never match its own capture.
    """

    exclude_same_camera_same_id: bool = True
    junk_ids: frozenset = frozenset({-1})
    distractor_ids: frozenset = frozenset({0})


@dataclass
class RankingResult:
    """Per-query rankings plus the aggregate CMC curve and mAP."""

    order: list                      # per valid query: filtered gallery indices, best first
    query_indices: list              # row index of each valid query
    average_precisions: np.ndarray   # AP per valid query
    cmc: np.ndarray                  # cmc[k-1] = fraction matched within rank k
    mean_ap: float
    num_queries: int
    num_skipped: int
    skipped: list = field(default_factory=list)

    def cmc_at(self, rank: int) -> float:
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(rank, len(self.cmc)) - 1])


def extract_embeddings(model, index, records, batch_size=16, device="cpu"):
    """Flip-averaged inference embeddings, one row per record.

    Each image is embedded twice, as-is and horizontally mirrored, and the
    two embeddings are averaged. Returns a (N, D) float32 array in record
    order.
    """
    model.eval()
    rows = []
    with torch.no_grad():
        for lo in range(0, len(records), batch_size):
            chunk = records[lo:lo + batch_size]
            batch = torch.stack(
                [augment(load_image(index, r), train_mode=False) for r in chunk]
            ).to(device)
            emb = model(batch)
            emb_flipped = model(torch.flip(batch, dims=[-1]))
            rows.append(((emb + emb_flipped) / 2).cpu().numpy())
    if not rows:
        return np.zeros((0, model.embedding_dim), dtype=np.float32)
    return np.concatenate(rows, axis=0)


def distance_matrix(query: np.ndarray, gallery: np.ndarray, normalize=False) -> np.ndarray:
    """Pairwise Euclidean distances (Nq x Ng); optional L2 normalization first."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ValueError(
            f"dimension mismatch: query {query.shape} vs gallery {gallery.shape}"
        )
    if normalize:
        query = query / np.clip(np.linalg.norm(query, axis=1, keepdims=True), 1e-12, None)
        gallery = gallery / np.clip(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12, None)
    return cdist(query, gallery, metric="euclidean")


def _filtered_ranking(dist_row, qid, qcam, gallery_ids, gallery_cams, protocol):
    """Gallery indices sorted by distance with junk entries removed."""
    order = np.argsort(dist_row, kind="stable")
    keep = ~np.isin(gallery_ids[order], list(protocol.junk_ids))
    if protocol.exclude_same_camera_same_id:
        keep &= ~((gallery_ids[order] == qid) & (gallery_cams[order] == qcam))
    return order[keep]


def _relevance(ranked_ids, qid, protocol):
    rel = ranked_ids == qid
    if protocol.distractor_ids:
        rel &= ~np.isin(ranked_ids, list(protocol.distractor_ids))
    return rel


def cmc_map(dist, query_ids, query_cams, gallery_ids, gallery_cams,
            protocol: EvalProtocol = EvalProtocol()) -> RankingResult:
    """Score a distance matrix under the single-query protocol.

    Per query: rank the gallery by ascending distance (ties broken by
    gallery index), drop junk and same-id/same-camera entries, then read
    off average precision and the first-match rank. Queries with no valid
    match are skipped and counted.
    """
    dist = np.asarray(dist)
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    if dist.shape != (len(query_ids), len(gallery_ids)):
        raise ValueError(
            f"distance matrix {dist.shape} does not match "
            f"{len(query_ids)} queries x {len(gallery_ids)} gallery entries"
        )

    num_gallery = dist.shape[1]
    cmc_hits = np.zeros(num_gallery, dtype=np.float64)
    aps, order, query_rows, skipped = [], [], [], []

    for q in range(dist.shape[0]):
        ranked = _filtered_ranking(
            dist[q], query_ids[q], query_cams[q], gallery_ids, gallery_cams, protocol
        )
        rel = _relevance(gallery_ids[ranked], query_ids[q], protocol)
        if not rel.any():
            skipped.append(q)
            continue
        positions = np.flatnonzero(rel)          # 0-based ranks of relevants
        precision = np.arange(1, len(positions) + 1) / (positions + 1)
        aps.append(precision.mean())
        cmc_hits[positions[0]:] += 1
        order.append(ranked)
        query_rows.append(q)

    num_valid = len(aps)
    cmc = cmc_hits / num_valid if num_valid else np.zeros(num_gallery)
    mean_ap = float(np.mean(aps)) if num_valid else 0.0
    return RankingResult(
        order=order,
        query_indices=query_rows,
        average_precisions=np.asarray(aps, dtype=np.float64),
        cmc=cmc,
        mean_ap=mean_ap,
        num_queries=num_valid,
        num_skipped=len(skipped),
        skipped=skipped,
    )


def rank_list(dist, query_ids, query_cams, gallery_ids, gallery_cams, k,
              protocol: EvalProtocol = EvalProtocol()):
    """Top-k filtered gallery indices per query, with match flags.

    Returns one list per query of (gallery_index, is_match) pairs; lists
    are truncated when fewer than k valid entries remain after filtering.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    dist = np.asarray(dist)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    out = []
    for q in range(dist.shape[0]):
        ranked = _filtered_ranking(
            dist[q], query_ids[q], query_cams[q], gallery_ids, gallery_cams, protocol
        )[:k]
        rel = _relevance(gallery_ids[ranked], query_ids[q], protocol)
        out.append([(int(g), bool(m)) for g, m in zip(ranked, rel)])
    return out


def metrics_report(result: RankingResult) -> dict:
    """Machine-readable metric summary (JSON-serializable)."""
    return {
        "mAP": result.mean_ap,
        "cmc": {
            "rank1": result.cmc_at(1),
            "rank5": result.cmc_at(5),
            "rank10": result.cmc_at(10),
        },
        "num_queries": result.num_queries,
        "num_skipped": result.num_skipped,
    }


def report_table(result: RankingResult) -> str:
    """Plain-text metric table."""
    rows = [
        ("mAP", f"{result.mean_ap:.4f}"),
        ("Rank-1", f"{result.cmc_at(1):.4f}"),
        ("Rank-5", f"{result.cmc_at(5):.4f}"),
        ("Rank-10", f"{result.cmc_at(10):.4f}"),
        ("queries", str(result.num_queries)),
        ("skipped", str(result.num_skipped)),
    ]
    width = max(len(name) for name, _ in rows)
    lines = [f"{name:<{width}}  {value}" for name, value in rows]
    return "\n".join(lines) + "\n"
