"""Saliency-guided attribute discovery.

Mines pseudo-attributes without annotations: references that attend to
the same region of a query are assumed to match it for the same reason,
so their salient patches are cropped, embedded with the similarity
model, and clustered. Each cluster is treated as a discovered attribute;
an image inherits every cluster its patches land in.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Dataset, SaliencyMap, make_rng, pool_boundaries, resize_map
from .errors import InvalidArgumentError
from .metrics import RemovalResult, removal_delta_core
from .saliency import SaliencyConfig, generate
from .scorers import Scorer, cosine

_STREAM_KMEANS = 31
_STREAM_RANDOM_ASSIGN = 32


@dataclass(frozen=True)
class DiscoveryConfig:
    k_nn: int = 10
    peak_grid: int = 7
    top_n: int = 5
    patch: int = 30
    n_clusters: int = 4
    seed: int = 0
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)

    def __post_init__(self):
        if min(self.k_nn, self.peak_grid, self.top_n, self.patch, self.n_clusters) < 1:
            raise InvalidArgumentError("discovery counts must be >= 1")


@dataclass(frozen=True)
class PatchRecord:
    source_image_id: str   # reference image the patch was cropped from
    query_id: str
    center: tuple[int, int]
    cluster: int


@dataclass(frozen=True)
class ClusterAssignment:
    labels_by_image: dict[str, tuple[int, ...]]
    centroids: np.ndarray
    patches: tuple[PatchRecord, ...]

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]


def peak_bin(smap, grid: int) -> int:
    """Grid cell (raster index) containing the argmax pixel; ties resolve
    to the first pixel in raster order."""
    data = smap.data if isinstance(smap, SaliencyMap) else np.asarray(smap)
    rows, cols = data.shape
    flat_idx = int(np.argmax(data))
    r, c = divmod(flat_idx, cols)
    rb = pool_boundaries(rows, grid)
    cb = pool_boundaries(cols, grid)
    cell_r = int(np.searchsorted(rb, r, side="right")) - 1
    cell_c = int(np.searchsorted(cb, c, side="right")) - 1
    return cell_r * grid + cell_c


def kmeans(
    points: np.ndarray,
    n_clusters: int,
    seed: int,
    max_iters: int = 50,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Seeded Lloyd iterations with empty-cluster reseeding.

    An empty cluster is re-centered on the point farthest from its
    current centroid. Returns (labels, centroids, objective trace); the
    objective is non-increasing across iterations.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < n_clusters:
        raise InvalidArgumentError(
            f"only {n} points for {n_clusters} clusters; lower n_clusters or raise k_nn/top_n"
        )
    rng = make_rng(seed, _STREAM_KMEANS)
    centroids = pts[rng.choice(n, size=n_clusters, replace=False)].copy()
    labels = np.zeros(n, dtype=np.intp)
    trace: list[float] = []
    for _ in range(max_iters):
        dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        trace.append(float(dists[np.arange(n), labels].sum()))
        new_centroids = centroids.copy()
        for k in range(n_clusters):
            members = pts[labels == k]
            if len(members):
                new_centroids[k] = members.mean(axis=0)
            else:
                own = ((pts - centroids[labels]) ** 2).sum(axis=1)
                new_centroids[k] = pts[int(np.argmax(own))]
        if np.array_equal(new_centroids, centroids):
            break
        centroids = new_centroids
    return labels, centroids, trace


def _upsampled_patch_embedding(scorer: Scorer, image: np.ndarray, center: tuple[int, int], patch: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w, _ = image.shape
    if patch > min(h, w):
        raise InvalidArgumentError(f"patch side {patch} exceeds image side {min(h, w)}")
    top = min(max(center[0] - patch // 2, 0), h - patch)
    left = min(max(center[1] - patch // 2, 0), w - patch)
    crop = image[top:top + patch, left:left + patch, :]
    upsampled = np.stack(
        [resize_map(crop[:, :, c], h, w, mode="bilinear") for c in range(crop.shape[2])], axis=2
    )
    emb = scorer.embed(np.clip(upsampled, 0.0, 1.0)).data
    norm = np.linalg.norm(emb)
    return (emb / norm if norm > 0 else emb), (top, left)


def discover(dataset: Dataset, scorer: Scorer, cfg: DiscoveryConfig) -> ClusterAssignment:
    """Six steps: k-NN references per query, query-side saliency, modal
    peak-bin filtering, salient-patch cropping from each kept reference,
    patch embedding, and k-means over all patches."""
    if not scorer.caps.can_embed:
        raise InvalidArgumentError("discovery needs an embedding-capable scorer")
    ids = [img_id for img_id, _ in dataset.images]
    embeddings = np.stack([scorer.embed(img).data for _, img in dataset.images])

    patch_embs: list[np.ndarray] = []
    patch_meta: list[tuple[str, str, tuple[int, int]]] = []
    for qi, query_id in enumerate(ids):
        sims = np.array([
            cosine(embeddings[qi], embeddings[ri]) if ri != qi else -np.inf
            for ri in range(len(ids))
        ])
        neighbor_idx = np.argsort(-sims, kind="stable")[: cfg.k_nn]

        query_img = dataset.image(query_id)
        bins = []
        for ri in neighbor_idx:
            smap = generate(scorer, dataset.image(ids[ri]), query_img, cfg.saliency)
            bins.append(peak_bin(smap, cfg.peak_grid))
        modal_bin, _ = Counter(bins).most_common(1)[0]
        # Counter ties keep insertion order; pin the smallest bin instead.
        best_count = Counter(bins)[modal_bin]
        modal_bin = min(b for b in bins if Counter(bins)[b] == best_count)

        kept = [ri for ri, b in zip(neighbor_idx, bins) if b == modal_bin][: cfg.top_n]
        for ri in kept:
            ref_id = ids[ri]
            ref_img = dataset.image(ref_id)
            ref_map = generate(scorer, query_img, ref_img, cfg.saliency)
            h, w, _ = ref_img.shape
            up = resize_map(ref_map.data, h, w, mode="bilinear")
            peak_flat = int(np.argmax(up))
            center = divmod(peak_flat, w)
            emb, topleft = _upsampled_patch_embedding(
                scorer, ref_img.data.astype(np.float64), center, cfg.patch
            )
            patch_embs.append(emb)
            patch_meta.append((ref_id, query_id, topleft))

    if len(patch_embs) < cfg.n_clusters:
        raise InvalidArgumentError(
            f"harvested only {len(patch_embs)} patches for {cfg.n_clusters} clusters; "
            "use a smaller n_clusters or a larger k_nn"
        )
    labels, centroids, _ = kmeans(np.stack(patch_embs), cfg.n_clusters, cfg.seed)

    patches = tuple(
        PatchRecord(source_image_id=src, query_id=q, center=c, cluster=int(k))
        for (src, q, c), k in zip(patch_meta, labels)
    )
    by_image: dict[str, set[int]] = {}
    for rec in patches:
        by_image.setdefault(rec.source_image_id, set()).add(rec.cluster)
    labels_by_image = {img_id: tuple(sorted(clusters)) for img_id, clusters in by_image.items()}
    return ClusterAssignment(labels_by_image=labels_by_image, centroids=centroids, patches=patches)


# ---------------------------------------------------------------------------
# Removal evaluation with discovered attributes
# ---------------------------------------------------------------------------


def _cluster_label_matrix(dataset: Dataset, labels_by_image: dict[str, Sequence[int]], n_clusters: int) -> np.ndarray:
    mat = np.zeros((dataset.n_images, n_clusters), dtype=np.int8)
    for img_id, clusters in labels_by_image.items():
        for k in clusters:
            mat[dataset.row(img_id), k] = 1
    return mat


def _modal_cluster(assignment: ClusterAssignment, image_id: str) -> int | None:
    counts = Counter(rec.cluster for rec in assignment.patches if rec.source_image_id == image_id)
    if not counts:
        return None
    top = max(counts.values())
    return min(k for k, v in counts.items() if v == top)


def removal_eval_discovered(
    assignment: ClusterAssignment,
    scorer: Scorer,
    dataset: Dataset,
    pairs: Sequence,
    seed: int = 0,
) -> dict[str, RemovalResult]:
    """Removal deltas treating cluster ids as attributes, with the two
    reference baselines: random assignment and full-frame clustering.

    Each variant retrieves only among images its labeling covers: an
    image the patch clustering never touched has unknown attributes, not
    absent ones.
    """
    n_clusters = assignment.n_clusters

    def run(explained: list[int | None], label_matrix: np.ndarray, corpus: list[str]) -> RemovalResult:
        used_pairs = [p for p, a in zip(pairs, explained) if a is not None]
        used_attrs = [a for a in explained if a is not None]
        if not used_pairs:
            return RemovalResult(mean_delta=0.0, n_used=0, n_skipped=len(list(pairs)))
        result = removal_delta_core(scorer, dataset, used_pairs, used_attrs, label_matrix, corpus)
        extra = len(list(pairs)) - len(used_pairs)
        return RemovalResult(result.mean_delta, result.n_used, result.n_skipped + extra)

    all_ids = [img_id for img_id, _ in dataset.images]
    patch_matrix = _cluster_label_matrix(dataset, assignment.labels_by_image, n_clusters)
    patch_attrs = [_modal_cluster(assignment, p.query_id) for p in pairs]
    patch_corpus = [i for i in all_ids if i in assignment.labels_by_image]
    patch_result = run(patch_attrs, patch_matrix, patch_corpus)

    rng = make_rng(seed, _STREAM_RANDOM_ASSIGN)
    random_labels = {img_id: (int(rng.integers(n_clusters)),) for img_id, _ in dataset.images}
    random_matrix = _cluster_label_matrix(dataset, random_labels, n_clusters)
    random_attrs = [random_labels[p.query_id][0] for p in pairs]
    random_result = run(random_attrs, random_matrix, all_ids)

    embeddings = np.stack([scorer.embed(img).data for _, img in dataset.images])
    norms = np.maximum(np.linalg.norm(embeddings, axis=1, keepdims=True), 1e-12)
    frame_labels_arr, _, _ = kmeans(embeddings / norms, n_clusters, seed)
    frame_labels = {img_id: (int(frame_labels_arr[k]),) for k, (img_id, _) in enumerate(dataset.images)}
    frame_matrix = _cluster_label_matrix(dataset, frame_labels, n_clusters)
    frame_attrs = [frame_labels[p.query_id][0] for p in pairs]
    frame_result = run(frame_attrs, frame_matrix, all_ids)

    return {"patch": patch_result, "random": random_result, "full_frame": frame_result}
