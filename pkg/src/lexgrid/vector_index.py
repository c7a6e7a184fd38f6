"""Cosine-distance vector index with an exact scan and a seeded HNSW graph.

Entries are (article_id, vector, metadata) triples. Exact search is a
vectorized brute-force scan; approximate search walks a hierarchical
navigable small world graph built lazily on first use. Both modes report
the true cosine distance of every returned entry (approximation can only
miss neighbors, never mis-score them) and both support metadata
pre-filtering: filtered-out entries never appear in results, though the
graph walk may traverse them to reach entries that pass.

The graph build is seeded: level assignment draws from a RNG seeded from
the index configuration, and all tie-breaks are on stable (distance,
insertion order) pairs, so identical entry sequences produce identical
graphs and identical query results.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import Article, ArticleMetadata, Corpus, MetadataFilter
from .embeddings import EmbeddingBackend, embed
from .errors import DimensionMismatch, ZeroVector

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1

DEFAULT_M = 16
DEFAULT_EF_CONSTRUCTION = 200
DEFAULT_EF_SEARCH = 64


@dataclass(frozen=True)
class IndexEntry:
    article_id: str
    vector: np.ndarray
    metadata: ArticleMetadata


@dataclass(frozen=True)
class RetrievalHit:
    article_id: str
    distance: float
    rank: int


def _as_vector(values, dimension: int) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != dimension:
        raise DimensionMismatch(dimension, int(vec.shape[-1]) if vec.ndim else 0)
    if not np.all(np.isfinite(vec)):
        raise ZeroVector("vector contains non-finite components")
    if not np.any(vec):
        raise ZeroVector("zero vectors cannot be indexed or queried")
    return vec


def cosine_distance(a, b) -> float:
    """1 − (a·b)/(‖a‖·‖b‖), in [0, 2]. Symmetric and scale-invariant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(int(a.shape[-1]), int(b.shape[-1]))
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine distance undefined for zero vectors")
    return 1.0 - float(np.dot(a, b)) / (na * nb)


class _HnswGraph:
    """Adjacency produced by one build; immutable once built."""

    def __init__(self, layers: list[dict[int, list[int]]], levels: list[int],
                 entry_point: int | None):
        self.layers = layers                # layers[lc][node] -> neighbor nodes
        self.levels = levels                # node -> top level
        self.entry_point = entry_point

    @property
    def max_level(self) -> int:
        return len(self.layers) - 1


class VectorIndex:
    """Single-writer/multi-reader cosine index over article embeddings."""

    def __init__(self, dimension: int, m: int = DEFAULT_M,
                 ef_construction: int = DEFAULT_EF_CONSTRUCTION,
                 ef_search: int = DEFAULT_EF_SEARCH, seed: int = 0):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        if m < 2:
            raise ValueError("m must be at least 2")
        self.dimension = dimension
        self.m = m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.seed = seed
        self._ml = 1.0 / math.log(m)
        self._entries: dict[str, IndexEntry] = {}
        self._graph: _HnswGraph | None = None
        self._matrix: np.ndarray | None = None   # unit row per entry, insertion order
        self._ids: list[str] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    # -- mutation ----------------------------------------------------------

    def insert(self, entries: Iterable[IndexEntry]) -> int:
        """Insert a batch; a duplicate article_id replaces the prior entry.
        Invalidates the graph and distance matrix (rebuilt lazily)."""
        count = 0
        with self._lock:
            for e in entries:
                vec = _as_vector(e.vector, self.dimension)
                self._entries[e.article_id] = IndexEntry(e.article_id, vec, e.metadata)
                count += 1
            self._graph = None
            self._matrix = None
            self._ids = []
        return count

    def add(self, article_id: str, vector, metadata: ArticleMetadata) -> None:
        self.insert([IndexEntry(article_id, np.asarray(vector, dtype=np.float64), metadata)])

    # -- shared read-side state --------------------------------------------

    def _snapshot(self) -> tuple[list[str], np.ndarray]:
        """ids (insertion order) and the matching matrix of unit vectors."""
        with self._lock:
            if self._matrix is None or len(self._ids) != len(self._entries):
                ids = list(self._entries)
                if ids:
                    mat = np.stack([self._entries[i].vector for i in ids])
                    mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
                else:
                    mat = np.zeros((0, self.dimension), dtype=np.float64)
                self._ids = ids
                self._matrix = mat
            return self._ids, self._matrix

    def _unit_query(self, query_vec) -> np.ndarray:
        vec = _as_vector(query_vec, self.dimension)
        return vec / np.linalg.norm(vec)

    # -- exact search --------------------------------------------------------

    def _exact(self, unit_q: np.ndarray, k: int,
               predicate: MetadataFilter | None) -> list[RetrievalHit]:
        ids, mat = self._snapshot()
        if not ids:
            return []
        if predicate is None:
            rows = np.arange(len(ids))
        else:
            rows = np.array(
                [i for i, aid in enumerate(ids)
                 if predicate.matches(self._entries[aid].metadata)],
                dtype=np.intp,
            )
        if rows.size == 0:
            return []
        dists = 1.0 - mat[rows] @ unit_q
        id_arr = np.array([ids[i] for i in rows])
        order = np.lexsort((id_arr, dists))[:k]
        return [
            RetrievalHit(article_id=str(id_arr[j]), distance=float(dists[j]), rank=r)
            for r, j in enumerate(order, start=1)
        ]

    # -- HNSW build ----------------------------------------------------------

    def _build_graph(self, ids: Sequence[str], mat: np.ndarray) -> _HnswGraph:
        n = len(ids)
        rng = random.Random(self.seed)
        levels = [int(-math.log(1.0 - rng.random()) * self._ml) for _ in range(n)]
        if n == 0:
            return _HnswGraph([], [], None)
        max_level = max(levels)
        layers: list[dict[int, list[int]]] = [dict() for _ in range(max_level + 1)]
        entry_point: int | None = None
        top = -1

        def dist_many(q_row: np.ndarray, nodes: list[int]) -> np.ndarray:
            return 1.0 - mat[nodes] @ q_row

        for node in range(n):
            q = mat[node]
            lvl = levels[node]
            for lc in range(lvl + 1):
                layers[lc][node] = []
            if entry_point is None:
                entry_point, top = node, lvl
                continue
            eps = [entry_point]
            for lc in range(top, lvl, -1):
                eps = [self._search_layer(q, eps, 1, layers[lc], dist_many)[0][1]]
            for lc in range(min(lvl, top), -1, -1):
                found = self._search_layer(q, eps, self.ef_construction, layers[lc], dist_many)
                neighbors = self._select_neighbors(found, self.m, mat)
                layers[lc][node] = [nb for _, nb in neighbors]
                cap = self.m * 2 if lc == 0 else self.m
                for d_nb, nb in neighbors:
                    links = layers[lc][nb]
                    links.append(node)
                    if len(links) > cap:
                        cand = list(zip(dist_many(mat[nb], links), links))
                        layers[lc][nb] = [x for _, x in self._select_neighbors(cand, cap, mat)]
                eps = [nb for _, nb in found]
            if lvl > top:
                entry_point, top = node, lvl
        return _HnswGraph(layers, levels, entry_point)

    def _select_neighbors(self, candidates: Iterable[tuple[float, int]], m: int,
                          mat: np.ndarray) -> list[tuple[float, int]]:
        """Diversity-aware selection: keep a candidate only if it is closer to
        the query than to every already-kept neighbor; backfill with the
        nearest pruned candidates if fewer than m survive."""
        ordered = sorted(candidates, key=lambda t: (t[0], t[1]))
        kept: list[tuple[float, int]] = []
        pruned: list[tuple[float, int]] = []
        for d_q, node in ordered:
            if len(kept) >= m:
                break
            vec = mat[node]
            closer_to_kept = any(
                1.0 - float(np.dot(vec, mat[other])) < d_q for _, other in kept
            )
            if closer_to_kept:
                pruned.append((d_q, node))
            else:
                kept.append((d_q, node))
        for item in pruned:
            if len(kept) >= m:
                break
            kept.append(item)
        return kept

    @staticmethod
    def _search_layer(q: np.ndarray, entry_points: list[int], ef: int,
                      adjacency: dict[int, list[int]],
                      dist_many: Callable[[np.ndarray, list[int]], np.ndarray],
                      accept: Callable[[int], bool] | None = None,
                      ) -> list[tuple[float, int]]:
        """Best-first expansion of one layer. All nodes are traversable;
        only accepted nodes enter the result set. Returns (distance, node)
        sorted ascending."""
        eps = list(dict.fromkeys(entry_points))
        d0 = dist_many(q, eps)
        visited = set(eps)
        candidates = [(float(d), n) for d, n in zip(d0, eps)]
        heapq.heapify(candidates)
        results = [(-d, n) for d, n in candidates if accept is None or accept(n)]
        heapq.heapify(results)
        while candidates:
            d_c, c = heapq.heappop(candidates)
            if len(results) >= ef and d_c > -results[0][0]:
                break
            fresh = [nb for nb in adjacency.get(c, ()) if nb not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for d_nb, nb in zip(dist_many(q, fresh), fresh):
                d_nb = float(d_nb)
                if len(results) < ef or d_nb < -results[0][0]:
                    heapq.heappush(candidates, (d_nb, nb))
                    if accept is None or accept(nb):
                        heapq.heappush(results, (-d_nb, nb))
                        if len(results) > ef:
                            heapq.heappop(results)
        return sorted(((-d, n) for d, n in results), key=lambda t: (t[0], t[1]))

    def _ensure_graph(self) -> tuple[list[str], np.ndarray, _HnswGraph]:
        ids, mat = self._snapshot()
        with self._lock:
            if self._graph is None:
                logger.info("building approximate graph over %d entries", len(ids))
                self._graph = self._build_graph(ids, mat)
            return ids, mat, self._graph

    # -- approximate search --------------------------------------------------

    def _approximate(self, unit_q: np.ndarray, k: int,
                     predicate: MetadataFilter | None) -> list[RetrievalHit]:
        ids, mat, graph = self._ensure_graph()
        if graph.entry_point is None:
            return []

        def dist_many(q_row: np.ndarray, nodes: list[int]) -> np.ndarray:
            return 1.0 - mat[nodes] @ q_row

        accept = None
        if predicate is not None:
            passing = {
                i for i, aid in enumerate(ids)
                if predicate.matches(self._entries[aid].metadata)
            }
            if not passing:
                return []
            accept = passing.__contains__

        eps = [graph.entry_point]
        for lc in range(graph.max_level, 0, -1):
            eps = [self._search_layer(unit_q, eps, 1, graph.layers[lc], dist_many)[0][1]]
        ef = max(self.ef_search, k)
        found = self._search_layer(unit_q, eps, ef, graph.layers[0], dist_many, accept)
        found.sort(key=lambda t: (t[0], ids[t[1]]))
        return [
            RetrievalHit(article_id=ids[node], distance=float(d), rank=r)
            for r, (d, node) in enumerate(found[:k], start=1)
        ]

    # -- public query --------------------------------------------------------

    def knn(self, query_vec, k: int, predicate: MetadataFilter | None = None,
            mode: str = "exact") -> list[RetrievalHit]:
        """Top-k entries by cosine distance among filter-passing entries.

        Exact mode is ground truth with (distance, article_id) ordering.
        Approximate mode returns candidates from the graph walk, each scored
        with its true distance; it may miss neighbors under heavy filtering
        but never returns a filtered-out entry.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        unit_q = self._unit_query(query_vec)
        if mode == "exact":
            return self._exact(unit_q, k, predicate)
        if mode == "approximate":
            return self._approximate(unit_q, k, predicate)
        raise ValueError(f"unknown search mode: {mode!r}")

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write dimension, parameters, seed, entries and (if built) the graph
        adjacency, keyed by article_id so the file is insertion-order free."""
        ids, _ = self._snapshot()
        with self._lock:
            graph = self._graph
            payload = {
                "format_version": INDEX_FORMAT_VERSION,
                "dimension": self.dimension,
                "params": {
                    "m": self.m,
                    "ef_construction": self.ef_construction,
                    "ef_search": self.ef_search,
                },
                "seed": self.seed,
                "entries": [
                    {
                        "article_id": aid,
                        "vector": self._entries[aid].vector.tolist(),
                        "metadata": self._entries[aid].metadata.to_dict(),
                    }
                    for aid in ids
                ],
                "graph": None,
            }
            if graph is not None:
                payload["graph"] = {
                    "entry_point": ids[graph.entry_point] if graph.entry_point is not None else None,
                    "levels": {ids[node]: lvl for node, lvl in enumerate(graph.levels)},
                    "layers": [
                        {ids[node]: [ids[nb] for nb in nbs] for node, nbs in layer.items()}
                        for layer in graph.layers
                    ],
                }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        params = payload["params"]
        index = cls(
            dimension=payload["dimension"],
            m=params["m"],
            ef_construction=params["ef_construction"],
            ef_search=params["ef_search"],
            seed=payload["seed"],
        )
        index.insert(
            IndexEntry(
                article_id=e["article_id"],
                vector=np.asarray(e["vector"], dtype=np.float64),
                metadata=ArticleMetadata.from_dict(e["metadata"]),
            )
            for e in payload["entries"]
        )
        stored = payload.get("graph")
        if stored is not None:
            ids, _ = index._snapshot()
            row = {aid: i for i, aid in enumerate(ids)}
            graph = _HnswGraph(
                layers=[
                    {row[aid]: [row[nb] for nb in nbs] for aid, nbs in layer.items()}
                    for layer in stored["layers"]
                ],
                levels=[stored["levels"][aid] for aid in ids],
                entry_point=row[stored["entry_point"]] if stored["entry_point"] is not None else None,
            )
            with index._lock:
                index._graph = graph
        return index


def index_corpus(corpus: Corpus, backend: EmbeddingBackend,
                 index: VectorIndex | None = None, seed: int = 0) -> VectorIndex:
    """Embed every article (heading + body) and insert it into an index."""
    if index is None:
        index = VectorIndex(dimension=backend.dimension, seed=seed)
    entries = []
    for a in corpus.articles:
        vec = embed(article_text(a), backend)
        entries.append(IndexEntry(article_id=a.article_id, vector=vec, metadata=a.metadata))
    index.insert(entries)
    return index


def article_text(article: Article) -> str:
    """The text embedded for retrieval: heading plus body."""
    return f"{article.heading} {article.body}"
