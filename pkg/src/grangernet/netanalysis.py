"""Weighted directed GC networks and edge-betweenness centrality comparisons."""
from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .exceptions import ValidationError
from .var_core import offdiag_mask

EXTRA = "extra"
MISSING = "missing"


@dataclass(frozen=True)
class GcNetwork:
    """Directed GC graph; ``strength[i, j] = ||B_ij||`` is the edge ``j -> i``."""

    labels: tuple
    strength: np.ndarray

    def __post_init__(self):
        W = np.array(self.strength, dtype=float)
        n = W.shape[0]
        if W.shape != (n, n):
            raise ValidationError("strength matrix must be square")
        if len(self.labels) != n:
            raise ValidationError(f"{len(self.labels)} labels for {n} nodes")
        if np.any(W < 0) or not np.all(np.isfinite(W)):
            raise ValidationError("edge strengths must be finite and nonnegative")
        W[~offdiag_mask(n)] = 0.0
        object.__setattr__(self, "strength", W)
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def distance(self) -> np.ndarray:
        """Proxy distances ``1/||B_ij||`` on edges, ``inf`` elsewhere."""
        with np.errstate(divide="ignore"):
            return np.where(self.strength > 0, 1.0 / self.strength, np.inf)

    def edges(self) -> list[tuple[int, int]]:
        """Edges as ``(cause, effect)`` node indices."""
        eff, cause = np.nonzero(self.strength)
        return sorted(zip(cause.tolist(), eff.tolist()))

    def edge_rows(self) -> list[dict]:
        D = self.distance
        return [{"source": self.labels[j], "target": self.labels[i],
                 "strength": float(self.strength[i, j]), "distance": float(D[i, j])}
                for j, i in self.edges()]


def to_network(result, k: int = 0, labels=None) -> GcNetwork:
    """Network of model ``k`` from a solve result (or a (K, p, n, n) coefficient array)."""
    coefs = result.coefs if hasattr(result, "coefs") else np.asarray(result)
    if coefs.ndim == 3:
        coefs = coefs[None]
    if not 0 <= k < coefs.shape[0]:
        raise ValidationError(f"model index {k} out of range")
    n = coefs.shape[-1]
    labels = labels if labels is not None else [f"x{i + 1}" for i in range(n)]
    return GcNetwork(tuple(labels), np.linalg.norm(coefs[k], axis=0))


def _adjacency(network, exact: bool):
    if isinstance(network, GcNetwork):
        W = network.strength
        n = network.n
        adj = [[] for _ in range(n)]
        for j, i in network.edges():
            d = Fraction(1) / Fraction(W[i, j]) if exact else 1.0 / W[i, j]
            adj[j].append((i, d))
        return n, adj
    n, edges = network  # (n, {(u, v): distance})
    adj = [[] for _ in range(n)]
    for (u, v), d in sorted(edges.items()):
        if u == v:
            continue
        adj[u].append((v, Fraction(d) if exact else float(d)))
    return n, adj


def edge_betweenness(network, *, exact: bool = False, rtol: float = 1e-12) -> dict:
    """Edge betweenness with fractional credit among tied shortest paths.

    Each ordered pair ``(s, t)`` with ``t`` reachable from ``s`` distributes one
    unit of credit over its shortest paths; an edge scores the total share of
    paths through it.  ``network`` is a :class:`GcNetwork` (scores keyed by
    ``(cause, effect)``) or ``(n, {(u, v): distance})``.  With ``exact=True``
    distances are converted to :class:`fractions.Fraction` and ties are exact;
    otherwise path lengths within relative ``rtol`` count as tied.
    """
    n, adj = _adjacency(network, exact)
    scores = {(u, v): (Fraction(0) if exact else 0.0) for u in range(n) for v, _ in adj[u]}

    def tied(a, b):
        return a == b if exact else abs(a - b) <= rtol * max(abs(a), abs(b))

    for s in range(n):
        dist = {s: Fraction(0) if exact else 0.0}
        sigma = {s: 1}
        preds: dict[int, list[int]] = {s: []}
        order = []
        done = set()
        heap = [(dist[s], s)]
        while heap:
            d, u = heapq.heappop(heap)
            if u in done or d != dist[u]:
                continue
            done.add(u)
            order.append(u)
            for v, w in adj[u]:
                if v in done:
                    continue
                nd = d + w
                if v not in dist or (nd < dist[v] and not tied(nd, dist[v])):
                    dist[v] = nd
                    sigma[v] = sigma[u]
                    preds[v] = [u]
                    heapq.heappush(heap, (nd, v))
                elif tied(nd, dist[v]):
                    sigma[v] += sigma[u]
                    preds[v].append(u)
        delta = {v: (Fraction(0) if exact else 0.0) for v in order}
        for w in reversed(order):
            for v in preds[w]:
                c = (Fraction(sigma[v], sigma[w]) if exact else sigma[v] / sigma[w]) * (1 + delta[w])
                scores[(v, w)] += c
                delta[v] += c
    return scores


@dataclass(frozen=True)
class CentralityRow:
    rank: int
    cause: str
    effect: str
    difference: float
    type: str


@dataclass(frozen=True)
class CentralityReport:
    """Per-edge betweenness differences ``score(A) - score(B)`` over the union of edges.

    Positive differences are the ``extra`` type, negative ones ``missing``.
    """

    differences: dict
    extra: tuple
    missing: tuple

    def rows(self) -> list[CentralityRow]:
        return list(self.extra) + list(self.missing)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "cause", "effect", "difference", "type"])
            for r in self.rows():
                writer.writerow([r.rank, r.cause, r.effect, repr(r.difference), r.type])


def centrality_difference(net_a: GcNetwork, net_b: GcNetwork, top_m: int | None = 3) -> CentralityReport:
    """Rank edges by betweenness difference between two networks on the same nodes.

    Edges absent from one network score 0 there.  ``top_m`` rows are kept per
    type (all when ``None``), ordered by decreasing absolute difference with
    ties broken by (cause, effect) label.
    """
    if net_a.labels != net_b.labels:
        raise ValidationError("networks must share identical node labels")
    sa, sb = edge_betweenness(net_a), edge_betweenness(net_b)
    diffs = {}
    for e in sorted(set(sa) | set(sb)):
        d = float(sa.get(e, 0.0) - sb.get(e, 0.0))
        if d != 0.0:
            diffs[(net_a.labels[e[0]], net_a.labels[e[1]])] = d

    def ranked(sign, kind):
        items = sorted(((c, e, d) for (c, e), d in diffs.items() if d * sign > 0),
                       key=lambda t: (-abs(t[2]), t[0], t[1]))
        if top_m is not None:
            items = items[:top_m]
        return tuple(CentralityRow(r + 1, c, e, d, kind) for r, (c, e, d) in enumerate(items))

    return CentralityReport(diffs, ranked(1, EXTRA), ranked(-1, MISSING))


def write_network_csv(network: GcNetwork, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["source", "target", "strength", "distance"])
        writer.writeheader()
        for row in network.edge_rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_edge_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"source", "target", "strength"} - set(rows[0] if rows else {"source", "target", "strength"})
    if missing:
        raise ValidationError(f"{path}: missing columns {sorted(missing)}")
    return rows


def read_network_csv(path, labels=None) -> GcNetwork:
    return network_from_rows(read_edge_rows(path), labels)


def network_from_rows(rows, labels=None) -> GcNetwork:
    """Rebuild a network from edge rows; ``labels`` fixes node order (else order of appearance)."""
    if labels is None:
        seen = {}
        for r in rows:
            seen.setdefault(r["source"], None)
            seen.setdefault(r["target"], None)
        labels = list(seen)
    index = {s: i for i, s in enumerate(labels)}
    W = np.zeros((len(labels), len(labels)))
    for r in rows:
        try:
            W[index[r["target"]], index[r["source"]]] = float(r["strength"])
        except KeyError as exc:
            raise ValidationError(f"edge refers to unknown node {exc}") from None
    return GcNetwork(tuple(labels), W)
