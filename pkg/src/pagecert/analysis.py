"""Aggregate metrics and plot-ready tables over certificate records."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import DirectedGraph
from .policy_iter import LocalCertificate
from .qclp_global import GlobalCertificate


def record_to_dict(rec) -> dict:
    """Flatten a certificate into the JSON-lines schema (stable key order)."""
    if isinstance(rec, LocalCertificate):
        return {
            "node": int(rec.node),
            "y": int(rec.label),
            "worst_class": int(rec.worst_class),
            "worst_margin": float(rec.worst_margin),
            "status": rec.status,
            "bound_type": "exact",
            "marginal": bool(rec.marginal),
            "witness_flips": [[int(a), int(b)] for a, b in rec.witness.flips],
        }
    if isinstance(rec, GlobalCertificate):
        return {
            "node": int(rec.node),
            "y": int(rec.label),
            "worst_class": int(rec.worst_class),
            "worst_margin": float(rec.lower_bound_margin),
            "status": rec.status,
            "bound_type": "lower",
            "attack_verified": bool(rec.attack_verified),
            "witness_flips": [[int(a), int(b)] for a, b in rec.rounded_attack.flips],
        }
    raise TypeError(f"not a certificate record: {type(rec)!r}")


def write_certificates_jsonl(records, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec)) + "\n")


def read_certificates_jsonl(path) -> list[dict]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def _is_robust(rec) -> bool:
    if isinstance(rec, dict):
        return rec["status"] == "robust"
    return rec.status == "robust"


def _node_of(rec) -> int:
    return rec["node"] if isinstance(rec, dict) else rec.node


def _label_of(rec) -> int:
    return rec["y"] if isinstance(rec, dict) else rec.label


def _margin_of(rec) -> float:
    if isinstance(rec, dict):
        return rec["worst_margin"]
    if isinstance(rec, GlobalCertificate):
        return rec.lower_bound_margin
    return rec.worst_margin


def certified_ratio(records) -> float:
    records = list(records)
    if not records:
        return 0.0
    return sum(_is_robust(r) for r in records) / len(records)


def certified_accuracy(records, true_labels) -> float:
    """Fraction of scored nodes that are certified robust and whose defended
    class matches the true label: a lower bound on worst-case accuracy."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    records = list(records)
    if not records:
        return 0.0
    good = sum(
        1 for r in records
        if _is_robust(r) and _label_of(r) == int(true_labels[_node_of(r)])
    )
    return good / len(records)


def neighborhood_purity(G: DirectedGraph, labels: np.ndarray, v: int) -> float:
    """Share of same-class nodes in v's undirected two-hop neighborhood.

    v itself is excluded; an empty neighborhood gives 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = G.node_count
    adj: dict[int, set[int]] = {}
    for s, d in G.edges:
        adj.setdefault(int(s), set()).add(int(d))
        adj.setdefault(int(d), set()).add(int(s))
    one = adj.get(int(v), set())
    two = set(one)
    for u in one:
        two |= adj.get(u, set())
    two.discard(int(v))
    if not two:
        return 0.0
    same = sum(1 for u in two if labels[u] == labels[v])
    return same / len(two)


def _two_hop_sets(G: DirectedGraph) -> list[set[int]]:
    adj: list[set[int]] = [set() for _ in range(G.node_count)]
    for s, d in G.edges:
        adj[int(s)].add(int(d))
        adj[int(d)].add(int(s))
    out = []
    for v in range(G.node_count):
        two = set(adj[v])
        for u in adj[v]:
            two |= adj[u]
        two.discard(v)
        out.append(two)
    return out


@dataclass(eq=False)
class CertReport:
    records: list
    certified_ratio: float
    certified_accuracy: float | None
    degree_breakdown: list[tuple[int, float]]          # (out-degree, ratio)
    purity_breakdown: list[tuple[float, float]]        # (bucket mid, mean margin)


def build_report(
    records,
    G: DirectedGraph,
    true_labels=None,
    purity_labels=None,
    purity_buckets: int = 5,
) -> CertReport:
    records = list(records)
    ratio = certified_ratio(records)
    acc = (certified_accuracy(records, true_labels)
           if true_labels is not None else None)

    by_degree: dict[int, list[bool]] = {}
    for r in records:
        d = int(G.out_degree[_node_of(r)])
        by_degree.setdefault(d, []).append(_is_robust(r))
    degree_rows = [(d, sum(v) / len(v)) for d, v in sorted(by_degree.items())]

    purity_rows: list[tuple[float, float]] = []
    if purity_labels is not None:
        labels = np.asarray(purity_labels, dtype=np.int64)
        hops = _two_hop_sets(G)
        edges = np.linspace(0.0, 1.0, purity_buckets + 1)
        buckets: dict[int, list[float]] = {}
        for r in records:
            v = _node_of(r)
            nb = hops[v]
            pur = (sum(1 for u in nb if labels[u] == labels[v]) / len(nb)
                   if nb else 0.0)
            k = min(int(np.searchsorted(edges, pur, side="right")) - 1,
                    purity_buckets - 1)
            buckets.setdefault(max(k, 0), []).append(_margin_of(r))
        purity_rows = [
            (float((edges[k] + edges[k + 1]) / 2), float(np.mean(vals)))
            for k, vals in sorted(buckets.items())
        ]
    return CertReport(records, ratio, acc, degree_rows, purity_rows)


def write_table_csv(path, header: list[str], rows) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(
                format(v, ".17g") if isinstance(v, float) else str(v)
                for v in row
            ) + "\n")


def write_summary_csv(report: CertReport, path) -> None:
    rows = [("certified_ratio", float(report.certified_ratio))]
    if report.certified_accuracy is not None:
        rows.append(("certified_accuracy", float(report.certified_accuracy)))
    for d, ratio in report.degree_breakdown:
        rows.append((f"degree_{d}_ratio", float(ratio)))
    for mid, margin in report.purity_breakdown:
        rows.append((f"purity_{mid:.2f}_mean_margin", float(margin)))
    write_table_csv(path, ["metric", "value"], rows)
