"""Synchronizing coefficients, coherent-group clustering and the group matrix KsGM."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .grid import ReducedNetwork


@dataclass(frozen=True)
class SyncCoefficientMatrix:
    machine_ids: tuple[str, ...]
    k: np.ndarray = field(repr=False)
    time: float = 0.0


@dataclass(frozen=True)
class GeneratorPartition:
    groups: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        seen: set[str] = set()
        for g in self.groups:
            if not g:
                raise ValueError("empty coherent group")
            if seen & set(g):
                raise ValueError("coherent groups overlap")
            seen |= set(g)
        if not self.groups:
            raise ValueError("partition has no groups")

    @property
    def u(self) -> int:
        return len(self.groups)

    @property
    def machine_ids(self) -> set[str]:
        return {m for g in self.groups for m in g}

    def group_of(self) -> dict[str, int]:
        return {m: k for k, g in enumerate(self.groups) for m in g}

    def restricted(self, machine_ids) -> "GeneratorPartition":
        """Drop machines not in ``machine_ids`` (and any group left empty)."""
        keep = set(machine_ids)
        groups = tuple(tuple(m for m in g if m in keep) for g in self.groups)
        return GeneratorPartition(tuple(g for g in groups if g))


@dataclass(frozen=True)
class KsGM:
    a: np.ndarray
    baseline: bool = False
    singleton: tuple[bool, ...] = ()

    @property
    def u(self) -> int:
        return self.a.shape[0]


def sync_coefficients(red: ReducedNetwork, emf, delta, time: float = 0.0) -> SyncCoefficientMatrix:
    """K_pq = E_p E_q (B_pq cos d_pq - G_pq sin d_pq), symmetrized, zero diagonal."""
    emf = np.asarray(emf, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if emf.shape != delta.shape or emf.shape[0] != len(red.machine_ids):
        raise ValueError("emf/delta dimensions do not match the reduced network")
    k = kernels.sync_matrix(red.g, red.b, emf, delta)
    k = 0.5 * (k + k.T)
    np.fill_diagonal(k, 0.0)
    return SyncCoefficientMatrix(tuple(red.machine_ids), k, time)


def reference_scale(ks: SyncCoefficientMatrix) -> float:
    return float(np.max(np.abs(ks.k)))


def normalize_coherency(ks: SyncCoefficientMatrix | np.ndarray, ref_scale: float | None = None) -> np.ndarray:
    """Map coefficients to [0, 1]: c = clamp((1 + k / ref_scale) / 2, 0, 1).

    The diagonal carries no meaning and is returned as 1.
    """
    k = ks.k if isinstance(ks, SyncCoefficientMatrix) else np.asarray(ks, dtype=float)
    if ref_scale is None:
        ref_scale = float(np.max(np.abs(k)))
    if not ref_scale > 0:
        raise ValueError("ref_scale must be positive")
    c = np.clip(0.5 * (1.0 + k / ref_scale), 0.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return c


# ---------------------------------------------------------------------------
# modularity clustering

def modularity(w: np.ndarray, labels: Sequence[int]) -> float:
    w = np.asarray(w, dtype=float)
    two_m = w.sum()
    if two_m <= 0:
        raise ValueError("graph has no positive edge weight")
    deg = w.sum(axis=1)
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    return float(((w - np.outer(deg, deg) / two_m) * same).sum() / two_m)


def _canonical(labels: Sequence[int]) -> list[int]:
    """Relabel communities in order of first appearance (lowest node first)."""
    remap: dict[int, int] = {}
    return [remap.setdefault(c, len(remap)) for c in labels]


def _agglomerate(w: np.ndarray, labels: list[int], two_m: float, deg: np.ndarray) -> list[int]:
    comms = sorted(set(labels))
    members = {c: [i for i, l in enumerate(labels) if l == c] for c in comms}
    while len(members) > 1:
        keys = sorted(members, key=lambda c: members[c][0])
        best, pair = 1e-12, None
        for ia, ca in enumerate(keys):
            a_a = deg[members[ca]].sum() / two_m
            for cb in keys[ia + 1:]:
                e_ab = w[np.ix_(members[ca], members[cb])].sum() / two_m
                a_b = deg[members[cb]].sum() / two_m
                dq = 2.0 * (e_ab - a_a * a_b)
                if dq > best + 1e-15:
                    best, pair = dq, (ca, cb)
        if pair is None:
            break
        ca, cb = pair
        members[ca] = sorted(members[ca] + members.pop(cb))
    out = [0] * len(labels)
    for c, nodes in members.items():
        for i in nodes:
            out[i] = c
    return _canonical(out)


def _refine(w: np.ndarray, labels: list[int], two_m: float, deg: np.ndarray) -> list[int]:
    labels = list(labels)
    n = len(labels)
    improved = True
    while improved:
        improved = False
        for i in range(n):
            cur = labels[i]
            # gain of placing i into community c, relative to i standing alone
            def gain(c):
                nodes = [j for j in range(n) if labels[j] == c and j != i]
                if not nodes:
                    return 0.0
                return 2.0 * (w[i, nodes].sum() / two_m - deg[i] * deg[nodes].sum() / two_m ** 2)
            base = gain(cur)
            best_c, best_g = cur, base
            for c in sorted(set(labels) | {max(labels) + 1}):
                if c == cur:
                    continue
                g = gain(c)
                if g > best_g + 1e-12:
                    best_c, best_g = c, g
            if best_c != cur:
                labels[i] = best_c
                improved = True
        labels = _canonical(labels)
    return labels


def greedy_modularity(w: np.ndarray) -> list[int]:
    """Greedy agglomerative modularity maximization with node-move refinement.

    Starts from singletons, merges the pair of communities with the largest
    positive modularity gain until none remains, then moves single nodes
    while that improves Q, and alternates the two until stable. Ties go to
    the community containing the lowest node index.
    """
    w = np.asarray(w, dtype=float)
    two_m = w.sum()
    if two_m <= 0:
        raise ValueError("all-zero weight matrix: no coherency structure to cluster")
    deg = w.sum(axis=1)
    labels = list(range(w.shape[0]))
    while True:
        merged = _agglomerate(w, labels, two_m, deg)
        refined = _refine(w, merged, two_m, deg)
        if refined == labels:
            return refined
        labels = refined


EXACT_LIMIT = 10

_rgs_cache: dict[int, np.ndarray] = {}


def restricted_growth_strings(n: int) -> np.ndarray:
    """Every set partition of n nodes as canonical label rows, in lexicographic order."""
    if n not in _rgs_cache:
        rows = np.zeros((1, 1), dtype=np.int8)
        top = np.zeros(1, dtype=np.int8)
        for _ in range(1, n):
            reps = top.astype(int) + 2
            base = np.repeat(rows, reps, axis=0)
            new = np.concatenate([np.arange(r) for r in reps]).astype(np.int8)
            top = np.maximum(np.repeat(top, reps), new)
            rows = np.column_stack([base, new])
        _rgs_cache[n] = rows
    return _rgs_cache[n]


def exact_modularity(w: np.ndarray, n_groups: int | None = None) -> list[int]:
    """Maximum-modularity partition by exhaustive enumeration (small graphs only).

    With ``n_groups`` the search is restricted to partitions with exactly
    that many groups. Ties within 1e-12 resolve to the lexicographically
    smallest labeling, which keeps lower-numbered nodes in earlier groups.
    """
    w = np.asarray(w, dtype=float)
    n = w.shape[0]
    two_m = w.sum()
    if two_m <= 0:
        raise ValueError("all-zero weight matrix: no coherency structure to cluster")
    deg = w.sum(axis=1)
    bmat = w - np.outer(deg, deg) / two_m
    rgs = restricted_growth_strings(n)
    if n_groups is not None:
        if not 1 <= n_groups <= n:
            raise ValueError(f"n_groups must lie in [1, {n}]")
        rgs = rgs[rgs.max(axis=1) == n_groups - 1]
    q = np.full(rgs.shape[0], np.trace(bmat))
    for i in range(n):
        for j in range(i + 1, n):
            if bmat[i, j] != 0.0:
                q += 2.0 * bmat[i, j] * (rgs[:, i] == rgs[:, j])
    q /= two_m
    best = int(np.flatnonzero(q >= q.max() - 1e-12)[0])
    return [int(v) for v in rgs[best]]


def cluster_coherent_groups(ks_base: SyncCoefficientMatrix, exact_limit: int = EXACT_LIMIT,
                            n_groups: int | None = None) -> GeneratorPartition:
    """Coherent groups at maximum modularity of the graph w_pq = max(0, k_pq).

    Graphs with at most ``exact_limit`` machines are solved exactly; larger
    ones use the greedy agglomeration of :func:`greedy_modularity`. When the
    number of groups is fixed in advance (``n_groups``) the best partition
    with that many groups is returned; this needs the exact search.
    """
    w = np.maximum(ks_base.k, 0.0)
    w = 0.5 * (w + w.T)
    np.fill_diagonal(w, 0.0)
    if n_groups is not None:
        if w.shape[0] > exact_limit:
            raise ValueError(f"a fixed group count needs exact search (at most {exact_limit} machines)")
        labels = exact_modularity(w, n_groups)
    elif w.shape[0] <= exact_limit:
        labels = exact_modularity(w)
    else:
        labels = greedy_modularity(w)
    groups: dict[int, list[str]] = {}
    for mid, lab in zip(ks_base.machine_ids, labels):
        groups.setdefault(lab, []).append(mid)
    return GeneratorPartition(tuple(tuple(groups[k]) for k in sorted(groups)))


def build_ksgm(c: np.ndarray, partition: GeneratorPartition, machine_ids: Sequence[str],
               baseline: bool = False) -> KsGM:
    """Group matrix: block means of coherency (diagonal) and incoherency 1 - c (off-diagonal)."""
    pos = {m: k for k, m in enumerate(machine_ids)}
    idx = [np.array([pos[m] for m in g], dtype=int) for g in partition.groups]
    u = len(idx)
    a = np.zeros((u, u))
    single = []
    for i in range(u):
        gi = idx[i]
        if gi.size == 1:
            a[i, i] = 1.0
            single.append(True)
        else:
            block = c[np.ix_(gi, gi)]
            iu = np.triu_indices(gi.size, 1)
            a[i, i] = block[iu].mean()
            single.append(False)
        for j in range(i + 1, u):
            a[i, j] = a[j, i] = (1.0 - c[np.ix_(gi, idx[j])]).mean()
    return KsGM(a, baseline, tuple(single))


def load_partition(path: str | Path) -> GeneratorPartition:
    """Read a partition override file: ``{"groups": [["G1", "G2"], ...]}``."""
    doc = json.loads(Path(path).read_text())
    groups = doc["groups"] if isinstance(doc, dict) else doc
    return GeneratorPartition(tuple(tuple(str(m) for m in g) for g in groups))
