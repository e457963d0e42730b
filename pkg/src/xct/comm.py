"""Simulated multi-GPU topology and communication planning.

After a partial projection, every process holds values for the rays its
subdomain touches; those values must reach the ray owners and be summed.
The direct plan ships every contribution straight to its owner.  The
hierarchical plan first reduces contributions among the GPUs of a socket,
then among the sockets of a node, and only then sends the surviving
per-node contributions to the owners, trading cheap local traffic for
expensive inter-node traffic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import PartialResult, reduce_partials
from .matrixstore import compute_dtype

__all__ = [
    "Topology",
    "Placement",
    "CommPlan",
    "DirectPlan",
    "HierarchicalPlan",
    "VolumeReport",
    "parse_topology",
    "load_topology",
    "default_topology",
    "map_partitions",
    "plan_direct",
    "plan_hierarchical",
    "execute_plan",
    "estimate_makespan",
]


@dataclass(frozen=True)
class Topology:
    """Node/socket/GPU layout with per-level link speeds.

    Bandwidths are bytes per second and must be ordered
    intra_socket >= intra_node >= inter_node; latency is per message.
    ``inter_node_overhead`` models the host-staging hop of global
    messages as a per-byte multiplier (1.0 = off).
    """

    num_nodes: int = 4
    sockets_per_node: int = 2
    gpus_per_socket: int = 3
    bw_intra_socket: float = 50e9
    bw_intra_node: float = 32e9
    bw_inter_node: float = 12.5e9
    latency: float = 1e-6
    inter_node_overhead: float = 1.0

    def __post_init__(self):
        if min(self.num_nodes, self.sockets_per_node, self.gpus_per_socket) < 1:
            raise ValueError("topology dimensions must be >= 1")
        if not self.bw_intra_socket >= self.bw_intra_node >= self.bw_inter_node > 0:
            raise ValueError(
                "bandwidths must satisfy intra_socket >= intra_node >= inter_node > 0")

    @property
    def gpus_per_node(self) -> int:
        return self.sockets_per_node * self.gpus_per_socket

    @property
    def total_gpus(self) -> int:
        return self.num_nodes * self.gpus_per_node


def parse_topology(text: str) -> Topology:
    """Parse ``nodes=<n> sockets=<s> gpus=<g> bw_socket=<B/s> bw_node=<B/s>
    bw_inter=<B/s> lat=<s>`` (whitespace separated key=value pairs)."""
    keys = {
        "nodes": ("num_nodes", int),
        "sockets": ("sockets_per_node", int),
        "gpus": ("gpus_per_socket", int),
        "bw_socket": ("bw_intra_socket", float),
        "bw_node": ("bw_intra_node", float),
        "bw_inter": ("bw_inter_node", float),
        "lat": ("latency", float),
        "stage_overhead": ("inter_node_overhead", float),
    }
    kwargs = {}
    for token in text.split():
        if "=" not in token:
            raise ValueError(f"malformed topology token {token!r}")
        key, value = token.split("=", 1)
        if key not in keys:
            raise ValueError(f"unknown topology key {key!r}")
        name, cast = keys[key]
        kwargs[name] = cast(float(value)) if cast is int else cast(value)
    return Topology(**kwargs)


def load_topology(path) -> Topology:
    with open(path, "r", encoding="ascii") as fh:
        return parse_topology(fh.read())


def default_topology() -> Topology:
    """Four fat nodes of two sockets with three GPUs each."""
    return Topology()


@dataclass(frozen=True)
class Placement:
    """Assignment of P_b x P_d processes onto (node, socket, gpu) slots."""

    p_b: int
    p_d: int
    topology: Topology
    slots: tuple[tuple[int, int, int], ...]

    def slot(self, pid: int) -> tuple[int, int, int]:
        return self.slots[pid]

    def node_of(self, pid: int) -> int:
        return self.slots[pid][0]

    def socket_of(self, pid: int) -> int:
        """Global socket id (unique across nodes)."""
        node, socket, _ = self.slots[pid]
        return node * self.topology.sockets_per_node + socket

    def group_pids(self, batch_group: int) -> list[int]:
        return list(range(batch_group * self.p_d, (batch_group + 1) * self.p_d))


def map_partitions(p_b: int, p_d: int, topology: Topology) -> Placement:
    """Place consecutive subdomain ids socket-first, node-second; each batch
    group occupies its own disjoint set of nodes."""
    if p_b < 1 or p_d < 1:
        raise ValueError("P_b and P_d must be >= 1")
    nodes_per_group = -(-p_d // topology.gpus_per_node)
    if p_b * nodes_per_group > topology.num_nodes:
        raise ValueError(
            f"{p_b} batch groups of {p_d} data processes need "
            f"{p_b * nodes_per_group} nodes; topology has {topology.num_nodes}")
    slots = []
    for b in range(p_b):
        node0 = b * nodes_per_group
        for d in range(p_d):
            node = node0 + d // topology.gpus_per_node
            within = d % topology.gpus_per_node
            socket = within // topology.gpus_per_socket
            gpu = within % topology.gpus_per_socket
            slots.append((node, socket, gpu))
    return Placement(p_b=p_b, p_d=p_d, topology=topology, slots=tuple(slots))


@dataclass
class CommPlan:
    """One level of the exchange: per-pair element lists and counts."""

    level: str
    num_procs: int
    counts: np.ndarray = field(repr=False)
    transfers: dict = field(repr=False, default_factory=dict)

    def pair_messages(self) -> int:
        """Coalesced message count: one per off-diagonal (sender, receiver)."""
        off_diag = self.counts.copy()
        np.fill_diagonal(off_diag, 0)
        return int(np.count_nonzero(off_diag))

    def volume_elements(self) -> int:
        off_diag = self.counts.copy()
        np.fill_diagonal(off_diag, 0)
        return int(off_diag.sum())


@dataclass
class VolumeReport:
    """Byte accounting per level plus the retained-volume cascade."""

    ffactor: int
    element_bytes: int
    direct_bytes: int
    direct_inter_node_bytes: int
    level_bytes: dict
    level_times: dict
    hier_inter_node_bytes: int
    retained_bytes: list
    inter_node_reduction_pct: float

    def level_rows(self) -> list[tuple[str, int, float, int]]:
        rows = [("direct", self.direct_bytes, self.level_times.get("direct", 0.0),
                 self.retained_bytes[0])]
        for i, level in enumerate(("socket", "node", "global")):
            if level in self.level_bytes:
                retained = self.retained_bytes[min(i + 1, len(self.retained_bytes) - 1)]
                rows.append((level, self.level_bytes[level],
                             self.level_times.get(level, 0.0), retained))
        return rows


@dataclass
class DirectPlan:
    plan: CommPlan
    ownership: dict

    @property
    def levels(self) -> list[CommPlan]:
        return [self.plan]


@dataclass
class HierarchicalPlan:
    socket: CommPlan
    node: CommPlan
    global_: CommPlan
    ownership: dict

    @property
    def levels(self) -> list[CommPlan]:
        return [self.socket, self.node, self.global_]


def _check_ownership(ownership: dict, footprints: dict) -> np.ndarray:
    owned_all = np.concatenate([np.asarray(v) for v in ownership.values()])
    if len(np.unique(owned_all)) != len(owned_all):
        raise ValueError("ownership is not a partition: duplicate elements")
    touched = (np.unique(np.concatenate([np.asarray(f) for f in footprints.values()]))
               if footprints else np.empty(0, dtype=np.int64))
    if len(np.setdiff1d(touched, owned_all)) > 0:
        raise ValueError("some footprint elements have no owner")
    return owned_all


def _owner_lookup(ownership: dict) -> dict[int, int]:
    lookup = {}
    for pid, elems in ownership.items():
        for e in np.asarray(elems).tolist():
            lookup[e] = pid
    return lookup


def _bytes_of(counts: np.ndarray, ffactor: int, elem_bytes: int) -> int:
    off = counts.copy()
    np.fill_diagonal(off, 0)
    return int(off.sum()) * ffactor * elem_bytes


def _inter_node_bytes(plan: CommPlan, placement: Placement, ffactor: int,
                      elem_bytes: int) -> int:
    total = 0
    for (s, r), elems in plan.transfers.items():
        if s != r and placement.node_of(s) != placement.node_of(r):
            total += len(elems) * ffactor * elem_bytes
    return total


def _level_time(plan: CommPlan, placement: Placement, ffactor: int,
                elem_bytes: int, topology: Topology) -> float:
    """volume/bandwidth + latency per coalesced message, per link class."""
    time = 0.0
    for (s, r), elems in plan.transfers.items():
        if s == r:
            continue
        nbytes = len(elems) * ffactor * elem_bytes
        if placement.node_of(s) != placement.node_of(r):
            bw = topology.bw_inter_node
            nbytes = int(nbytes * topology.inter_node_overhead)
        elif placement.socket_of(s) != placement.socket_of(r):
            bw = topology.bw_intra_node
        else:
            bw = topology.bw_intra_socket
        time += nbytes / bw + topology.latency
    return time


def plan_direct(footprints: dict, ownership: dict, placement: Placement,
                ffactor: int = 1, elem_bytes: int = 8
                ) -> tuple[DirectPlan, VolumeReport]:
    """Every contributor ships its partial elements straight to the owner."""
    _check_ownership(ownership, footprints)
    pids = sorted(footprints)
    n = max(max(pids, default=0), max(ownership, default=0)) + 1
    counts = np.zeros((n, n), dtype=np.int64)
    transfers: dict[tuple[int, int], np.ndarray] = {}
    for p in pids:
        fp = np.asarray(footprints[p])
        for q in sorted(ownership):
            inter = np.intersect1d(fp, np.asarray(ownership[q]), assume_unique=True)
            if len(inter):
                counts[p, q] = len(inter)
                transfers[(p, q)] = inter
    plan = CommPlan(level="direct", num_procs=n, counts=counts, transfers=transfers)
    direct_bytes = _bytes_of(counts, ffactor, elem_bytes)
    inter = _inter_node_bytes(plan, placement, ffactor, elem_bytes)
    initial = sum(len(np.asarray(f)) for f in footprints.values()) * ffactor * elem_bytes
    report = VolumeReport(
        ffactor=ffactor, element_bytes=elem_bytes,
        direct_bytes=direct_bytes,
        direct_inter_node_bytes=inter,
        level_bytes={}, hier_inter_node_bytes=inter,
        level_times={"direct": _level_time(plan, placement, ffactor, elem_bytes,
                                           placement.topology)},
        retained_bytes=[initial],
        inter_node_reduction_pct=0.0,
    )
    return DirectPlan(plan=plan, ownership=dict(ownership)), report


def _reduce_level(holders: dict, group_of: dict, level: str, n: int) -> CommPlan:
    """Gather same-group holders of each element onto one elected member.

    ``holders`` maps element -> sorted list of pids currently holding a
    contribution; it is updated in place.  The elected reducer per element
    is the group member with the smallest running reduced-data load, i.e.
    the fewest elements it has been elected for so far (ties: lowest pid);
    that balances the onward send volume among group members.
    """
    counts = np.zeros((n, n), dtype=np.int64)
    transfers: dict[tuple[int, int], list] = {}
    load = {pid: 0 for pid in group_of}
    for e in sorted(holders):
        hs = holders[e]
        new_hs = []
        by_group: dict[int, list[int]] = {}
        for pid in hs:
            by_group.setdefault(group_of[pid], []).append(pid)
        for gid in sorted(by_group):
            members = by_group[gid]
            if len(members) == 1:
                new_hs.append(members[0])
                continue
            elected = min(members, key=lambda p: (load[p], p))
            load[elected] += 1
            for pid in members:
                if pid != elected:
                    counts[pid, elected] += 1
                    transfers.setdefault((pid, elected), []).append(e)
            new_hs.append(elected)
        holders[e] = sorted(new_hs)
    arr_transfers = {k: np.array(v, dtype=np.int64) for k, v in transfers.items()}
    return CommPlan(level=level, num_procs=n, counts=counts, transfers=arr_transfers)


def plan_hierarchical(footprints: dict, ownership: dict, placement: Placement,
                      ffactor: int = 1, elem_bytes: int = 8
                      ) -> tuple[HierarchicalPlan, VolumeReport]:
    """Socket-level, then node-level local reduction, then global exchange.

    Inter-node bytes never exceed the direct plan's; they are equal only
    when no two same-node processes share a footprint element.
    """
    _check_ownership(ownership, footprints)
    topology = placement.topology
    pids = sorted(footprints)
    n = max(max(pids, default=0), max(ownership, default=0)) + 1

    holders: dict[int, list[int]] = {}
    for p in pids:
        for e in np.asarray(footprints[p]).tolist():
            holders.setdefault(e, []).append(p)
    for e in holders:
        holders[e].sort()
    initial_contribs = sum(len(h) for h in holders.values())

    socket_of = {p: placement.socket_of(p) for p in pids}
    node_of = {p: placement.node_of(p) for p in pids}

    socket_plan = _reduce_level(holders, socket_of, "socket", n)
    after_socket = sum(len(h) for h in holders.values())
    node_plan = _reduce_level(holders, node_of, "node", n)
    after_node = sum(len(h) for h in holders.values())

    owner_of = _owner_lookup(ownership)
    g_counts = np.zeros((n, n), dtype=np.int64)
    g_transfers: dict[tuple[int, int], list] = {}
    for e in sorted(holders):
        q = owner_of[e]
        for p in holders[e]:
            g_counts[p, q] += 1
            if p != q:
                g_transfers.setdefault((p, q), []).append(e)
    global_plan = CommPlan(level="global", num_procs=n,
                           counts=g_counts,
                           transfers={k: np.array(v, dtype=np.int64)
                                      for k, v in g_transfers.items()})

    plan = HierarchicalPlan(socket=socket_plan, node=node_plan,
                            global_=global_plan, ownership=dict(ownership))
    unit = ffactor * elem_bytes
    direct_plan, direct_report = plan_direct(footprints, ownership, placement,
                                             ffactor, elem_bytes)
    level_bytes = {
        "socket": _bytes_of(socket_plan.counts, ffactor, elem_bytes),
        "node": _bytes_of(node_plan.counts, ffactor, elem_bytes),
        "global": _bytes_of(g_counts, ffactor, elem_bytes),
    }
    level_times = {
        "direct": direct_report.level_times["direct"],
        "socket": _level_time(socket_plan, placement, ffactor, elem_bytes, topology),
        "node": _level_time(node_plan, placement, ffactor, elem_bytes, topology),
        "global": _level_time(global_plan, placement, ffactor, elem_bytes, topology),
    }
    hier_inter = _inter_node_bytes(global_plan, placement, ffactor, elem_bytes)
    direct_inter = direct_report.direct_inter_node_bytes
    reduction = (100.0 * (1.0 - hier_inter / direct_inter) if direct_inter else 0.0)
    report = VolumeReport(
        ffactor=ffactor, element_bytes=elem_bytes,
        direct_bytes=direct_report.direct_bytes,
        direct_inter_node_bytes=direct_inter,
        level_bytes=level_bytes,
        level_times=level_times,
        hier_inter_node_bytes=hier_inter,
        retained_bytes=[initial_contribs * unit, after_socket * unit,
                        after_node * unit],
        inter_node_reduction_pct=reduction,
    )
    return plan, report


def execute_plan(plan, partials: list[PartialResult]) -> dict[int, np.ndarray]:
    """Run the exchange: transfers are applied level by level, receivers sum
    incoming contributions in sender order; the result matches
    ``reduce_partials`` under the direct plan to rounding."""
    if not partials:
        raise ValueError("no partial results to execute the plan on")
    prec = partials[0].precision
    ff = partials[0].ffactor
    cdtype = compute_dtype(prec)
    held: dict[int, dict[int, np.ndarray]] = {}
    for part in sorted(partials, key=lambda p: p.owner):
        store = held.setdefault(part.owner, {})
        vals = part.values.astype(cdtype, copy=False)
        for i, e in enumerate(np.asarray(part.elements).tolist()):
            if e in store:
                store[e] = store[e] + vals[i]
            else:
                store[e] = vals[i].copy()
    for level in plan.levels:
        moved: list[tuple[int, int, np.ndarray]] = []
        for (s, r) in sorted(level.transfers):
            moved.append((s, r, level.transfers[(s, r)]))
        for s, r, elems in moved:
            src = held.get(s, {})
            dst = held.setdefault(r, {})
            for e in np.asarray(elems).tolist():
                if e not in src:
                    raise ValueError(
                        f"{level.level} plan expects process {s} to hold element {e}")
                contribution = src.pop(e)
                if e in dst:
                    dst[e] = dst[e] + contribution
                else:
                    dst[e] = contribution
    ownership = plan.ownership
    owned_universe = set()
    for elems in ownership.values():
        owned_universe.update(np.asarray(elems).tolist())
    out: dict[int, np.ndarray] = {}
    for pid in sorted(ownership):
        owned = np.asarray(ownership[pid])
        values = np.zeros((len(owned), ff), dtype=cdtype)
        store = held.get(pid, {})
        for i, e in enumerate(owned.tolist()):
            if e in store:
                values[i] = store.pop(e)
        out[pid] = values
    stranded = [(pid, e) for pid, store in held.items()
                for e in store if e in owned_universe]
    if stranded:
        raise ValueError(
            f"contributions left unrouted after the final level: {stranded[:5]}")
    return out


def estimate_makespan(t_kernel: float, t_local: float, t_global: float,
                      num_minibatches: int, overlap: bool) -> float:
    """Pipeline makespan for B minibatches.

    Without overlap every minibatch pays kernel + local + global serially.
    With overlap the global exchange of one minibatch hides behind the
    local work of the next, so steady state advances at
    max(kernel + local, global) per minibatch.
    """
    if min(t_kernel, t_local, t_global) < 0:
        raise ValueError("times must be nonnegative")
    if num_minibatches < 1:
        raise ValueError("need at least one minibatch")
    t_loc = t_kernel + t_local
    if not overlap:
        return num_minibatches * (t_loc + t_global)
    return t_loc + t_global + (num_minibatches - 1) * max(t_loc, t_global)
