"""Master-slave coordination of the inverter fleet.

The optimizer treats every inverter as an independent handle; operating a
real fleet that way would mean broadcasting one setpoint per unit every few
minutes. Units whose loss sensitivities are nearly equal are electrically
interchangeable, so they are folded into slave groups: the master keeps one
handle per group and each group's total is spread over its members in
proportion to their momentary reactive capability

    u_i = U_group * q_max_i / sum_j q_max_j,

which respects every unit's rating by construction (the group total is
clamped to the group capability first). Capability tracks the active output,
q_max = sqrt(s_rating^2 - p^2).

Groups are built by walking the inverters in feeder (breadth-first) order:
a unit joins the group of the nearest inverter-bearing ancestor node when
its gradient lies within a relative tolerance of that group's reference
gradient, otherwise it opens a new group. Members of a group therefore
always sit on one contiguous stretch of the feeder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .feeder import Feeder, OperatingPoint, pv_q_limit


@dataclass
class SlaveGroup:
    id: int
    leader: int                      # index of the reference unit
    members: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.members)


def group_inverters(feeder: Feeder, gradients: np.ndarray,
                    similarity_tol: float = 0.25) -> list[SlaveGroup]:
    """Partition the fleet by gradient similarity along the feeder.

    gradients holds one sensitivity per unit (feeder order), typically the
    reduced loss gradient at a representative operating point.
    """
    gradients = np.asarray(gradients, dtype=float)
    if gradients.shape != (len(feeder.pv_units),):
        raise ValueError("need exactly one gradient per inverter")
    node_rank = {nid: k for k, nid in enumerate(feeder.bfs_order)}
    order = sorted(range(len(feeder.pv_units)),
                   key=lambda i: node_rank[feeder.pv_units[i].node])
    by_node: dict[str, int] = {}      # node -> group id, for nodes hosting a grouped unit
    groups: list[SlaveGroup] = []
    for i in order:
        pv = feeder.pv_units[i]
        anc = pv.node
        gid = None
        while anc != feeder.source_node:
            anc = feeder.parent[anc][0]
            if anc in by_node:
                gid = by_node[anc]
                break
        if gid is not None:
            ref = gradients[groups[gid].leader]
            if abs(gradients[i] - ref) <= similarity_tol * abs(ref):
                groups[gid].members.append(i)
                by_node[pv.node] = gid
                continue
        g = SlaveGroup(id=len(groups), leader=i, members=[i])
        groups.append(g)
        by_node[pv.node] = g.id
    return groups


def partition_solution(groups: list[SlaveGroup], q: np.ndarray) -> np.ndarray:
    """Group totals of a per-unit setpoint vector (kvar)."""
    return np.array([float(np.sum(np.asarray(q)[g.members])) for g in groups])


def allocate_within_group(total_kvar: float, q_max: np.ndarray) -> np.ndarray:
    """Proportional-to-capability split of one group total."""
    q_max = np.asarray(q_max, dtype=float)
    cap = float(q_max.sum())
    if cap <= 0.0:
        return np.zeros_like(q_max)
    total = float(np.clip(total_kvar, -cap, cap))
    return total * q_max / cap


def update_capacity(feeder: Feeder, pv_p_kw: np.ndarray) -> np.ndarray:
    """Momentary reactive capability of every unit at active output pv_p_kw."""
    return np.array([pv_q_limit(pv.s_rating, p)
                     for pv, p in zip(feeder.pv_units, np.asarray(pv_p_kw, dtype=float))])


@dataclass
class DispatchRecord:
    group_id: int
    total_kvar: float                # requested group total
    issued_kvar: float               # after clamping to group capability
    setpoints: np.ndarray            # per member, kvar


def dispatch_fleet(feeder: Feeder, groups: list[SlaveGroup], q_target: np.ndarray,
                   op: OperatingPoint) -> tuple[np.ndarray, list[DispatchRecord]]:
    """Turn a per-unit optimizer solution into group-wise slave setpoints."""
    q_new = np.zeros(len(feeder.pv_units))
    records = []
    totals = partition_solution(groups, q_target)
    for g, total in zip(groups, totals):
        qm = op.q_max[g.members]
        alloc = allocate_within_group(total, qm)
        q_new[g.members] = alloc
        records.append(DispatchRecord(g.id, float(total), float(alloc.sum()), alloc))
    return q_new, records
