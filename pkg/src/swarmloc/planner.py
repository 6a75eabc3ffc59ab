"""Offline planner: groups, FLS-trees, the swarm-tree and dark relay FLSs.

The pipeline is

    partition_groups -> build_fls_tree (per group) -> build_swarm_tree
    -> insert_dark_fls -> emit_assignments

and :class:`SwarmPlanner` wraps it behind a scikit-learn style ``fit``.
Every anchor edge of a finished plan has a ground-truth length inside the
camera range ``[range_min, range_max]``; the check is exact.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_positive, check_positive_int, edge_length
from .exceptions import InputError, InvariantViolation, ParseError, UnbridgeableEdge

# Slack for validating plans read from disk.
EDGE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class FlsSpec:
    radius: float
    range_min: float
    range_max: float

    def __post_init__(self):
        check_positive(self.radius, "radius")
        if not 0 <= self.range_min < self.range_max or not math.isfinite(self.range_max):
            raise InputError(
                f"need 0 <= range_min < range_max, got {self.range_min}, {self.range_max}")

    def feasible(self, d: float) -> bool:
        return self.range_min <= d <= self.range_max


@dataclass
class FlsAssignment:
    fls_id: int
    swarm_id: int
    anchor_id: int | None
    children_ids: list[int]
    ground_truth_location: tuple[float, float, float]
    is_dark: bool = False

    def to_dict(self) -> dict:
        return {
            "fls_id": self.fls_id,
            "swarm_id": self.swarm_id,
            "anchor_id": self.anchor_id,
            "children_ids": list(self.children_ids),
            "ground_truth_location": list(self.ground_truth_location),
            "is_dark": self.is_dark,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlsAssignment":
        loc = tuple(float(c) for c in d["ground_truth_location"])
        if len(loc) != 3 or not all(math.isfinite(c) for c in loc):
            raise InputError(f"fls {d.get('fls_id')}: bad ground_truth_location")
        anchor = d["anchor_id"]
        return cls(
            fls_id=int(d["fls_id"]),
            swarm_id=int(d["swarm_id"]),
            anchor_id=None if anchor is None else int(anchor),
            children_ids=[int(c) for c in d["children_ids"]],
            ground_truth_location=loc,
            is_dark=bool(d.get("is_dark", False)),
        )


@dataclass(frozen=True)
class SwarmEdge:
    """``child`` swarm hangs off ``parent`` swarm through ``bridge``.

    ``bridge`` is the closest pair ``(parent-side fls_id, child-side fls_id)``.
    """

    child: int
    parent: int
    bridge: tuple[int, int]


@dataclass
class FlsTree:
    root: int
    members: list[int]
    # (child, anchor) pairs oriented away from ``root``
    edges: list[tuple[int, int]] = field(default_factory=list)

    def rerooted(self, new_root: int) -> "FlsTree":
        if new_root == self.root:
            return self
        adj: dict[int, list[int]] = {m: [] for m in self.members}
        for c, a in self.edges:
            adj[c].append(a)
            adj[a].append(c)
        edges = []
        seen = {new_root}
        queue = deque([new_root])
        while queue:
            u = queue.popleft()
            for v in sorted(adj[u]):
                if v not in seen:
                    seen.add(v)
                    edges.append((v, u))
                    queue.append(v)
        return FlsTree(new_root, list(self.members), edges)


@dataclass
class PlanDraft:
    """Intermediate state between tree building and dark-FLS insertion."""

    points: np.ndarray
    trees: list[FlsTree]  # indexed by swarm id
    swarm_edges: list[SwarmEdge]
    group_count: int
    meta: dict = field(default_factory=dict)


@dataclass
class Plan:
    spec: FlsSpec
    assignments: list[FlsAssignment]
    group_count: int
    swarm_edges: list[SwarmEdge]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {a.fls_id: a for a in self.assignments}

    def __getitem__(self, fls_id) -> FlsAssignment:
        return self._by_id[fls_id]

    def __len__(self):
        return len(self.assignments)

    @property
    def fls_ids(self) -> list[int]:
        return [a.fls_id for a in self.assignments]

    @property
    def bright(self) -> list[FlsAssignment]:
        return [a for a in self.assignments if not a.is_dark]

    @property
    def dark(self) -> list[FlsAssignment]:
        return [a for a in self.assignments if a.is_dark]

    @property
    def roots(self) -> list[int]:
        return [a.fls_id for a in self.assignments if a.anchor_id is None]

    @property
    def n_swarms(self) -> int:
        return len({a.swarm_id for a in self.assignments})

    def ground_truth(self, ids=None) -> np.ndarray:
        ids = self.fls_ids if ids is None else ids
        return np.array([self._by_id[i].ground_truth_location for i in ids], dtype=np.float64)

    def summary(self) -> dict:
        return {
            "fls_total": len(self.assignments),
            "fls_bright": len(self.bright),
            "fls_dark": len(self.dark),
            "group_count": self.group_count,
            "swarm_count": self.n_swarms,
            "swarm_edges": len(self.swarm_edges),
        }

    def to_dict(self) -> dict:
        return {
            "spec": {"radius": self.spec.radius, "range_min": self.spec.range_min,
                     "range_max": self.spec.range_max},
            "group_count": self.group_count,
            "assignments": [a.to_dict() for a in self.assignments],
            "swarm_edges": [{"child": e.child, "parent": e.parent, "bridge": list(e.bridge)}
                            for e in self.swarm_edges],
            "meta": self.meta,
        }

    def __eq__(self, other):
        if not isinstance(other, Plan):
            return NotImplemented
        return self.to_dict() == other.to_dict()


# ---------------------------------------------------------------------------
# Grouping and trees


def partition_groups(points, group_size: int) -> list[np.ndarray]:
    """Split point indices into spatially compact groups of at most ``group_size``.

    Repeatedly seeds a group at the lowest unassigned index and fills it with
    the seed's nearest unassigned points (ties go to the lower index).
    """
    pts = check_points(points)
    group_size = check_positive_int(group_size, "group_size")
    n = len(pts)
    unassigned = np.arange(n)
    groups = []
    while len(unassigned):
        seed = unassigned[0]
        diff = pts[unassigned] - pts[seed]
        d2 = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((unassigned, d2))
        take = order[:group_size]
        groups.append(np.sort(unassigned[take]))
        mask = np.ones(len(unassigned), dtype=bool)
        mask[take] = False
        unassigned = unassigned[mask]
    return groups


def _kruskal(n_nodes, edges):
    """Kruskal over pre-sorted ``(i, j)`` local-index edges; returns accepted edges."""
    parent = list(range(n_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    accepted = []
    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
            accepted.append((i, j))
            if len(accepted) == n_nodes - 1:
                break
    return accepted


def _orient(members: list[int], undirected: list[tuple[int, int]]) -> list[FlsTree]:
    """Split an undirected forest into trees rooted at their lowest member."""
    adj: dict[int, list[int]] = {m: [] for m in members}
    for a, b in undirected:
        adj[a].append(b)
        adj[b].append(a)
    seen: set[int] = set()
    trees = []
    for root in sorted(members):
        if root in seen:
            continue
        seen.add(root)
        comp, edges = [root], []
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in sorted(adj[u]):
                if v not in seen:
                    seen.add(v)
                    comp.append(v)
                    edges.append((v, u))
                    queue.append(v)
        trees.append(FlsTree(root, sorted(comp), edges))
    return trees


def build_fls_tree(group, points, spec: FlsSpec) -> list[FlsTree]:
    """Minimum spanning forest of ``group`` over range-feasible edges.

    Candidate edges have ground-truth length in ``[range_min, range_max]``;
    ties break on ``(length, min id, max id)``. Each connected component
    becomes one tree rooted at its lowest index.
    """
    members = sorted(int(i) for i in group)
    if not members:
        raise InputError("empty group")
    pts = np.asarray(points, dtype=np.float64)
    local = pts[members]
    if len(members) > 1:
        # Widen the kd-tree radius slightly; the exact test below decides.
        pairs = cKDTree(local).query_pairs(spec.range_max * (1 + 1e-9), output_type="ndarray")
    else:
        pairs = np.empty((0, 2), dtype=np.int64)
    cand = []
    for i, j in pairs.tolist():
        d = edge_length(local[i], local[j])
        if spec.feasible(d):
            a, b = members[i], members[j]
            cand.append((d, min(a, b), max(a, b), i, j))
    cand.sort()
    accepted = _kruskal(len(members), [(i, j) for *_, i, j in cand])
    return _orient(members, [(members[i], members[j]) for i, j in accepted])


def _component_min_distances(points: np.ndarray, labels: np.ndarray, n_comp: int,
                             chunk: int = 1024) -> np.ndarray:
    """``C[a, b]`` = smallest point distance between components a and b."""
    order = np.argsort(labels, kind="stable")
    sorted_pts = points[order]
    starts = np.searchsorted(labels[order], np.arange(n_comp))
    per_point = np.empty((len(points), n_comp))
    for lo in range(0, len(points), chunk):
        block = cdist(sorted_pts[lo:lo + chunk], sorted_pts)
        per_point[lo:lo + chunk] = np.minimum.reduceat(block, starts, axis=1)
    C = np.minimum.reduceat(per_point, starts, axis=0)
    np.fill_diagonal(C, np.inf)
    return C


def _closest_pair(ia: list[int], ib: list[int], points: np.ndarray) -> tuple[float, int, int]:
    best = None
    for a in ia:
        for b in ib:
            key = (edge_length(points[a], points[b]), min(a, b), max(a, b), a, b)
            if best is None or key < best:
                best = key
    return best[0], best[3], best[4]


def build_swarm_tree(components: list[list[int]], points) -> list[SwarmEdge]:
    """Minimum spanning tree over components with single-linkage distances.

    ``components[k]`` lists the fls ids of swarm ``k``. The swarm holding the
    lowest fls id is the root; each edge records the closest bridge pair.
    """
    pts = np.asarray(points, dtype=np.float64)
    n_comp = len(components)
    if n_comp == 0:
        raise InputError("need at least one component")
    if n_comp == 1:
        return []
    labels = np.full(len(pts), -1, dtype=np.int64)
    for k, comp in enumerate(components):
        labels[list(comp)] = k
    used = labels >= 0
    sub_ids = np.flatnonzero(used)
    C = _component_min_distances(pts[sub_ids], labels[sub_ids], n_comp)

    iu, ju = np.triu_indices(n_comp, k=1)
    w = C[iu, ju]
    order = np.lexsort((ju, iu, w))
    accepted = _kruskal(n_comp, zip(iu[order].tolist(), ju[order].tolist()))

    adj: dict[int, list[int]] = {k: [] for k in range(n_comp)}
    for a, b in accepted:
        adj[a].append(b)
        adj[b].append(a)
    root = min(range(n_comp), key=lambda k: min(components[k]))
    edges = []
    seen = {root}
    queue = deque([root])
    while queue:
        p = queue.popleft()
        for c in sorted(adj[p]):
            if c in seen:
                continue
            seen.add(c)
            _, a, b = _closest_pair(sorted(components[p]), sorted(components[c]), pts)
            edges.append(SwarmEdge(child=c, parent=p, bridge=(a, b)))
            queue.append(c)
    return edges


def _perpendicular(u: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(u))
    if n == 0:
        return np.array([1.0, 0.0, 0.0])
    u = u / n
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(u)))] = 1.0
    p = axis - (axis @ u) * u
    return p / np.linalg.norm(p)


def relay_positions(a, b, spec: FlsSpec) -> list[np.ndarray]:
    """Dark relay positions that make the bridge ``a -> b`` range-feasible.

    Returns the relays in order from ``a`` to ``b`` (empty when the bridge is
    already feasible).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = edge_length(a, b)
    if spec.feasible(d):
        return []
    if d < spec.range_min:
        h = 0.5 * (spec.range_min + spec.range_max)
        off = math.sqrt(h * h - 0.25 * d * d)
        relay = 0.5 * (a + b) + off * _perpendicular(b - a)
        chain = [relay]
    else:
        k = math.ceil(d / spec.range_max) - 1
        while True:
            chain = [a + (b - a) * (s / (k + 1)) for s in range(1, k + 1)]
            hops = [a, *chain, b]
            lengths = [edge_length(p, q) for p, q in zip(hops, hops[1:])]
            if max(lengths) <= spec.range_max:
                break
            k += 1  # float rounding pushed a hop past range_max
    hops = [a, *chain, b]
    for p, q in zip(hops, hops[1:]):
        if not spec.feasible(edge_length(p, q)):
            raise UnbridgeableEdge(
                f"bridge of length {d:.6g} cannot be relayed within "
                f"[{spec.range_min}, {spec.range_max}]")
    return chain


def insert_dark_fls(draft: PlanDraft, spec: FlsSpec) -> Plan:
    """Connect all swarms into one anchor tree, adding dark relays where needed.

    Each child swarm is re-rooted at its bridge FLS, which then anchors on the
    last relay of the chain (or directly on the parent's bridge FLS). Relays
    take fresh ids after all bright ids and join the child swarm.
    """
    points = np.asarray(draft.points, dtype=np.float64)
    n_bright = len(points)
    trees = list(draft.trees)
    anchors: dict[int, int | None] = {}
    swarm_of: dict[int, int] = {}
    positions: dict[int, np.ndarray] = {i: points[i] for i in range(n_bright)}
    dark: set[int] = set()

    for e in draft.swarm_edges:
        trees[e.child] = trees[e.child].rerooted(e.bridge[1])
    for sid, tree in enumerate(trees):
        for m in tree.members:
            swarm_of[m] = sid
        anchors[tree.root] = None
        for c, a in tree.edges:
            anchors[c] = a

    next_id = n_bright
    for e in sorted(draft.swarm_edges, key=lambda e: e.child):
        pa, cb = e.bridge
        prev = pa
        for pos in relay_positions(points[pa], points[cb], spec):
            rid = next_id
            next_id += 1
            positions[rid] = pos
            anchors[rid] = prev
            swarm_of[rid] = e.child
            dark.add(rid)
            prev = rid
        anchors[cb] = prev

    ids = list(range(next_id))
    assignments = emit_assignments_from(ids, anchors, swarm_of, positions, dark)
    plan = Plan(spec=spec, assignments=assignments, group_count=draft.group_count,
                swarm_edges=list(draft.swarm_edges), meta=dict(draft.meta))
    validate_plan(plan)
    return plan


def emit_assignments_from(ids, anchors, swarm_of, positions, dark) -> list[FlsAssignment]:
    children: dict[int, list[int]] = {i: [] for i in ids}
    for i in ids:
        if anchors[i] is not None:
            children[anchors[i]].append(i)
    return [
        FlsAssignment(
            fls_id=i,
            swarm_id=swarm_of[i],
            anchor_id=anchors[i],
            children_ids=sorted(children[i]),
            ground_truth_location=tuple(float(c) for c in positions[i]),
            is_dark=i in dark,
        )
        for i in ids
    ]


def emit_assignments(plan: Plan) -> list[FlsAssignment]:
    """Per-FLS inputs for the online protocol, with children derived from anchors."""
    anchors = {a.fls_id: a.anchor_id for a in plan.assignments}
    swarm_of = {a.fls_id: a.swarm_id for a in plan.assignments}
    positions = {a.fls_id: a.ground_truth_location for a in plan.assignments}
    dark = {a.fls_id for a in plan.assignments if a.is_dark}
    return emit_assignments_from(plan.fls_ids, anchors, swarm_of, positions, dark)


def plan_swarm(points, spec: FlsSpec, group_size: int, meta: dict | None = None) -> Plan:
    """Run the full planning pipeline on a ground-truth point cloud."""
    pts = check_points(points)
    groups = partition_groups(pts, group_size)
    forests = [build_fls_tree(g, pts, spec) for g in groups]
    trees = sorted((t for forest in forests for t in forest), key=lambda t: min(t.members))
    swarm_edges = build_swarm_tree([t.members for t in trees], pts)
    meta = dict(meta or {})
    meta.setdefault("group_size", int(group_size))
    draft = PlanDraft(points=pts, trees=trees, swarm_edges=swarm_edges,
                      group_count=len(groups), meta=meta)
    return insert_dark_fls(draft, spec)


# ---------------------------------------------------------------------------
# Validation and persistence


def validate_plan(plan: Plan, tol: float = 0.0) -> None:
    """Raise :class:`InvariantViolation` if ``plan`` is not a well-formed plan."""
    by_id: dict[int, FlsAssignment] = {}
    for a in plan.assignments:
        if a.fls_id in by_id:
            raise InvariantViolation("unique fls_id", a.fls_id)
        by_id[a.fls_id] = a
    if not by_id:
        raise InvariantViolation("non-empty", None, "plan has no assignments")
    if plan.group_count < 1:
        raise InvariantViolation("group_count", None, f"got {plan.group_count}")

    for a in plan.assignments:
        if a.anchor_id is not None and a.anchor_id not in by_id:
            raise InvariantViolation("anchor exists", a.fls_id, f"unknown anchor {a.anchor_id}")
        if a.anchor_id == a.fls_id:
            raise InvariantViolation("acyclic", a.fls_id, "anchors itself")

    depth: dict[int, int] = {}
    for start in by_id:
        path, on_path = [], set()
        cur = start
        while cur is not None and cur not in depth:
            if cur in on_path:
                raise InvariantViolation("acyclic", cur, "anchor chain loops")
            on_path.add(cur)
            path.append(cur)
            cur = by_id[cur].anchor_id
        base = -1 if cur is None else depth[cur]
        for k, node in enumerate(reversed(path), start=1):
            depth[node] = base + k

    spec = plan.spec
    for a in plan.assignments:
        if a.anchor_id is None:
            continue
        d = edge_length(a.ground_truth_location, by_id[a.anchor_id].ground_truth_location)
        if not (spec.range_min - tol <= d <= spec.range_max + tol):
            raise InvariantViolation(
                "edge range", a.fls_id,
                f"anchor edge to {a.anchor_id} has length {d!r}, outside "
                f"[{spec.range_min}, {spec.range_max}]")

    expected: dict[int, list[int]] = {i: [] for i in by_id}
    for a in plan.assignments:
        if a.anchor_id is not None:
            expected[a.anchor_id].append(a.fls_id)
    for a in plan.assignments:
        if sorted(a.children_ids) != sorted(expected[a.fls_id]):
            raise InvariantViolation("children", a.fls_id,
                                     f"children {a.children_ids} != {sorted(expected[a.fls_id])}")

    roots = [i for i, a in by_id.items() if a.anchor_id is None]
    if len(roots) != 1:
        raise InvariantViolation("connected", roots[1] if len(roots) > 1 else None,
                                 f"expected exactly one root, found {len(roots)}")

    # Within a swarm, exactly one member anchors outside it (or nowhere).
    entries: dict[int, list[int]] = {}
    for a in plan.assignments:
        anchor_swarm = None if a.anchor_id is None else by_id[a.anchor_id].swarm_id
        if anchor_swarm != a.swarm_id:
            entries.setdefault(a.swarm_id, []).append(a.fls_id)
    for sid in {a.swarm_id for a in plan.assignments}:
        got = entries.get(sid, [])
        if len(got) != 1:
            raise InvariantViolation("swarm tree", got[1] if len(got) > 1 else None,
                                     f"swarm {sid} has {len(got)} roots")
    sids = {a.swarm_id for a in plan.assignments}
    if len(plan.swarm_edges) != len(sids) - 1:
        raise InvariantViolation("swarm edges", None,
                                 f"{len(plan.swarm_edges)} edges for {len(sids)} swarms")
    parent_of = {}
    for e in plan.swarm_edges:
        if e.child not in sids or e.parent not in sids or e.child in parent_of:
            raise InvariantViolation("swarm edges", None, f"bad swarm edge {e}")
        parent_of[e.child] = e.parent
    for s in sids:
        seen = set()
        while s in parent_of:
            if s in seen:
                raise InvariantViolation("swarm edges", None, "swarm edges contain a cycle")
            seen.add(s)
            s = parent_of[s]


def plan_to_json(plan: Plan) -> str:
    return json.dumps(plan.to_dict(), indent=1) + "\n"


def plan_from_dict(doc: dict) -> Plan:
    try:
        spec = FlsSpec(**{k: float(doc["spec"][k]) for k in ("radius", "range_min", "range_max")})
        assignments = [FlsAssignment.from_dict(a) for a in doc["assignments"]]
        swarm_edges = [SwarmEdge(int(e["child"]), int(e["parent"]),
                                 (int(e["bridge"][0]), int(e["bridge"][1])))
                       for e in doc["swarm_edges"]]
        group_count = int(doc.get("group_count", doc.get("meta", {}).get("group_count", 1)))
        meta = dict(doc.get("meta", {}))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ParseError(f"malformed plan document: {exc!r}") from exc
    plan = Plan(spec, assignments, group_count, swarm_edges, meta)
    validate_plan(plan, tol=EDGE_TOLERANCE)
    return plan


def save_plan(plan: Plan, path) -> None:
    with open(path, "w") as fh:
        fh.write(plan_to_json(plan))


def load_plan(path) -> Plan:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, line=exc.lineno, path=path) from exc
    return plan_from_dict(doc)


# ---------------------------------------------------------------------------
# Estimator front end


class SwarmPlanner(ClusterMixin, BaseEstimator):
    """Plan swarms, anchor trees and dark relays for a ground-truth point cloud.

    Parameters
    ----------
    fls_radius : float, default=0.02
        Physical radius of one FLS in meters.
    range_min : float, default=0.05
        Shortest distance the positioning camera can measure (blind range).
    range_max : float, default=0.6
        Longest distance allowed for an anchor edge.
    group_size : int, default=25
        Target number of FLSs per group (``G``).

    Attributes
    ----------
    plan_ : Plan
        The validated plan, bright FLSs first in input order.
    labels_ : ndarray of shape (n_samples,)
        Swarm id of every input point.
    n_groups_ : int
        Number of groups ``nG``.
    n_swarms_ : int
        Number of swarms (groups split further wherever the camera range
        disconnects them).
    n_dark_ : int
        Number of dark relay FLSs inserted.
    """

    def __init__(self, fls_radius=0.02, range_min=0.05, range_max=0.6, group_size=25):
        self.fls_radius = fls_radius
        self.range_min = range_min
        self.range_max = range_max
        self.group_size = group_size

    def fit(self, X, y=None, meta=None):
        """Build the plan.

        Parameters
        ----------
        X : array-like of shape (n_samples, 3)
            Ground-truth coordinates in meters.
        y : ignored
        meta : dict, optional
            Provenance recorded in the plan (mesh path, sampling seed, ...).

        Returns
        -------
        self : SwarmPlanner
        """
        X = check_points(X)
        spec = FlsSpec(self.fls_radius, self.range_min, self.range_max)
        self.plan_ = plan_swarm(X, spec, self.group_size, meta=meta)
        bright = self.plan_.assignments[:len(X)]
        self.labels_ = np.array([a.swarm_id for a in bright], dtype=np.int64)
        self.n_groups_ = self.plan_.group_count
        self.n_swarms_ = self.plan_.n_swarms
        self.n_dark_ = len(self.plan_.dark)
        self.n_features_in_ = 3
        return self

    @property
    def assignments_(self) -> list[FlsAssignment]:
        check_is_fitted(self, "plan_")
        return self.plan_.assignments
