"""Best-first branch-and-bound over binary variables."""

from __future__ import annotations

import heapq
import itertools
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..errors import NoIncumbent, NumericalFailure
from .instance import MipInstance
from .simplex import INFEASIBLE, ITERATION_LIMIT, OPTIMAL, UNBOUNDED, BoundedSimplex

INT_TOL = 1e-6
SNAPSHOT_BUDGET = 256 * 2**20  # bytes of cached tableaux


@dataclass
class MipSolution:
    """Result of :func:`solve_mip`.

    ``status`` is ``"optimal"``, ``"infeasible"`` or ``"iteration_limit"``
    (a node or time cap was hit with an incumbent in hand).
    """
    status: str
    x: np.ndarray | None
    objective: float
    best_bound: float
    nodes: int
    lp_iterations: int = 0
    names: list[str] = field(default_factory=list, repr=False)

    @property
    def gap(self) -> float:
        if self.x is None or not math.isfinite(self.best_bound):
            return math.inf
        return abs(self.objective - self.best_bound) / max(1.0, abs(self.objective))

    @property
    def values(self) -> dict[str, float]:
        if self.x is None:
            return {}
        return dict(zip(self.names, self.x.tolist()))

    def value(self, name: str) -> float:
        return float(self.x[self.names.index(name)])


@dataclass(order=True)
class _Node:
    bound: float
    depth_key: int
    seq: int
    lo: np.ndarray = field(compare=False)
    hi: np.ndarray = field(compare=False)
    parent: int = field(compare=False)
    basis: tuple = field(compare=False)


def solve_mip(instance: MipInstance, rel_gap: float = 1e-6, node_limit: int = 200_000,
              time_limit: float | None = None, lp_max_iter: int | None = None) -> MipSolution:
    """Minimise ``instance`` exactly (up to ``rel_gap``).

    Branching picks the most fractional binary, lowest index first, within
    the highest variable ``priority`` class that still has a fractional
    member (all classes are equal unless the model says otherwise).  After
    a branch the search plunges straight from the current tableau into the
    child named by the variable's ``direction`` hint (the rounding side by
    default); the sibling is queued.  When a
    plunge ends, the open node with the best bound is taken next (ties go
    to the deepest) and re-optimised with the dual simplex from its
    parent's cached tableau, else from the parent's basis.
    """
    form = instance.compile()
    names = [v.name for v in instance.variables]
    ints = np.flatnonzero(form.integer)
    prio = form.priority[ints] if form.priority is not None else np.zeros(ints.size, dtype=np.int64)
    hint = form.direction[ints] if form.direction is not None else np.zeros(ints.size, dtype=np.int64)
    lp = BoundedSimplex(form, lp_max_iter)
    status = lp.solve()
    iters = lp.iterations
    if status == INFEASIBLE:
        return MipSolution(INFEASIBLE, None, math.inf, math.inf, 1, iters, names)
    if status == UNBOUNDED:
        return MipSolution(UNBOUNDED, None, -math.inf, -math.inf, 1, iters, names)
    if status == ITERATION_LIMIT:
        raise NoIncumbent("root LP hit its iteration limit")

    t0 = time.monotonic()
    snap_size = max(lp.T.nbytes, 1)
    capacity = max(2, int(SNAPSHOT_BUDGET // snap_size))
    cache: OrderedDict[int, tuple] = OrderedDict()
    counter = itertools.count()

    best_x = None
    best_obj = math.inf
    nodes = 0
    heap: list[_Node] = []
    capped = False
    # the node whose LP is loaded in ``lp`` and already re-optimised
    current = (lp.lo[ints].copy(), lp.hi[ints].copy(), 0, next(counter), status)

    def out_of_budget():
        return nodes >= node_limit or (time_limit is not None and time.monotonic() - t0 > time_limit)

    while current is not None or heap:
        if current is None:
            node = heapq.heappop(heap)
            if node.bound >= _cutoff(best_obj, rel_gap):
                continue
            if out_of_budget():
                heapq.heappush(heap, node)
                capped = True
                break
            lo, hi, depth, seq = node.lo, node.hi, -node.depth_key, node.seq
            res_status = _warm_solve(lp, ints, lo, hi, cache, node)
            iters += lp.iterations
            if res_status == ITERATION_LIMIT:
                heapq.heappush(heap, node)
                capped = True
                break
        else:
            lo, hi, depth, seq, res_status = current
            current = None
        nodes += 1
        if res_status != OPTIMAL:
            continue
        x = lp.x()
        obj = lp.objective()
        if obj >= _cutoff(best_obj, rel_gap):
            continue
        xi = x[ints]
        frac = np.minimum(xi - np.floor(xi), np.ceil(xi) - xi)
        if frac.size == 0 or frac.max() <= INT_TOL:
            best_x = x.copy()
            best_x[ints] = np.round(xi)
            best_obj = obj
            continue
        k = _branch_index(frac, prio)
        val = xi[k]
        down_hi = hi.copy()
        down_hi[k] = math.floor(val)
        up_lo = lo.copy()
        up_lo[k] = math.ceil(val)
        children = [(lo, down_hi), (up_lo, hi)]
        if hint[k] > 0 or (hint[k] == 0 and val - math.floor(val) >= 0.5):
            children.reverse()
        (plo, phi), (slo, shi) = children
        cache[seq] = lp.snapshot()
        while len(cache) > capacity:
            cache.popitem(last=False)
        heapq.heappush(heap, _Node(obj, -(depth + 1), next(counter), slo, shi, seq, lp.basis_state()))
        if out_of_budget():
            heapq.heappush(heap, _Node(obj, -(depth + 1), next(counter), plo, phi, seq, lp.basis_state()))
            capped = True
            break
        try:
            lp.set_bounds(ints, plo, phi)
            res_status = lp.reoptimize()
        except NumericalFailure:
            lp.lo[ints], lp.hi[ints] = plo, phi
            res_status = lp.solve()
        iters += lp.iterations
        if res_status == ITERATION_LIMIT:
            heapq.heappush(heap, _Node(obj, -(depth + 1), next(counter), plo, phi, seq, lp.basis_state()))
            capped = True
            break
        current = (plo, phi, depth + 1, next(counter), res_status)

    bound = min([best_obj] + [n.bound for n in heap]) if capped else best_obj
    if best_x is None:
        if capped:
            raise NoIncumbent(f"limit reached after {nodes} nodes without an incumbent")
        return MipSolution(INFEASIBLE, None, math.inf, math.inf, nodes, iters, names)
    state = ITERATION_LIMIT if capped and _gap(best_obj, bound) > rel_gap else OPTIMAL
    return MipSolution(state, best_x, best_obj, bound, nodes, iters, names)


def _branch_index(frac: np.ndarray, prio: np.ndarray) -> int:
    """Most fractional binary of the highest fractional priority class, lowest index on ties."""
    open_ = frac > INT_TOL
    top = prio[open_].max()
    return int(np.argmax(np.where(open_ & (prio == top), frac, -1.0)))


def _warm_solve(lp: BoundedSimplex, ints, lo, hi, cache, node) -> str:
    try:
        snap = cache.get(node.parent)
        if snap is not None:
            cache.move_to_end(node.parent)
            lp.restore(snap)
            lp.set_bounds(ints, lo, hi)
        else:
            lp.lo[ints], lp.hi[ints] = lo, hi
            lp.load_basis(*node.basis)
        return lp.reoptimize()
    except NumericalFailure:
        # warm start went bad; solve the node from scratch
        lp.lo[ints], lp.hi[ints] = lo, hi
        return lp.solve()


def _cutoff(best: float, rel_gap: float) -> float:
    if not math.isfinite(best):
        return math.inf
    return best - rel_gap * max(1.0, abs(best))


def _gap(obj: float, bound: float) -> float:
    return abs(obj - bound) / max(1.0, abs(obj))
