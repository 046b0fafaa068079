"""Executable verification of the subset-selection approximation theory.

Works on small explicit set functions (ground sets up to 16 items, stored as
full value tables indexed by bitmask) so that optima, submodularity ratios
and both lower bounds can be brute-forced exactly:

* the per-block bound: the best block optimum is at least
  ``max(alpha / i, gamma_empty / z) * OPT`` for any partition into i blocks;
* the selection bound: the divide-and-conquer search returns a subset whose
  value is at least ``(1 - exp(-gamma_min))`` times that.

Ratios follow the orientation in which both equal exactly 1 for modular
functions; zero-denominator pairs are vacuous and skipped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

MAX_GROUND = 16  # brute-force enumeration guard
MAX_RATIO_GROUND = 12  # ratio minimization guard

_DENOM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class SetFunctionInstance:
    """A set function on {0..n-1} given by its full value table.

    ``values[mask]`` is the raw table; evaluation subtracts the empty-set
    value so instances are normalized. With ``monotone=True`` monotonicity
    is verified exhaustively at construction (n <= 12).
    """

    n: int
    values: np.ndarray
    monotone: bool = False

    def __post_init__(self):
        if not 1 <= self.n <= MAX_GROUND:
            raise ValueError(f"ground set size must be in [1, {MAX_GROUND}]")
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (1 << self.n,):
            raise ValueError(f"value table must have 2^{self.n} entries")
        object.__setattr__(self, "values", values)
        values.flags.writeable = False
        if self.monotone and self.n <= 12:
            for mask in range(1 << self.n):
                for bit in range(self.n):
                    if mask & (1 << bit):
                        continue
                    if values[mask | (1 << bit)] < values[mask] - 1e-12:
                        raise ValueError("monotone flag set on a non-monotone table")

    def __call__(self, mask: int) -> float:
        return float(self.values[mask] - self.values[0])

    @property
    def full_mask(self) -> int:
        return (1 << self.n) - 1


@dataclass(frozen=True)
class PartitionScheme:
    """Disjoint blocks (bitmasks) covering the ground set."""

    n: int
    blocks: tuple[int, ...]

    def __post_init__(self):
        union = 0
        for b in self.blocks:
            if b == 0:
                raise ValueError("empty block")
            if union & b:
                raise ValueError("blocks must be disjoint")
            union |= b
        if union != (1 << self.n) - 1:
            raise ValueError("blocks must cover the ground set")

    @classmethod
    def even(cls, n: int, i: int) -> "PartitionScheme":
        """Contiguous near-even split of {0..n-1} into i blocks."""
        if not 1 <= i <= n:
            raise ValueError(f"cannot split {n} items into {i} blocks")
        bounds = [round(j * n / i) for j in range(i + 1)]
        blocks = []
        for j in range(i):
            mask = 0
            for bit in range(bounds[j], bounds[j + 1]):
                mask |= 1 << bit
            blocks.append(mask)
        return cls(n, tuple(blocks))


@dataclass(frozen=True)
class Ratio:
    value: float
    degenerate: bool = False


@dataclass
class BoundReport:
    """All quantities entering the two lower bounds, brute-forced."""

    n: int
    budget: int
    block_count: int
    opt: float
    opt_witness: int
    block_best: list[float]
    gamma_empty: float
    alpha: float
    gamma_min: float
    achieved: float
    selected: int
    block_bound: float
    selected_bound: float

    def block_bound_holds(self, tol: float = 1e-9) -> bool:
        return max(self.block_best) >= self.block_bound - tol

    def selected_bound_holds(self, tol: float = 1e-9) -> bool:
        return self.achieved >= self.selected_bound - tol

    def to_json(self) -> str:
        payload = {
            "n": self.n,
            "budget": self.budget,
            "blocks": self.block_count,
            "opt": self.opt,
            "opt_witness": self.opt_witness,
            "block_best": self.block_best,
            "gamma_empty": self.gamma_empty,
            "alpha": self.alpha,
            "gamma_min": self.gamma_min,
            "achieved": self.achieved,
            "selected": self.selected,
            "block_bound": self.block_bound,
            "selected_bound": self.selected_bound,
            "block_bound_holds": self.block_bound_holds(),
            "selected_bound_holds": self.selected_bound_holds(),
        }
        return json.dumps(payload, separators=(",", ":"))


def bits_of(mask: int) -> list[int]:
    return [b for b in range(mask.bit_length()) if mask & (1 << b)]


def submasks(mask: int):
    """All submasks of ``mask``, including 0 and the mask itself."""
    sub = mask
    while True:
        yield sub
        if sub == 0:
            return
        sub = (sub - 1) & mask


def brute_force_opt(f: SetFunctionInstance, z: int) -> tuple[float, int]:
    """Exact maximum of f over subsets of size <= z, with a witness."""
    if f.n > MAX_GROUND:
        raise ValueError(f"refusing enumeration over {f.n} items")
    if z < 0:
        raise ValueError("budget must be >= 0")
    best_val, best_mask = f(0), 0
    for mask in range(1 << f.n):
        if mask.bit_count() > z:
            continue
        v = f(mask)
        if v > best_val:
            best_val, best_mask = v, mask
    return best_val, best_mask


def _denom_tol(f: SetFunctionInstance) -> float:
    return _DENOM_TOL * max(1.0, float(np.abs(f.values).max()))


_PROBE_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _probe_tables(n: int, l: int) -> tuple[np.ndarray, np.ndarray]:
    """Masks of all non-empty item sets of size <= l, plus their 0/1 rows."""
    key = (n, l)
    cached = _PROBE_CACHE.get(key)
    if cached is None:
        masks = []
        for size in range(1, min(l, n) + 1):
            for combo in combinations(range(n), size):
                mask = 0
                for b in combo:
                    mask |= 1 << b
                masks.append(mask)
        mask_arr = np.asarray(masks, dtype=np.int64)
        onehot = ((mask_arr[:, None] >> np.arange(n)) & 1).astype(np.float64)
        cached = (mask_arr, onehot)
        _PROBE_CACHE[key] = cached
    return cached


def gamma_ratio(f: SetFunctionInstance, u: int, l: int) -> Ratio:
    """Ratio of summed single-item gains to the joint gain, minimized over
    bases L inside ``u`` and disjoint probe sets M of size up to ``l``."""
    if f.n > MAX_RATIO_GROUND:
        raise ValueError(f"refusing ratio enumeration over {f.n} items")
    if l < 1:
        raise ValueError("l must be >= 1")
    tol = _denom_tol(f)
    probe_masks, probe_onehot = _probe_tables(f.n, l)
    best = None
    for base in submasks(u):
        f_base = float(f.values[base])
        marg = f.values[base | (1 << np.arange(f.n))] - f_base
        num = probe_onehot @ marg
        denom = f.values[base | probe_masks] - f_base
        valid = ((probe_masks & base) == 0) & (np.abs(denom) > tol)
        if not np.any(valid):
            continue
        local = float((num[valid] / denom[valid]).min())
        if best is None or local < best:
            best = local
    if best is None:
        return Ratio(1.0, degenerate=True)
    return Ratio(best)


def alpha_ratio(f: SetFunctionInstance) -> Ratio:
    """Minimum over chains u <= m and items v outside m of the marginal gain
    of v at u over its gain at m."""
    if f.n > MAX_RATIO_GROUND:
        raise ValueError(f"refusing ratio enumeration over {f.n} items")
    tol = _denom_tol(f)
    size = 1 << f.n
    masks = np.arange(size)
    best = None
    for v in range(f.n):
        bv = 1 << v
        without = masks[(masks & bv) == 0]
        marg = np.full(size, np.inf)
        marg[without] = f.values[without | bv] - f.values[without]
        # Subset-minimum sweep: after processing every bit, g[m] is the
        # minimum marginal of v over all submasks of m (v excluded).
        g = marg.copy()
        for bit in range(f.n):
            if bit == v:
                continue
            hi = masks[(masks & (1 << bit)) != 0]
            g[hi] = np.minimum(g[hi], g[hi ^ (1 << bit)])
        denom = marg[without]
        valid = np.abs(denom) > tol
        if not np.any(valid):
            continue
        ratios = g[without][valid] / denom[valid]
        v_best = float(ratios.min())
        if best is None or v_best < best:
            best = v_best
    if best is None:
        return Ratio(1.0, degenerate=True)
    return Ratio(best)


def gamma_min(f: SetFunctionInstance, partition: PartitionScheme, z: int) -> float:
    """Minimum gamma over block subsets one short of the budget.

    Blocks smaller than z-1 contribute their largest subsets instead, the
    only prefixes a within-block search can reach.
    """
    best = None
    for block in partition.blocks:
        items = bits_of(block)
        size = min(z - 1, len(items))
        for combo in combinations(items, size):
            u = 0
            for b in combo:
                u |= 1 << b
            r = gamma_ratio(f, u, z)
            if best is None or r.value < best:
                best = r.value
    return best if best is not None else 1.0


@dataclass(frozen=True)
class SelectParams:
    """Search effort knobs for the divide-and-conquer selection."""

    iterations: int | None = None  # None: scaled from the complexity bound
    seed_greedy: bool = True

    def resolve(self, z: int, n: int, i: int) -> int:
        if self.iterations is not None:
            return self.iterations
        return math.ceil(4 * math.e * z * z * n * (1 + math.log(max(i, 1)))) + 50


def _mutation_search(
    f: SetFunctionInstance,
    block: int,
    z: int,
    iterations: int,
    rng: np.random.Generator,
    seed_greedy: bool,
    stop_at: float | None = None,
) -> tuple[int, int]:
    """Archive-based bit-flip search within one block.

    The archive keeps the best solution found at every cardinality up to z.
    Returns (best mask, iterations run); with ``stop_at`` set, stops early
    once any archive value reaches it and reports the iteration count.
    """
    items = bits_of(block)
    p_flip = 1.0 / max(len(items), 1)
    archive: list[tuple[int, float] | None] = [None] * (z + 1)
    archive[0] = (0, f(0))

    def offer(mask: int) -> None:
        k = mask.bit_count()
        if k > z:
            return
        v = f(mask)
        if archive[k] is None or v > archive[k][1]:
            archive[k] = (mask, v)

    if seed_greedy:
        chosen = 0
        for _ in range(min(z, len(items))):
            base = f(chosen)
            gains = [(f(chosen | (1 << b)) - base, b) for b in items if not chosen & (1 << b)]
            chosen |= 1 << max(gains)[1]
            offer(chosen)

    def best_value() -> float:
        return max(entry[1] for entry in archive if entry is not None)

    it = 0
    while it < iterations:
        if stop_at is not None and best_value() >= stop_at:
            break
        it += 1
        filled = [entry for entry in archive if entry is not None]
        parent = filled[int(rng.integers(0, len(filled)))][0]
        child = parent
        flips = rng.random(len(items)) < p_flip
        for idx, b in enumerate(items):
            if flips[idx]:
                child ^= 1 << b
        offer(child)
    best = max((entry for entry in archive if entry is not None), key=lambda e: e[1])
    return best[0], it


def dc_subset_select(
    f: SetFunctionInstance,
    partition: PartitionScheme,
    z: int,
    params: SelectParams = SelectParams(),
    rng: np.random.Generator | int = 0,
) -> tuple[int, BoundReport]:
    """Block-wise search, merge of block winners, one final round on the
    union; returns the selected subset and a fully brute-forced bound report.

    Refuses non-monotone instances: the guarantees require monotonicity.
    """
    if not f.monotone:
        raise ValueError("dc_subset_select requires a monotone instance")
    if f.n > MAX_GROUND:
        raise ValueError(f"refusing enumeration over {f.n} items")
    if z < 1:
        raise ValueError("budget must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    i = len(partition.blocks)
    iters = params.resolve(z, f.n, i)

    winners = []
    for block in partition.blocks:
        mask, _ = _mutation_search(f, block, z, iters, rng, params.seed_greedy)
        winners.append(mask)
    union = 0
    for mask in winners:
        union |= mask
    final, _ = _mutation_search(f, union, z, iters, rng, params.seed_greedy)

    candidates = winners + [final]
    selected = max(candidates, key=f)

    opt, opt_witness = brute_force_opt(f, z)
    block_best = [brute_force_opt_sub(f, block, z) for block in partition.blocks]
    g_empty = gamma_ratio(f, 0, z)
    alpha = alpha_ratio(f)
    g_min = gamma_min(f, partition, z)
    block_bound = max(alpha.value / i, g_empty.value / z) * opt
    selected_bound = (1.0 - math.exp(-g_min)) * block_bound

    report = BoundReport(
        n=f.n,
        budget=z,
        block_count=i,
        opt=opt,
        opt_witness=opt_witness,
        block_best=block_best,
        gamma_empty=g_empty.value,
        alpha=alpha.value,
        gamma_min=g_min,
        achieved=f(selected),
        selected=selected,
        block_bound=block_bound,
        selected_bound=selected_bound,
    )
    return selected, report


def brute_force_opt_sub(f: SetFunctionInstance, block: int, z: int) -> float:
    """Exact maximum of f over subsets of one block with size <= z."""
    best = f(0)
    for sub in submasks(block):
        if sub.bit_count() <= z:
            best = max(best, f(sub))
    return best


def iterations_to_threshold(
    f: SetFunctionInstance,
    partition: PartitionScheme,
    z: int,
    rng: np.random.Generator | int = 0,
    cap: int = 200_000,
) -> int:
    """Iterations a pure mutation search needs until every block reaches the
    selection-bound threshold; used by the complexity trend check only."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    g_min = gamma_min(f, partition, z)
    total = 0
    for block in partition.blocks:
        target = (1.0 - math.exp(-g_min)) * brute_force_opt_sub(f, block, z)
        _, used = _mutation_search(
            f, block, z, cap, rng, seed_greedy=False, stop_at=target
        )
        total = max(total, used)
    return total


# ---------------------------------------------------------------------------
# Instance generators and file IO


def modular_instance(n: int, rng: np.random.Generator) -> SetFunctionInstance:
    weights = rng.uniform(0.1, 1.0, size=n)
    masks = np.arange(1 << n)
    bits = (masks[:, None] >> np.arange(n)) & 1
    return SetFunctionInstance(n, bits @ weights, monotone=True)


def coverage_instance(n: int, rng: np.random.Generator) -> SetFunctionInstance:
    """Weighted coverage: each item covers a random subset of a small universe."""
    universe = 2 * n
    weights = rng.uniform(0.1, 1.0, size=universe)
    covers = [
        int(np.sum(1 << np.flatnonzero(rng.random(universe) < 0.35)))
        for _ in range(n)
    ]
    values = np.zeros(1 << n)
    covered = np.zeros(1 << n, dtype=np.int64)
    for mask in range(1, 1 << n):
        low = mask & -mask
        covered[mask] = covered[mask ^ low] | covers[low.bit_length() - 1]
        cov = covered[mask]
        values[mask] = sum(weights[u] for u in range(universe) if cov & (1 << u))
    return SetFunctionInstance(n, values, monotone=True)


def facility_instance(
    n: int, rng: np.random.Generator, synergy: float = 4.0
) -> SetFunctionInstance:
    """Facility-location-style coverage plus pairwise synergy bonuses.

    The max-affinity term alone is submodular (both ratios 1); the synergy
    term is strong enough to push instances into the gamma < 1 regime while
    staying monotone.
    """
    clients = 2 * n
    affinity = rng.uniform(0.0, 1.0, size=(n, clients))
    bonus = rng.uniform(0.0, 1.0, size=(n, n)) * synergy
    bonus = np.triu(bonus, k=1)
    values = np.zeros(1 << n)
    best = np.zeros((1 << n, clients))
    pair = np.zeros(1 << n)
    for mask in range(1, 1 << n):
        low = mask & -mask
        item = low.bit_length() - 1
        prev = mask ^ low
        best[mask] = np.maximum(best[prev], affinity[item])
        extra = sum(
            bonus[min(item, j), max(item, j)] for j in bits_of(prev)
        )
        pair[mask] = pair[prev] + extra
        values[mask] = best[mask].sum() + pair[mask]
    return SetFunctionInstance(n, values, monotone=True)


def dip_instance(n: int, rng: np.random.Generator) -> SetFunctionInstance:
    """Deliberately non-monotone: a modular table with a penalized item."""
    weights = rng.uniform(0.1, 1.0, size=n)
    weights[int(rng.integers(0, n))] = -1.0
    masks = np.arange(1 << n)
    bits = (masks[:, None] >> np.arange(n)) & 1
    return SetFunctionInstance(n, bits @ weights, monotone=False)


FAMILIES = {
    "modular": modular_instance,
    "coverage": coverage_instance,
    "facility": facility_instance,
    "dip": dip_instance,
}

_FAMILY_TAGS = {"modular": 0, "coverage": 1, "facility": 2, "dip": 3}


def make_instance(family: str, n: int, seed: int) -> SetFunctionInstance:
    try:
        gen = FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown instance family {family!r}") from None
    return gen(n, np.random.default_rng(np.random.SeedSequence((_FAMILY_TAGS[family], n, seed))))


def save_instance(path: str | Path, f: SetFunctionInstance, budget: int) -> None:
    payload = {
        "n": f.n,
        "budget": budget,
        "monotone": f.monotone,
        "values": [float(v) for v in f.values],
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":")) + "\n")


def load_instance(path: str | Path) -> tuple[SetFunctionInstance, int]:
    payload = json.loads(Path(path).read_text())
    f = SetFunctionInstance(
        int(payload["n"]),
        np.asarray(payload["values"], dtype=np.float64),
        monotone=bool(payload["monotone"]),
    )
    return f, int(payload["budget"])
