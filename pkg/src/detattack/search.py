"""The attack optimizer: a two-member evolutionary search over sign-valued
perturbations, driven by random square-patch sampling with a halving size
schedule and a divide-and-conquer genetic refinement on patch quadrants.

Per iteration the two population slots spawn candidates whose signs are
flipped per channel inside a uniformly sampled patch; if any patch quadrant
overlaps a detection, each quadrant is refined by a small crossover/mutation
loop (winner by patch-local fitness, loser evolves), the quadrant winners
are merged and refined once more over the whole patch, and each member
installs whichever refinement scored best. A candidate replaces its slot
only on strict improvement of the global best fitness, so the best-fitness
series in the trace never decreases. Every oracle call consumes exactly one
unit of budget and appends exactly one trace record.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .detection import BoundingBox, Detection, GroundTruthObject, MatchResult, match_detections
from .initpop import Perturbation
from .objective import FitnessWeights, SubFitness, individual_fitness, subcomponent_fitness
from .oracle import BudgetExhausted, ImageTensor, OracleUnavailable, detect_clipped

VARIANTS = ("ga", "gars", "garsdc")

EVENT_RS = "rs"
EVENT_DC = "dc"
EVENT_MERGE = "merge"


@dataclass(frozen=True)
class PatchIndex:
    """A rectangular pixel region; ``r``/``s`` are the x/y offsets.

    Sampled patches are squares; quadrant splits of odd sides produce
    near-squares whose sides differ by one pixel.
    """

    r: int
    s: int
    a: int
    b: int | None = None

    def __post_init__(self):
        if self.b is None:
            object.__setattr__(self, "b", self.a)
        if self.r < 0 or self.s < 0 or self.a < 1 or self.b < 1:
            raise ValueError(f"invalid patch {self}")

    def validate_within(self, width: int, height: int) -> None:
        if self.r + self.a > width or self.s + self.b > height:
            raise ValueError(f"patch {self} exceeds image bounds {width}x{height}")

    def slices(self) -> tuple[slice, slice]:
        return slice(self.s, self.s + self.b), slice(self.r, self.r + self.a)

    def as_box(self) -> BoundingBox:
        return BoundingBox(self.r, self.s, self.r + self.a, self.s + self.b)

    def astuple(self) -> tuple[int, int, int, int]:
        return (self.r, self.s, self.a, self.b)


@dataclass
class Population:
    """Exactly two perturbations plus their cached fitness values."""

    members: tuple[Perturbation, Perturbation]
    fitness: list[float | None] = field(default_factory=lambda: [None, None])

    def __post_init__(self):
        if len(self.members) != 2 or len(self.fitness) != 2:
            raise ValueError("population size is fixed at 2")


@dataclass(frozen=True)
class GAParams:
    cr: float = 0.8
    mr: float = 0.3
    t_dc: int = 4
    t_max: int = 4000
    milestones: tuple[int, ...] = (20, 100, 400, 1000, 2000)

    def __post_init__(self):
        if not 0 <= self.cr <= 1 or not 0 <= self.mr <= 1:
            raise ValueError("rates must lie in [0, 1]")
        if self.t_dc < 1 or self.t_max < 0:
            raise ValueError("t_dc must be >= 1 and t_max >= 0")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")


@dataclass(frozen=True)
class TraceRecord:
    query: int
    best_fitness: float
    event: str
    patch: tuple[int, int, int, int] | None

    def to_json(self) -> str:
        return json.dumps(
            {
                "query": self.query,
                "best_fitness": self.best_fitness,
                "event": self.event,
                "patch": list(self.patch) if self.patch is not None else None,
            },
            separators=(",", ":"),
        )


@dataclass
class AttackTrace:
    records: list[TraceRecord]
    best_fitness: float | None
    best_delta: Perturbation | None
    best_detections: list[Detection]
    best_match: MatchResult | None
    success: bool
    error: str | None = None

    @property
    def queries(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(rec.to_json() + "\n" for rec in self.records)


def side_length(
    width: int,
    height: int,
    queries_used: int,
    milestones: tuple[int, ...] = GAParams().milestones,
) -> int:
    """Patch side: 5% of the short image side, halved at each milestone
    already crossed, never below 4."""
    base = round(0.05 * min(width, height))
    crossings = sum(1 for m in milestones if queries_used >= m)
    return max(4, round(base / 2**crossings))


def random_subset_step(
    pop: Population, rng: np.random.Generator, a: int
) -> tuple[Population, PatchIndex]:
    """Sample a patch uniformly and flip each member's signs inside it.

    One sign is drawn per member and channel, so a candidate differs from
    its parent only inside the patch and only by sign.
    """
    h, w, c = pop.members[0].data.shape
    if a > w or a > h:
        raise ValueError(f"patch side {a} exceeds image {w}x{h}")
    r = int(rng.integers(0, w - a + 1))
    s = int(rng.integers(0, h - a + 1))
    patch = PatchIndex(r, s, a)
    sl = patch.slices()
    candidates = []
    for member in pop.members:
        rho = rng.choice(np.array([-1.0, 1.0]), size=c)
        data = member.data.copy()
        data[sl] = data[sl] * rho
        candidates.append(Perturbation(data, member.epsilon))
    return Population((candidates[0], candidates[1])), patch


def partition_patch(patch: PatchIndex) -> list[PatchIndex]:
    """Split a patch into 4 quadrants that tile it exactly.

    Even sides give equal squares; odd sides split floor/ceil so quadrant
    sides differ by at most one pixel per axis.
    """
    if patch.a < 2 or patch.b < 2:
        raise ValueError(f"patch {patch} too small to partition")
    ax0 = patch.a // 2
    ay0 = patch.b // 2
    ax1, ay1 = patch.a - ax0, patch.b - ay0
    r, s = patch.r, patch.s
    return [
        PatchIndex(r, s, ax0, ay0),
        PatchIndex(r + ax0, s, ax1, ay0),
        PatchIndex(r, s + ay0, ax0, ay1),
        PatchIndex(r + ax0, s + ay0, ax1, ay1),
    ]


@dataclass
class Evaluation:
    """One oracle response folded into fitness values."""

    detections: list[Detection]
    match: MatchResult
    fitness: float
    subfits: list[SubFitness]

    @property
    def tp_count(self) -> int:
        return len(self.match.tp_indices)


def evaluate_candidate(
    oracle,
    image: ImageTensor,
    delta: np.ndarray,
    gts: list[GroundTruthObject],
    weights: FitnessWeights,
    regions: list[PatchIndex] = (),
) -> Evaluation:
    """One budgeted query: detect, match against the clean ground truth and
    compute the individual fitness plus one sub-fitness per region.

    All sub-fitness values are derived from the same response, so a
    divide-and-conquer pass costs one query per candidate, never per region.
    """
    dets = detect_clipped(oracle, image, delta)
    match = match_detections(dets, gts)
    fit = individual_fitness(dets, match, weights)
    size = (image.width, image.height)
    subs = [
        subcomponent_fitness(dets, match, reg.as_box(), weights, size)
        for reg in regions
    ]
    return Evaluation(dets, match, fit.value, subs)


class _CappedOracle:
    """Limits one refinement run to a pre-allocated share of the budget."""

    def __init__(self, inner, cap: int):
        self.inner = inner
        self.cap = cap
        self.used = 0

    def detect(self, image: ImageTensor) -> list[Detection]:
        if self.used >= self.cap:
            raise BudgetExhausted(f"refinement share of {self.cap} queries used up")
        dets = self.inner.detect(image)
        self.used += 1
        return dets


@dataclass
class DcResult:
    """Outcome of one refinement run on a single region."""

    best_content: list[np.ndarray | None]
    best_fitness: list[float | None]
    best_eval: list[Evaluation | None]
    events: list[tuple[str, tuple[int, int, int, int]]]

    @property
    def queries(self) -> int:
        return len(self.events)


def dc_ga(
    image: ImageTensor,
    members: list[np.ndarray],
    patch: PatchIndex,
    rounds: int,
    oracle,
    gts: list[GroundTruthObject],
    weights: FitnessWeights,
    params: GAParams,
    rng: np.random.Generator,
    event: str = EVENT_DC,
    entry: list[tuple[SubFitness, float, Evaluation | None]] | None = None,
) -> DcResult:
    """Genetic refinement of one patch region.

    Both members are evaluated on entry (one query each) unless the caller
    passes ``entry`` sub-fitness/fitness pairs it already computed from the
    same member states, in which case those are reused without new queries.
    The loop exits immediately if neither sub-fitness is relevant. Each
    round the member with the lower patch-local fitness copies patch
    elements from the winner with probability ``cr`` and sign-flips its own
    with probability ``mr`` (the winner is never touched), then both are
    re-evaluated. Returns the best-ever individual fitness and patch content
    per member; on budget exhaustion the best so far is returned.
    """
    work = [np.array(m, dtype=np.float64) for m in members]
    sl = patch.slices()
    result = DcResult([None, None], [None, None], [None, None], [])
    subs: list[SubFitness | None] = [None, None]
    # The oracle is deterministic, so a member whose state is unchanged
    # since its last evaluation needs no fresh query.
    dirty = [entry is None, entry is None]

    def offer(i: int, fitness: float, sub: SubFitness, ev: Evaluation | None) -> None:
        subs[i] = sub
        if result.best_fitness[i] is None or fitness > result.best_fitness[i]:
            result.best_fitness[i] = fitness
            result.best_content[i] = work[i][sl].copy()
            result.best_eval[i] = ev

    def step(i: int) -> None:
        if not dirty[i]:
            return
        ev = evaluate_candidate(oracle, image, work[i], gts, weights, [patch])
        result.events.append((event, patch.astuple()))
        dirty[i] = False
        offer(i, ev.fitness, ev.subfits[0], ev)

    try:
        if entry is not None:
            for i, (sub, fitness, ev) in enumerate(entry):
                offer(i, fitness, sub, ev)
        else:
            for i in (0, 1):
                step(i)
        for _ in range(rounds):
            s0, s1 = subs[0], subs[1]
            if not s0.relevant and not s1.relevant:
                break
            # Ties go to member 0, for reproducibility.
            winner, loser = (1, 0) if s1.sort_key() > s0.sort_key() else (0, 1)
            region = work[loser][sl]
            cross = rng.random(size=region.shape) < params.cr
            region[cross] = work[winner][sl][cross]
            mutate = rng.random(size=region.shape) < params.mr
            region[mutate] = -region[mutate]
            dirty[loser] = True
            for i in (0, 1):
                step(i)
    except BudgetExhausted:
        pass
    return result


def attack(
    image: ImageTensor,
    gts: list[GroundTruthObject],
    oracle,
    init: tuple[Perturbation, Perturbation],
    params: GAParams = GAParams(),
    weights: FitnessWeights = FitnessWeights(),
    rng: np.random.Generator | int = 0,
    variant: str = "garsdc",
    parallel_quadrants: bool = False,
) -> tuple[Perturbation, AttackTrace]:
    """Run the budgeted attack loop and return the best perturbation found.

    ``variant`` selects the full search ("garsdc"), patch sampling without
    the quadrant split ("gars") or a plain whole-image genetic loop ("ga").
    The parallel mode runs quadrant refinements in worker threads; budget
    shares and per-quadrant random streams are allocated up front and the
    results merge in quadrant order, so its traces are bit-identical to the
    single-threaded mode's. The loop stops on budget exhaustion or once the
    current best leaves no true-positive detections.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    state = _AttackState(
        image=image,
        gts=list(gts),
        oracle=oracle,
        weights=weights,
        params=params,
        rng=rng,
        epsilon=init[0].epsilon,
        slots=Population((init[0], init[1]))
    )

    try:
        state.evaluate_initial()
        while not state.finished():
            if variant == "ga":
                state.ga_iteration()
            else:
                state.subset_iteration(variant, parallel_quadrants)
    except OracleUnavailable as exc:
        state.error = str(exc)

    return state.result()


class _AttackState:
    """Bookkeeping shared by the attack loop phases."""

    def __init__(self, image, gts, oracle, weights, params, rng, epsilon, slots):
        self.image = image
        self.gts = gts
        self.oracle = oracle
        self.weights = weights
        self.params = params
        self.rng = rng
        self.epsilon = epsilon
        self.slots = slots
        self.slot_evals: list[Evaluation | None] = [None, None]
        self.records: list[TraceRecord] = []
        self.best_fitness: float | None = None
        self.best_data: np.ndarray = slots.members[0].data
        self.best_eval: Evaluation | None = None
        self.success = False
        self.exhausted = False
        self.error: str | None = None

    # -- tracing ---------------------------------------------------------

    def record(self, event: str, patch: PatchIndex | None) -> None:
        fitness = self.best_fitness if self.best_fitness is not None else float("-inf")
        self.records.append(
            TraceRecord(
                query=len(self.records) + 1,
                best_fitness=fitness,
                event=event,
                patch=patch.astuple() if patch is not None else None,
            )
        )

    def absorb(self, events: list[tuple[str, tuple]]) -> None:
        fitness = self.best_fitness if self.best_fitness is not None else float("-inf")
        for ev, tup in events:
            self.records.append(
                TraceRecord(
                    query=len(self.records) + 1,
                    best_fitness=fitness,
                    event=ev,
                    patch=tup,
                )
            )

    # -- loop control ----------------------------------------------------

    def finished(self) -> bool:
        if self.best_eval is not None and self.best_eval.tp_count == 0:
            self.success = True
            return True
        return self.exhausted or self.oracle.budget.remaining <= 0

    def take_best(self, fitness: float, data: np.ndarray, ev: Evaluation) -> None:
        self.best_fitness = fitness
        self.best_data = data
        self.best_eval = ev

    # -- phases ----------------------------------------------------------

    def evaluate_initial(self) -> None:
        try:
            for i in (0, 1):
                ev = evaluate_candidate(
                    self.oracle, self.image, self.slots.members[i].data,
                    self.gts, self.weights,
                )
                self.slots.fitness[i] = ev.fitness
                self.slot_evals[i] = ev
                if self.best_fitness is None or ev.fitness > self.best_fitness:
                    self.take_best(ev.fitness, self.slots.members[i].data, ev)
                self.record(EVENT_RS, None)
        except BudgetExhausted:
            self.exhausted = True

    def ga_iteration(self) -> None:
        """Whole-image crossover/mutation round; the loser evolves in place.

        The winner is untouched and its cached evaluation stays valid, so
        only the loser costs a query.
        """
        f0, f1 = self.slots.fitness
        winner, loser = (1, 0) if (f1 or 0) > (f0 or 0) else (0, 1)
        wdata = self.slots.members[winner].data
        ldata = self.slots.members[loser].data.copy()
        cross = self.rng.random(size=ldata.shape) < self.params.cr
        ldata[cross] = wdata[cross]
        mutate = self.rng.random(size=ldata.shape) < self.params.mr
        ldata[mutate] = -ldata[mutate]
        members = list(self.slots.members)
        members[loser] = Perturbation(ldata, self.epsilon)
        self.slots = Population((members[0], members[1]), list(self.slots.fitness))
        try:
            ev = evaluate_candidate(
                self.oracle, self.image, self.slots.members[loser].data,
                self.gts, self.weights,
            )
            self.slots.fitness[loser] = ev.fitness
            self.slot_evals[loser] = ev
            if self.best_fitness is None or ev.fitness > self.best_fitness:
                self.take_best(ev.fitness, self.slots.members[loser].data, ev)
            self.record(EVENT_RS, None)
        except BudgetExhausted:
            self.exhausted = True

    def subset_iteration(self, variant: str, parallel: bool) -> None:
        image, params = self.image, self.params
        a = side_length(image.width, image.height, self.oracle.budget.used, params.milestones)
        a = min(a, image.width, image.height)
        cand_pop, patch = random_subset_step(self.slots, self.rng, a)
        if variant == "garsdc" and min(patch.a, patch.b) >= 2:
            quadrants = partition_patch(patch)
        else:
            # Patch sampling without divide-and-conquer: candidates go
            # straight to the acceptance test.
            quadrants = []

        cand_data = [cand_pop.members[0].data.copy(), cand_pop.members[1].data.copy()]
        cand_fit: list[float | None] = [None, None]
        cand_eval: list[Evaluation | None] = [None, None]
        sl = patch.slices()
        size = (image.width, image.height)
        try:
            for i in (0, 1):
                cached = self.slot_evals[i]
                if cached is not None and np.array_equal(
                    cand_data[i][sl], self.slots.members[i].data[sl]
                ):
                    # Identity sign draw: the candidate equals its parent, so
                    # the parent's response answers without a query.
                    subs = [
                        subcomponent_fitness(
                            cached.detections, cached.match, q.as_box(),
                            self.weights, size,
                        )
                        for q in quadrants
                    ]
                    ev = Evaluation(cached.detections, cached.match, cached.fitness, subs)
                else:
                    ev = evaluate_candidate(
                        self.oracle, image, cand_data[i], self.gts, self.weights,
                        quadrants,
                    )
                    self.record(EVENT_RS, patch)
                cand_fit[i] = ev.fitness
                cand_eval[i] = ev
        except BudgetExhausted:
            self.exhausted = True

        # Refine only when some quadrant actually touches a detection.
        flag = any(
            sub.relevant
            for ev in cand_eval
            if ev is not None
            for sub in ev.subfits
        )
        if flag and not self.exhausted:
            cand_data, cand_fit, cand_eval = self.dc_episode(
                cand_data, cand_fit, cand_eval, patch, quadrants, parallel
            )

        # Strict-improvement acceptance into the achieving member's slot.
        m = _argmax(cand_fit)
        if m is not None and (self.best_fitness is None or cand_fit[m] > self.best_fitness):
            accepted = Perturbation(cand_data[m], self.epsilon)
            members = list(self.slots.members)
            members[m] = accepted
            fitness = list(self.slots.fitness)
            fitness[m] = cand_fit[m]
            self.slots = Population((members[0], members[1]), fitness)
            self.slot_evals[m] = cand_eval[m]
            self.take_best(cand_fit[m], accepted.data, cand_eval[m])

    def dc_episode(
        self,
        cand_data: list[np.ndarray],
        cand_fit: list[float | None],
        cand_eval: list[Evaluation | None],
        patch: PatchIndex,
        quadrants: list[PatchIndex],
        parallel: bool,
    ):
        """Quadrant refinements, merge round, then per-member best install.

        Budget shares and child random streams are assigned in quadrant
        order before anything runs, which makes the outcome independent of
        worker scheduling.
        """
        params = self.params
        merge_needed = len(quadrants) > 1
        streams = self.rng.spawn(len(quadrants) + (1 if merge_needed else 0))

        # Entry states were already evaluated by the sampling step and only
        # freshly mutated members need queries, so each quadrant run pays one
        # query per refinement round.
        per_run = params.t_dc - 1
        pool = self.oracle.budget.remaining
        caps = []
        for _ in quadrants:
            share = min(per_run, pool)
            caps.append(share)
            pool -= share
        merge_cap = min(3, pool)  # entry pair plus one round

        def run(idx: int) -> DcResult:
            entry = [
                (cand_eval[i].subfits[idx], cand_fit[i], cand_eval[i])
                for i in (0, 1)
            ]
            return dc_ga(
                self.image,
                cand_data,
                quadrants[idx],
                params.t_dc - 1,
                _CappedOracle(self.oracle, caps[idx]),
                self.gts,
                self.weights,
                params,
                streams[idx],
                EVENT_DC,
                entry=entry,
            )

        if parallel and len(quadrants) > 1:
            with ThreadPoolExecutor(max_workers=len(quadrants)) as pool_exec:
                results = list(pool_exec.map(run, range(len(quadrants))))
        else:
            results = [run(idx) for idx in range(len(quadrants))]
        for res in results:
            self.absorb(res.events)

        merge_res = None
        if merge_needed:
            merged = [d.copy() for d in cand_data]
            for quad, res in zip(quadrants, results):
                for i in (0, 1):
                    if res.best_content[i] is not None:
                        merged[i][quad.slices()] = res.best_content[i]
            merge_res = dc_ga(
                self.image,
                merged,
                patch,
                1,
                _CappedOracle(self.oracle, merge_cap),
                self.gts,
                self.weights,
                params,
                streams[-1],
                EVENT_MERGE,
            )
            self.absorb(merge_res.events)
        if self.oracle.budget.remaining <= 0:
            self.exhausted = True

        # Per member, install the best-scoring refinement (quadrant runs in
        # order, then the merge run; first maximum wins ties).
        out_data, out_fit, out_eval = [], [], []
        for i in (0, 1):
            options: list[tuple[float, PatchIndex, np.ndarray, Evaluation]] = []
            for quad, res in zip(quadrants, results):
                if res.best_fitness[i] is not None:
                    options.append(
                        (res.best_fitness[i], quad, res.best_content[i], res.best_eval[i])
                    )
            if merge_res is not None and merge_res.best_fitness[i] is not None:
                options.append(
                    (merge_res.best_fitness[i], patch,
                     merge_res.best_content[i], merge_res.best_eval[i])
                )
            if not options:
                out_data.append(cand_data[i])
                out_fit.append(cand_fit[i])
                out_eval.append(cand_eval[i])
                continue
            best = max(options, key=lambda opt: opt[0])
            data = cand_data[i].copy()
            data[best[1].slices()] = best[2]
            out_data.append(data)
            out_fit.append(best[0])
            out_eval.append(best[3])
        return out_data, out_fit, out_eval

    def result(self) -> tuple[Perturbation, AttackTrace]:
        best = Perturbation(self.best_data, self.epsilon)
        trace = AttackTrace(
            records=self.records,
            best_fitness=self.best_fitness,
            best_delta=best,
            best_detections=self.best_eval.detections if self.best_eval else [],
            best_match=self.best_eval.match if self.best_eval else None,
            success=self.success,
            error=self.error,
        )
        return best, trace


def _argmax(values: list[float | None]) -> int | None:
    best_i = None
    for i, v in enumerate(values):
        if v is None:
            continue
        if best_i is None or v > values[best_i]:
            best_i = i
    return best_i
