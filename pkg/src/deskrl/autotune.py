"""Hill-climbing of sampler count (SP) and batch size (B) on measured throughput.

SP is tuned first against the aggregate sampling frame rate, then B against
the update frame rate; the two searches never touch each other's knob. Each
search climbs one step at a time, first upward then (if the very first step
up fails) downward, stops at the first step that does not improve, and
reverts to the best candidate seen. One measurement window per candidate and
at most one directive per window.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

LADDER = tuple(128 << i for i in range(10))  # 128 .. 65536

WARMING, TUNING_SP, TUNING_B, SETTLED = "warming", "tuning-SP", "tuning-B", "settled"


class TuneError(RuntimeError):
    pass


@dataclass(frozen=True)
class Directive:
    kind: str  # "sp" or "b"
    value: int


@dataclass
class TuneConfig:
    sp_cap: int
    cpu_guard: float = 0.9
    freq_floor: float = 10.0
    min_gain: float = 0.01
    ladder: tuple = LADDER
    memory_budget: float = math.inf
    base_bytes: float = 0.0
    bytes_per_sampler: float = 0.0


@dataclass
class Probe:
    phase: str
    sp: int
    b: int
    sampling_frame_rate: float
    update_frame_rate: float
    update_frequency: float
    cpu_utilization: float
    updater_duty: float
    accepted: bool = False
    note: str = ""


@dataclass
class _Search:
    """Bookkeeping for one one-dimensional climb."""

    start: int
    best: int | None = None
    best_score: float = -math.inf
    direction: int = +1
    moved: bool = False
    tried: set = field(default_factory=set)
    forced_down: bool = False


@dataclass
class TuneState:
    sp: int
    b: int
    cfg: TuneConfig
    phase: str = WARMING
    cpu_utilization: float = 0.0
    updater_duty: float = 0.0
    windows: int = 0
    evidence: list = field(default_factory=list)
    _sp: _Search | None = None
    _b: _Search | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.sp <= self.cfg.sp_cap:
            raise ValueError(f"SP {self.sp} outside [1, {self.cfg.sp_cap}]")
        if self.b not in self.cfg.ladder:
            raise ValueError(f"B {self.b} is not on the ladder")

    def memory_for(self, sp: int) -> float:
        return self.cfg.base_bytes + sp * self.cfg.bytes_per_sampler

    @property
    def memory_budget(self) -> float:
        return self.cfg.memory_budget


def _improves(score: float, best: float, min_gain: float) -> bool:
    if best <= 0:
        return score > best
    return score > best * (1.0 + min_gain)


def _sp_step(st: TuneState, m) -> Directive | None:
    """Consume one SP measurement; returns the next SP directive, or None when the phase ends."""
    cfg = st.cfg
    srch = st._sp
    sp = st.sp
    srch.tried.add(sp)
    rate = float(m.sampling_frame_rate)
    guard_ok = m.cpu_utilization <= cfg.cpu_guard and st.memory_for(sp) <= cfg.memory_budget
    probe = Probe(TUNING_SP, sp, st.b, rate, m.update_frame_rate, m.update_frequency,
                  m.cpu_utilization, m.updater_duty)
    st.evidence.append(probe)

    def can(nsp: int) -> bool:
        return 1 <= nsp <= cfg.sp_cap and nsp not in srch.tried and st.memory_for(nsp) <= cfg.memory_budget

    if srch.forced_down or (srch.best is None and not guard_ok):
        # started over the guard: walk down until back under it, then stop,
        # since climbing again would cross it
        srch.forced_down = True
        if not guard_ok:
            probe.note = "guard exceeded"
            return Directive("sp", sp - 1) if can(sp - 1) else None
        srch.best, srch.best_score = sp, rate
        probe.accepted = True
        probe.note = "back under guard"
        return None

    if srch.best is None:
        srch.best, srch.best_score = sp, rate
        probe.accepted = True
        if can(sp + 1):
            return Directive("sp", sp + 1)
        srch.direction = -1
        return Directive("sp", sp - 1) if can(sp - 1) else None

    if guard_ok and _improves(rate, srch.best_score, cfg.min_gain):
        srch.best, srch.best_score = sp, rate
        srch.moved = True
        probe.accepted = True
        nxt = sp + srch.direction
        return Directive("sp", nxt) if can(nxt) else None
    probe.note = "guard exceeded" if not guard_ok else "no gain"
    if srch.direction > 0 and not srch.moved and can(srch.best - 1):
        srch.direction = -1
        return Directive("sp", srch.best - 1)
    return None


def _b_step(st: TuneState, m) -> Directive | None:
    cfg = st.cfg
    srch = st._b
    ladder = cfg.ladder
    i = ladder.index(st.b)
    srch.tried.add(st.b)
    score = float(m.update_frame_rate)
    ok = m.update_frequency >= cfg.freq_floor
    probe = Probe(TUNING_B, st.sp, st.b, m.sampling_frame_rate, score, m.update_frequency,
                  m.cpu_utilization, m.updater_duty)
    st.evidence.append(probe)

    def can(j: int) -> bool:
        return 0 <= j < len(ladder) and ladder[j] not in srch.tried

    if srch.forced_down or (srch.best is None and not ok):
        srch.forced_down = True
        if not ok:
            probe.note = "below frequency floor"
            return Directive("b", ladder[i - 1]) if can(i - 1) else None
        srch.best, srch.best_score = st.b, score
        probe.accepted = True
        probe.note = "back above floor"
        return None

    if srch.best is None:
        srch.best, srch.best_score = st.b, score
        probe.accepted = True
        if can(i + 1):
            return Directive("b", ladder[i + 1])
        srch.direction = -1
        return Directive("b", ladder[i - 1]) if can(i - 1) else None

    if ok and _improves(score, srch.best_score, cfg.min_gain):
        srch.best, srch.best_score = st.b, score
        srch.moved = True
        probe.accepted = True
        j = i + srch.direction
        return Directive("b", ladder[j]) if can(j) else None
    probe.note = "below frequency floor" if not ok else "no gain"
    if srch.direction > 0 and not srch.moved:
        j = ladder.index(srch.best) - 1
        if can(j):
            srch.direction = -1
            return Directive("b", ladder[j])
    return None


def _apply(st: TuneState, d: Directive | None) -> Directive | None:
    if d is not None:
        if d.kind == "sp":
            st.sp = d.value
        else:
            st.b = d.value
    return d


def tune_step(st: TuneState, m) -> tuple[TuneState, Directive | None]:
    """Advance the tuner by one measurement window (``m`` is a ThroughputStats)."""
    if st.phase == SETTLED or not getattr(m, "complete", True):
        return st, None
    st.windows += 1
    st.cpu_utilization = min(1.0, max(0.0, float(m.cpu_utilization)))
    st.updater_duty = min(1.0, max(0.0, float(m.updater_duty)))
    if st.phase == WARMING:
        st.phase = TUNING_SP
        st._sp = _Search(st.sp)
    if st.phase == TUNING_SP:
        d = _sp_step(st, m)
        if d is not None:
            return st, _apply(st, d)
        best = st._sp.best if st._sp.best is not None else st.sp
        st.phase = TUNING_B
        st._b = _Search(st.b)
        if best != st.sp:
            return st, _apply(st, Directive("sp", best))
        # the window just measured already describes (best SP, current B)
    if st.phase == TUNING_B:
        d = _b_step(st, m)
        if d is not None:
            return st, _apply(st, d)
        best = st._b.best if st._b.best is not None else st.b
        st.phase = SETTLED
        if best != st.b:
            return st, _apply(st, Directive("b", best))
    return st, None


def settled_report(st: TuneState) -> tuple[int, int, list[dict]]:
    """(SP*, B*, evidence rows), one row per probed candidate."""
    if st.phase != SETTLED:
        raise TuneError(f"tuner has not settled (phase {st.phase})")
    return st.sp, st.b, [asdict(p) for p in st.evidence]


def tune_record(st: TuneState, directive: Directive | None, t: float) -> dict:
    """One line for ``tune.jsonl``."""
    rec = {"time": t, "phase": st.phase, "sp": st.sp, "b": st.b, "window": st.windows,
           "cpu_utilization": st.cpu_utilization, "updater_duty": st.updater_duty,
           "directive": None if directive is None else asdict(directive)}
    if st.evidence:
        rec["probe"] = asdict(st.evidence[-1])
    return rec


def nearest_on_ladder(b: int, ladder=LADDER) -> int:
    return min(ladder, key=lambda x: (abs(math.log2(x) - math.log2(max(b, 1))), x))
