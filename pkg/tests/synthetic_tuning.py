"""Synthetic throughput landscapes and brute-force optima for tuner tests."""
from dataclasses import dataclass

from deskrl.autotune import LADDER, SETTLED, TuneConfig, TuneState, tune_step


@dataclass
class Window:
    sampling_frame_rate: float
    update_frame_rate: float
    update_frequency: float
    cpu_utilization: float
    updater_duty: float = 0.5
    complete: bool = True


class CappedSampling:
    """Sampling rate min(SP * k, C); CPU use SP / cores; update side B / (c1 + c2 B)."""

    def __init__(self, k=1000.0, ceiling=7500.0, cores=12, c1=0.01, c2=1e-5):
        self.k, self.C, self.cores, self.c1, self.c2 = k, ceiling, cores, c1, c2

    def sampling(self, sp):
        return min(sp * self.k, self.C)

    def cpu(self, sp):
        return min(1.0, sp / self.cores)

    def frequency(self, b):
        return 1.0 / (self.c1 + self.c2 * b)

    def __call__(self, sp, b):
        f = self.frequency(b)
        return Window(self.sampling(sp), f * b, f, self.cpu(sp))


class TableModel:
    """Arbitrary stationary landscape given as lookup tables."""

    def __init__(self, sampling, cpu, frame, freq):
        self.sampling_t, self.cpu_t, self.frame_t, self.freq_t = sampling, cpu, frame, freq

    def __call__(self, sp, b):
        i = LADDER.index(b)
        return Window(self.sampling_t[sp - 1], self.frame_t[i], self.freq_t[i], self.cpu_t[sp - 1])


def run_tuner(model, sp0, b0, cfg: TuneConfig, max_windows=200):
    st = TuneState(sp0, b0, cfg)
    trace = []
    while st.phase != SETTLED and st.windows < max_windows:
        m = model(st.sp, st.b)
        before = (st.sp, st.b, st.phase)
        st, d = tune_step(st, m)
        trace.append((before, m, d))
    return st, trace


def brute_force_sp(model, cap, guard):
    feasible = [sp for sp in range(1, cap + 1) if model.cpu(sp) <= guard]
    best = max(model.sampling(sp) for sp in feasible)
    return [sp for sp in feasible if model.sampling(sp) == best]


def brute_force_b(model, floor, ladder=LADDER):
    feasible = [b for b in ladder if model.frequency(b) >= floor]
    return max(feasible, key=lambda b: model.frequency(b) * b)
