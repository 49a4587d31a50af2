# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: environment steps, replay record I/O, atomic cursor.

Every function here has a bit-compatible twin in ``_pykernels``; the two are
cross-checked by the test-suite.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, fmod, M_PI
from libc.stdint cimport uint8_t, uint32_t, uint64_t, int64_t
from libc.string cimport memcpy

cnp.import_array()

cdef extern from *:
    """
    #include <stdint.h>
    #include <time.h>
    static inline uint64_t dk_fetch_add(uint64_t *p, uint64_t n) {
        return __atomic_fetch_add(p, n, __ATOMIC_SEQ_CST);
    }
    static inline uint64_t dk_load(const uint64_t *p) {
        return __atomic_load_n(p, __ATOMIC_ACQUIRE);
    }
    static inline void dk_store(uint64_t *p, uint64_t v) {
        __atomic_store_n(p, v, __ATOMIC_RELEASE);
    }
    static inline void dk_fence(void) {
        __atomic_thread_fence(__ATOMIC_SEQ_CST);
    }
    static inline int dk_cas(uint64_t *p, uint64_t expected, uint64_t desired) {
        return __atomic_compare_exchange_n(p, &expected, desired, 0,
                                           __ATOMIC_SEQ_CST, __ATOMIC_SEQ_CST);
    }
    static inline uint64_t dk_xchg(uint64_t *p, uint64_t v) {
        return __atomic_exchange_n(p, v, __ATOMIC_SEQ_CST);
    }
    static inline double dk_now(void) {
        struct timespec ts;
        clock_gettime(CLOCK_MONOTONIC, &ts);
        return (double)ts.tv_sec + 1e-9 * (double)ts.tv_nsec;
    }
    """
    uint64_t dk_fetch_add(uint64_t *p, uint64_t n) nogil
    uint64_t dk_load(const uint64_t *p) nogil
    void dk_store(uint64_t *p, uint64_t v) nogil
    void dk_fence() nogil
    int dk_cas(uint64_t *p, uint64_t expected, uint64_t desired) nogil
    uint64_t dk_xchg(uint64_t *p, uint64_t v) nogil
    double dk_now() nogil

cdef extern from "<sched.h>":
    int sched_yield() nogil

cdef uint32_t FNV_OFFSET = 2166136261u
cdef uint32_t FNV_PRIME = 16777619u
cdef enum:
    HEAD = 16

BACKEND = "compiled"


cdef inline uint32_t _mix(uint32_t h, uint32_t w) nogil:
    return (h ^ w) * FNV_PRIME


cdef uint32_t _checksum(const uint8_t *rec, Py_ssize_t nf, uint64_t g, uint8_t d) nogil:
    cdef uint32_t h = FNV_OFFSET
    cdef uint32_t w
    cdef Py_ssize_t k
    for k in range(nf):
        memcpy(&w, rec + HEAD + 4 * k, 4)
        h = _mix(h, w)
    h = _mix(h, <uint32_t>d)
    h = _mix(h, <uint32_t>g)
    h = _mix(h, <uint32_t>(g >> 32))
    return h


def fetch_add(uint8_t[::1] buf, Py_ssize_t offset, uint64_t n):
    """Atomically add ``n`` to the u64 at ``offset``; return the prior value."""
    return dk_fetch_add(<uint64_t *>(&buf[offset]), n)


def load_u64(uint8_t[::1] buf, Py_ssize_t offset):
    return dk_load(<uint64_t *>(&buf[offset]))


def record_checksum(const uint8_t[::1] rec, Py_ssize_t nf, uint64_t g, uint8_t d):
    return _checksum(&rec[0], nf, g, d)


def write_record(uint8_t[::1] buf, Py_ssize_t rec_off, uint64_t g,
                 const float[::1] s, const float[::1] a, const float[::1] s2,
                 float r, uint8_t d, Py_ssize_t mark_off=-1, double stall_timeout=0.05):
    """Seqlock write of record ``g``; the even sequence word is stored last.

    The slot is claimed with a CAS so that a writer lapped by a newer record
    never overwrites it, and a writer never scribbles over a slot another
    writer is filling (it waits, up to ``stall_timeout`` seconds, for the
    older write to finish). Returns ``(previous_seq, evicted_was_sampled,
    written)``. When ``mark_off`` >= 0 the u64 sampled-mark for the slot is
    exchanged to 0 and compared against the evicted record.
    """
    cdef uint8_t *rec = &buf[rec_off]
    cdef uint64_t *seq = <uint64_t *>rec
    cdef Py_ssize_t no = s.shape[0], na = a.shape[0]
    cdef Py_ssize_t nf = 2 * no + na + 1
    cdef uint32_t cs
    cdef uint64_t q, mine = 2 * g + 1, old_mark = 0
    cdef double deadline = -1.0
    cdef int written = 0, claimed = 0
    with nogil:
        q = dk_load(seq)
        while True:
            if q >= mine:
                break  # lapped: a newer record already owns the slot
            if (q & 1) and deadline != 0.0:
                if deadline < 0:
                    deadline = dk_now() + stall_timeout
                elif dk_now() > deadline:
                    deadline = 0.0  # presume the other writer died mid-write
                sched_yield()
                q = dk_load(seq)
                continue
            if dk_cas(seq, q, mine):
                claimed = 1
                break
            q = dk_load(seq)
        if claimed:
            if mark_off >= 0:
                old_mark = dk_xchg(<uint64_t *>(&buf[mark_off]), 0)
            memcpy(rec + HEAD, &s[0], 4 * no)
            memcpy(rec + HEAD + 4 * no, &a[0], 4 * na)
            memcpy(rec + HEAD + 4 * (no + na), &s2[0], 4 * no)
            memcpy(rec + HEAD + 4 * (2 * no + na), &r, 4)
            rec[12] = d
            cs = _checksum(rec, nf, g, d)
            memcpy(rec + 8, &cs, 4)
            written = dk_cas(seq, mine, mine + 1)
    if not claimed:
        return q, False, False
    return q, (q != 0 and not (q & 1) and old_mark == q // 2), bool(written)


def gather(const uint8_t[::1] buf, Py_ssize_t records_off, Py_ssize_t rec_size,
           const int64_t[::1] slots, Py_ssize_t obs_dim, Py_ssize_t act_dim,
           float[:, ::1] out_s, float[:, ::1] out_a, float[:, ::1] out_s2,
           float[::1] out_r, uint8_t[::1] out_d, int64_t[::1] out_g,
           Py_ssize_t marks_off=-1):
    """Copy the records at ``slots`` into the output arrays.

    ``out_g[i]`` receives the record's global index, or -1 when the copy was
    torn, uncommitted or failed its checksum. When ``marks_off`` >= 0 the
    per-slot sampled-mark (global index + 1) is set for valid rows. Returns
    ``(bad_rows, newly_marked)``.
    """
    cdef Py_ssize_t i, n = slots.shape[0], nf = 2 * obs_dim + act_dim + 1
    cdef const uint8_t *rec
    cdef uint64_t *mark
    cdef uint64_t q1, q2, g, prev
    cdef uint32_t cs
    cdef uint8_t d
    cdef int fresh
    cdef Py_ssize_t bad = 0, newly = 0
    cdef uint8_t tmp[4096]
    if HEAD + 4 * nf > 4096:
        raise ValueError("record too wide for the compiled gather")
    with nogil:
        for i in range(n):
            rec = &buf[records_off + slots[i] * rec_size]
            q1 = dk_load(<const uint64_t *>rec)
            memcpy(tmp, rec, HEAD + 4 * nf)
            dk_fence()
            if q1 == 0 or (q1 & 1):
                out_g[i] = -1
                bad += 1
                continue
            g = q1 // 2 - 1
            d = tmp[12]
            memcpy(&cs, tmp + 8, 4)
            fresh = 0
            if marks_off >= 0 and cs == _checksum(tmp, nf, g, d):
                mark = <uint64_t *>(&buf[marks_off + 8 * slots[i]])
                prev = dk_load(mark)
                if prev != g + 1 and dk_cas(mark, prev, g + 1):
                    fresh = 1
            q2 = dk_load(<const uint64_t *>rec)
            if q1 != q2 or cs != _checksum(tmp, nf, g, d):
                if fresh and not dk_cas(mark, g + 1, prev):
                    newly += 1  # the evicting writer already saw our mark
                out_g[i] = -1
                bad += 1
                continue
            newly += fresh
            memcpy(&out_s[i, 0], tmp + HEAD, 4 * obs_dim)
            memcpy(&out_a[i, 0], tmp + HEAD + 4 * obs_dim, 4 * act_dim)
            memcpy(&out_s2[i, 0], tmp + HEAD + 4 * (obs_dim + act_dim), 4 * obs_dim)
            memcpy(&out_r[i], tmp + HEAD + 4 * (2 * obs_dim + act_dim), 4)
            out_d[i] = d
            out_g[i] = <int64_t>g
    return bad, newly


cdef inline double _angle_normalize(double x) nogil:
    # floor-modulo, matching Python's float %
    cdef double r = fmod(x + M_PI, 2.0 * M_PI)
    if r < 0:
        r += 2.0 * M_PI
    return r - M_PI


def pendulum_step(double th, double thdot, double u, double g, double m,
                  double l, double dt, double max_torque, double max_speed):
    """Returns (theta', theta_dot', reward) for one clipped-torque step."""
    cdef double ang, cost, newthdot
    if u > max_torque:
        u = max_torque
    elif u < -max_torque:
        u = -max_torque
    ang = _angle_normalize(th)
    cost = ang * ang + 0.1 * thdot * thdot + 0.001 * u * u
    newthdot = thdot + (3.0 * g / (2.0 * l) * sin(th) + 3.0 / (m * l * l) * u) * dt
    if newthdot > max_speed:
        newthdot = max_speed
    elif newthdot < -max_speed:
        newthdot = -max_speed
    return th + newthdot * dt, newthdot, -cost


def spin(double seconds):
    """Busy-wait for ``seconds`` of wall time (synthetic simulator cost)."""
    cdef double end
    cdef double acc = 0.0
    if seconds <= 0:
        return 0.0
    with nogil:
        end = dk_now() + seconds
        while dk_now() < end:
            acc += 1.0
    return acc
