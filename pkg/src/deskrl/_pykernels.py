"""Pure-Python/numpy fallbacks for the compiled kernels in ``_ckernels``.

Same signatures, same byte layout, same checksum. ``fetch_add`` here is not
atomic; callers must hold the ring's file lock around it.
"""
from __future__ import annotations

import math
import time

import numpy as np

BACKEND = "python"

FNV_OFFSET = 2166136261
FNV_PRIME = 16777619
HEAD = 16
_MASK = 0xFFFFFFFF


def fetch_add(buf, offset: int, n: int) -> int:
    word = np.ndarray((1,), dtype="<u8", buffer=buf, offset=offset)
    old = int(word[0])
    word[0] = old + n
    return old


def load_u64(buf, offset: int) -> int:
    return int(np.ndarray((1,), dtype="<u8", buffer=buf, offset=offset)[0])


def _checksum_words(words: np.ndarray, g: np.ndarray, d: np.ndarray) -> np.ndarray:
    # words: (n, nf) uint32; vectorized FNV-1a over 32-bit words
    h = np.full(words.shape[0], FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    mask = np.uint64(_MASK)
    for k in range(words.shape[1]):
        h = ((h ^ words[:, k].astype(np.uint64)) * prime) & mask
    h = ((h ^ d.astype(np.uint64)) * prime) & mask
    g = g.astype(np.uint64)
    h = ((h ^ (g & mask)) * prime) & mask
    h = ((h ^ (g >> np.uint64(32))) * prime) & mask
    return h.astype(np.uint32)


def record_checksum(rec, nf: int, g: int, d: int) -> int:
    words = np.frombuffer(bytes(rec[HEAD:HEAD + 4 * nf]), dtype="<u4").reshape(1, nf)
    return int(_checksum_words(words, np.array([g]), np.array([d]))[0])


def write_record(buf, rec_off: int, g: int, s, a, s2, r: float, d: int,
                 mark_off: int = -1, stall_timeout: float = 0.05):
    no, na = len(s), len(a)
    nf = 2 * no + na + 1
    seq = np.ndarray((1,), dtype="<u8", buffer=buf, offset=rec_off)
    q = int(seq[0])
    if q >= 2 * g + 1:
        return q, False, False
    old_mark = 0
    if mark_off >= 0:
        mark = np.ndarray((1,), dtype="<u8", buffer=buf, offset=mark_off)
        old_mark = int(mark[0])
        mark[0] = 0
    seq[0] = 2 * g + 1
    body = np.ndarray((nf,), dtype="<f4", buffer=buf, offset=rec_off + HEAD)
    body[:no] = s
    body[no:no + na] = a
    body[no + na:2 * no + na] = s2
    body[-1] = r
    flag = np.ndarray((1,), dtype="u1", buffer=buf, offset=rec_off + 12)
    flag[0] = d
    cs = np.ndarray((1,), dtype="<u4", buffer=buf, offset=rec_off + 8)
    cs[0] = _checksum_words(body.view("<u4").reshape(1, nf), np.array([g]), np.array([d]))[0]
    seq[0] = 2 * g + 2
    return q, (q != 0 and q % 2 == 0 and old_mark == q // 2), True


def gather(buf, records_off, rec_size, slots, obs_dim, act_dim,
           out_s, out_a, out_s2, out_r, out_d, out_g, marks_off: int = -1):
    nf = 2 * obs_dim + act_dim + 1
    n = len(slots)
    capacity = (len(buf) - records_off) // rec_size
    region = np.ndarray((capacity, rec_size), dtype="u1", buffer=buf, offset=records_off)
    rows = region[slots, :HEAD + 4 * nf]
    q1 = rows[:, :8].copy().view("<u8").ravel()
    q2 = region[slots, :8].copy().view("<u8").ravel()
    ok = (q1 != 0) & (q1 % 2 == 0) & (q1 == q2)
    g = q1 // 2 - 1
    d = rows[:, 12]
    words = rows[:, HEAD:].copy().view("<u4")
    cs = rows[:, 8:12].copy().view("<u4").ravel()
    ok &= cs == _checksum_words(words, g, d)
    floats = words.view("<f4")
    out_s[:n] = floats[:, :obs_dim]
    out_a[:n] = floats[:, obs_dim:obs_dim + act_dim]
    out_s2[:n] = floats[:, obs_dim + act_dim:2 * obs_dim + act_dim]
    out_r[:n] = floats[:, -1]
    out_d[:n] = d
    out_g[:n] = np.where(ok, g.astype(np.int64), -1)
    newly = 0
    if marks_off >= 0 and ok.any():
        marks = np.ndarray((capacity,), dtype="<u8", buffer=buf, offset=marks_off)
        # a slot may be drawn twice in one batch; count it once
        vs = np.asarray(slots)[ok]
        vg = g[ok] + 1
        uniq, first = np.unique(vs, return_index=True)
        fresh = marks[uniq] != vg[first]
        newly = int(fresh.sum())
        marks[uniq] = vg[first]
    return int(n - ok.sum()), newly


def _angle_normalize(x: float) -> float:
    return ((x + math.pi) % (2.0 * math.pi)) - math.pi


def pendulum_step(th, thdot, u, g, m, l, dt, max_torque, max_speed):
    if u > max_torque:
        u = max_torque
    elif u < -max_torque:
        u = -max_torque
    ang = _angle_normalize(th)
    cost = ang * ang + 0.1 * thdot * thdot + 0.001 * u * u
    newthdot = thdot + (3.0 * g / (2.0 * l) * math.sin(th) + 3.0 / (m * l * l) * u) * dt
    if newthdot > max_speed:
        newthdot = max_speed
    elif newthdot < -max_speed:
        newthdot = -max_speed
    return th + newthdot * dt, newthdot, -cost


def spin(seconds: float) -> float:
    if seconds <= 0:
        return 0.0
    end = time.perf_counter() + seconds
    acc = 0.0
    while time.perf_counter() < end:
        acc += 1.0
    return acc
