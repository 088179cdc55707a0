"""Compiled single-server processor-sharing kernel.

Under PS every job in system receives speed/N of the capacity, so all jobs
share one "attained service" clock V(t), dV/dt = speed/N(t).  A job arriving
at clock value V_a with work X leaves when V reaches V_a + X; the next
departure is therefore the minimum tag in a heap.
"""

import numba as nb
import numpy as np

# float state slots
T_NOW, V_CLOCK, BUSY, IDLE, ENERGY, WORK_IN, WORK_DONE = range(7)
N_FSTATE = 7
# stats slots
N_JOBS, N_VIOL, SUM_S, SUM_S2 = range(4)
N_STATS = 4


@nb.njit(cache=True)
def _push(tags, arr, work, n, tag, a, w):
    i = n
    tags[i] = tag
    arr[i] = a
    work[i] = w
    while i > 0:
        parent = (i - 1) >> 1
        if tags[parent] <= tags[i]:
            break
        tags[parent], tags[i] = tags[i], tags[parent]
        arr[parent], arr[i] = arr[i], arr[parent]
        work[parent], work[i] = work[i], work[parent]
        i = parent
    return n + 1


@nb.njit(cache=True)
def _pop(tags, arr, work, n):
    a0 = arr[0]
    w0 = work[0]
    n -= 1
    tags[0] = tags[n]
    arr[0] = arr[n]
    work[0] = work[n]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= n:
            break
        c = left
        if left + 1 < n and tags[left + 1] < tags[left]:
            c = left + 1
        if tags[i] <= tags[c]:
            break
        tags[c], tags[i] = tags[i], tags[c]
        arr[c], arr[i] = arr[i], arr[c]
        work[c], work[i] = work[i], work[c]
        i = c
    return n, a0, w0


@nb.njit(cache=True)
def _span(fs, t0, t1, busy, params, buckets, bucket_width):
    # accumulate [t0, t1] clipped to the observation window
    lo = max(t0, params[2])
    hi = min(t1, params[3])
    if hi <= lo:
        return
    dt = hi - lo
    if busy:
        fs[BUSY] += dt
        fs[ENERGY] += dt * params[4]
    else:
        fs[IDLE] += dt
        fs[ENERGY] += dt * params[5]
    if bucket_width > 0.0:
        nbk = buckets.shape[0]
        b = int(lo / bucket_width)
        while b < nbk and lo < hi:
            end = min(hi, (b + 1) * bucket_width)
            if busy:
                buckets[b] += end - lo
            lo = end
            b += 1


@nb.njit(cache=True)
def _record(stats, samples, ns, a, s, params):
    if a >= params[2] and a < params[3]:
        stats[N_JOBS] += 1.0
        if s >= params[6]:
            stats[N_VIOL] += 1.0
        stats[SUM_S] += s
        stats[SUM_S2] += s * s
        if samples.shape[0] > 0:
            samples[ns] = s
            ns += 1
    return ns


@nb.njit(cache=True)
def _depart_until(fs, tags, arr, work, n, t_limit, speed, stats, samples, ns, params, buckets, bw):
    while n > 0:
        dt = (tags[0] - fs[V_CLOCK]) * n / speed
        if dt < 0.0:
            dt = 0.0
        t_dep = fs[T_NOW] + dt
        if t_dep > t_limit:
            break
        _span(fs, fs[T_NOW], t_dep, True, params, buckets, bw)
        fs[T_NOW] = t_dep
        fs[V_CLOCK] = tags[0]
        n, a, w = _pop(tags, arr, work, n)
        fs[WORK_DONE] += w
        ns = _record(stats, samples, ns, a, t_dep - a, params)
    return n, ns


@nb.njit(cache=True)
def ps_run(fs, tags, arr, work, n, arrivals, works, speed, stats, samples, ns, params, buckets, bw, drain):
    """Feed a time-ordered batch of arrivals through one PS server.

    params = [speed, idle_speed, obs_start, obs_end, busy_power, idle_power, delta].
    Returns the updated (number in system, number of stored samples).
    """
    for k in range(arrivals.shape[0]):
        ta = arrivals[k]
        n, ns = _depart_until(fs, tags, arr, work, n, ta, speed, stats, samples, ns, params, buckets, bw)
        if n > 0:
            _span(fs, fs[T_NOW], ta, True, params, buckets, bw)
            fs[V_CLOCK] += (ta - fs[T_NOW]) * speed / n
        else:
            _span(fs, fs[T_NOW], ta, False, params, buckets, bw)
        fs[T_NOW] = ta
        fs[WORK_IN] += works[k]
        n = _push(tags, arr, work, n, fs[V_CLOCK] + works[k], ta, works[k])
    if drain:
        # close the window: serve what is left, then idle up to obs_end
        n, ns = _depart_until(fs, tags, arr, work, n, np.inf, speed, stats, samples, ns, params, buckets, bw)
        if fs[T_NOW] < params[3]:
            _span(fs, fs[T_NOW], params[3], False, params, buckets, bw)
    return n, ns


@nb.njit(cache=True)
def ps_sojourn(arrivals, works, speed):
    """Sojourn time of every job of a single trace (arrival order)."""
    m = arrivals.shape[0]
    fs = np.zeros(N_FSTATE)
    fs[T_NOW] = arrivals[0] if m > 0 else 0.0
    tags = np.empty(m)
    heap_idx = np.empty(m)
    heap_work = np.empty(m)
    out = np.empty(m)
    n = 0
    for k in range(m):
        ta = arrivals[k]
        while n > 0:
            dt = (tags[0] - fs[V_CLOCK]) * n / speed
            if dt < 0.0:
                dt = 0.0
            if fs[T_NOW] + dt > ta:
                break
            fs[T_NOW] += dt
            fs[V_CLOCK] = tags[0]
            n, idx, w = _pop(tags, heap_idx, heap_work, n)
            out[int(idx)] = fs[T_NOW] - arrivals[int(idx)]
        if n > 0:
            fs[V_CLOCK] += (ta - fs[T_NOW]) * speed / n
        fs[T_NOW] = ta
        n = _push(tags, heap_idx, heap_work, n, fs[V_CLOCK] + works[k], float(k), works[k])
    while n > 0:
        dt = (tags[0] - fs[V_CLOCK]) * n / speed
        fs[T_NOW] += max(dt, 0.0)
        fs[V_CLOCK] = tags[0]
        n, idx, w = _pop(tags, heap_idx, heap_work, n)
        out[int(idx)] = fs[T_NOW] - arrivals[int(idx)]
    return out


@nb.njit(cache=True)
def fcfs_sojourn(interarrivals, works, speed):
    """Lindley recursion: S_n = X_n/x + max(0, S_{n-1} - T_n)."""
    m = works.shape[0]
    out = np.empty(m)
    s = 0.0
    for k in range(m):
        prev = s - interarrivals[k] if k > 0 else 0.0
        s = works[k] / speed + (prev if prev > 0.0 else 0.0)
        out[k] = s
    return out
