"""Compiled per-frame loops.

The kernels consume pre-drawn uniforms, one row of ``N_SLOTS`` per gate, so a
frame's randomness is fixed before any scheduling decision is made. The pure
Python path in :mod:`aftergate.simulation` consumes the same slots and must
produce identical flags.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

# uniform slots, one row per gate
U_ALICE_BIT = 0
U_ALICE_BASIS = 1
U_BOB_BASIS = 2
U_GATE_D0 = 3
U_GATE_D1 = 4
U_DOUBLE = 5
U_EVE_SIGNAL = 6
U_EVE_DARK = 7
U_EVE_BASIS = 8
U_EVE_BIT = 9
U_PULSE_D0 = 10
U_PULSE_D1 = 11
N_SLOTS = 12

# per-gate outcome flags
F_GATE_D0 = 1
F_GATE_D1 = 2
F_PULSE_D0 = 4
F_PULSE_D1 = 8
F_LIVE = 16
F_PULSE_IN_DEAD = 32


@nb.njit(cache=True, inline="always")
def _ap_prob(ev_t, ev_s, start, end, now, dark, amp, tau):
    survive = 1.0 - dark
    for k in range(start, end):
        dt = now - ev_t[k]
        c = ev_s[k] * (amp[0] * math.exp(-dt / tau[0]) + amp[1] * math.exp(-dt / tau[1]))
        if c > 1.0:
            c = 1.0
        elif c < 0.0:
            c = 0.0
        survive *= 1.0 - c
    return 1.0 - survive


@nb.njit(cache=True)
def bob_frame(
    u, alice_bit, alice_basis, bob_basis, mu_bob,
    pulse, pulse_basis, pulse_bit,
    period, pulse_offset, dead_time, accept,
    dark, amp, tau, gamma_av, gamma_half, full_apps, eta, dt_prob,
    p_full, p_half, horizon, flags,
):
    n = flags.shape[0]
    cap = n * (1 + max(full_apps[0], full_apps[1], 1)) + 4
    ev_t = np.empty((2, cap), np.int64)
    ev_s = np.empty((2, cap), np.float64)
    start = np.zeros(2, np.int64)
    end = np.zeros(2, np.int64)
    dead_until = np.int64(-1)
    for g in range(n):
        tg = np.int64(g) * period
        f = 0
        if tg >= dead_until:
            f |= F_LIVE
            clicked = False
            for d in range(2):
                while start[d] < end[d] and tg - ev_t[d, start[d]] >= horizon[d]:
                    start[d] += 1
                if alice_basis[g] == bob_basis[g]:
                    mu_d = mu_bob[g] if alice_bit[g] == d else 0.0
                else:
                    mu_d = 0.5 * mu_bob[g]
                p_ph = -math.expm1(-mu_d * eta[d])
                p_ap = _ap_prob(ev_t[d], ev_s[d], start[d], end[d], tg, dark[d], amp[d], tau[d])
                p = 1.0 - (1.0 - p_ph) * (1.0 - p_ap)
                if u[g, U_GATE_D0 + d] < p:
                    f |= F_GATE_D0 << d
                    ev_t[d, end[d]] = tg
                    ev_s[d, end[d]] = gamma_av[d]
                    end[d] += 1
                    clicked = True
            if clicked:
                dead_until = tg + dead_time
        if pulse[g]:
            tp = tg + pulse_offset
            dead = tp < dead_until
            if dead:
                f |= F_PULSE_IN_DEAD
            clicked = False
            for d in range(2):
                if pulse_basis[g] == bob_basis[g]:
                    if pulse_bit[g] != d:
                        continue
                    p_click = p_full[d]
                    for _ in range(full_apps[d]):
                        ev_t[d, end[d]] = tp
                        ev_s[d, end[d]] = gamma_half[d]
                        end[d] += 1
                else:
                    p_click = p_half[d]
                    ev_t[d, end[d]] = tp
                    ev_s[d, end[d]] = gamma_half[d]
                    end[d] += 1
                if dead:
                    hit = accept and p_click >= 1.0 and u[g, U_PULSE_D0 + d] < dt_prob[d]
                else:
                    hit = u[g, U_PULSE_D0 + d] < p_click
                if hit:
                    f |= F_PULSE_D0 << d
                    clicked = True
            if clicked:
                dead_until = tp + dead_time
        flags[g] = f


@nb.njit(cache=True, parallel=True)
def bob_frames(
    u, alice_bit, alice_basis, bob_basis, mu_bob,
    pulse, pulse_basis, pulse_bit,
    period, pulse_offset, dead_time, accept,
    dark, amp, tau, gamma_av, gamma_half, full_apps, eta, dt_prob,
    p_full, p_half, horizon, flags,
):
    for i in nb.prange(u.shape[0]):
        bob_frame(
            u[i], alice_bit[i], alice_basis[i], bob_basis[i], mu_bob[i],
            pulse[i], pulse_basis[i], pulse_bit[i],
            period, pulse_offset, dead_time, accept,
            dark, amp, tau, gamma_av, gamma_half, full_apps, eta, dt_prob,
            p_full, p_half, horizon, flags[i],
        )


@nb.njit(cache=True)
def spacing_anomalies(flags, period, pulse_offset, dead_time):
    """Count consecutive detection events closer than ``dead_time`` in each frame."""
    out = np.zeros(flags.shape[0], np.int64)
    for i in range(flags.shape[0]):
        last = np.int64(-1)
        have = False
        for g in range(flags.shape[1]):
            f = flags[i, g]
            for kind in range(2):
                mask = (F_GATE_D0 | F_GATE_D1) if kind == 0 else (F_PULSE_D0 | F_PULSE_D1)
                if f & mask:
                    t = np.int64(g) * period + (pulse_offset if kind == 1 else 0)
                    if have and t - last < dead_time:
                        out[i] += 1
                    last = t
                    have = True
    return out


@nb.njit(cache=True)
def schedule_respected(detected, start, memory_depth, min_burst, pause_gates, pulse, burst_len):
    """Burst schedule for one frame; returns the number of bursts.

    ``burst_len[g]`` receives the burst length at the first gate of each burst.
    """
    n = detected.shape[0]
    cap = max(memory_depth, 1)
    g = start
    bursts = 0
    while g < n:
        if not detected[g]:
            g += 1
            continue
        run = 0
        while g + run < n and detected[g + run] and run < cap:
            run += 1
        if run >= min_burst:
            for k in range(run):
                pulse[g + k] = 1
            burst_len[g] = run
            bursts += 1
            g = g + run - 1 + pause_gates
        else:
            g += 1
    return bursts


@nb.njit(cache=True)
def schedule_exploit(detected, start, pulse, burst_len):
    n = detected.shape[0]
    bursts = 0
    g = start
    while g < n:
        if detected[g]:
            run = 0
            while g + run < n and detected[g + run]:
                pulse[g + run] = 1
                run += 1
            burst_len[g] = run
            bursts += 1
            g += run
        else:
            g += 1
    return bursts
