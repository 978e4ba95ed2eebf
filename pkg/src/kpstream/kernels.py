"""Tight inner loops compiled with numba, all nogil so threads overlap.

Only mechanics live here (stable merges, block sort, hash probing);
policy, accounting and allocation stay in the callers.
"""
from __future__ import annotations

import numpy as np
from numba import njit

BLOCK = 64  # elements per base sort block

# Fibonacci-style multiplicative hash spreads uint64 keys over the table
_HASH_MULT = np.uint64(0x9E3779B97F4A7C15)


@njit(nogil=True, cache=True)
def chunk_sort(keys, refs, scratch_k, scratch_r):
    """Stable in-place sort of one chunk: insertion-sorted 64-element
    blocks, then doubling stable merge rounds through the scratch pair."""
    n = keys.shape[0]
    for b0 in range(0, n, BLOCK):
        b1 = min(b0 + BLOCK, n)
        for i in range(b0 + 1, b1):
            k = keys[i]
            r = refs[i]
            j = i - 1
            while j >= b0 and keys[j] > k:
                keys[j + 1] = keys[j]
                refs[j + 1] = refs[j]
                j -= 1
            keys[j + 1] = k
            refs[j + 1] = r
    width = BLOCK
    src_k, src_r = keys, refs
    dst_k, dst_r = scratch_k, scratch_r
    while width < n:
        for start in range(0, n, 2 * width):
            mid = min(start + width, n)
            end = min(start + 2 * width, n)
            i = start
            j = mid
            o = start
            while i < mid and j < end:
                if src_k[i] <= src_k[j]:
                    dst_k[o] = src_k[i]
                    dst_r[o] = src_r[i]
                    i += 1
                else:
                    dst_k[o] = src_k[j]
                    dst_r[o] = src_r[j]
                    j += 1
                o += 1
            while i < mid:
                dst_k[o] = src_k[i]
                dst_r[o] = src_r[i]
                i += 1
                o += 1
            while j < end:
                dst_k[o] = src_k[j]
                dst_r[o] = src_r[j]
                j += 1
                o += 1
        src_k, dst_k = dst_k, src_k
        src_r, dst_r = dst_r, src_r
        width *= 2
    if src_k is not keys:
        keys[:] = src_k
        refs[:] = src_r


@njit(nogil=True, cache=True)
def merge_into(lk, lr, rk, rr, ok, orf):
    """Stable two-run merge; equal keys take the left run first."""
    nl = lk.shape[0]
    nr = rk.shape[0]
    i = 0
    j = 0
    o = 0
    while i < nl and j < nr:
        if lk[i] <= rk[j]:
            ok[o] = lk[i]
            orf[o] = lr[i]
            i += 1
        else:
            ok[o] = rk[j]
            orf[o] = rr[j]
            j += 1
        o += 1
    while i < nl:
        ok[o] = lk[i]
        orf[o] = lr[i]
        i += 1
        o += 1
    while j < nr:
        ok[o] = rk[j]
        orf[o] = rr[j]
        j += 1
        o += 1


@njit(nogil=True, cache=True)
def hash_assign_groups(keys, table_keys, table_gids, gids_out, max_groups):
    """Open-addressing probe assigning dense group ids in first-seen order.

    table_gids slots hold -1 when empty. Returns the group count, or -1
    if max_groups would be exceeded (caller grows the table and reruns).
    """
    mask = np.uint64(table_keys.shape[0] - 1)
    count = 0
    for i in range(keys.shape[0]):
        k = keys[i]
        slot = (k * _HASH_MULT) & mask
        while True:
            g = table_gids[slot]
            if g == -1:
                if count >= max_groups:
                    return -1
                table_keys[slot] = k
                table_gids[slot] = count
                gids_out[i] = count
                count += 1
                break
            if table_keys[slot] == k:
                gids_out[i] = g
                break
            slot = (slot + np.uint64(1)) & mask
    return count


@njit(nogil=True, cache=True)
def minmax_by_group(gids, values, out, take_min):
    """Per-group running min or max; out must be pre-filled with the
    identity (all-ones for min, zeros for max)."""
    for i in range(gids.shape[0]):
        g = gids[i]
        v = values[i]
        if take_min:
            if v < out[g]:
                out[g] = v
        else:
            if v > out[g]:
                out[g] = v


def warm_up() -> None:
    """Force compilation of every kernel (first call pays the JIT)."""
    k = np.arange(130, dtype=np.uint64)[::-1].copy()
    r = np.arange(130, dtype=np.uint64)
    chunk_sort(k, r, np.empty_like(k), np.empty_like(r))
    out_k = np.empty(4, np.uint64)
    out_r = np.empty(4, np.uint64)
    merge_into(k[:2], r[:2], k[2:4], r[2:4], out_k, out_r)
    tk = np.zeros(8, np.uint64)
    tg = np.full(8, -1, np.int64)
    g = np.empty(3, np.int64)
    hash_assign_groups(np.array([5, 5, 9], np.uint64), tk, tg, g, 8)
    mm = np.zeros(2, np.uint64)
    minmax_by_group(np.array([0, 1], np.int64), np.array([3, 4], np.uint64), mm, False)
