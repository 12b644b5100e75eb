"""Independent edit-distance oracles and pair enumeration for alignment tests."""
from functools import lru_cache

import numpy as np


def naive_distance(a, b):
    """Plain recursion on heads and tails, no tables."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        naive_distance(a[1:], b[1:]) + (a[0] != b[0]),
        naive_distance(a[1:], b) + 1,
        naive_distance(a, b[1:]) + 1,
    )


def distance_tables(max_len: int, alphabet: int = 4) -> dict:
    """Head/tail recursion evaluated for every pair of sequences at once.

    ``tables[n, m][code(a), code(b)]`` is the distance between sequences of
    lengths n and m, coded base-``alphabet`` with the first symbol most
    significant.
    """
    tables = {}
    for n in range(max_len + 1):
        for m in range(max_len + 1):
            if n == 0 or m == 0:
                tables[n, m] = np.full((alphabet**n, alphabet**m), n + m, dtype=np.int8)
                continue
            a = np.arange(alphabet**n)
            b = np.arange(alphabet**m)
            head_a, tail_a = a // alphabet ** (n - 1), a % alphabet ** (n - 1)
            head_b, tail_b = b // alphabet ** (m - 1), b % alphabet ** (m - 1)
            both = tables[n - 1, m - 1][np.ix_(tail_a, tail_b)] + (head_a[:, None] != head_b[None, :])
            drop_a = tables[n - 1, m][tail_a, :] + 1
            drop_b = tables[n, m - 1][:, tail_b] + 1
            tables[n, m] = np.minimum(np.minimum(both, drop_a), drop_b).astype(np.int8)
    return tables


def code(seq, alphabet: int = 4) -> int:
    value = 0
    for s in seq:
        value = value * alphabet + s
    return value


def canonical_strings(length: int, alphabet: int = 4):
    """Sequences whose symbols first appear in order 0, 1, 2, ... (one per relabelling class)."""
    @lru_cache(maxsize=None)
    def grow(remaining: int, used: int):
        if remaining == 0:
            return [()]
        out = []
        for s in range(min(used + 1, alphabet)):
            for rest in grow(remaining - 1, max(used, s + 1)):
                out.append((s,) + rest)
        return out

    return grow(length, 0)


def canonical_pairs(max_len: int, alphabet: int = 4):
    """Every (ref, hyp) with lengths <= max_len, up to a joint relabelling of symbols."""
    for total in range(2 * max_len + 1):
        for joint in canonical_strings(total, alphabet):
            for n in range(max(0, total - max_len), min(total, max_len) + 1):
                yield joint[:n], joint[n:]
