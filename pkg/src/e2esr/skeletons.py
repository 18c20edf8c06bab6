"""Exact count of expression skeletons by number of operators.

A skeleton here is an ordered tree whose internal nodes are operators and
whose leaves are variables; constants are placeholders and do not add to
the count. Counts are Python ints, so they stay exact at any size.
"""

from __future__ import annotations

from functools import lru_cache


def count_skeletons(n_ops: int, n_variables: int = 1, n_binary: int = 3, n_unary: int = 10) -> int:
    """Number of distinct trees with exactly ``n_ops`` operator nodes.

    T(0) = D, and T(n) = U T(n-1) + B sum_k T(k) T(n-1-k) for n >= 1.
    """
    if n_ops < 0:
        raise ValueError("n_ops must be >= 0")
    return skeleton_counts(n_ops, n_variables, n_binary, n_unary)[n_ops]


@lru_cache(maxsize=64)
def skeleton_counts(n_max: int, n_variables: int = 1, n_binary: int = 3, n_unary: int = 10) -> tuple[int, ...]:
    t = [n_variables]
    for n in range(1, n_max + 1):
        pairs = sum(t[k] * t[n - 1 - k] for k in range(n))
        t.append(n_unary * t[n - 1] + n_binary * pairs)
    return tuple(t)
