"""Label-set algebra for multi-source adaptation setups.

A setup with M source domains and one target is described by integer block
sizes: for each source, how many of its classes are shared with the target
and how many are private to it, plus the size of the overall shared set and
the number of target-only classes. This module turns such a size matrix
into concrete class index sets and computes the derived quantities used
elsewhere (set unions, Jaccard similarities, membership masks).

Index layout convention: classes shared with the target occupy the range
[0, n_common), source-private classes the next range, and target-private
classes the last one. The union of all source label sets is therefore
always the contiguous range [0, n_source_classes), which the training code
relies on when sizing the classifier head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LabelConfigError",
    "UmdaMatrix",
    "LabelPartition",
    "MembershipMasks",
    "partition_from_matrix",
    "matrix_from_partition",
    "jaccard_source_target",
    "jaccard_source_source",
    "membership_masks",
]


class LabelConfigError(ValueError):
    """A label-set configuration that cannot be realized."""


def _as_pair_dict(d):
    """Normalize an override mapping to {(i, j): size} with i < j, 1-based."""
    if d is None:
        return {}
    out = {}
    for key, size in d.items():
        i, j = key
        if i > j:
            i, j = j, i
        out[(int(i), int(j))] = int(size)
    return out


@dataclass(frozen=True)
class UmdaMatrix:
    """Block sizes of a multi-source label configuration.

    ``common_sizes[k]`` is the number of classes source k+1 shares with the
    target and ``private_sizes[k]`` the number it keeps to itself.
    ``target_common`` is the size of the union of all shared blocks and
    ``target_private`` the number of target-only classes.

    ``common_overlap`` / ``private_overlap`` optionally pin the intersection
    size of a pair of sources' shared (private) blocks, keyed by 1-based
    source pairs, e.g. ``{(1, 2): 4}``. Without an override the layout rule
    below decides the overlaps.
    """

    common_sizes: tuple[int, ...]
    private_sizes: tuple[int, ...]
    target_common: int
    target_private: int
    common_overlap: dict | None = None
    private_overlap: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "common_sizes", tuple(int(s) for s in self.common_sizes))
        object.__setattr__(self, "private_sizes", tuple(int(s) for s in self.private_sizes))
        object.__setattr__(self, "target_common", int(self.target_common))
        object.__setattr__(self, "target_private", int(self.target_private))

    @property
    def n_sources(self) -> int:
        return len(self.common_sizes)

    def violations(self) -> list[str]:
        """Collect every constraint violation instead of stopping at the first."""
        out = []
        m = self.n_sources
        if m < 1:
            out.append("at least one source domain is required")
        if len(self.private_sizes) != m:
            out.append(
                f"common_sizes has {m} entries but private_sizes has {len(self.private_sizes)}"
            )
        for name, values in (("common_sizes", self.common_sizes), ("private_sizes", self.private_sizes)):
            for k, v in enumerate(values):
                if v < 0:
                    out.append(f"{name}[{k}] is negative ({v})")
        if self.target_common < 0:
            out.append(f"target_common is negative ({self.target_common})")
        if self.target_private < 0:
            out.append(f"target_private is negative ({self.target_private})")
        for k, v in enumerate(self.common_sizes):
            if v > self.target_common:
                out.append(
                    f"common_sizes[{k}]={v} exceeds target_common={self.target_common}"
                )
        if sum(self.common_sizes) < self.target_common:
            out.append(
                f"common blocks sum to {sum(self.common_sizes)} and cannot cover "
                f"target_common={self.target_common}"
            )
        for label, overrides in (("common_overlap", self.common_overlap), ("private_overlap", self.private_overlap)):
            if not overrides:
                continue
            pairs = _as_pair_dict(overrides)
            if m != 2 or set(pairs) != {(1, 2)}:
                out.append(f"{label} overrides are only supported for the pair (1, 2) of a 2-source setup")
                continue
            o = pairs[(1, 2)]
            sizes = self.common_sizes if label == "common_overlap" else self.private_sizes
            if not 0 <= o <= min(sizes):
                out.append(f"{label}[(1, 2)]={o} is outside [0, {min(sizes)}]")
            if label == "common_overlap" and sum(sizes) - o != self.target_common:
                out.append(
                    f"common_overlap[(1, 2)]={o} is inconsistent: "
                    f"{sizes[0]}+{sizes[1]}-{o} != target_common={self.target_common}"
                )
        return out


def _layout_blocks(sizes, window, what):
    """Place len(sizes) blocks inside [0, window) so their union covers it.

    Primary rule: block k starts at floor(k * window / m) and wraps, which
    spreads pairwise overlaps as evenly as possible. When unequal sizes make
    that rule leave part of the window uncovered, fall back to a sequential
    layout that distributes the total required overlap evenly between
    neighbours. Raises when no rule can realize the sizes.
    """
    m = len(sizes)
    for s in sizes:
        if s > window:
            raise LabelConfigError(f"{what}: block of size {s} exceeds window {window}")
    if sum(sizes) < window:
        raise LabelConfigError(
            f"{what}: blocks sum to {sum(sizes)} and cannot cover window {window}"
        )
    if window == 0:
        return [frozenset() for _ in sizes]

    starts = [(k * window) // m for k in range(m)]
    blocks = [
        frozenset((st + i) % window for i in range(sz)) for st, sz in zip(starts, sizes)
    ]
    if len(frozenset().union(*blocks)) == window:
        return blocks

    if m == 1:
        raise LabelConfigError(f"{what}: single block of size {sizes[0]} cannot cover window {window}")
    budget = sum(sizes) - window
    prefix = 0
    starts, ok = [], True
    for k, sz in enumerate(sizes):
        st = prefix - (k * budget) // (m - 1)
        if st < 0 or st + sz > window:
            ok = False
            break
        starts.append(st)
        prefix += sz
    if ok:
        blocks = [
            frozenset(range(st, st + sz)) for st, sz in zip(starts, sizes)
        ]
        if len(frozenset().union(*blocks)) == window:
            return blocks
    raise LabelConfigError(
        f"{what}: sizes {tuple(sizes)} admit no deterministic layout over window {window}"
    )


def _layout_pair(n1, n2, overlap, window, what):
    """Two blocks with a pinned intersection size inside [0, window)."""
    if not 0 <= overlap <= min(n1, n2):
        raise LabelConfigError(f"{what}: overlap {overlap} is outside [0, {min(n1, n2)}]")
    if n1 + n2 - overlap != window:
        raise LabelConfigError(
            f"{what}: {n1}+{n2}-{overlap} != window {window}"
        )
    a = frozenset(range(n1))
    b = frozenset(range(n1 - overlap, n1 - overlap + n2))
    return [a, b]


def _sorted(values) -> tuple[int, ...]:
    return tuple(sorted(int(v) for v in values))


@dataclass(frozen=True)
class LabelPartition:
    """Concrete class index sets realizing an :class:`UmdaMatrix`.

    The primary fields are the per-source label sets and the target label
    set; everything else is derived set algebra, stored for convenience and
    re-checked against the primaries on construction.
    """

    total_classes: int
    source_labels: tuple[tuple[int, ...], ...]
    target_labels: tuple[int, ...]
    common_per_source: tuple[tuple[int, ...], ...] = field(default=())
    private_per_source: tuple[tuple[int, ...], ...] = field(default=())
    common_union: tuple[int, ...] = field(default=())
    source_union: tuple[int, ...] = field(default=())
    source_private_union: tuple[int, ...] = field(default=())
    target_private: tuple[int, ...] = field(default=())

    def __post_init__(self):
        derived = _derive(self.total_classes, self.source_labels, self.target_labels)
        for name, value in derived.items():
            stored = getattr(self, name)
            if stored == () and value != ():
                object.__setattr__(self, name, value)
            elif stored != value:
                raise LabelConfigError(f"stored {name} disagrees with the primary sets")

    @classmethod
    def from_primaries(cls, source_labels, target_labels, total_classes):
        return cls(
            total_classes=int(total_classes),
            source_labels=tuple(_sorted(s) for s in source_labels),
            target_labels=_sorted(target_labels),
        )

    @property
    def n_sources(self) -> int:
        return len(self.source_labels)

    @property
    def n_source_classes(self) -> int:
        return len(self.source_union)


def _derive(total, source_labels, target_labels):
    sources = [set(s) for s in source_labels]
    target = set(target_labels)
    for k, s in enumerate(sources):
        bad = [c for c in s if not 0 <= c < total]
        if bad:
            raise LabelConfigError(f"source {k + 1} labels {bad} outside [0, {total})")
    if any(not 0 <= c < total for c in target):
        raise LabelConfigError(f"target labels outside [0, {total})")
    common_per_source = tuple(_sorted(s & target) for s in sources)
    private_per_source = tuple(_sorted(s - target) for s in sources)
    common_union = _sorted(set().union(*(set(c) for c in common_per_source)) if sources else set())
    source_union = _sorted(set().union(*sources) if sources else set())
    private_union = _sorted(set().union(*(set(p) for p in private_per_source)) if sources else set())
    target_private = _sorted(target - set(source_union))
    return {
        "common_per_source": common_per_source,
        "private_per_source": private_per_source,
        "common_union": common_union,
        "source_union": source_union,
        "source_private_union": private_union,
        "target_private": target_private,
    }


def partition_from_matrix(matrix: UmdaMatrix) -> LabelPartition:
    """Realize a size matrix as concrete class index sets.

    Shared blocks are placed inside [0, target_common) by the layout rule of
    :func:`_layout_blocks`; private blocks are placed after them, disjoint by
    default; target-only classes take the final indices. Pair overrides pin
    the intersection of the two blocks instead of the default rule.
    """
    problems = matrix.violations()
    if problems:
        raise LabelConfigError("; ".join(problems))

    n_common = matrix.target_common
    common_over = _as_pair_dict(matrix.common_overlap)
    if common_over:
        common_blocks = _layout_pair(
            matrix.common_sizes[0], matrix.common_sizes[1], common_over[(1, 2)],
            n_common, "common blocks",
        )
    else:
        common_blocks = _layout_blocks(matrix.common_sizes, n_common, "common blocks")

    private_over = _as_pair_dict(matrix.private_overlap)
    if private_over:
        window = sum(matrix.private_sizes) - private_over[(1, 2)]
        private_blocks = _layout_pair(
            matrix.private_sizes[0], matrix.private_sizes[1], private_over[(1, 2)],
            window, "private blocks",
        )
    else:
        window = sum(matrix.private_sizes)
        private_blocks = _layout_blocks(matrix.private_sizes, window, "private blocks")

    total = n_common + window + matrix.target_private
    source_labels = [
        frozenset(c) | frozenset(n_common + p for p in priv)
        for c, priv in zip(common_blocks, private_blocks)
    ]
    target_labels = frozenset(range(n_common)) | frozenset(
        range(n_common + window, total)
    )
    return LabelPartition.from_primaries(source_labels, target_labels, total)


def matrix_from_partition(partition: LabelPartition) -> UmdaMatrix:
    """Measure block sizes of a partition (overrides are not reconstructed)."""
    return UmdaMatrix(
        common_sizes=tuple(len(c) for c in partition.common_per_source),
        private_sizes=tuple(len(p) for p in partition.private_per_source),
        target_common=len(partition.common_union),
        target_private=len(partition.target_private),
    )


def _jaccard(a: set, b: set, what: str) -> float:
    union = a | b
    if not union:
        raise LabelConfigError(f"jaccard of two empty sets is undefined ({what})")
    return len(a & b) / len(union)


def jaccard_source_target(partition: LabelPartition, i: int) -> float:
    """Jaccard similarity between source i's label set and the target's (i is 1-based)."""
    if not 1 <= i <= partition.n_sources:
        raise LabelConfigError(f"source index {i} outside [1, {partition.n_sources}]")
    return _jaccard(
        set(partition.source_labels[i - 1]), set(partition.target_labels), f"source {i} vs target"
    )


def jaccard_source_source(partition: LabelPartition, i: int, j: int) -> float:
    """Jaccard similarity between two sources' label sets (1-based indices)."""
    for k in (i, j):
        if not 1 <= k <= partition.n_sources:
            raise LabelConfigError(f"source index {k} outside [1, {partition.n_sources}]")
    return _jaccard(
        set(partition.source_labels[i - 1]),
        set(partition.source_labels[j - 1]),
        f"source {i} vs source {j}",
    )


@dataclass(frozen=True)
class MembershipMasks:
    """Boolean per-class membership flags, indexed by global class id."""

    common: np.ndarray
    source_private: np.ndarray
    target_private: np.ndarray
    per_source: np.ndarray  # shape (M, total_classes), True where class in C_si


def membership_masks(partition: LabelPartition) -> MembershipMasks:
    n = partition.total_classes

    def mask(classes):
        out = np.zeros(n, dtype=bool)
        out[list(classes)] = True
        return out

    per_source = np.stack([mask(s) for s in partition.source_labels]) if partition.n_sources else np.zeros((0, n), dtype=bool)
    return MembershipMasks(
        common=mask(partition.common_union),
        source_private=mask(partition.source_private_union),
        target_private=mask(partition.target_private),
        per_source=per_source,
    )
