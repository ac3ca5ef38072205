"""BTG oracle reordering: from word alignments to cross-lingual positions.

A bracketing transduction grammar tree is a binary tree over the source
sentence whose internal nodes either keep (straight) or swap (inverted)
their children. The permutations such trees can realize are exactly the
separable permutations. Given an alignment we assign each source token a
representative target position, then run a CKY dynamic program that finds
the tree whose induced permutation minimizes pairwise order discordance
(Kendall-tau distance) against those target positions. The induced
permutation supplies the cross-lingual position index of every token.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

STRAIGHT = "straight"
INVERTED = "inverted"

#: Hard cap on sentence length for the O(n^3) dynamic program.
MAX_SENTENCE_LEN = 512

#: Hard cap on exhaustive tree enumeration.
MAX_ENUMERATION_LEN = 8


class AlignmentParseError(ValueError):
    """Malformed or out-of-range token in a Pharaoh alignment line."""

    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.raw_message = message
        self.line = line
        self.column = column


class CapacityError(ValueError):
    """Input exceeds a documented size cap."""


@dataclass(frozen=True)
class Permutation:
    """A bijection on 0..T-1.

    ``order[k]`` is the original index of the token placed at reordered
    slot ``k``; ``slots[i]`` (the cross-lingual position of token ``i``)
    is the inverse map.
    """

    order: tuple[int, ...]

    def __post_init__(self):
        n = len(self.order)
        if sorted(self.order) != list(range(n)):
            raise ValueError(f"not a bijection on 0..{n - 1}: {self.order}")

    @property
    def slots(self) -> tuple[int, ...]:
        inv = [0] * len(self.order)
        for slot, idx in enumerate(self.order):
            inv[idx] = slot
        return tuple(inv)

    def __len__(self) -> int:
        return len(self.order)

    def is_identity(self) -> bool:
        return all(v == i for i, v in enumerate(self.order))

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(tuple(range(n)))

    @classmethod
    def from_slots(cls, slots) -> "Permutation":
        slots = list(slots)
        order = [0] * len(slots)
        for idx, slot in enumerate(slots):
            if not 0 <= slot < len(slots):
                raise ValueError(f"slot {slot} out of range for length {len(slots)}")
            order[slot] = idx
        return cls(tuple(order))


@dataclass(frozen=True)
class AlignmentSet:
    """Sure and possible alignment links between a sentence pair.

    Invariant: ``sure`` is a subset of ``possible``; indices live in
    ``[0, n_src) x [0, n_tgt)``.
    """

    n_src: int
    n_tgt: int
    sure: frozenset[tuple[int, int]]
    possible: frozenset[tuple[int, int]]

    def __post_init__(self):
        if not self.sure <= self.possible:
            raise ValueError("sure links must be a subset of possible links")
        for s, t in self.possible:
            if not (0 <= s < self.n_src and 0 <= t < self.n_tgt):
                raise ValueError(
                    f"link ({s},{t}) outside {self.n_src}x{self.n_tgt} sentence pair"
                )


def parse_pharaoh(line: str, n_src: int, n_tgt: int | None = None) -> AlignmentSet:
    """Parse one Pharaoh alignment line.

    Tokens are ``i-j`` for sure links and ``i?j`` for possible-only links.
    When ``n_tgt`` is None the target length is inferred as max index + 1.
    Raises :class:`AlignmentParseError` with line/column info on bad input.
    """
    sure: set[tuple[int, int]] = set()
    possible: set[tuple[int, int]] = set()
    col = 0
    for token in line.split():
        col = line.index(token, col) + 1
        sep = "-" if "-" in token else "?" if "?" in token else None
        if sep is None:
            raise AlignmentParseError(
                f"expected 'i-j' or 'i?j', got {token!r}", column=col
            )
        left, _, right = token.partition(sep)
        if not (left.isdigit() and right.isdigit()):
            raise AlignmentParseError(
                f"non-numeric alignment indices in {token!r}", column=col
            )
        s, t = int(left), int(right)
        if s >= n_src or (n_tgt is not None and t >= n_tgt):
            raise AlignmentParseError(
                f"link ({s},{t}) out of range for {n_src}x{n_tgt} pair", column=col
            )
        possible.add((s, t))
        if sep == "-":
            sure.add((s, t))
        col += len(token)
    if n_tgt is None:
        n_tgt = 1 + max((t for _, t in possible), default=-1)
    return AlignmentSet(
        n_src=n_src,
        n_tgt=max(n_tgt, 0),
        sure=frozenset(sure),
        possible=frozenset(possible),
    )


@dataclass
class PairPreference:
    """Per-token target positions plus cached pairwise discordance tables.

    ``t[i]`` is the representative target position of source token ``i``.
    ``prefix_gt[a][b]`` counts pairs ``(x, y)`` with ``x < a``, ``y < b``,
    ``x < y`` and ``t[x] > t[y]`` (``prefix_lt`` likewise with ``<``), so
    the discordance of merging two adjacent blocks is an O(1) lookup.
    """

    t: np.ndarray
    prefix_gt: np.ndarray = field(repr=False, default=None)
    prefix_lt: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.t.ndim != 1:
            raise ValueError("preference vector must be one-dimensional")
        if len(self.t) > MAX_SENTENCE_LEN:
            raise CapacityError(
                f"sentence length {len(self.t)} exceeds cap {MAX_SENTENCE_LEN}"
            )
        if self.prefix_gt is None:
            n = len(self.t)
            gt = np.zeros((n + 1, n + 1), dtype=np.int64)
            lt = np.zeros((n + 1, n + 1), dtype=np.int64)
            # pair matrices restricted to a < b; prefix-sum both axes
            for a in range(n):
                gt[a + 1, a + 2 :] = self.t[a] > self.t[a + 1 :]
                lt[a + 1, a + 2 :] = self.t[a] < self.t[a + 1 :]
            np.cumsum(gt, axis=0, out=gt)
            np.cumsum(gt, axis=1, out=gt)
            np.cumsum(lt, axis=0, out=lt)
            np.cumsum(lt, axis=1, out=lt)
            self.prefix_gt = gt
            self.prefix_lt = lt

    @property
    def n(self) -> int:
        return len(self.t)

    def straight_cost(self, lo: int, mid: int, hi: int) -> int:
        """Discordant pairs if [lo,mid) stays left of [mid,hi)."""
        g = self.prefix_gt
        return int(g[mid, hi] - g[lo, hi] - g[mid, mid] + g[lo, mid])

    def inverted_cost(self, lo: int, mid: int, hi: int) -> int:
        """Discordant pairs if [mid,hi) is swapped before [lo,mid)."""
        l = self.prefix_lt
        return int(l[mid, hi] - l[lo, hi] - l[mid, mid] + l[lo, mid])


def representative_positions(a: AlignmentSet, agg: str = "mean") -> PairPreference:
    """Assign each source token a representative target position.

    Aligned tokens get the ``agg`` (mean/min/first) of their sure-aligned
    target indices. Unaligned tokens inherit the value of the nearest
    aligned token to the left, else to the right, else 0.
    """
    if agg not in ("mean", "min", "first"):
        raise ValueError(f"unknown aggregation rule {agg!r}")
    targets: dict[int, list[int]] = {}
    for s, t in sorted(a.sure):
        targets.setdefault(s, []).append(t)
    t_vals: list[float | None] = [None] * a.n_src
    for s, ts in targets.items():
        if agg == "mean":
            t_vals[s] = sum(ts) / len(ts)
        elif agg == "min":
            t_vals[s] = float(min(ts))
        else:
            t_vals[s] = float(ts[0])
    # left inheritance, then right, then 0
    last = None
    for i in range(a.n_src):
        if t_vals[i] is None:
            t_vals[i] = last
        else:
            last = t_vals[i]
    nxt = None
    for i in reversed(range(a.n_src)):
        if t_vals[i] is None:
            t_vals[i] = nxt
        else:
            nxt = t_vals[i]
    return PairPreference(np.array([0.0 if v is None else v for v in t_vals]))


@dataclass(frozen=True)
class Leaf:
    index: int

    @property
    def span(self) -> tuple[int, int]:
        return (self.index, self.index + 1)


@dataclass(frozen=True)
class Node:
    orientation: str
    left: "BTGTree"
    right: "BTGTree"

    def __post_init__(self):
        if self.orientation not in (STRAIGHT, INVERTED):
            raise ValueError(f"bad orientation {self.orientation!r}")
        if self.left.span[1] != self.right.span[0]:
            raise ValueError("child spans must be adjacent")

    @property
    def span(self) -> tuple[int, int]:
        return (self.left.span[0], self.right.span[1])


BTGTree = Leaf | Node


def apply_tree(tree: BTGTree) -> Permutation:
    """Read the permutation off a tree: straight nodes emit left-then-right,
    inverted nodes right-then-left."""
    out: list[int] = []

    def walk(node: BTGTree):
        if isinstance(node, Leaf):
            out.append(node.index)
        elif node.orientation == STRAIGHT:
            walk(node.left)
            walk(node.right)
        else:
            walk(node.right)
            walk(node.left)

    walk(tree)
    return Permutation(tuple(out))


def tree_cost(tree: BTGTree, pref: PairPreference) -> int:
    """Total pairwise discordance a tree incurs under ``pref``."""
    if isinstance(tree, Leaf):
        return 0
    lo, hi = tree.span
    mid = tree.left.span[1]
    own = (
        pref.straight_cost(lo, mid, hi)
        if tree.orientation == STRAIGHT
        else pref.inverted_cost(lo, mid, hi)
    )
    return own + tree_cost(tree.left, pref) + tree_cost(tree.right, pref)


def brackets(tree: BTGTree) -> str:
    """Bracketed dump: ``[ ]`` wraps straight spans, ``< >`` inverted ones."""
    if isinstance(tree, Leaf):
        return str(tree.index)
    opener, closer = ("[", "]") if tree.orientation == STRAIGHT else ("<", ">")
    return f"{opener} {brackets(tree.left)} {brackets(tree.right)} {closer}"


@dataclass(frozen=True)
class ReorderResult:
    tree: BTGTree
    permutation: Permutation
    cost: int


def btg_oracle_reorder(pref: PairPreference) -> ReorderResult:
    """CKY search for the minimum-discordance BTG tree.

    Merging left block L = [i,k) with right block R = [k,j) costs the
    number of cross pairs ordered against the target positions: pairs with
    t(a) > t(b) for a straight merge, t(a) < t(b) for an inverted one.
    Ties are broken toward straight orientation, then the leftmost split,
    so the result is unique. O(n^3) time via the cached pair tables.
    """
    n = pref.n
    if n < 1:
        raise ValueError("need at least one token")
    best_cost = [[0] * (n + 1) for _ in range(n + 1)]
    # choice[i][j] = (split, orientation) for the best tree over [i, j)
    choice: list[list[tuple[int, str] | None]] = [[None] * (n + 1) for _ in range(n + 1)]

    for width in range(2, n + 1):
        for lo in range(0, n - width + 1):
            hi = lo + width
            cand_cost = None
            cand = None
            for mid in range(lo + 1, hi):
                base = best_cost[lo][mid] + best_cost[mid][hi]
                for orient, cross in (
                    (STRAIGHT, pref.straight_cost(lo, mid, hi)),
                    (INVERTED, pref.inverted_cost(lo, mid, hi)),
                ):
                    total = base + cross
                    key = (total, 0 if orient == STRAIGHT else 1, mid)
                    if cand is None or key < cand:
                        cand = key
                        cand_cost = total
                        choice[lo][hi] = (mid, orient)
            best_cost[lo][hi] = cand_cost

    def build(lo: int, hi: int) -> BTGTree:
        if hi - lo == 1:
            return Leaf(lo)
        mid, orient = choice[lo][hi]
        return Node(orient, build(lo, mid), build(mid, hi))

    tree = build(0, n)
    return ReorderResult(tree=tree, permutation=apply_tree(tree), cost=best_cost[0][n])


def enumerate_btg_permutations(n: int) -> set[tuple[int, ...]]:
    """Exact set of permutations realizable by a BTG tree over n leaves.

    Exhaustive over tree shapes and orientations; capped at n = 8 (the
    counts are the Schroeder numbers 1, 2, 6, 22, 90, 394, 1806, 8558).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if n > MAX_ENUMERATION_LEN:
        raise CapacityError(f"enumeration capped at n = {MAX_ENUMERATION_LEN}")

    @lru_cache(maxsize=None)
    def perms(m: int) -> frozenset[tuple[int, ...]]:
        if m == 1:
            return frozenset({(0,)})
        acc: set[tuple[int, ...]] = set()
        for k in range(1, m):
            rights = [tuple(x + k for x in r) for r in perms(m - k)]
            for left in perms(k):
                for right in rights:
                    acc.add(left + right)
                    acc.add(right + left)
        return frozenset(acc)

    return set(perms(n))


@lru_cache(maxsize=None)
def _tree_shapes(n: int) -> int:
    """Number of full binary trees with n leaves (Catalan(n-1))."""
    if n <= 1:
        return 1
    return sum(_tree_shapes(k) * _tree_shapes(n - k) for k in range(1, n))


def sample_btg_permutation(
    n: int, p_invert: float, seed: int
) -> tuple[BTGTree, Permutation]:
    """Sample a uniformly random tree shape, flipping each internal node
    with probability ``p_invert``. Deterministic given the seed."""
    if not 0.0 <= p_invert <= 1.0:
        raise ValueError("p_invert must be within [0, 1]")
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = random.Random(seed)

    def build(lo: int, hi: int) -> BTGTree:
        m = hi - lo
        if m == 1:
            return Leaf(lo)
        # left size k with probability shapes(k) * shapes(m-k) / shapes(m)
        total = _tree_shapes(m)
        pick = rng.randrange(total)
        acc = 0
        for k in range(1, m):
            acc += _tree_shapes(k) * _tree_shapes(m - k)
            if pick < acc:
                break
        orient = INVERTED if rng.random() < p_invert else STRAIGHT
        return Node(orient, build(lo, lo + k), build(lo + k, hi))

    tree = build(0, n)
    return tree, apply_tree(tree)


def reorder_corpus(
    corpus_lines: list[str], alignment_lines: list[str]
) -> list[ReorderResult]:
    """Run the oracle reorderer over parallel corpus/alignment lines."""
    if len(corpus_lines) != len(alignment_lines):
        raise ValueError(
            f"corpus has {len(corpus_lines)} lines but alignment file has "
            f"{len(alignment_lines)}"
        )
    results = []
    for lineno, (sent, align) in enumerate(zip(corpus_lines, alignment_lines), 1):
        n_src = len(sent.split())
        if n_src == 0:
            raise ValueError(f"line {lineno}: empty sentence")
        try:
            aset = parse_pharaoh(align, n_src=n_src, n_tgt=None)
        except AlignmentParseError as exc:
            raise AlignmentParseError(
                exc.raw_message, line=lineno, column=exc.column
            ) from exc
        results.append(btg_oracle_reorder(representative_positions(aset)))
    return results


def format_indices(perm: Permutation) -> str:
    """One output line of cross-lingual position indices (slot per token)."""
    return " ".join(str(s) for s in perm.slots)
