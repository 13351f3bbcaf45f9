"""Truncated tensor algebra and path signatures.

Level ``n`` of a tensor series over ``C`` channels is stored as a flat block
of length ``C**n`` indexed by the multi-index ``(i1, ..., in)`` in row-major
(lexicographic) order. Level 0 is a block of length one. Internal helpers
work on lists of level blocks that may carry arbitrary leading batch axes,
which is how whole images (many rows at once) are signed in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "TensorSeries",
    "PathStream",
    "LyndonBasis",
    "LogSigVector",
    "DimensionMismatch",
    "NotGroupLike",
    "tensor_dim",
    "witt_dims",
    "lyndon_words",
    "segment_signature",
    "chen_product",
    "path_signature",
    "batch_signature",
    "batch_log_signature",
    "log_signature",
    "exp_tensor",
    "expected_signature",
    "signature_oracle",
]


class DimensionMismatch(ValueError):
    """Operands disagree on channels or depth."""


class NotGroupLike(ValueError):
    """A tensor series whose scalar term is not 1 has no tensor logarithm here."""


def tensor_dim(channels: int, depth: int) -> int:
    """Number of signature coordinates at levels 1..depth, i.e. sum of C**n."""
    if channels < 1 or depth < 1:
        raise ValueError(f"channels and depth must be >= 1, got {channels}, {depth}")
    return sum(channels**n for n in range(1, depth + 1))


def _mobius(n: int) -> int:
    result = 1
    p = 2
    while p * p <= n:
        if n % p == 0:
            n //= p
            if n % p == 0:
                return 0
            result = -result
        p += 1
    if n > 1:
        result = -result
    return result


def witt_dims(channels: int, depth: int) -> list[int]:
    """Dimensions of the degree-1..depth parts of the free Lie algebra.

    Uses the necklace (Witt) formula ``(1/n) * sum_{d | n} mu(d) * C**(n/d)``.
    """
    if channels < 1 or depth < 1:
        raise ValueError(f"channels and depth must be >= 1, got {channels}, {depth}")
    dims = []
    for n in range(1, depth + 1):
        total = sum(_mobius(d) * channels ** (n // d) for d in range(1, n + 1) if n % d == 0)
        dims.append(total // n)
    return dims


# ---------------------------------------------------------------------------
# level-block arithmetic (batch aware)
# ---------------------------------------------------------------------------


def _outer(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = x[..., :, None] * y[..., None, :]
    return out.reshape(out.shape[:-2] + (-1,))


def _mul(a: Sequence[np.ndarray], b: Sequence[np.ndarray], depth: int) -> list[np.ndarray]:
    out = []
    for n in range(depth + 1):
        acc = _outer(a[0], b[n])
        for k in range(1, n + 1):
            acc = acc + _outer(a[k], b[n - k])
        out.append(acc)
    return out


def _log(levels: Sequence[np.ndarray], depth: int) -> list[np.ndarray]:
    # log(1 + x) = sum_k (-1)^(k-1) x^k / k, exact after depth terms since x has no scalar part
    x = [np.zeros_like(levels[0])] + [np.asarray(lv) for lv in levels[1:]]
    power = list(x)
    acc = [blk.copy() for blk in x]
    for k in range(2, depth + 1):
        power = _mul(power, x, depth)
        coef = (-1.0) ** (k - 1) / k
        for n in range(k, depth + 1):
            acc[n] = acc[n] + coef * power[n]
    return acc


def _exp(levels: Sequence[np.ndarray], depth: int) -> list[np.ndarray]:
    x = [np.zeros_like(levels[0])] + [np.asarray(lv) for lv in levels[1:]]
    power = list(x)
    acc = [np.ones_like(levels[0])] + [blk.copy() for blk in x[1:]]
    for k in range(2, depth + 1):
        power = _mul(power, x, depth)
        coef = 1.0 / math.factorial(k)
        for n in range(k, depth + 1):
            acc[n] = acc[n] + coef * power[n]
    return acc


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TensorSeries:
    """An element of the truncated tensor algebra T^(N)(R^C)."""

    channels: int
    depth: int
    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        if self.channels < 1 or self.depth < 1:
            raise ValueError("channels and depth must be >= 1")
        if len(self.levels) != self.depth + 1:
            raise DimensionMismatch(f"expected {self.depth + 1} level blocks, got {len(self.levels)}")
        blocks = []
        for n, blk in enumerate(self.levels):
            blk = np.array(blk, dtype=np.float64).reshape(-1)
            if blk.size != self.channels**n:
                raise DimensionMismatch(f"level {n} block has {blk.size} entries, expected {self.channels**n}")
            blk.setflags(write=False)
            blocks.append(blk)
        object.__setattr__(self, "levels", tuple(blocks))

    @classmethod
    def identity(cls, channels: int, depth: int) -> "TensorSeries":
        levels = [np.ones(1)] + [np.zeros(channels**n) for n in range(1, depth + 1)]
        return cls(channels, depth, tuple(levels))

    def level(self, n: int) -> np.ndarray:
        """Projection onto the degree-n tensor power."""
        return self.levels[n]

    def flat(self) -> np.ndarray:
        """Levels 1..N concatenated in level order (the scalar term is dropped)."""
        return np.concatenate(self.levels[1:])

    def __matmul__(self, other: "TensorSeries") -> "TensorSeries":
        return chen_product(self, other)


@dataclass(frozen=True)
class PathStream:
    """An ordered sequence of points in R^C (one image row or column)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"a stream needs shape (L>=1, C>=1), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("stream points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def channels(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


def _as_points(stream) -> np.ndarray:
    if isinstance(stream, PathStream):
        return stream.points
    return PathStream(stream).points


# ---------------------------------------------------------------------------
# Lyndon words and the log-signature basis
# ---------------------------------------------------------------------------


def lyndon_words(channels: int, depth: int) -> list[tuple[int, ...]]:
    """All Lyndon words of length <= depth over letters 0..channels-1.

    Ordered by length, then lexicographically within a length.
    """
    words = []
    # Duval's generation: yields every Lyndon word of length <= depth in lex order
    w = [-1]
    while w:
        w[-1] += 1
        words.append(tuple(w))
        m = len(w)
        while len(w) < depth:
            w.append(w[len(w) - m])
        while w and w[-1] == channels - 1:
            w.pop()
    words.sort(key=lambda t: (len(t), t))
    return words


def _standard_factorization(word: tuple[int, ...]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    # right factor is the longest proper suffix that is itself a Lyndon word
    for i in range(1, len(word)):
        suffix = word[i:]
        if _is_lyndon(suffix):
            return word[:i], suffix
    raise ValueError(f"{word} has no standard factorization")


def _is_lyndon(word: tuple[int, ...]) -> bool:
    return all(word < word[i:] + word[:i] for i in range(1, len(word)))


@lru_cache(maxsize=None)
def _bracket_expansion(word: tuple[int, ...], channels: int) -> np.ndarray:
    if len(word) == 1:
        e = np.zeros(channels)
        e[word[0]] = 1.0
        return e
    left, right = _standard_factorization(word)
    u = _bracket_expansion(left, channels)
    v = _bracket_expansion(right, channels)
    return np.outer(u, v).reshape(-1) - np.outer(v, u).reshape(-1)


def _word_index(word: Sequence[int], channels: int) -> int:
    idx = 0
    for letter in word:
        idx = idx * channels + letter
    return idx


@dataclass(frozen=True)
class LyndonBasis:
    """Lyndon-word coordinates for the truncated free Lie algebra.

    A Lie element ``L`` is recorded by its tensor coefficients at the Lyndon
    words, ``coords[w] = <L, w>``. Lie elements are determined by these
    coefficients: each Lyndon word's standard bracket expands to the word
    itself plus lexicographically larger words, so the map from bracket
    coefficients to Lyndon-word coefficients is unitriangular per level.
    """

    channels: int
    depth: int
    words: tuple[tuple[int, ...], ...] = field(init=False)
    level_counts: tuple[int, ...] = field(init=False)
    _indices: tuple[np.ndarray, ...] = field(init=False, repr=False)
    _brackets: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        words = lyndon_words(self.channels, self.depth)
        counts = [0] * self.depth
        for w in words:
            counts[len(w) - 1] += 1
        indices, brackets = [], []
        for n in range(1, self.depth + 1):
            level_words = [w for w in words if len(w) == n]
            indices.append(np.array([_word_index(w, self.channels) for w in level_words], dtype=np.intp))
            if level_words:
                brackets.append(np.stack([_bracket_expansion(w, self.channels) for w in level_words]))
            else:
                brackets.append(np.zeros((0, self.channels**n)))
        object.__setattr__(self, "words", tuple(words))
        object.__setattr__(self, "level_counts", tuple(counts))
        object.__setattr__(self, "_indices", tuple(indices))
        object.__setattr__(self, "_brackets", tuple(brackets))

    def __len__(self) -> int:
        return len(self.words)

    def level_indices(self, n: int) -> np.ndarray:
        """Flat positions of the degree-n Lyndon words inside a level-n block."""
        return self._indices[n - 1]

    def bracket_matrix(self, n: int) -> np.ndarray:
        """Rows are the tensor expansions of the degree-n standard brackets."""
        return self._brackets[n - 1]

    def project(self, levels: Sequence[np.ndarray]) -> np.ndarray:
        """Read Lyndon coordinates from Lie-element level blocks (batch aware)."""
        parts = [levels[n][..., self._indices[n - 1]] for n in range(1, self.depth + 1)]
        return np.concatenate(parts, axis=-1)

    def embed(self, coords: np.ndarray) -> list[np.ndarray]:
        """Inverse of :meth:`project`: expand coordinates to the full Lie element."""
        coords = np.asarray(coords, dtype=np.float64)
        levels = [np.zeros(1)]
        start = 0
        for n in range(1, self.depth + 1):
            count = self.level_counts[n - 1]
            x = coords[start:start + count]
            start += count
            if count == 0:
                levels.append(np.zeros(self.channels**n))
                continue
            brackets = self._brackets[n - 1]
            system = brackets[:, self._indices[n - 1]].T
            levels.append(np.linalg.solve(system, x) @ brackets)
        return levels


@lru_cache(maxsize=64)
def _cached_basis(channels: int, depth: int) -> LyndonBasis:
    return LyndonBasis(channels, depth)


@dataclass(frozen=True)
class LogSigVector:
    channels: int
    depth: int
    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64).reshape(-1)
        expected = sum(witt_dims(self.channels, self.depth))
        if coords.size != expected:
            raise DimensionMismatch(f"log signature needs {expected} coordinates, got {coords.size}")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)


# ---------------------------------------------------------------------------
# signatures
# ---------------------------------------------------------------------------


def segment_signature(increment, depth: int) -> TensorSeries:
    """Signature of a straight segment: level n is increment^(x)n / n!."""
    v = np.asarray(increment, dtype=np.float64).reshape(-1)
    levels = [np.ones(1)]
    for n in range(1, depth + 1):
        levels.append(_outer(levels[-1], v) / n)
    return TensorSeries(v.size, depth, tuple(levels))


def chen_product(a: TensorSeries, b: TensorSeries) -> TensorSeries:
    """Truncated tensor product; the signature of a concatenated path."""
    if a.channels != b.channels or a.depth != b.depth:
        raise DimensionMismatch(
            f"cannot multiply series with (channels, depth) = {(a.channels, a.depth)} and {(b.channels, b.depth)}"
        )
    return TensorSeries(a.channels, a.depth, tuple(_mul(a.levels, b.levels, a.depth)))


def batch_signature(paths, depth: int) -> list[np.ndarray]:
    """Signatures of many piecewise-linear paths at once.

    ``paths`` has shape ``(..., L, C)``. Returns level blocks with shapes
    ``(..., C**n)`` for n = 0..depth. Each increment is folded in with a
    Horner-style multiplication by its segment exponential.
    """
    paths = np.asarray(paths, dtype=np.float64)
    if paths.ndim < 2 or paths.shape[-2] < 1:
        raise ValueError(f"paths must have shape (..., L>=1, C), got {paths.shape}")
    batch = paths.shape[:-2]
    channels = paths.shape[-1]
    levels = [np.ones(batch + (1,))] + [np.zeros(batch + (channels**n,)) for n in range(1, depth + 1)]
    increments = np.diff(paths, axis=-2)
    for step in range(increments.shape[-2]):
        v = increments[..., step, :]
        # top level first so lower levels still hold the old values when read
        for n in range(depth, 0, -1):
            acc = levels[0] * (v / n) if n > 1 else v.copy()
            if n > 1:
                for k in range(1, n - 1):
                    acc = _outer(acc + levels[k], v / (n - k))
                acc = _outer(acc + levels[n - 1], v)
            levels[n] = levels[n] + acc
    return levels


def batch_log_signature(paths, depth: int) -> np.ndarray:
    """Lyndon-coordinate log signatures for paths of shape ``(..., L, C)``."""
    paths = np.asarray(paths, dtype=np.float64)
    basis = _cached_basis(paths.shape[-1], depth)
    return basis.project(_log(batch_signature(paths, depth), depth))


def path_signature(stream, depth: int) -> TensorSeries:
    pts = _as_points(stream)
    levels = batch_signature(pts, depth)
    return TensorSeries(pts.shape[1], depth, tuple(levels))


def log_signature(s: TensorSeries, basis: LyndonBasis | None = None) -> LogSigVector:
    """Tensor logarithm of a group-like series, in Lyndon-word coordinates."""
    if basis is None:
        basis = _cached_basis(s.channels, s.depth)
    if basis.channels != s.channels or basis.depth != s.depth:
        raise DimensionMismatch("basis does not match the series' channels/depth")
    if not np.isclose(s.levels[0][0], 1.0, rtol=0, atol=1e-12):
        raise NotGroupLike(f"scalar term is {s.levels[0][0]!r}, expected 1")
    lie = _log(s.levels, s.depth)
    return LogSigVector(s.channels, s.depth, basis.project(lie))


def exp_tensor(l: LogSigVector, basis: LyndonBasis | None = None) -> TensorSeries:
    if basis is None:
        basis = _cached_basis(l.channels, l.depth)
    lie = basis.embed(l.coords)
    return TensorSeries(l.channels, l.depth, tuple(_exp(lie, l.depth)))


def expected_signature(streams: Iterable, depth: int) -> TensorSeries:
    """Coefficient-wise mean of the member signatures."""
    sigs = [path_signature(s, depth) for s in streams]
    if not sigs:
        raise ValueError("expected_signature needs at least one stream")
    channels = sigs[0].channels
    if any(s.channels != channels for s in sigs):
        raise DimensionMismatch("streams have differing channel counts")
    levels = tuple(np.mean([s.levels[n] for s in sigs], axis=0) for n in range(depth + 1))
    return TensorSeries(channels, depth, levels)


def _trapezoid_signature(pts: np.ndarray, depth: int, per_segment: int) -> list[np.ndarray]:
    segments = pts.shape[0] - 1
    ts = np.linspace(0.0, 1.0, per_segment + 1)[1:, None]
    fine = [pts[:1]] + [pts[j] + ts * (pts[j + 1] - pts[j]) for j in range(segments)]
    path = np.concatenate(fine)
    dx = np.diff(path, axis=0).T  # (C, G)
    levels = [np.ones(1)]
    running = np.ones((1, path.shape[0]))  # f_I sampled at every grid point
    for _ in range(depth):
        mid = 0.5 * (running[:, 1:] + running[:, :-1])
        incr = mid[:, None, :] * dx[None, :, :]
        nxt = np.concatenate([np.zeros(incr.shape[:2] + (1,)), np.cumsum(incr, axis=-1)], axis=-1)
        running = nxt.reshape(-1, path.shape[0])
        levels.append(running[:, -1].copy())
    return levels


def signature_oracle(stream, depth: int, grid: int = 10_000) -> TensorSeries:
    """Iterated integrals by direct quadrature; a test oracle.

    The stream is linearly interpolated on roughly ``grid`` sample points
    (every original point is kept as a knot) and each coefficient is built
    from the previous level by the trapezoid rule,
    f_{I,i}(t) = int_0^t f_I dX^i. The integrands are smooth between knots,
    so the O(h^2) error is removed by one Richardson step against a run at
    half the resolution. No tensor products are used.
    """
    pts = _as_points(stream)
    channels = pts.shape[1]
    if pts.shape[0] == 1:
        return TensorSeries.identity(channels, depth)
    per_segment = max(2, 2 * math.ceil(grid / (2 * (pts.shape[0] - 1))))
    fine = _trapezoid_signature(pts, depth, per_segment)
    coarse = _trapezoid_signature(pts, depth, per_segment // 2)
    levels = [(4.0 * f - c) / 3.0 for f, c in zip(fine, coarse)]
    return TensorSeries(channels, depth, tuple(levels))
