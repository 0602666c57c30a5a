"""Point streams on the unit cube: pseudo-random, Sobol', and randomized Sobol'.

Every stream is indexed: the point at global index ``i`` is a pure function of
``(kind, seed, d, i)``, so a stream can be rebuilt and re-read block by block.
Block ``k`` of size ``2**tau`` covers the global indices
``k * 2**tau ... (k + 1) * 2**tau - 1`` (the origin point, index 0, is kept).

Sobol' points use Gray-code ordering and 32-bit direction integers built from
the Joe-Kuo table shipped in ``data/``.  MC points come from numpy's PCG64
generator: the stream for ``seed`` draws 53-bit doubles in row-major order, so
point ``i`` is read by advancing the generator ``i * d`` outputs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "BITS",
    "SamplerKind",
    "DirectionNumbers",
    "SampleBlock",
    "SampleStream",
    "sobol_point",
    "sobol_points",
    "star_discrepancy_exact",
    "one_dim_projection_balance",
]

BITS = 32
MAX_INDEX = 1 << BITS
DEFAULT_TABLE = "new-joe-kuo-6.21201.64.txt"
_SCALE = 1.0 / MAX_INDEX

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_DIGIT_SALT = np.array([(b + 1) * 0x9E3779B97F4A7C15 % (1 << 64) for b in range(BITS)], dtype=np.uint64)


class SamplerKind(enum.Enum):
    MC = "mc"
    QMC_SOBOL = "sobol"
    RQMC_SHIFT = "rqmc-shift"
    RQMC_SCRAMBLE = "rqmc-scramble"

    @property
    def is_sobol(self) -> bool:
        return self is not SamplerKind.MC

    @property
    def randomized(self) -> bool:
        return self is not SamplerKind.QMC_SOBOL

    @classmethod
    def parse(cls, value: "str | SamplerKind") -> "SamplerKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown sampler {value!r}; expected one of {names}") from None


@dataclass(frozen=True)
class DirectionNumbers:
    """Primitive polynomials and initial direction numbers, one row per dimension.

    ``rows[j]`` describes dimension ``j + 2`` as ``(s, a, m)``; dimension 1 is
    the van der Corput sequence and has no row.
    """

    rows: tuple[tuple[int, int, tuple[int, ...]], ...]
    version: str = "unversioned"

    @property
    def max_dim(self) -> int:
        return len(self.rows) + 1

    @classmethod
    def load(cls, path: "str | Path") -> "DirectionNumbers":
        return cls.parse(Path(path).read_text())

    @classmethod
    def parse(cls, text: str) -> "DirectionNumbers":
        version = "unversioned"
        rows = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("version:"):
                    version = body.split(":", 1)[1].strip()
                continue
            if line.split()[0] == "d":
                continue
            try:
                nums = [int(tok) for tok in line.split()]
            except ValueError:
                raise ValueError(f"line {lineno}: non-integer entry in {raw!r}") from None
            if len(nums) < 3:
                raise ValueError(f"line {lineno}: expected 'd s a m_1 ... m_s'")
            dim, s, a, m = nums[0], nums[1], nums[2], tuple(nums[3:])
            if dim != len(rows) + 2:
                raise ValueError(f"line {lineno}: expected dimension {len(rows) + 2}, got {dim}")
            if s < 1 or len(m) != s:
                raise ValueError(f"line {lineno}: degree {s} needs {s} initial numbers, got {len(m)}")
            rows.append((s, a, m))
        return cls(tuple(rows), version)

    @classmethod
    def default(cls) -> "DirectionNumbers":
        return _default_table()

    def direction_integers(self, d: int) -> np.ndarray:
        """Return the ``(d, BITS)`` array of direction integers ``V[j, k]``.

        ``V[j, k]`` is the integer XOR-ed into coordinate ``j`` when bit ``k`` of
        the Gray-coded index is set.
        """
        if d > self.max_dim:
            raise ValueError(f"dimension {d} exceeds direction-number table capacity {self.max_dim}")
        return _direction_integers(self, d)


@lru_cache(maxsize=None)
def _default_table() -> DirectionNumbers:
    text = resources.files("qmc_ritz").joinpath("data").joinpath(DEFAULT_TABLE).read_text()
    return DirectionNumbers.parse(text)


@lru_cache(maxsize=32)
def _direction_integers(table: DirectionNumbers, d: int) -> np.ndarray:
    V = np.zeros((d, BITS), dtype=np.uint64)
    for k in range(BITS):
        V[0, k] = 1 << (BITS - 1 - k)
    for j in range(1, d):
        s, a, m = table.rows[j - 1]
        v = [0] * BITS
        for k in range(min(s, BITS)):
            v[k] = m[k] << (BITS - 1 - k)
        for k in range(s, BITS):
            new = v[k - s] ^ (v[k - s] >> s)
            for i in range(1, s):
                if (a >> (s - 1 - i)) & 1:
                    new ^= v[k - i]
            v[k] = new
        V[j] = v
    V.setflags(write=False)
    return V


def _check_indices(start: int, n: int) -> None:
    if start < 0 or n < 0:
        raise ValueError("indices must be non-negative")
    if start + n > MAX_INDEX:
        raise OverflowError(f"index {start + n - 1} exceeds the 2**{BITS} point capacity")


def _sobol_ints(d: int, start: int, n: int, table: DirectionNumbers) -> np.ndarray:
    _check_indices(start, n)
    V = table.direction_integers(d)
    idx = np.arange(start, start + n, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    out = np.zeros((n, d), dtype=np.uint64)
    nbits = int(start + n - 1).bit_length() if n else 0
    for k in range(nbits):
        bit = ((gray >> np.uint64(k)) & np.uint64(1)).astype(bool)
        out[bit] ^= V[:, k]
    return out


def sobol_points(d: int, start: int, n: int, table: DirectionNumbers | None = None) -> np.ndarray:
    """Sobol' points with global indices ``start .. start + n - 1`` as an ``(n, d)`` array."""
    table = table or DirectionNumbers.default()
    return _sobol_ints(d, start, n, table).astype(np.float64) * _SCALE


def sobol_point(d: int, index: int, table: DirectionNumbers | None = None) -> np.ndarray:
    return sobol_points(d, index, 1, table)[0]


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _owen_scramble(x: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Nested uniform scramble of 32-bit digit vectors.

    The flip of digit ``b`` is a hash of the coordinate key, ``b``, and the
    ``b`` leading digits of the unscrambled coordinate.
    """
    out = x.copy()
    for b in range(BITS):
        prefix = x >> np.uint64(BITS - b)
        h = _mix64(keys ^ _mix64(prefix + _DIGIT_SALT[b]))
        flip = h >> np.uint64(63)
        out ^= flip << np.uint64(BITS - 1 - b)
    return out


@dataclass(frozen=True)
class SampleBlock:
    points: np.ndarray
    iteration: int
    tau: int | None
    kind: SamplerKind

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class SampleStream:
    """Sequential reader over an indexed point stream in ``[0, 1)^d``.

    For the randomized kinds the randomization (one 32-bit digital shift per
    coordinate, or one scrambling key per coordinate) is drawn once from
    ``seed``.  ``shift`` overrides the drawn digital shift.
    """

    kind: SamplerKind
    d: int
    seed: int = 0
    cursor: int = 0
    shift: np.ndarray | None = None
    table: DirectionNumbers | None = None
    _keys: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        self.kind = SamplerKind.parse(self.kind)
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if self.kind.is_sobol:
            self.table = self.table or DirectionNumbers.default()
            if self.d > self.table.max_dim:
                raise ValueError(
                    f"dimension {self.d} exceeds direction-number table capacity {self.table.max_dim}"
                )
        cap = self.table.max_dim if self.table else self.d
        rng = np.random.Generator(np.random.PCG64(self.seed))
        draws = rng.integers(0, MAX_INDEX, size=max(cap, self.d), dtype=np.uint64)[: self.d]
        if self.kind is SamplerKind.RQMC_SHIFT:
            if self.shift is None:
                self.shift = draws
            else:
                shift = np.asarray(self.shift, dtype=np.uint64)
                if shift.shape != (self.d,) or np.any(shift >= MAX_INDEX):
                    raise ValueError(f"shift must hold {self.d} integers below 2**{BITS}")
                self.shift = shift
        elif self.shift is not None:
            raise ValueError("an explicit shift only applies to rqmc-shift streams")
        if self.kind is SamplerKind.RQMC_SCRAMBLE:
            self._keys = _mix64(draws)

    def points(self, start: int, n: int) -> np.ndarray:
        """Points ``start .. start + n - 1``; a pure function of the stream identity."""
        if self.kind is SamplerKind.MC:
            _check_indices(start, n)
            bitgen = np.random.PCG64(self.seed)
            bitgen.advance(start * self.d)
            return np.random.Generator(bitgen).random((n, self.d))
        ints = _sobol_ints(self.d, start, n, self.table)
        if self.kind is SamplerKind.RQMC_SHIFT:
            ints ^= self.shift
        elif self.kind is SamplerKind.RQMC_SCRAMBLE:
            ints = _owen_scramble(ints, self._keys)
        return ints.astype(np.float64) * _SCALE

    def seek(self, index: int) -> None:
        if index < 0 or index > MAX_INDEX:
            raise ValueError(f"cursor {index} outside [0, 2**{BITS}]")
        self.cursor = index

    def next_block(self, tau: int | None = None, *, n: int | None = None) -> SampleBlock:
        """Return the next block and advance the cursor past it.

        Sobol'-based kinds need ``n = 2**tau`` and a cursor aligned to ``n``
        so that the block is a digital net; MC accepts any ``n``.
        """
        if (tau is None) == (n is None):
            raise ValueError("give exactly one of tau or n")
        if tau is not None:
            if tau < 0:
                raise ValueError("tau must be non-negative")
            n = 1 << tau
        elif self.kind.is_sobol:
            raise ValueError("Sobol' blocks need a power-of-two size; pass tau")
        elif n < 1:
            raise ValueError("block size must be positive")
        if self.kind.is_sobol and self.cursor % n:
            raise ValueError(f"cursor {self.cursor} is not aligned to block size {n}")
        start = self.cursor
        pts = self.points(start, n)
        self.cursor = start + n
        return SampleBlock(pts, start // n, tau, self.kind)


def star_discrepancy_exact(points: np.ndarray) -> float:
    """Exact star discrepancy of a small point set in dimension 1 or 2.

    Enumerates the boxes ``[0, t)`` whose corners lie on the coordinate grid
    (plus 1); open counts give the volume-excess side and closed counts the
    limit from above.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n, d = pts.shape
    if d > 2 or n > 256 or n == 0:
        raise ValueError("exact star discrepancy is supported for 1 <= n <= 256 points in d <= 2")
    grids = [np.unique(np.append(pts[:, j], 1.0)) for j in range(d)]
    mesh = np.meshgrid(*grids, indexing="ij")
    corners = np.stack([m.ravel() for m in mesh], axis=1)  # (c, d)
    vol = np.prod(corners, axis=1)
    below = pts[None, :, :] < corners[:, None, :]
    at_or_below = pts[None, :, :] <= corners[:, None, :]
    open_count = np.all(below, axis=2).sum(axis=1) / n
    closed_count = np.all(at_or_below, axis=2).sum(axis=1) / n
    return float(max(np.max(vol - open_count), np.max(closed_count - vol)))


def one_dim_projection_balance(block: SampleBlock | np.ndarray, coord: int, level: int) -> float:
    """Largest deviation of dyadic-interval counts from ``n * 2**-level`` in one coordinate."""
    pts = block.points if isinstance(block, SampleBlock) else np.asarray(block)
    if level < 0:
        raise ValueError("level must be non-negative")
    n = pts.shape[0]
    cells = np.floor(pts[:, coord] * (1 << level)).astype(np.int64)
    counts = np.bincount(cells, minlength=1 << level)
    return float(np.max(np.abs(counts - n / (1 << level))))
