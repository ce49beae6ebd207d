"""Prime-field arithmetic, Shamir sharing and Lagrange interpolation.

Scalars are plain Python ints in ``[0, p)``. Vectors and matrices are numpy
``int64`` arrays holding reduced residues; the :class:`Field` methods keep
every intermediate inside 64 bits. The default modulus is the Mersenne prime
``2^61 - 1``, for which products are reduced with shifts; moduli below ``2^31``
multiply directly, and any other modulus falls back to Python integers.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import InvalidEvalPoints

MERSENNE_61 = (1 << 61) - 1
EXAMPLE_PRIME = 500009
EVAL_POINTS = (1, 2, 3, 4)

_M31 = np.uint64((1 << 31) - 1)
_M30 = np.uint64((1 << 30) - 1)
_M21 = np.int64((1 << 21) - 1)
_U31 = np.uint64(31)
_U30 = np.uint64(30)
_U61 = np.uint64(61)
_U1 = np.uint64(1)
_P61 = np.uint64(MERSENNE_61)
_SMALL = 48
_FLOAT_INNER = 1 << 11
_OBJECT_MATMUL = 768
_LIMB_SCALE_61 = np.array([pow(2, 21 * k, MERSENNE_61) for k in range(5)], dtype=np.int64).reshape(5, 1, 1)


def _mul_m61(a, b):
    # split both operands at bit 31 and fold 2^61 back to 1
    a = np.asarray(a, dtype=np.int64).view(np.uint64)
    b = np.asarray(b, dtype=np.int64).view(np.uint64)
    a0, a1 = a & _M31, a >> _U31
    b0, b1 = b & _M31, b >> _U31
    mid = a1 * b0 + a0 * b1
    t = ((a1 * b1) << _U1) + (mid >> _U30) + ((mid & _M30) << _U31) + a0 * b0
    r = (t & _P61) + (t >> _U61)
    r = r - (r >= _P61) * _P61
    return r.view(np.int64)


class Field:
    """Arithmetic modulo a prime ``p`` on ints and int64 arrays."""

    def __init__(self, p: int = MERSENNE_61):
        if p < 3 or p >= 1 << 62:
            raise ValueError("modulus must be an odd prime below 2^62")
        self.p = p
        self._mersenne = p == MERSENNE_61
        self._small = p < (1 << 31)
        self._limb_scale = [pow(2, 21 * k, p) for k in range(5)]

    def __repr__(self) -> str:
        return f"Field({self.p})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Field) and other.p == self.p

    def __hash__(self) -> int:
        return hash(self.p)

    # scalars

    def add(self, a: int, b: int) -> int:
        return (a + b) % self.p

    def sub(self, a: int, b: int) -> int:
        return (a - b) % self.p

    def mul(self, a: int, b: int) -> int:
        return (a * b) % self.p

    def neg(self, a: int) -> int:
        return (-a) % self.p

    def inv(self, a: int) -> int:
        a %= self.p
        if a == 0:
            raise ZeroDivisionError("zero has no inverse")
        return pow(a, self.p - 2, self.p)

    # arrays

    def array(self, values) -> np.ndarray:
        """Reduce arbitrary integers (possibly negative or huge) into an int64 array."""
        if isinstance(values, np.ndarray) and values.dtype == np.int64:
            return values % self.p
        obj = np.asarray(values, dtype=object)
        return np.asarray(obj % self.p, dtype=np.int64).reshape(obj.shape)

    def vadd(self, a, b) -> np.ndarray:
        return (np.asarray(a, dtype=np.int64) + b) % self.p

    def vsub(self, a, b) -> np.ndarray:
        return (np.asarray(a, dtype=np.int64) - b) % self.p

    def vneg(self, a) -> np.ndarray:
        return (-np.asarray(a, dtype=np.int64)) % self.p

    def vmul(self, a, b) -> np.ndarray:
        """Elementwise product with broadcasting."""
        if self._small:
            return (np.asarray(a, dtype=np.int64) * b) % self.p
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        if a.size <= _SMALL and b.size <= _SMALL:
            # per-call numpy overhead dominates on tiny arrays
            p = self.p
            if b.ndim == 0:
                c = int(b)
                return np.array([x * c % p for x in a.ravel().tolist()], dtype=np.int64).reshape(a.shape)
            if a.shape != b.shape:
                shape = np.broadcast_shapes(a.shape, b.shape)
                a, b = np.broadcast_to(a, shape), np.broadcast_to(b, shape)
            xs, ys = a.ravel().tolist(), b.ravel().tolist()
            return np.array([x * y % p for x, y in zip(xs, ys)], dtype=np.int64).reshape(a.shape)
        if self._mersenne:
            return _mul_m61(a, b)
        out = (a.astype(object) * b.astype(object)) % self.p
        return np.asarray(out, dtype=np.int64).reshape(out.shape)

    def vscale(self, a, c: int) -> np.ndarray:
        c %= self.p
        if c * (self.p - 1) < 1 << 63:
            # c · a stays below 2^63
            return (np.asarray(a, dtype=np.int64) * c) % self.p
        return self.vmul(a, np.int64(c))

    def vsum(self, a, axis=None) -> np.ndarray | int:
        a = np.asarray(a, dtype=np.int64)
        if self._small:
            out = a.sum(axis=axis) % self.p
        else:
            lo = (a & np.int64((1 << 31) - 1)).sum(axis=axis) % self.p
            hi = (a >> 31).sum(axis=axis) % self.p
            out = self.vadd(lo, self.vscale(hi, 1 << 31))
        return int(out) if axis is None else out

    def matmul(self, a, b) -> np.ndarray:
        """Matrix product reduced mod p, safe for inner dimensions up to 2^19."""
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        inner = a.shape[-1] if a.ndim else 1
        if self._small and inner * (self.p - 1) ** 2 < (1 << 63):
            return (a @ b) % self.p
        if a.size * (b.shape[-1] if b.ndim > 1 else 1) <= _OBJECT_MATMUL:
            out = (a.astype(object) @ b.astype(object)) % self.p
            return np.asarray(out, dtype=np.int64).reshape(np.shape(out))
        if self._mersenne and inner < _FLOAT_INNER and a.ndim <= 2 and b.ndim <= 2:
            return self._matmul_float(a, b)
        if inner >= 1 << 19:
            raise ValueError("inner dimension too large for limb products")
        al = (a & _M21, (a >> 21) & _M21, a >> 42)
        bl = (b & _M21, (b >> 21) & _M21, b >> 42)
        out = None
        for k in range(5):
            s = None
            for i in range(3):
                j = k - i
                if 0 <= j < 3:
                    term = al[i] @ bl[j]
                    s = term if s is None else s + term
            part = self.vscale(s % self.p, self._limb_scale[k])
            out = part if out is None else (out + part) % self.p
        return out

    def _matmul_float(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        # 21-bit limbs through BLAS; each limb product sum stays below 2^53
        a2 = a.reshape(1, -1) if a.ndim == 1 else a
        b2 = b.reshape(-1, 1) if b.ndim == 1 else b
        al = np.stack([a2 & _M21, (a2 >> 21) & _M21, a2 >> 42]).astype(np.float64)
        bl = np.stack([b2 & _M21, (b2 >> 21) & _M21, b2 >> 42]).astype(np.float64)
        prod = (al[:, None] @ bl[None, :]).astype(np.int64)
        s = np.stack([
            prod[0, 0],
            prod[0, 1] + prod[1, 0],
            prod[0, 2] + prod[1, 1] + prod[2, 0],
            prod[1, 2] + prod[2, 1],
            prod[2, 2],
        ]) % self.p
        out = self.vsum(_mul_m61(s, _LIMB_SCALE_61), axis=0)
        if a.ndim == 1 and b.ndim == 1:
            return out.reshape(())
        if a.ndim == 1:
            return out.reshape(-1)
        if b.ndim == 1:
            return out.reshape(-1)
        return out

    def dot(self, a, b) -> int:
        return int(self.matmul(np.asarray(a).reshape(1, -1), np.asarray(b).reshape(-1, 1))[0, 0])

    def lincomb(self, weights: Sequence[int], arrays: Sequence[np.ndarray]) -> np.ndarray:
        """Σ weights[k] · arrays[k] for arrays of a common shape."""
        arrays = [np.asarray(arr, dtype=np.int64) for arr in arrays]
        return self.combine([weights], arrays)[0]

    def combine(self, weights, arrays: Sequence[np.ndarray]) -> np.ndarray:
        """Several linear combinations at once: ``out[i] = Σ_k weights[i][k] · arrays[k]``."""
        shape = np.shape(arrays[0])
        stacked = np.stack([np.asarray(a, dtype=np.int64).ravel() for a in arrays])
        p = self.p
        if not self._small and stacked.shape[1] * len(weights) <= 16:
            cols = list(zip(*stacked.tolist()))
            out = [[sum(int(w) * v for w, v in zip(row, vals)) % p for vals in cols] for row in weights]
            return np.array(out, dtype=np.int64).reshape((len(out),) + shape)
        w = np.array([[int(x) % p for x in row] for row in weights], dtype=np.int64)
        prods = self.vmul(w[:, :, None], stacked[None, :, :])
        return self.vsum(prods, axis=1).reshape((len(w),) + shape)


DEFAULT_FIELD = Field(MERSENNE_61)


class FieldRng:
    """Seedable CSPRNG drawing uniform field elements from an AES-CTR keystream.

    With ``seed=None`` the key comes from ``os.urandom``; a fixed seed gives a
    reproducible stream (test fixtures only).
    """

    def __init__(self, seed: bytes | int | str | None = None):
        if seed is None:
            key = os.urandom(32)
        else:
            if isinstance(seed, int):
                seed = seed.to_bytes((seed.bit_length() + 8) // 8, "big", signed=True)
            elif isinstance(seed, str):
                seed = seed.encode()
            key = hashlib.sha256(b"docstar-rng" + seed).digest()
        self._stream = Cipher(algorithms.AES(key), modes.CTR(bytes(16))).encryptor()

    def bytes(self, n: int) -> bytes:
        return self._stream.update(bytes(n))

    def _uint64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.bytes(8 * n), dtype=">u8").astype(np.uint64)

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        """Uniform integers in ``[low, high)`` by masked rejection sampling."""
        span = high - low
        if span <= 0:
            raise ValueError("empty range")
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        mask = np.uint64((1 << max((span - 1).bit_length(), 1)) - 1)
        bound = np.uint64(span)
        out = np.empty(count, dtype=np.uint64)
        filled = 0
        while filled < count:
            draw = self._uint64(max(count - filled, 4)) & mask
            draw = draw[draw < bound][: count - filled]
            out[filled:filled + draw.size] = draw
            filled += draw.size
        values = out.astype(np.int64) + np.int64(low)
        if size is None:
            return int(values[0])
        return values.reshape(shape)

    def element(self, field: Field, nonzero: bool = False) -> int:
        return self.integers(1 if nonzero else 0, field.p)

    def elements(self, field: Field, shape, nonzero: bool = False) -> np.ndarray:
        return self.integers(1 if nonzero else 0, field.p, shape)

    def shuffle(self, items: list) -> list:
        items = list(items)
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def sample(self, items: Sequence, k: int) -> list:
        return self.shuffle(items)[:k]


@dataclass(frozen=True)
class ShareSet:
    """Shares of one secret: ``points`` holds ``(eval_point, value)`` pairs."""

    degree: int
    points: tuple[tuple[int, int], ...]

    def value_at(self, x: int) -> int:
        for px, v in self.points:
            if px == x:
                return v
        raise KeyError(x)

    def subset(self, xs: Iterable[int]) -> list[tuple[int, int]]:
        wanted = set(xs)
        return [(x, v) for x, v in self.points if x in wanted]


def _check_points(xs: Sequence[int], field: Field) -> None:
    reduced = [x % field.p for x in xs]
    if len(set(reduced)) != len(reduced) or 0 in reduced:
        raise InvalidEvalPoints(f"evaluation points must be distinct and nonzero: {list(xs)}")


def share_secret(
    secret: int,
    degree: int,
    eval_points: Sequence[int] = EVAL_POINTS,
    coefficients: Sequence[int] | None = None,
    field: Field = DEFAULT_FIELD,
    rng: FieldRng | None = None,
) -> ShareSet:
    """Evaluate ``secret + c1 x + ... + cd x^d`` at every evaluation point.

    Coefficients left unspecified are drawn uniformly from ``[1, p)``.
    """
    if degree < 1:
        raise ValueError("degree must be at least 1")
    _check_points(eval_points, field)
    if coefficients is None:
        rng = rng or FieldRng()
        coefficients = [rng.element(field, nonzero=True) for _ in range(degree)]
    elif len(coefficients) != degree:
        raise ValueError("need exactly one coefficient per degree")
    poly = [secret % field.p, *(c % field.p for c in coefficients)]
    return ShareSet(degree, tuple((x, eval_poly(poly, x, field)) for x in eval_points))


def eval_poly(coefficients: Sequence[int], x: int, field: Field = DEFAULT_FIELD) -> int:
    acc = 0
    for c in reversed(coefficients):
        acc = (acc * x + c) % field.p
    return acc


def lagrange_weights(xs: Sequence[int], field: Field = DEFAULT_FIELD, at: int = 0) -> list[int]:
    """Weights w_j with f(at) = Σ w_j f(xs[j]) for every polynomial of degree < len(xs)."""
    return list(_weights(tuple(xs), field.p, at))


@lru_cache(maxsize=1024)
def _weights(xs: tuple[int, ...], p: int, at: int) -> tuple[int, ...]:
    if len(set(x % p for x in xs)) != len(xs):
        raise InvalidEvalPoints(f"duplicate evaluation points: {list(xs)}")
    weights = []
    for j, xj in enumerate(xs):
        num, den = 1, 1
        for m, xm in enumerate(xs):
            if m != j:
                num = num * (at - xm) % p
                den = den * (xj - xm) % p
        weights.append(num * pow(den, p - 2, p) % p)
    return tuple(weights)


def interpolate_at_zero(points: Sequence[tuple[int, int]], field: Field = DEFAULT_FIELD) -> int:
    """Lagrange interpolation through all given points, evaluated at 0."""
    if len(points) < 2:
        raise InvalidEvalPoints("need at least two points")
    xs = [x for x, _ in points]
    weights = lagrange_weights(xs, field)
    return sum(w * v for w, (_, v) in zip(weights, points)) % field.p


def interpolate_coefficients(points: Sequence[tuple[int, int]], field: Field = DEFAULT_FIELD) -> list[int]:
    """Coefficients (constant first) of the unique polynomial through ``points``."""
    p = field.p
    xs = [x for x, _ in points]
    if len(set(x % p for x in xs)) != len(xs):
        raise InvalidEvalPoints("duplicate evaluation points")
    n = len(points)
    coeffs = [0] * n
    for j, (xj, yj) in enumerate(points):
        basis = [1]
        den = 1
        for m, xm in enumerate(xs):
            if m == j:
                continue
            nxt = [0] * (len(basis) + 1)
            for k, c in enumerate(basis):
                nxt[k] = (nxt[k] - c * xm) % p
                nxt[k + 1] = (nxt[k + 1] + c) % p
            basis = nxt
            den = den * (xj - xm) % p
        scale = yj * pow(den, p - 2, p) % p
        for k, c in enumerate(basis):
            coeffs[k] = (coeffs[k] + c * scale) % p
    return coeffs


def local_combine(op: str, a: int, b: int, field: Field = DEFAULT_FIELD) -> int:
    """One pointwise share operation; ``mul`` of two degree-1 shares is degree 2."""
    if op == "add":
        return field.add(a, b)
    if op == "sub":
        return field.sub(a, b)
    if op in ("mul", "scalar_mul"):
        return field.mul(a, b)
    raise ValueError(f"unknown operation {op!r}")


# array sharing


def share_array(
    secret: np.ndarray,
    field: Field,
    rng: FieldRng,
    degree: int = 1,
    eval_points: Sequence[int] = EVAL_POINTS,
    slope: int | None = None,
) -> dict[int, np.ndarray]:
    """Share every cell of ``secret`` with its own random polynomial.

    ``slope`` fixes the linear coefficient of every cell (degree 1 only), which
    is how deterministic fixtures reproduce hand-computed share tables.
    """
    secret = field.array(secret)
    if slope is not None:
        if degree != 1:
            raise ValueError("a fixed slope only applies to degree-1 sharing")
        coeffs = [np.full(secret.shape, slope % field.p, dtype=np.int64)]
    else:
        coeffs = [rng.elements(field, secret.shape, nonzero=True) for _ in range(degree)]
    if degree == 1 and list(eval_points) == list(range(1, len(eval_points) + 1)):
        # consecutive points: f(x) = f(x-1) + slope
        out = {}
        value = secret
        for x in eval_points:
            value = field.vadd(value, coeffs[0])
            out[x] = value
        return out
    xs = np.array([x % field.p for x in eval_points], dtype=np.int64).reshape((-1,) + (1,) * secret.ndim)
    acc = np.zeros((len(eval_points),) + secret.shape, dtype=np.int64)
    for c in reversed(coeffs):
        acc = field.vadd(field.vmul(acc, xs), c)
    acc = field.vadd(field.vmul(acc, xs), secret)
    return {x: acc[k] for k, x in enumerate(eval_points)}


def open_array(shares: dict[int, np.ndarray], field: Field) -> np.ndarray:
    """Interpolate cellwise at zero from ``{eval_point: array}``."""
    xs = sorted(shares)
    return field.lincomb(lagrange_weights(xs, field), [shares[x] for x in xs])


def consistent_open(
    shares: dict[int, np.ndarray], degree: int, field: Field
) -> tuple[np.ndarray, bool]:
    """Open from the first ``degree+1`` points and check every other point agrees.

    All ``(degree+1)``-subsets interpolate to the same secret exactly when every
    point lies on the polynomial through the first ``degree+1``, so one
    evaluation per extra point replaces opening every subset. Returns
    ``(value, consistent)``; with exactly ``degree+1`` points ``consistent`` is
    always true.
    """
    xs = sorted(shares)
    if len(xs) < degree + 1:
        raise InvalidEvalPoints(f"degree {degree} needs {degree + 1} points, got {len(xs)}")
    base = xs[:degree + 1]
    extras = xs[degree + 1:]
    weights = [lagrange_weights(base, field)] + [lagrange_weights(base, field, at=x) for x in extras]
    combined = field.combine(weights, [shares[x] for x in base])
    value = combined[0]
    for k, extra in enumerate(extras, start=1):
        if not np.array_equal(combined[k], np.asarray(shares[extra]) % field.p):
            return value, False
    return value, True
