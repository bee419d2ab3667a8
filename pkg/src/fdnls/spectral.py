"""Fourier spectral calculus on the flat torus [0, 2pi)^d.

Fields are stored as complex coefficients on the box |k|_inf <= N, in the
L2-orthonormal basis e_k(x) = (2pi)^(-d/2) exp(i k.x). Nonlinear terms are
evaluated on a q-times oversampled uniform grid and projected back.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import BinaryIO, Sequence

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi

# exp(x) overflows binary64 slightly above 709.78
_EXP_LIMIT = 700.0

CHECKPOINT_MAGIC = b"FDNL"
CHECKPOINT_VERSION = 1


class FieldRangeError(OverflowError):
    """Raised when an exponential would leave the binary64 range."""


@dataclass(frozen=True)
class TorusSpec:
    """Galerkin space E_N on the d-dimensional flat torus.

    ``q`` is the oversampling factor used for physical-space evaluation of
    nonlinear terms; the grid has ``n_grid`` points per axis.
    """

    N: int
    d: int = 2
    q: int = 4

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension d must be an integer >= 1, got {self.d}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"cutoff N must be an integer >= 1, got {self.N}")
        if int(self.q) != self.q or self.q < 2:
            raise ValueError(f"oversampling q must be an integer >= 2, got {self.q}")

    @property
    def L(self) -> float:
        return TWO_PI

    @property
    def width(self) -> int:
        return 2 * self.N + 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.width,) * self.d

    @property
    def n_modes(self) -> int:
        return self.width**self.d

    @property
    def n_grid(self) -> int:
        return grid_size(self.q * self.width)

    @property
    def volume(self) -> float:
        return TWO_PI**self.d

    def with_cutoff(self, N: int) -> "TorusSpec":
        return replace(self, N=N)


def grid_size(n_min: int) -> int:
    """Smallest 5-smooth integer >= n_min."""
    n = int(n_min)
    while True:
        m = n
        for p in (2, 3, 5):
            while m % p == 0:
                m //= p
        if m == 1:
            return n
        n += 1


@lru_cache(maxsize=64)
def _wavevectors(spec: TorusSpec) -> np.ndarray:
    axis = np.arange(-spec.N, spec.N + 1)
    grids = np.meshgrid(*([axis] * spec.d), indexing="ij")
    k = np.stack(grids)
    k.setflags(write=False)
    return k


def wavevectors(spec: TorusSpec) -> np.ndarray:
    """Integer wavevectors, shape (d, 2N+1, ..., 2N+1), lexicographic order."""
    return _wavevectors(spec)


@lru_cache(maxsize=64)
def _eigenvalues(spec: TorusSpec) -> np.ndarray:
    lam = np.sum(_wavevectors(spec).astype(float) ** 2, axis=0)
    lam.setflags(write=False)
    return lam


def eigenvalues(spec: TorusSpec) -> np.ndarray:
    """lambda_k = |k|^2 on the coefficient box."""
    return _eigenvalues(spec)


def spectral_power(spec: TorusSpec, gamma: float) -> np.ndarray:
    """lambda_k ** gamma with the conventions 0**0 = 1 and 0**gamma = 0."""
    if gamma < 0:
        raise ValueError(f"spectral exponent must be >= 0, got {gamma}")
    return np.power(_eigenvalues(spec), float(gamma))


def eigenvalue(spec: TorusSpec, k: Sequence[int]) -> float:
    k = tuple(int(c) for c in k)
    if len(k) != spec.d:
        raise ValueError(f"wavevector {k} does not have dimension {spec.d}")
    if max(abs(c) for c in k) > spec.N:
        raise IndexError(f"wavevector {k} outside the cutoff box N={spec.N}")
    return float(sum(c * c for c in k))


@lru_cache(maxsize=64)
def _embed_index(spec: TorusSpec, n: int) -> tuple[np.ndarray, ...]:
    ax = np.arange(-spec.N, spec.N + 1) % n
    return np.ix_(*([ax] * spec.d))


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Band-limited complex field given by its Fourier coefficients."""

    spec: TorusSpec
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.complex128)
        if c.shape != self.spec.shape:
            raise ValueError(f"coefficient shape {c.shape} != {self.spec.shape}")
        if not np.all(np.isfinite(c)):
            raise FloatingPointError("field coefficients contain NaN or Inf")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def _check(self, other: "SpectralField") -> None:
        if not isinstance(other, SpectralField):
            raise TypeError(f"expected SpectralField, got {type(other).__name__}")
        if other.spec != self.spec:
            raise ValueError(f"mismatched specs {self.spec} and {other.spec}")

    def __add__(self, other):
        self._check(other)
        return SpectralField(self.spec, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return SpectralField(self.spec, self.coeffs - other.coeffs)

    def __neg__(self):
        return SpectralField(self.spec, -self.coeffs)

    def __mul__(self, scalar):
        if isinstance(scalar, SpectralField):
            raise TypeError("use the grid to multiply two fields")
        return SpectralField(self.spec, complex(scalar) * self.coeffs)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return SpectralField(self.spec, self.coeffs / complex(scalar))

    def coefficient(self, k: Sequence[int]) -> complex:
        idx = tuple(int(c) + self.spec.N for c in k)
        return complex(self.coeffs[idx])

    def allclose(self, other: "SpectralField", atol: float = 1e-12) -> bool:
        self._check(other)
        return bool(np.max(np.abs(self.coeffs - other.coeffs), initial=0.0) <= atol)


@dataclass(frozen=True, eq=False)
class GridField:
    """Samples on the uniform grid with ``n`` points per axis."""

    spec: TorusSpec
    values: np.ndarray = field(repr=False)
    n: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        n = self.n or v.shape[0]
        if v.shape != (n,) * self.spec.d:
            raise ValueError(f"grid shape {v.shape} != {(n,) * self.spec.d}")
        if n < self.spec.width:
            raise ValueError(f"grid size {n} cannot resolve cutoff N={self.spec.N}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "n", n)

    @property
    def cell_volume(self) -> float:
        return (TWO_PI / self.n) ** self.spec.d

    def integrate(self, values: np.ndarray | None = None) -> float | complex:
        """Trapezoidal (spectrally accurate) quadrature over the torus."""
        v = self.values if values is None else values
        return self.cell_volume * np.sum(v)


class GridTransform:
    """Raw-array transforms for one spec and grid size (used in stepping loops)."""

    def __init__(self, spec: TorusSpec, n: int | None = None):
        self.spec = spec
        self.n = spec.n_grid if n is None else int(n)
        if self.n < spec.width:
            raise ValueError(f"grid size {self.n} cannot resolve cutoff N={spec.N}")
        self.index = _embed_index(spec, self.n)
        self.cell = (TWO_PI / self.n) ** spec.d
        self._to = TWO_PI ** (-spec.d / 2.0)
        self._from = TWO_PI ** (spec.d / 2.0)

    def to_grid(self, coeffs: np.ndarray) -> np.ndarray:
        full = np.zeros((self.n,) * self.spec.d, dtype=np.complex128)
        full[self.index] = coeffs
        return sfft.ifftn(full, norm="forward") * self._to

    def from_grid(self, values: np.ndarray) -> np.ndarray:
        return sfft.fftn(values, norm="forward")[self.index] * self._from

    def integrate(self, values: np.ndarray) -> float:
        return float(np.real(self.cell * np.sum(values)))


@lru_cache(maxsize=64)
def transform(spec: TorusSpec, n: int | None = None) -> GridTransform:
    return GridTransform(spec, n)


# -- constructors -------------------------------------------------------------

def zeros(spec: TorusSpec) -> SpectralField:
    return SpectralField(spec, np.zeros(spec.shape, dtype=np.complex128))


def basis(spec: TorusSpec, k: Sequence[int], amplitude: complex = 1.0) -> SpectralField:
    eigenvalue(spec, k)  # validates k
    c = np.zeros(spec.shape, dtype=np.complex128)
    c[tuple(int(ki) + spec.N for ki in k)] = amplitude
    return SpectralField(spec, c)


def random_field(
    spec: TorusSpec,
    rng: np.random.Generator,
    decay: float = 2.0,
    amplitude: float = 1.0,
    real: bool = False,
    cutoff: int | None = None,
) -> SpectralField:
    """Gaussian field with coefficients ~ amplitude * (1 + lambda_k)^(-decay/2).

    ``real`` imposes Hermitian symmetry so the field is real-valued in x.
    ``cutoff`` restricts the support to |k|_inf <= cutoff.
    """
    lam = eigenvalues(spec)
    g = rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)
    c = amplitude * g * (1.0 + lam) ** (-decay / 2.0) / np.sqrt(2.0)
    if cutoff is not None:
        c = c * (np.max(np.abs(wavevectors(spec)), axis=0) <= cutoff)
    if real:
        flipped = np.conj(np.flip(c))
        c = 0.5 * (c + flipped)
    return SpectralField(spec, c)


def resize(u: SpectralField, N: int) -> SpectralField:
    """Same function expressed on the box of cutoff N (truncating or zero padding)."""
    new = u.spec.with_cutoff(N)
    out = np.zeros(new.shape, dtype=np.complex128)
    m = min(N, u.spec.N)
    src = tuple(slice(u.spec.N - m, u.spec.N + m + 1) for _ in range(u.spec.d))
    dst = tuple(slice(N - m, N + m + 1) for _ in range(u.spec.d))
    out[dst] = u.coeffs[src]
    return SpectralField(new, out)


# -- linear spectral operators ------------------------------------------------

def frac_laplacian(u: SpectralField, gamma: float) -> SpectralField:
    """(-Delta)^gamma as the multiplier lambda_k^gamma."""
    return SpectralField(u.spec, spectral_power(u.spec, gamma) * u.coeffs)


def project(u: SpectralField, n_cut: int) -> SpectralField:
    """Orthogonal projection onto modes with |k|_inf <= n_cut (spec unchanged)."""
    if n_cut < 0:
        raise ValueError(f"projection cutoff must be >= 0, got {n_cut}")
    if n_cut >= u.spec.N:
        return u
    mask = np.max(np.abs(wavevectors(u.spec)), axis=0) <= n_cut
    return SpectralField(u.spec, u.coeffs * mask)


def propagator(u: SpectralField, t: float, alpha: float) -> SpectralField:
    """S(t) = exp(-i t (-Delta)^alpha)."""
    if alpha <= 0:
        raise ValueError(f"dispersion exponent must be > 0, got {alpha}")
    phase = np.exp(-1j * t * spectral_power(u.spec, alpha))
    return SpectralField(u.spec, phase * u.coeffs)


def l2_inner(u: SpectralField, v: SpectralField) -> float:
    """Real L2 inner product Re sum u_k conj(v_k)."""
    u._check(v)
    return float(np.real(np.vdot(v.coeffs, u.coeffs)))


def l2_norm(u: SpectralField) -> float:
    return float(np.sqrt(np.sum(np.abs(u.coeffs) ** 2)))


def hs_seminorm(u: SpectralField, s: float) -> float:
    """Homogeneous norm ||u||_{dot H^s} (for s = 0 this is the L2 norm)."""
    w = spectral_power(u.spec, s)
    return float(np.sqrt(np.sum(w * np.abs(u.coeffs) ** 2)))


def sobolev_norm(u: SpectralField, s: float) -> float:
    """||u||_{H^s}^2 = sum (1 + lambda_k^s) |u_k|^2."""
    w = 1.0 + spectral_power(u.spec, s)
    return float(np.sqrt(np.sum(w * np.abs(u.coeffs) ** 2)))


def sobolev_norm_sq(u: SpectralField, s: float) -> float:
    return float(np.sum((1.0 + spectral_power(u.spec, s)) * np.abs(u.coeffs) ** 2))


def hs_seminorm_sq(u: SpectralField, s: float) -> float:
    return float(np.sum(spectral_power(u.spec, s) * np.abs(u.coeffs) ** 2))


# -- transforms ---------------------------------------------------------------

def to_grid(u: SpectralField, n: int | None = None) -> GridField:
    tr = transform(u.spec, n)
    return GridField(u.spec, tr.to_grid(u.coeffs), tr.n)


def grid_coefficients(g: GridField, N: int | None = None) -> np.ndarray:
    """Raw coefficient array of the projection of grid samples onto |k|_inf <= N."""
    spec = g.spec if N is None else g.spec.with_cutoff(N)
    if g.n < spec.width:
        raise ValueError(f"grid size {g.n} cannot resolve cutoff N={spec.N}")
    hat = sfft.fftn(g.values, norm="forward") * TWO_PI ** (spec.d / 2.0)
    return hat[_embed_index(spec, g.n)]


def to_coeffs(g: GridField, N: int | None = None) -> SpectralField:
    spec = g.spec if N is None else g.spec.with_cutoff(N)
    return SpectralField(spec, grid_coefficients(g, N))


def grid_spectrum(g: GridField) -> tuple[np.ndarray, np.ndarray]:
    """All n^d discrete Fourier coefficients of a grid function and their lambda_k."""
    hat = sfft.fftn(g.values, norm="forward") * TWO_PI ** (g.spec.d / 2.0)
    ax = sfft.fftfreq(g.n, 1.0 / g.n)
    lam = np.zeros((g.n,) * g.spec.d)
    for i in range(g.spec.d):
        shape = [1] * g.spec.d
        shape[i] = g.n
        lam = lam + ax.reshape(shape) ** 2
    return hat, lam


# -- exponential nonlinearity -------------------------------------------------

def exp_weight(values: np.ndarray, beta: float) -> np.ndarray:
    """exp(beta |u|^2) on grid samples, refusing to overflow."""
    arg = beta * (values.real**2 + values.imag**2)
    peak = float(np.max(arg, initial=0.0))
    if not np.isfinite(peak) or peak > _EXP_LIMIT:
        raise FieldRangeError(f"beta*|u|^2 reaches {peak:.3g}; exp would overflow")
    return np.exp(arg)


def nonlinearity(u: SpectralField, beta: float) -> SpectralField:
    """P_N(2 beta u exp(beta |u|^2)) via the oversampled grid."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    tr = transform(u.spec)
    v = tr.to_grid(u.coeffs)
    return SpectralField(u.spec, tr.from_grid(2.0 * beta * v * exp_weight(v, beta)))


# -- checkpoint format --------------------------------------------------------

_HEADER = struct.Struct("<4sIII")


def field_to_bytes(u: SpectralField) -> bytes:
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, u.spec.d, u.spec.N)
    pairs = np.empty(u.coeffs.size * 2, dtype="<f8")
    flat = u.coeffs.reshape(-1)
    pairs[0::2] = flat.real
    pairs[1::2] = flat.imag
    return header + pairs.tobytes()


def field_from_bytes(data: bytes, q: int = 4) -> SpectralField:
    if len(data) < _HEADER.size:
        raise ValueError("checkpoint truncated before header end")
    magic, version, d, N = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    spec = TorusSpec(N=N, d=d, q=q)
    expected = _HEADER.size + 16 * spec.n_modes
    if len(data) != expected:
        raise ValueError(f"checkpoint has {len(data)} bytes, expected {expected}")
    pairs = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    coeffs = (pairs[0::2] + 1j * pairs[1::2]).reshape(spec.shape)
    return SpectralField(spec, coeffs)


def write_checkpoint(target: str | BinaryIO, u: SpectralField) -> None:
    data = field_to_bytes(u)
    if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
        with open(target, "wb") as fh:
            fh.write(data)
    else:
        target.write(data)


def read_checkpoint(source: str | BinaryIO, q: int = 4) -> SpectralField:
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            return field_from_bytes(fh.read(), q=q)
    if isinstance(source, io.BytesIO):
        return field_from_bytes(source.getvalue(), q=q)
    return field_from_bytes(source.read(), q=q)
