"""Wavenumber lattice, real trigonometric basis, and spectral operators.

Fields are stored as real coefficient vectors over an orthonormal sin/cos
basis of the mean-zero L^2 space on the torus [-pi, pi]^2.  Every unordered
wavenumber pair {k, -k} contributes one sin mode (representative in the upper
half lattice) and one cos mode (its negative).  All operators act on the last
axis, so arrays of shape (..., n_modes) carry whole ensembles.
"""

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from . import accel

# Orthonormalisation constant: sin(k.x)/SQRT2PI and cos(k.x)/SQRT2PI have
# unit L^2 norm on [-pi, pi]^2.
SQRT2PI = np.sqrt(2.0) * np.pi


def _fft_workers() -> int:
    """FFT thread count; overridable through VORTEX_MIXER_WORKERS."""
    try:
        return max(1, int(os.environ.get("VORTEX_MIXER_WORKERS", "")))
    except ValueError:
        return max(1, os.cpu_count() or 1)


def _next_fast_len(n: int) -> int:
    """Smallest 5-smooth integer >= n (FFT-friendly grid size)."""
    m = n
    while True:
        k = m
        for p in (2, 3, 5):
            while k % p == 0:
                k //= p
        if k == 1:
            return m
        m += 1


@dataclass(frozen=True)
class Lattice:
    """Truncated wavenumber lattice with basis bookkeeping.

    M is the simulation truncation (|k|_inf <= M), N the noise/control band
    (Euclidean |k| <= N).  Modes are ordered sin block first, cos block
    second; pair i has sin index i and cos index i + n_pairs.
    """

    M: int
    N: int
    kx: np.ndarray          # (n_modes,) int
    ky: np.ndarray          # (n_modes,) int
    k2: np.ndarray          # (n_modes,) float, |k|^2
    is_sin: np.ndarray      # (n_modes,) bool
    dealias_mask: np.ndarray  # (n_modes,) bool, |k|_inf <= floor(2M/3)
    n_pairs: int
    grid_size: int
    # scatter/gather tables between coefficients and the rfft2 layout
    _pack_slot: np.ndarray = field(repr=False)
    _pack_a_imag: np.ndarray = field(repr=False)   # sin-amplitude weights
    _pack_b_real: np.ndarray = field(repr=False)   # cos-amplitude weights
    _pack_sin_ix: np.ndarray = field(repr=False)
    _pack_cos_ix: np.ndarray = field(repr=False)
    _unpack_slot: np.ndarray = field(repr=False)
    _unpack_sign: np.ndarray = field(repr=False)
    _rk1: np.ndarray = field(repr=False)   # (G, G//2+1) k1 on the rfft grid
    _rk2: np.ndarray = field(repr=False)
    _rinvk2: np.ndarray = field(repr=False)
    # multipliers producing [u1, u2, d/dx, d/dy] from a flattened spectrum
    _mult_flat: np.ndarray = field(repr=False)

    @property
    def n_modes(self) -> int:
        return 2 * self.n_pairs

    def band_mask(self, n_band: int | None = None) -> np.ndarray:
        """Boolean mask of modes with Euclidean |k| <= n_band (default N)."""
        nb = self.N if n_band is None else n_band
        return self.k2 <= nb * nb + 1e-9

    def band_indices(self, n_band: int | None = None) -> np.ndarray:
        return np.nonzero(self.band_mask(n_band))[0]

    def index_of(self, k1: int, k2: int, trig: str) -> int:
        """Index of the basis mode sin(k.x) or cos(k.x) for the pair of k."""
        want_sin = trig == "sin"
        hits = np.nonzero(
            (self.kx == k1) & (self.ky == k2) & (self.is_sin == want_sin)
        )[0]
        if hits.size != 1:
            raise KeyError(f"mode k=({k1},{k2}) trig={trig} not on lattice")
        return int(hits[0])

    def unit_mode(self, k1: int, k2: int, trig: str) -> np.ndarray:
        w = np.zeros(self.n_modes)
        w[self.index_of(k1, k2, trig)] = 1.0
        return w


def build_lattice(M: int, N: int) -> Lattice:
    """Construct the lattice for truncation M and noise band N.

    Rejects N > M and M < 1; M is capped at 512.  Mode ordering is
    deterministic: pairs sorted by (|k|^2, k2, k1) of the upper-half
    representative, sin block followed by cos block.
    """
    if M < 1 or M > 512:
        raise ValueError(f"lattice truncation M={M} outside [1, 512]")
    if N < 1 or N > M:
        raise ValueError(f"noise band N={N} must satisfy 1 <= N <= M={M}")

    reps = []
    for q2 in range(-M, M + 1):
        for q1 in range(-M, M + 1):
            if q1 == 0 and q2 == 0:
                continue
            if q2 > 0 or (q2 == 0 and q1 > 0):  # upper half-lattice
                reps.append((q1, q2))
    reps.sort(key=lambda k: (k[0] * k[0] + k[1] * k[1], k[1], k[0]))
    px = np.array([k[0] for k in reps], dtype=np.int64)
    py = np.array([k[1] for k in reps], dtype=np.int64)
    n_pairs = len(reps)

    kx = np.concatenate([px, -px])
    ky = np.concatenate([py, -py])
    k2 = (kx * kx + ky * ky).astype(np.float64)
    is_sin = np.zeros(2 * n_pairs, dtype=bool)
    is_sin[:n_pairs] = True
    kd = (2 * M) // 3
    dealias = (np.abs(kx) <= kd) & (np.abs(ky) <= kd)

    # Products of two full lattice fields carry wavenumbers up to 2M; on a
    # grid of size G their aliases fold onto |k| >= G - 2M, so G > 2M + kd
    # keeps the retained band exact and G >= 2M + 1 keeps modes unambiguous.
    G = _next_fast_len(max(2 * M + kd + 1, 2 * M + 1))
    Gh = G // 2 + 1

    # Scatter table: one rfft2 slot per pair, two for pairs on the k1 = 0 axis
    # (the mx = 0 column is not folded by the real transform along axis -1).
    scale = G * G / (2.0 * SQRT2PI)
    slots, acoef, bcoef, pairix = [], [], [], []
    uslot = np.empty(n_pairs, dtype=np.int64)
    usign = np.empty(n_pairs, dtype=np.float64)
    for p in range(n_pairs):
        q1, q2 = int(px[p]), int(py[p])
        if q1 > 0:
            slots.append((q2 % G) * Gh + q1)
            acoef.append(-1j * scale)   # sin amplitude enters c_k as -iA/2
            bcoef.append(scale)
            pairix.append(p)
            uslot[p] = slots[-1]
            usign[p] = 1.0
        elif q1 < 0:
            # representative -k has positive first component; store conj(c_k)
            slots.append(((-q2) % G) * Gh + (-q1))
            acoef.append(1j * scale)
            bcoef.append(scale)
            pairix.append(p)
            uslot[p] = slots[-1]
            usign[p] = -1.0
        else:  # q1 == 0, q2 > 0: fill both Hermitian partners in column 0
            slots.append((q2 % G) * Gh)
            acoef.append(-1j * scale)
            bcoef.append(scale)
            pairix.append(p)
            uslot[p] = slots[-1]
            usign[p] = 1.0
            slots.append(((-q2) % G) * Gh)
            acoef.append(1j * scale)
            bcoef.append(scale)
            pairix.append(p)

    my = np.fft.fftfreq(G, d=1.0 / G).astype(np.float64)  # signed k2 per row
    mx = np.arange(Gh, dtype=np.float64)                  # k1 per column
    rk2, rk1 = np.meshgrid(my, mx, indexing="ij")
    rsq = rk1 * rk1 + rk2 * rk2
    rinvk2 = np.zeros_like(rsq)
    np.divide(1.0, rsq, out=rinvk2, where=rsq > 0)
    mult_stack = np.stack(
        [-1j * rk2 * rinvk2, 1j * rk1 * rinvk2, 1j * rk1, 1j * rk2]
    )

    pair_arr = np.array(pairix, dtype=np.int64)
    return Lattice(
        M=M,
        N=N,
        kx=kx,
        ky=ky,
        k2=k2,
        is_sin=is_sin,
        dealias_mask=dealias,
        n_pairs=n_pairs,
        grid_size=G,
        _pack_slot=np.array(slots, dtype=np.int64),
        _pack_a_imag=np.ascontiguousarray(np.array(acoef, dtype=np.complex128).imag),
        _pack_b_real=np.ascontiguousarray(np.array(bcoef, dtype=np.complex128).real),
        _pack_sin_ix=pair_arr,
        _pack_cos_ix=pair_arr + n_pairs,
        _unpack_slot=uslot,
        _unpack_sign=usign,
        _rk1=rk1,
        _rk2=rk2,
        _rinvk2=rinvk2,
        _mult_flat=np.ascontiguousarray(mult_stack.reshape(4, -1)),
    )


def _check_field(lat: Lattice, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != lat.n_modes:
        raise ValueError(
            f"field has {w.shape[-1]} coefficients, lattice has {lat.n_modes} modes"
        )
    return w


def pack_hat(lat: Lattice, w: np.ndarray) -> np.ndarray:
    """Complex rfft2-layout spectrum of a coefficient array (batched)."""
    w = _check_field(lat, w)
    G, Gh = lat.grid_size, lat.grid_size // 2 + 1
    flat = accel.pack_spectrum(
        w,
        lat._pack_slot,
        lat._pack_a_imag,
        lat._pack_b_real,
        lat._pack_sin_ix,
        lat._pack_cos_ix,
        G * Gh,
    )
    return flat.reshape(w.shape[:-1] + (G, Gh))


def four_grids(lat: Lattice, hat: np.ndarray) -> np.ndarray:
    """Physical grids [u1, u2, d/dx, d/dy] derived from one packed spectrum."""
    G, Gh = lat.grid_size, lat.grid_size // 2 + 1
    flat = hat.reshape(hat.shape[:-2] + (G * Gh,))
    mh = accel.apply_mult_stack(lat._mult_flat, flat)
    mh = mh.reshape((4,) + hat.shape[:-2] + (G, Gh))
    return scipy.fft.irfft2(mh, s=(G, G), workers=_fft_workers())


def unpack_hat(lat: Lattice, chat: np.ndarray) -> np.ndarray:
    """Coefficient array from an rfft2-layout spectrum, truncated to the lattice."""
    G = lat.grid_size
    flat = chat.reshape(chat.shape[:-2] + (-1,))
    return accel.unpack_spectrum(
        flat, lat._unpack_slot, lat._unpack_sign, 2.0 * SQRT2PI / (G * G)
    )


def synthesize(lat: Lattice, w: np.ndarray) -> np.ndarray:
    """Physical-grid samples of the field on the uniform G x G torus grid."""
    chat = pack_hat(lat, w)
    return scipy.fft.irfft2(
        chat, s=(lat.grid_size, lat.grid_size), workers=_fft_workers()
    )


def analyze(lat: Lattice, grid: np.ndarray) -> np.ndarray:
    """Project physical-grid samples back onto the lattice coefficients."""
    chat = scipy.fft.rfft2(grid, workers=_fft_workers())
    return unpack_hat(lat, chat)


def grid_quadrature_norm(lat: Lattice, grid: np.ndarray) -> np.ndarray:
    """L^2 norm of grid samples via the exact trapezoidal torus quadrature."""
    G = lat.grid_size
    return np.sqrt(np.sum(grid * grid, axis=(-2, -1))) * (2.0 * np.pi / G)


def sobolev_norm(lat: Lattice, w: np.ndarray, alpha: float) -> np.ndarray:
    """Norm with weight |k|^(2*alpha); alpha = 0 gives the plain L^2 norm."""
    w = _check_field(lat, w)
    if alpha == 0.0:
        return np.sqrt(np.sum(w * w, axis=-1))
    return np.sqrt(np.sum(lat.k2**alpha * w * w, axis=-1))


def inner_product(lat: Lattice, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    u = _check_field(lat, u)
    v = _check_field(lat, v)
    return np.sum(u * v, axis=-1)


def apply_laplacian(lat: Lattice, w: np.ndarray) -> np.ndarray:
    return -lat.k2 * _check_field(lat, w)


def apply_biot_savart(lat: Lattice, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Divergence-free velocity components recovered from vorticity.

    Mode-wise the map multiplies the complex amplitude by -i k_perp/|k|^2 with
    k_perp = (k2, -k1); in the real basis that rotates each (sin, cos)
    amplitude pair and scales it by k_perp/|k|^2.
    """
    w = _check_field(lat, w)
    n = lat.n_pairs
    a, b = w[..., :n], w[..., n:]
    kp1 = lat.ky[:n] / lat.k2[:n]
    kp2 = -lat.kx[:n] / lat.k2[:n]
    u1 = np.concatenate([kp1 * b, -kp1 * a], axis=-1)
    u2 = np.concatenate([kp2 * b, -kp2 * a], axis=-1)
    return u1, u2


def apply_derivative(lat: Lattice, w: np.ndarray, axis: int) -> np.ndarray:
    """Partial derivative along torus coordinate axis (0 -> x/k1, 1 -> y/k2)."""
    w = _check_field(lat, w)
    n = lat.n_pairs
    kj = (lat.kx if axis == 0 else lat.ky)[:n].astype(np.float64)
    a, b = w[..., :n], w[..., n:]
    return np.concatenate([-kj * b, kj * a], axis=-1)


def smooth_field(lat: Lattice, scale: float, flavor: int = 0) -> np.ndarray:
    """Deterministic smooth mean-zero field with L^2 norm equal to scale.

    Spectrum decays like e^{-|k|^2/2}; flavor 0 loads the sin block, flavor 1
    the cos block with alternating signs, giving two independent shapes for
    two-start experiments.
    """
    w = np.zeros(lat.n_modes)
    amp = np.exp(-lat.k2[: lat.n_pairs] / 2.0)
    if flavor == 0:
        w[: lat.n_pairs] = amp
    else:
        w[lat.n_pairs:] = amp * (-1.0) ** np.arange(lat.n_pairs)
    nrm = np.linalg.norm(w)
    return w * (scale / nrm) if nrm > 0 and scale > 0 else w * 0.0


def project_band(
    lat: Lattice, w: np.ndarray, n_band: int | None = None, which: str = "low"
) -> np.ndarray:
    """Orthogonal projection onto Euclidean band |k| <= n_band or its complement."""
    w = _check_field(lat, w)
    if n_band is not None and n_band > lat.M:
        raise ValueError(f"band {n_band} exceeds lattice truncation {lat.M}")
    mask = lat.band_mask(n_band)
    if which == "low":
        return np.where(mask, w, 0.0)
    if which == "high":
        return np.where(mask, 0.0, w)
    raise ValueError(f"which must be 'low' or 'high', got {which!r}")
