"""Hot numeric kernels: numba @njit implementations with numpy fallbacks.

The FFTs themselves go through scipy; everything else on the per-step hot
path (coefficient<->spectrum packing, spectral multiplier application,
advection products, and the Galerkin interaction-table contraction) is a
memory-bound elementwise pass that numba fuses into single loops.

Backend selection: VORTEX_MIXER_NUMBA=0 forces the pure-numpy path; any
other value (or unset) uses numba when importable.  Both backends perform
identical arithmetic element by element, so results match bit for bit;
``benchmarks/bench_kernels.py`` compares their throughput.
"""

import os

import numpy as np

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(f):
            return f

        return wrap

    prange = range


def numba_enabled() -> bool:
    if os.environ.get("VORTEX_MIXER_NUMBA", "1") == "0":
        return False
    return _HAVE_NUMBA


# -- Galerkin interaction table ------------------------------------------------

def bilinear_table_numpy(out_idx, i_idx, j_idx, vals, a, b, n_out):
    """out[k] = sum over table entries of vals * a[i] * b[j]."""
    return np.bincount(
        out_idx, weights=vals * a[i_idx] * b[j_idx], minlength=n_out
    )


@njit(cache=True)
def _bilinear_table_jit(out_idx, i_idx, j_idx, vals, a, b, n_out):
    out = np.zeros(n_out)
    for e in range(out_idx.shape[0]):
        out[out_idx[e]] += vals[e] * a[i_idx[e]] * b[j_idx[e]]
    return out


def bilinear_table_apply(out_idx, i_idx, j_idx, vals, a, b, n_out):
    if numba_enabled():
        return _bilinear_table_jit(out_idx, i_idx, j_idx, vals, a, b, n_out)
    return bilinear_table_numpy(out_idx, i_idx, j_idx, vals, a, b, n_out)


# -- coefficient vector -> rfft2 spectrum ---------------------------------------

def pack_numpy(w, slot, a_imag, b_real, sin_ix, cos_ix, n_spec):
    vals = np.empty(w.shape[:-1] + (slot.size,), dtype=np.complex128)
    np.multiply(b_real, w[..., cos_ix], out=vals.real)
    np.multiply(a_imag, w[..., sin_ix], out=vals.imag)
    flat = np.zeros(w.shape[:-1] + (n_spec,), dtype=np.complex128)
    flat[..., slot] = vals
    return flat


@njit(cache=True, parallel=True)
def _pack_jit(w, slot, a_imag, b_real, sin_ix, cos_ix, n_spec):
    nb = w.shape[0]
    out = np.zeros((nb, n_spec), dtype=np.complex128)
    for b in prange(nb):
        for s in range(slot.shape[0]):
            out[b, slot[s]] = complex(
                b_real[s] * w[b, cos_ix[s]], a_imag[s] * w[b, sin_ix[s]]
            )
    return out


def pack_spectrum(w, slot, a_imag, b_real, sin_ix, cos_ix, n_spec):
    """(..., n_modes) real coefficients -> (..., n_spec) flat complex spectrum."""
    if numba_enabled():
        lead = w.shape[:-1]
        flat = np.ascontiguousarray(w.reshape(-1, w.shape[-1]))
        out = _pack_jit(flat, slot, a_imag, b_real, sin_ix, cos_ix, n_spec)
        return out.reshape(lead + (n_spec,))
    return pack_numpy(w, slot, a_imag, b_real, sin_ix, cos_ix, n_spec)


# -- rfft2 spectrum -> coefficient vector ---------------------------------------

def unpack_numpy(flat, uslot, usign, uval):
    vals = flat[..., uslot]
    a = (-uval * usign) * vals.imag
    b = uval * vals.real
    return np.concatenate([a, b], axis=-1)


@njit(cache=True, parallel=True)
def _unpack_jit(flat, uslot, usign, uval):
    nb = flat.shape[0]
    npair = uslot.shape[0]
    out = np.empty((nb, 2 * npair))
    for b in prange(nb):
        for p in range(npair):
            v = flat[b, uslot[p]]
            out[b, p] = -usign[p] * uval * v.imag
            out[b, npair + p] = uval * v.real
    return out


def unpack_spectrum(flat, uslot, usign, uval):
    if numba_enabled():
        lead = flat.shape[:-1]
        f2 = np.ascontiguousarray(flat.reshape(-1, flat.shape[-1]))
        out = _unpack_jit(f2, uslot, usign, uval)
        return out.reshape(lead + (out.shape[-1],))
    return unpack_numpy(flat, uslot, usign, uval)


# -- spectral multiplier stack ---------------------------------------------------

def mult_stack_numpy(mult, hat):
    """(C, n_spec) multipliers x (..., n_spec) spectra -> (C, ..., n_spec)."""
    m = mult.reshape((mult.shape[0],) + (1,) * (hat.ndim - 1) + (mult.shape[-1],))
    return m * hat[None]


@njit(cache=True, parallel=True)
def _mult_stack_jit(mult, hat):
    nc = mult.shape[0]
    nb, ns = hat.shape
    out = np.empty((nc, nb, ns), dtype=np.complex128)
    for b in prange(nb):
        for c in range(nc):
            for s in range(ns):
                out[c, b, s] = mult[c, s] * hat[b, s]
    return out


def apply_mult_stack(mult, hat):
    if numba_enabled():
        lead = hat.shape[:-1]
        h2 = np.ascontiguousarray(hat.reshape(-1, hat.shape[-1]))
        out = _mult_stack_jit(mult, h2)
        return out.reshape((mult.shape[0],) + lead + (hat.shape[-1],))
    return mult_stack_numpy(mult, hat)


# -- pointwise advection products ------------------------------------------------

def advection_products_numpy(g4):
    """g4: (4, F, ..., n_grid) grids [u1, u2, d/dx, d/dy]; field 0 advects all."""
    u1w, u2w, dxw, dyw = g4[0, 0], g4[1, 0], g4[2, 0], g4[3, 0]
    out = np.empty_like(g4[0])
    out[0] = -(u1w * dxw + u2w * dyw)
    if g4.shape[1] > 1:
        out[1:] = -(
            u1w * g4[2, 1:] + u2w * g4[3, 1:] + g4[0, 1:] * dxw + g4[1, 1:] * dyw
        )
    return out


@njit(cache=True, parallel=True)
def _advection_products_jit(g4):
    nf, nb, ng = g4.shape[1], g4.shape[2], g4.shape[3]
    out = np.empty((nf, nb, ng))
    for b in prange(nb):
        for s in range(ng):
            u1 = g4[0, 0, b, s]
            u2 = g4[1, 0, b, s]
            dx = g4[2, 0, b, s]
            dy = g4[3, 0, b, s]
            out[0, b, s] = -(u1 * dx + u2 * dy)
            for f in range(1, nf):
                out[f, b, s] = -(
                    u1 * g4[2, f, b, s]
                    + u2 * g4[3, f, b, s]
                    + g4[0, f, b, s] * dx
                    + g4[1, f, b, s] * dy
                )
    return out


def advection_products(g4):
    if numba_enabled():
        shape = g4.shape  # (4, F, ..., n_grid)
        g3 = np.ascontiguousarray(g4.reshape(4, shape[1], -1, shape[-1]))
        out = _advection_products_jit(g3)
        return out.reshape(shape[1:])
    return advection_products_numpy(g4)
