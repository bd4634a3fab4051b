"""Degenerate multiplicative noise families acting on the low-frequency band.

The covariance map feeds independent Wiener directions into the basis modes
with Euclidean |k| <= N.  Two modulations are provided: "constant" (additive
noise) and "tanh-diagonal", where each direction's amplitude is modulated by
tanh of the same mode's vorticity coefficient.  The diagonal structure makes
the pseudo-inverse exact, the stored bound and Lipschitz constants sharp, and
the Frechet derivative analytic.
"""

from dataclasses import dataclass, field

import numpy as np

from .spectral import Lattice

MODULATIONS = ("constant", "tanh-diagonal")


@dataclass(frozen=True)
class NoiseModel:
    """Diagonal band-limited noise map with its constants.

    sigma holds one amplitude per noise direction; b0 is the Hilbert-Schmidt
    supremum sum(sigma^2 (1+eps_mod)^2) and l_q the Lipschitz constant
    eps_mod * max(sigma).
    """

    N: int
    modulation: str
    eps_mod: float
    sigma: np.ndarray          # (n_band,)
    band_idx: np.ndarray       # lattice mode index per noise direction
    b0: float
    l_q: float
    _lat_n_modes: int = field(repr=False, default=0)

    @property
    def n_band(self) -> int:
        return self.band_idx.size


def build_noise_model(
    lat: Lattice,
    modulation: str = "tanh-diagonal",
    sigma: float | np.ndarray = 1.0,
    eps_mod: float = 0.5,
) -> NoiseModel:
    if modulation not in MODULATIONS:
        raise ValueError(f"modulation must be one of {MODULATIONS}, got {modulation!r}")
    if modulation == "constant":
        eps_mod = 0.0
    if not 0.0 <= eps_mod <= 0.9:
        raise ValueError(f"eps_mod={eps_mod} outside [0, 0.9]")
    band = lat.band_indices()
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), band.shape).copy()
    if np.any(sig < 0):
        raise ValueError("sigma amplitudes must be nonnegative")
    b0 = float(np.sum(sig**2) * (1.0 + eps_mod) ** 2)
    l_q = float(eps_mod * sig.max()) if sig.size else 0.0
    return NoiseModel(
        N=lat.N,
        modulation=modulation,
        eps_mod=eps_mod,
        sigma=sig,
        band_idx=band,
        b0=b0,
        l_q=l_q,
        _lat_n_modes=lat.n_modes,
    )


def modulation_values(model: NoiseModel, w: np.ndarray) -> np.ndarray:
    """Per-direction amplitudes q_k(w), shape (..., n_band)."""
    if model.modulation == "constant":
        shape = w.shape[:-1] + (model.n_band,)
        return np.broadcast_to(model.sigma, shape)
    wb = w[..., model.band_idx]
    return model.sigma * (1.0 + model.eps_mod * np.tanh(wb))


def apply_Q(model: NoiseModel, w: np.ndarray, du: np.ndarray) -> np.ndarray:
    """Map a noise-direction increment into a spectral field (band-supported)."""
    if du.shape[-1] != model.n_band:
        raise ValueError(
            f"increment has {du.shape[-1]} directions, band has {model.n_band}"
        )
    if w.shape[-1] != model._lat_n_modes:
        raise ValueError("state field does not match the model's lattice")
    q = modulation_values(model, w)
    out = np.zeros(np.broadcast_shapes(w.shape[:-1], du.shape[:-1]) + (w.shape[-1],))
    out[..., model.band_idx] = q * du
    return out


def apply_g(model: NoiseModel, w: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Pseudo-inverse: v with Q(w) v equal to the low-band projection of f."""
    if np.any(model.sigma <= 0):
        raise ValueError("pseudo-inverse undefined for zero sigma amplitudes")
    q = modulation_values(model, w)
    return f[..., model.band_idx] / q


def apply_DQ(
    model: NoiseModel, w: np.ndarray, zeta: np.ndarray, du: np.ndarray
) -> np.ndarray:
    """Derivative of the noise map in state direction zeta, applied to du."""
    if du.shape[-1] != model.n_band:
        raise ValueError(
            f"increment has {du.shape[-1]} directions, band has {model.n_band}"
        )
    out_shape = (
        np.broadcast_shapes(w.shape[:-1], zeta.shape[:-1], du.shape[:-1])
        + (w.shape[-1],)
    )
    out = np.zeros(out_shape)
    if model.modulation == "constant":
        return out
    wb = w[..., model.band_idx]
    zb = zeta[..., model.band_idx]
    sech2 = 1.0 / np.cosh(wb) ** 2
    out[..., model.band_idx] = model.sigma * model.eps_mod * sech2 * zb * du
    return out


def hs_norm_sq(model: NoiseModel, w: np.ndarray) -> np.ndarray:
    """Squared Hilbert-Schmidt norm of the noise map at state w."""
    q = modulation_values(model, w)
    return np.sum(q * q, axis=-1)


@dataclass
class NoiseReport:
    b0: float
    l_q: float
    max_hs_sq: float
    max_lipschitz_ratio: float
    max_pseudo_inverse_residual: float
    n_samples: int
    passed: bool


def validate_hypotheses(
    lat: Lattice, model: NoiseModel, n_samples: int = 1000, seed: int = 0
) -> NoiseReport:
    """Sampled check of boundedness, Lipschitz continuity, and exact inversion.

    Violations do not raise; they are recorded and flip the pass flag.
    """
    if n_samples < 100:
        raise ValueError("need at least 100 samples for a meaningful report")
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.1, 5.0, size=(n_samples, 1))
    ws = rng.standard_normal((n_samples, lat.n_modes)) * scale
    vs = rng.standard_normal((n_samples, lat.n_modes)) * scale

    max_hs = float(hs_norm_sq(model, ws).max())

    qw = modulation_values(model, ws)
    qv = modulation_values(model, vs)
    dq = np.sqrt(np.sum((qw - qv) ** 2, axis=-1))
    dwv = np.sqrt(np.sum((ws - vs) ** 2, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(dwv > 0, dq / dwv, 0.0)
    max_lip = float(ratios.max())

    # pseudo-inverse residual over random states and fields, plus every
    # band basis direction
    fs = rng.standard_normal((n_samples, lat.n_modes))
    resid = 0.0
    if np.all(model.sigma > 0):
        v = apply_g(model, ws, fs)
        qv_field = apply_Q(model, ws, v)
        pf = np.zeros_like(fs)
        pf[..., model.band_idx] = fs[..., model.band_idx]
        resid = float(np.abs(qv_field - pf).max())
        basis = np.zeros((model.n_band, lat.n_modes))
        basis[np.arange(model.n_band), model.band_idx] = 1.0
        w0 = ws[: model.n_band] if n_samples >= model.n_band else ws[:1]
        vb = apply_g(model, w0, basis[: w0.shape[0]])
        qb = apply_Q(model, w0, vb)
        resid = max(resid, float(np.abs(qb - basis[: w0.shape[0]]).max()))

    passed = (
        max_hs <= model.b0 * (1 + 1e-12)
        and max_lip <= model.l_q * (1 + 1e-9) + 1e-15
        and resid <= 1e-12
    )
    return NoiseReport(
        b0=model.b0,
        l_q=model.l_q,
        max_hs_sq=max_hs,
        max_lipschitz_ratio=max_lip,
        max_pseudo_inverse_residual=resid,
        n_samples=n_samples,
        passed=passed,
    )
