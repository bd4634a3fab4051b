"""Semi-implicit Euler-Maruyama stepping for the vorticity SPDE and tangents.

All stiff linear parts (viscous Laplacian, low-band relaxation) are treated
implicitly; transport, its linearization, and the noise are explicit with the
diffusion evaluated at the left endpoint.  Every process advanced within one
step consumes the identical Wiener increment, which makes shared-path
identities between the tangent systems exact at the scheme level.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nonlinear
from .noise import NoiseModel, apply_DQ, apply_Q, apply_g, hs_norm_sq
from .rng import NoiseStream
from .spectral import Lattice, sobolev_norm

BLOWUP_NORM = 1.0e6


@dataclass(frozen=True)
class StepScheme:
    """Time step, viscosity, and the low-band relaxation stiffness b1.

    b1 is only consulted by the auxiliary (zeta) system and must exceed
    nu * N^2 on the lattice it is used with.  `advection` switches the
    quadratic transport off for linear-regime diagnostics.
    """

    dt: float
    nu: float
    b1: float | None = None
    advection: bool = True
    kind: str = "semi-implicit-euler"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt={self.dt} must be positive")
        if self.nu <= 0:
            raise ValueError(f"nu={self.nu} must be positive")
        if self.kind != "semi-implicit-euler":
            raise ValueError(f"unknown scheme kind {self.kind!r}")

    def require_b1(self, lat: Lattice) -> float:
        if self.b1 is None:
            raise ValueError("scheme.b1 is required for the auxiliary system")
        if self.b1 < self.nu * lat.N**2:
            raise ValueError(
                f"b1={self.b1} must be at least nu*N^2={self.nu * lat.N ** 2}"
            )
        return self.b1


@dataclass
class TrajectoryState:
    """Bookkeeping for one (possibly batched) trajectory."""

    t: float
    w: np.ndarray
    tangents: dict = field(default_factory=dict)
    accumulators: dict = field(default_factory=dict)
    flags: np.ndarray | None = None


class _Factors:
    """Per-(lattice, scheme) implicit denominators, built once per run."""

    def __init__(self, lat: Lattice, scheme: StepScheme, with_zeta: bool = False):
        dt = scheme.dt
        self.inv_visc = 1.0 / (1.0 + dt * scheme.nu * lat.k2)
        self.low_mask = lat.band_mask().astype(np.float64)
        self.high_mask = 1.0 - self.low_mask
        if with_zeta:
            b1 = scheme.require_b1(lat)
            coef = np.where(lat.band_mask(), b1, scheme.nu)
            self.inv_zeta = 1.0 / (1.0 + dt * coef * lat.k2)
            self.relax_gain = b1 - scheme.nu


class _NoiseSource:
    """Uniform interface over a live stream or a pre-drawn increment array."""

    def __init__(self, lat, model, seed=None, n_traj=1, increments=None, offset=0):
        self.n_band = model.n_band
        if increments is not None:
            self._arr = np.asarray(increments)
            self._i = 0
            self._stream = None
        else:
            if seed is None:
                raise ValueError("either a seed or explicit increments are required")
            self._arr = None
            self._stream = NoiseStream(seed, n_traj, model.n_band, offset=offset)

    def next_step(self) -> np.ndarray:
        if self._arr is not None:
            z = self._arr[self._i]
            self._i += 1
            return z
        return self._stream.next_step()


def _as_batch(w0: np.ndarray) -> tuple[np.ndarray, bool]:
    w0 = np.atleast_2d(np.asarray(w0, dtype=np.float64))
    return w0, w0.shape[0] == 1


# -- single-step operations -----------------------------------------------------

def step_vorticity(lat, model, scheme, w, dW, factors=None, bw=None):
    """One semi-implicit step of the vorticity equation.

    dW carries the Wiener increments (units sqrt(time)); the transport term
    can be passed in when it was already evaluated for tangent stepping.
    """
    f = factors or _Factors(lat, scheme)
    if bw is None:
        bw = (
            nonlinear.nonlinear_term(lat, w)
            if scheme.advection
            else np.zeros_like(w)
        )
    rhs = w + scheme.dt * bw + apply_Q(model, w, dW)
    return f.inv_visc * rhs


def step_derivative_flow(lat, model, scheme, w, jxi, dW, factors=None, bt=None):
    """One step of the derivative flow sharing the state's increment."""
    f = factors or _Factors(lat, scheme)
    if bt is None:
        bt = (
            nonlinear.linearized_term(lat, w, jxi)
            if scheme.advection
            else np.zeros_like(jxi)
        )
    rhs = jxi + scheme.dt * bt + apply_DQ(model, w, jxi, dW)
    return f.inv_visc * rhs


def step_zeta(lat, model, scheme, w, zeta, dW, factors=None, bt=None):
    """One step of the auxiliary system: relaxed low band, transported high band."""
    f = factors if factors is not None else _Factors(lat, scheme, with_zeta=True)
    if bt is None:
        bt = (
            nonlinear.linearized_term(lat, w, zeta)
            if scheme.advection
            else np.zeros_like(zeta)
        )
    rhs = zeta + scheme.dt * (f.high_mask * bt) + apply_DQ(model, w, zeta, dW)
    return f.inv_zeta * rhs


def control_force(lat, scheme, zeta, bt_zeta, factors):
    """Low-band drift that the control must deliver through the noise map."""
    return factors.low_mask * (bt_zeta + factors.relax_gain * lat.k2 * zeta)


def step_rho(lat, model, scheme, w, rho, dW, v=None, factors=None, bt=None):
    """One step of the remainder equation; v is the noise-direction control.

    With v absent the update rule is identical to the derivative flow, which
    is asserted bitwise by the shared-path tests.
    """
    f = factors or _Factors(lat, scheme)
    if bt is None:
        bt = (
            nonlinear.linearized_term(lat, w, rho)
            if scheme.advection
            else np.zeros_like(rho)
        )
    rhs = rho + scheme.dt * bt + apply_DQ(model, w, rho, dW)
    if v is not None:
        rhs = rhs - scheme.dt * apply_Q(model, w, v)
    return f.inv_visc * rhs


def step_noise_derivative(lat, model, scheme, w, a, dW, v, factors=None, bt=None):
    """One step of the directional noise derivative (source +Q(w) v dt)."""
    f = factors or _Factors(lat, scheme)
    if bt is None:
        bt = (
            nonlinear.linearized_term(lat, w, a)
            if scheme.advection
            else np.zeros_like(a)
        )
    rhs = a + scheme.dt * bt + scheme.dt * apply_Q(model, w, v) + apply_DQ(model, w, a, dW)
    return f.inv_visc * rhs


# -- drivers ---------------------------------------------------------------------

@dataclass
class SimulationResult:
    times: np.ndarray            # (R,)
    norm_l2: np.ndarray          # (R, n_traj)
    norm_h1: np.ndarray          # (R, n_traj)
    dissipation: np.ndarray      # (R, n_traj): 2 nu ||w||_1^2
    noise_input: np.ndarray      # (R, n_traj): HS norm^2 of the noise map
    mode_values: np.ndarray      # (R, n_traj, n_sel)
    tangent_norms: np.ndarray | None
    flags: np.ndarray            # (n_traj,) True where the blow-up guard fired
    final_w: np.ndarray


def simulate_paths(
    lat: Lattice,
    model: NoiseModel,
    scheme: StepScheme,
    w0: np.ndarray,
    T: float,
    record_stride: int = 1,
    seed: int | None = None,
    increments: np.ndarray | None = None,
    xi0: np.ndarray | None = None,
    n_sel_modes: int = 4,
) -> SimulationResult:
    """Batch simulation with periodic records; deterministic given (seed, config).

    w0 has shape (n_traj, n_modes) or (n_modes,).  When xi0 is given the
    derivative flow along it is integrated on the shared path and its norms
    recorded.
    """
    w, _ = _as_batch(w0)
    w = w.copy()
    n_traj = w.shape[0]
    with_j = xi0 is not None
    jxi = None
    if with_j:
        jxi = np.broadcast_to(
            np.asarray(xi0, dtype=np.float64), w.shape
        ).copy()

    n_steps = int(round(T / scheme.dt))
    f = _Factors(lat, scheme)
    noise = _NoiseSource(lat, model, seed, n_traj, increments)
    sqdt = np.sqrt(scheme.dt)
    alive = np.ones(n_traj, dtype=bool)
    n_sel = min(n_sel_modes, lat.n_modes)

    n_rec = n_steps // record_stride + 1
    times = np.empty(n_rec)
    r_l2 = np.empty((n_rec, n_traj))
    r_h1 = np.empty((n_rec, n_traj))
    r_diss = np.empty((n_rec, n_traj))
    r_in = np.empty((n_rec, n_traj))
    r_modes = np.empty((n_rec, n_traj, n_sel))
    r_tan = np.empty((n_rec, n_traj)) if with_j else None

    rec = 0
    for step in range(n_steps + 1):
        if step % record_stride == 0:
            times[rec] = step * scheme.dt
            h1 = sobolev_norm(lat, w, 1.0)
            r_l2[rec] = sobolev_norm(lat, w, 0.0)
            r_h1[rec] = h1
            r_diss[rec] = 2.0 * scheme.nu * h1**2
            r_in[rec] = hs_norm_sq(model, w)
            r_modes[rec] = w[:, :n_sel]
            if with_j:
                r_tan[rec] = sobolev_norm(lat, jxi, 0.0)
            rec += 1
        if step == n_steps:
            break
        dW = sqdt * noise.next_step()
        if scheme.advection:
            if with_j:
                bw, bts = nonlinear.transport_all(lat, w, jxi[None])
                btj = bts[0]
            else:
                bw, _ = nonlinear.transport_all(lat, w)
        else:
            bw = np.zeros_like(w)
            btj = np.zeros_like(w) if with_j else None
        w_new = step_vorticity(lat, model, scheme, w, dW, factors=f, bw=bw)
        if with_j:
            j_new = step_derivative_flow(
                lat, model, scheme, w, jxi, dW, factors=f, bt=btj
            )
        bad = ~np.isfinite(w_new).all(axis=-1) | (
            np.sum(w_new * w_new, axis=-1) > BLOWUP_NORM**2
        )
        newly_dead = bad & alive
        if np.any(newly_dead):
            w_new[newly_dead] = w[newly_dead]
            if with_j:
                j_new[newly_dead] = jxi[newly_dead]
            alive &= ~newly_dead
        frozen = ~alive
        if np.any(frozen):
            w_new[frozen] = w[frozen]
            if with_j:
                j_new[frozen] = jxi[frozen]
        w = w_new
        if with_j:
            jxi = j_new

    return SimulationResult(
        times=times,
        norm_l2=r_l2,
        norm_h1=r_h1,
        dissipation=r_diss,
        noise_input=r_in,
        mode_values=r_modes,
        tangent_norms=r_tan,
        flags=~alive,
        final_w=w,
    )


def malliavin_directional(
    lat: Lattice,
    model: NoiseModel,
    scheme: StepScheme,
    w0: np.ndarray,
    v_path: np.ndarray,
    T: float,
    seed: int | None = None,
    increments: np.ndarray | None = None,
) -> np.ndarray:
    """Directional derivative of the endpoint with respect to a noise shift.

    v_path has shape (n_steps, n_band) or (n_steps, n_traj, n_band) on the
    same grid as the integration; the result solves the augmented linear
    system with source Q(w) v dt on the shared path.
    """
    w, _ = _as_batch(w0)
    w = w.copy()
    n_steps = int(round(T / scheme.dt))
    if v_path.shape[0] != n_steps:
        raise ValueError(
            f"control path has {v_path.shape[0]} steps, grid has {n_steps}"
        )
    f = _Factors(lat, scheme)
    noise = _NoiseSource(lat, model, seed, w.shape[0], increments)
    sqdt = np.sqrt(scheme.dt)
    a = np.zeros_like(w)
    for step in range(n_steps):
        dW = sqdt * noise.next_step()
        if scheme.advection:
            bw, bts = nonlinear.transport_all(lat, w, a[None])
            bta = bts[0]
        else:
            bw = np.zeros_like(w)
            bta = np.zeros_like(a)
        v = np.broadcast_to(v_path[step], dW.shape)
        a = step_noise_derivative(
            lat, model, scheme, w, a, dW, v, factors=f, bt=bta
        )
        w = step_vorticity(lat, model, scheme, w, dW, factors=f, bw=bw)
    return a


def solution_map(
    lat: Lattice,
    model: NoiseModel,
    scheme: StepScheme,
    w0: np.ndarray,
    T: float,
    seed: int | None = None,
    increments: np.ndarray | None = None,
    drift_shift: np.ndarray | None = None,
) -> np.ndarray:
    """Endpoint of the vorticity flow for a given start and noise realization.

    drift_shift, if given, adds v dt to the increments step by step (shape
    (n_steps, ..., n_band)); this realizes the shifted-noise solution map
    used by the Girsanov-side finite differences.
    """
    w, _ = _as_batch(w0)
    w = w.copy()
    n_steps = int(round(T / scheme.dt))
    f = _Factors(lat, scheme)
    noise = _NoiseSource(lat, model, seed, w.shape[0], increments)
    sqdt = np.sqrt(scheme.dt)
    for step in range(n_steps):
        dW = sqdt * noise.next_step()
        if drift_shift is not None:
            dW = dW + scheme.dt * drift_shift[step]
        bw = None
        if not scheme.advection:
            bw = np.zeros_like(w)
        w = step_vorticity(lat, model, scheme, w, dW, factors=f, bw=bw)
    return w
