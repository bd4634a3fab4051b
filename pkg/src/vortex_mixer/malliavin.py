"""Control construction steering the noise derivative, and gradient estimators.

The control v = g(w) F drives the directional noise derivative so that the
remainder rho = J xi - A v coincides (up to the time step) with the
auxiliary process zeta, whose low band relaxes at the configured stiffness.
Two estimators of the semigroup gradient are provided: the
integration-by-parts form E[phi(w_T) I_v] + E[<grad phi(w_T), rho_T>] and a
common-random-number finite difference used as its independent oracle.
"""

from dataclasses import dataclass

import numpy as np

from . import nonlinear
from .integrator import (
    StepScheme,
    _Factors,
    _NoiseSource,
    step_rho,
    step_vorticity,
    step_zeta,
)
from .noise import NoiseModel, apply_DQ, apply_Q, apply_g
from .spectral import Lattice, sobolev_norm
from .stats import MomentReport, exp_mean_ci, mean_ci

OBSERVABLES = ("coordinate", "exp-energy", "smooth-energy")


@dataclass(frozen=True)
class GradientProbe:
    """Observable descriptor, probe direction, horizon, and batch size."""

    phi: str
    xi: np.ndarray
    T: float
    n_traj: int
    mode_index: int = 0   # coefficient index for the coordinate observable

    def __post_init__(self):
        if self.phi not in OBSERVABLES:
            raise ValueError(f"phi must be one of {OBSERVABLES}, got {self.phi!r}")
        nrm = float(np.linalg.norm(self.xi))
        if abs(nrm - 1.0) > 1e-12:
            raise ValueError(f"probe direction must be unit norm, got {nrm}")


def observable_value(phi: str, w: np.ndarray, mode_index: int = 0) -> np.ndarray:
    if phi == "coordinate":
        return w[..., mode_index]
    nsq = np.sum(w * w, axis=-1)
    if phi == "exp-energy":
        return np.exp(-nsq)
    if phi == "smooth-energy":
        return nsq / (1.0 + nsq)
    raise ValueError(f"unknown observable {phi!r}")


def observable_gradient(phi: str, w: np.ndarray, mode_index: int = 0) -> np.ndarray:
    if phi == "coordinate":
        g = np.zeros_like(w)
        g[..., mode_index] = 1.0
        return g
    nsq = np.sum(w * w, axis=-1, keepdims=True)
    if phi == "exp-energy":
        return -2.0 * w * np.exp(-nsq)
    if phi == "smooth-energy":
        return 2.0 * w / (1.0 + nsq) ** 2
    raise ValueError(f"unknown observable {phi!r}")


def control_F(
    lat: Lattice,
    w: np.ndarray,
    zeta: np.ndarray,
    n_band: int,
    b1: float,
    nu: float,
    bt_zeta: np.ndarray | None = None,
) -> np.ndarray:
    """Low-band force the control must deliver: transported zeta plus the
    relaxation excess (b1 - nu) |k|^2 zeta on the band."""
    if bt_zeta is None:
        bt_zeta = nonlinear.linearized_term(lat, w, zeta)
    mask = lat.band_mask(n_band).astype(np.float64)
    return mask * (bt_zeta + (b1 - nu) * lat.k2 * zeta)


def control_v(model: NoiseModel, w: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Noise directions realizing F through the noise map (exact on the band)."""
    return apply_g(model, w, F)


@dataclass
class TangentRun:
    """Per-trajectory outputs of one controlled tangent integration."""

    phi_values: dict            # observable name -> (n_traj,)
    grad_terms: dict            # observable name -> <grad phi(w_T), rho_T>
    stoch_integral: np.ndarray  # I_v per trajectory
    control_energy: np.ndarray  # sum |v|^2 dt per trajectory
    final_w: np.ndarray
    final_rho: np.ndarray
    final_zeta: np.ndarray


def _run_controlled_system(
    lat: Lattice,
    model: NoiseModel,
    scheme: StepScheme,
    w0: np.ndarray,
    xi: np.ndarray,
    n_traj: int,
    seed: int,
    observables: tuple[str, ...],
    mode_index: int,
    T: float,
    chunk: int = 2500,
) -> TangentRun:
    b1 = scheme.require_b1(lat)
    n_steps = int(round(T / scheme.dt))
    f = _Factors(lat, scheme, with_zeta=True)
    sqdt = np.sqrt(scheme.dt)
    low = f.low_mask

    phi_vals = {p: np.empty(n_traj) for p in observables}
    grad_terms = {p: np.empty(n_traj) for p in observables}
    iv_all = np.empty(n_traj)
    qv_all = np.empty(n_traj)
    wT = np.empty((n_traj, lat.n_modes))
    rhoT = np.empty((n_traj, lat.n_modes))
    zetaT = np.empty((n_traj, lat.n_modes))

    for lo in range(0, n_traj, chunk):
        hi = min(lo + chunk, n_traj)
        nb = hi - lo
        w = np.broadcast_to(w0, (nb, lat.n_modes)).copy()
        zeta = np.broadcast_to(xi, (nb, lat.n_modes)).copy()
        rho = zeta.copy()
        iv = np.zeros(nb)
        qv = np.zeros(nb)
        noise = _NoiseSource(lat, model, seed, nb, offset=lo)
        for _ in range(n_steps):
            dW = sqdt * noise.next_step()
            bw, bts = nonlinear.transport_all(lat, w, np.stack([zeta, rho]))
            bt_z, bt_r = bts[0], bts[1]
            F = low * (bt_z + f.relax_gain * lat.k2 * zeta)
            v = apply_g(model, w, F)
            iv += np.sum(v * dW, axis=-1)
            qv += scheme.dt * np.sum(v * v, axis=-1)
            zeta_n = f.inv_zeta * (
                zeta + scheme.dt * (f.high_mask * bt_z) + apply_DQ(model, w, zeta, dW)
            )
            rho_n = f.inv_visc * (
                rho
                + scheme.dt * bt_r
                - scheme.dt * apply_Q(model, w, v)
                + apply_DQ(model, w, rho, dW)
            )
            w = f.inv_visc * (w + scheme.dt * bw + apply_Q(model, w, dW))
            zeta, rho = zeta_n, rho_n
        for p in observables:
            phi_vals[p][lo:hi] = observable_value(p, w, mode_index)
            grad_terms[p][lo:hi] = np.sum(
                observable_gradient(p, w, mode_index) * rho, axis=-1
            )
        iv_all[lo:hi] = iv
        qv_all[lo:hi] = qv
        wT[lo:hi] = w
        rhoT[lo:hi] = rho
        zetaT[lo:hi] = zeta

    return TangentRun(
        phi_values=phi_vals,
        grad_terms=grad_terms,
        stoch_integral=iv_all,
        control_energy=qv_all,
        final_w=wT,
        final_rho=rhoT,
        final_zeta=zetaT,
    )


@dataclass
class GradientEstimate:
    estimator: str
    phi: str
    value: float
    ci_halfwidth: float
    n_traj: int
    inconclusive: bool


def gradient_via_malliavin(
    lat: Lattice,
    model: NoiseModel,
    scheme: StepScheme,
    probe: GradientProbe,
    w0: np.ndarray,
    seed: int = 0,
    observables: tuple[str, ...] | None = None,
) -> list[GradientEstimate]:
    """Integration-by-parts gradient estimate for the probe's observable(s).

    The scheme's stochastic integral I_v has exact mean zero, so the
    observable is centered by its batch mean before multiplying; this leaves
    the estimator unbiased up to O(1/n) while removing the dominant variance
    term.
    """
    obs = observables or (probe.phi,)
    run = _run_controlled_system(
        lat, model, scheme, np.asarray(w0, dtype=np.float64), probe.xi,
        probe.n_traj, seed, obs, probe.mode_index, probe.T,
    )
    out = []
    for p in obs:
        phi = run.phi_values[p]
        centered = phi - phi.mean()
        samples = centered * run.stoch_integral + run.grad_terms[p]
        val, hw = mean_ci(samples)
        out.append(
            GradientEstimate(
                estimator="malliavin",
                phi=p,
                value=val,
                ci_halfwidth=hw,
                n_traj=probe.n_traj,
                inconclusive=hw > abs(val),
            )
        )
    return out


def gradient_via_finite_difference(
    lat: Lattice,
    model: NoiseModel,
    scheme: StepScheme,
    probe: GradientProbe,
    w0: np.ndarray,
    eps: float = 1e-3,
    seed: int = 0,
    observables: tuple[str, ...] | None = None,
    base_phi: dict | None = None,
) -> list[GradientEstimate]:
    """Common-random-number finite difference along the probe direction.

    Independent oracle for the integration-by-parts estimator: same noise per
    trajectory pair, initial condition shifted by eps * xi.  base_phi can
    reuse the unperturbed observable values from a malliavin run made with
    the same seed; otherwise the base ensemble is integrated here.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps={eps} outside [1e-6, 1e-2]")
    obs = observables or (probe.phi,)
    w0 = np.asarray(w0, dtype=np.float64)
    n_steps = int(round(probe.T / scheme.dt))
    sqdt = np.sqrt(scheme.dt)
    f = _Factors(lat, scheme)
    chunk = 2500

    vals = {p: np.empty(probe.n_traj) for p in obs}
    vals_base = {p: np.empty(probe.n_traj) for p in obs}
    need_base = base_phi is None
    for lo in range(0, probe.n_traj, chunk):
        hi = min(lo + chunk, probe.n_traj)
        nb = hi - lo
        if need_base:
            w = np.concatenate(
                [
                    np.broadcast_to(w0 + eps * probe.xi, (nb, lat.n_modes)),
                    np.broadcast_to(w0, (nb, lat.n_modes)),
                ]
            )
        else:
            w = np.broadcast_to(w0 + eps * probe.xi, (nb, lat.n_modes)).copy()
        noise = _NoiseSource(lat, model, seed, nb, offset=lo)
        for _ in range(n_steps):
            z = noise.next_step()
            dW = sqdt * (np.concatenate([z, z]) if need_base else z)
            bw = None
            if not scheme.advection:
                bw = np.zeros_like(w)
            w = step_vorticity(lat, model, scheme, w, dW, factors=f, bw=bw)
        for p in obs:
            if need_base:
                vals[p][lo:hi] = observable_value(p, w[:nb], probe.mode_index)
                vals_base[p][lo:hi] = observable_value(p, w[nb:], probe.mode_index)
            else:
                vals[p][lo:hi] = observable_value(p, w, probe.mode_index)

    out = []
    for p in obs:
        base = vals_base[p] if need_base else base_phi[p]
        samples = (vals[p] - base) / eps
        val, hw = mean_ci(samples)
        out.append(
            GradientEstimate(
                estimator="finite-difference",
                phi=p,
                value=val,
                ci_halfwidth=hw,
                n_traj=probe.n_traj,
                inconclusive=hw > abs(val),
            )
        )
    return out


def estimates_agree(a: GradientEstimate, b: GradientEstimate) -> bool:
    """Joint 95% confidence comparison of two estimates."""
    return abs(a.value - b.value) <= np.hypot(a.ci_halfwidth, b.ci_halfwidth)


def verify_rho_equals_zeta(
    lat: Lattice,
    model: NoiseModel,
    scheme: StepScheme,
    w0: np.ndarray,
    xi: np.ndarray,
    T: float,
    seed: int | None = None,
    increments: np.ndarray | None = None,
) -> dict:
    """Maximum grid deviation between the remainder and auxiliary processes.

    With the control substituted, the two systems solve the same equation in
    continuous time; the discrete gap comes from the differing implicit
    treatments of the low-band relaxation and shrinks linearly in dt.
    """
    b1 = scheme.require_b1(lat)
    n_steps = int(round(T / scheme.dt))
    f = _Factors(lat, scheme, with_zeta=True)
    sqdt = np.sqrt(scheme.dt)
    w = np.atleast_2d(np.asarray(w0, dtype=np.float64)).copy()
    zeta = np.broadcast_to(xi, w.shape).copy()
    rho = zeta.copy()
    noise = _NoiseSource(lat, model, seed, w.shape[0], increments)
    max_dev = 0.0
    for _ in range(n_steps):
        dW = sqdt * noise.next_step()
        bw, bts = nonlinear.transport_all(lat, w, np.stack([zeta, rho]))
        F = f.low_mask * (bts[0] + f.relax_gain * lat.k2 * zeta)
        v = apply_g(model, w, F)
        zeta = f.inv_zeta * (
            zeta + scheme.dt * (f.high_mask * bts[0]) + apply_DQ(model, w, zeta, dW)
        )
        rho = f.inv_visc * (
            rho
            + scheme.dt * bts[1]
            - scheme.dt * apply_Q(model, w, v)
            + apply_DQ(model, w, rho, dW)
        )
        w = f.inv_visc * (w + scheme.dt * bw + apply_Q(model, w, dW))
        dev = float(sobolev_norm(lat, rho - zeta, 0.0).max())
        max_dev = max(max_dev, dev)
    return {"max_deviation": max_dev, "per_dt": max_dev / scheme.dt, "dt": scheme.dt}


def zeta_moment_check(
    lat: Lattice,
    model: NoiseModel,
    scheme: StepScheme,
    xi: np.ndarray,
    w0: np.ndarray,
    eta: float,
    n: int,
    T: float,
    n_traj: int,
    seed: int = 0,
    freeze_w: bool = False,
) -> MomentReport:
    """Supermartingale statistic for the 2n-th moment of the auxiliary process.

    Estimates E[ ||zeta_t||^{2n} exp((nu n N^2 - n(n-1) L_Q/2) t
    - 4 n eta int ||w||_1^2) ] at the horizon; at most 1 when the band is
    wide enough.  freeze_w pins the state at w0 for linear-regime oracles.
    """
    if n not in (1, 2):
        raise ValueError("moment order n must be 1 or 2")
    if eta > scheme.nu**2 / (8 * n * model.b0) + 1e-15:
        raise ValueError(
            f"eta={eta} above admissible ceiling nu^2/(8 n B0)="
            f"{scheme.nu ** 2 / (8 * n * model.b0)}"
        )
    scheme.require_b1(lat)
    n_steps = int(round(T / scheme.dt))
    f = _Factors(lat, scheme, with_zeta=True)
    sqdt = np.sqrt(scheme.dt)
    w = np.broadcast_to(np.asarray(w0, dtype=np.float64), (n_traj, lat.n_modes)).copy()
    zeta = np.broadcast_to(xi, w.shape).copy()
    noise = _NoiseSource(lat, model, seed, n_traj)
    integral = np.zeros(n_traj)
    for _ in range(n_steps):
        dW = sqdt * noise.next_step()
        integral += scheme.dt * sobolev_norm(lat, w, 1.0) ** 2
        if freeze_w:
            bts = nonlinear.linearized_term(lat, w, zeta) if scheme.advection else 0.0
            zeta = f.inv_zeta * (
                zeta + scheme.dt * (f.high_mask * bts) + apply_DQ(model, w, zeta, dW)
            )
        else:
            bw, bts = nonlinear.transport_all(lat, w, zeta[None])
            zeta = f.inv_zeta * (
                zeta + scheme.dt * (f.high_mask * bts[0]) + apply_DQ(model, w, zeta, dW)
            )
            w = f.inv_visc * (w + scheme.dt * bw + apply_Q(model, w, dW))
    rate = scheme.nu * n * lat.N**2 - n * (n - 1) * model.l_q / 2.0
    znorm = sobolev_norm(lat, zeta, 0.0)
    logx = 2.0 * n * np.log(np.maximum(znorm, 1e-300)) + rate * T - 4.0 * n * eta * integral
    est, hw, ess = exp_mean_ci(logx)
    return MomentReport(
        statistic=f"zeta-moment-n{n}",
        estimate=est,
        ci=hw,
        bound=1.0,
        passed=est <= 1.0 + 3.0 * hw,
        n_traj=n_traj,
        T=T,
        dt=scheme.dt,
        ess=ess,
    )
