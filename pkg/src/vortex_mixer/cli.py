"""Command-line entry point: experiment dispatch and bit-stable outputs.

Usage: vortex-mixer <simulate|couple|gradient|diagnose|validate-noise>
           --config cfg.json [--seed N] [--out DIR] [--check NAME]

Outputs are written atomically (temp file + rename); every NDJSON stream
starts with a header record echoing the full config, its hash, and the seed.
Exit status: 0 clean pass, 2 completed with flags, 1 error.  The only
environment override is VORTEX_MIXER_WORKERS for the transform worker count.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config
from .coupling import run_coupling_experiment
from .diagnostics import (
    exp_moment_dissipative,
    exp_moment_sup,
    invariant_measure_sample,
    lyapunov_check,
    mixing_decay,
    energy_integral_moment_check,
    tangent_growth_moment_check,
)
from .integrator import StepScheme, simulate_paths
from .malliavin import (
    GradientProbe,
    gradient_via_finite_difference,
    gradient_via_malliavin,
    zeta_moment_check,
)
from .noise import build_noise_model, validate_hypotheses
from .spectral import build_lattice, smooth_field


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _dump_row(row: dict) -> str:
    return json.dumps({k: _jsonable(v) for k, v in row.items()}, sort_keys=True)


def _write_ndjson(path: Path, rows) -> None:
    _atomic_write(path, "\n".join(_dump_row(r) for r in rows) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(_jsonable(v)) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _header_row(cfg: RunConfig, seed: int) -> dict:
    return {
        "record": "header",
        "artifact": "vortex-mixer",
        "version": __version__,
        "config": cfg.data,
        "config_hash": cfg.config_hash,
        "seed": seed,
    }


def _build(cfg: RunConfig):
    lat = build_lattice(int(cfg["lattice"]["M"]), int(cfg["lattice"]["N"]))
    model = build_noise_model(
        lat,
        cfg["noise"]["modulation"],
        cfg["noise"]["sigma"],
        cfg["noise"]["eps_mod"],
    )
    b1 = cfg["scheme"]["B1"]
    if b1 is None:
        b1 = 1.5 * cfg["physics"]["nu"] * lat.N**2
    scheme = StepScheme(
        dt=cfg["scheme"]["dt"],
        nu=cfg["physics"]["nu"],
        b1=b1,
        advection=cfg["physics"]["advection"],
    )
    return lat, model, scheme


def _run_simulate(cfg: RunConfig, seed: int, out: Path) -> int:
    lat, model, scheme = _build(cfg)
    exp = cfg["experiment"]
    p = exp["params"]
    w0 = smooth_field(lat, p["w0_scale"])
    xi0 = None
    if p["with_tangent"]:
        xi0 = lat.unit_mode(1, 0, "sin")
    w0_batch = np.broadcast_to(w0, (int(exp["n_traj"]), lat.n_modes))
    res = simulate_paths(
        lat, model, scheme, w0_batch, exp["T"],
        record_stride=int(exp["record_stride"]), seed=seed, xi0=xi0,
    )
    rows = [_header_row(cfg, seed)]
    for ri, t in enumerate(res.times):
        for i in range(res.norm_l2.shape[1]):
            row = {
                "record": "sample",
                "traj": i,
                "t": t,
                "norm_l2": res.norm_l2[ri, i],
                "norm_h1": res.norm_h1[ri, i],
                "dissipation": res.dissipation[ri, i],
                "noise_input": res.noise_input[ri, i],
                "modes": res.mode_values[ri, i],
                "flag": bool(res.flags[i]),
            }
            if res.tangent_norms is not None:
                row["tangent_norm"] = res.tangent_norms[ri, i]
            rows.append(row)
    _write_ndjson(out / "simulate.ndjson", rows)
    frac_flagged = float(res.flags.mean())
    print(
        f"simulate: {res.norm_l2.shape[1]} trajectories, "
        f"{res.times.size} records, flagged {frac_flagged:.1%}"
    )
    return 2 if frac_flagged > 0.10 else 0


def _run_couple(cfg: RunConfig, seed: int, out: Path) -> int:
    lat, model, scheme = _build(cfg)
    exp = cfg["experiment"]
    p = exp["params"]
    w0_1 = smooth_field(lat, p["w0_scale"])
    w0_2 = w0_1 + smooth_field(lat, p["separation"], flavor=1)
    T = exp["T"]
    fit_lo = p["fit_lo"] if p["fit_lo"] is not None else min(1.0, T / 2)
    fit_hi = p["fit_hi"] if p["fit_hi"] is not None else T
    rep = run_coupling_experiment(
        lat, model, scheme, w0_1, w0_2,
        K_c=p["K_c"], C_cap=p["C_cap"], T=T,
        n_pairs=int(exp["n_traj"]), seed=seed,
        delta=p["delta"], eta=p["eta"], r_exponent=p["r_exponent"],
        record_stride=int(exp["record_stride"]),
        fit_window=(fit_lo, fit_hi),
    )
    rows = [_header_row(cfg, seed)]
    s = rep.series
    for ri, t in enumerate(s["t"]):
        for i in range(rep.n_pairs):
            rows.append(
                {
                    "record": "sample",
                    "pair": i,
                    "t": t,
                    "norm_r": s["norm_r"][ri, i],
                    "acc_h_sq": s["acc_h_sq"][ri, i],
                    "tau_hit": bool(s["tau_hit"][ri, i]),
                    "log_weight": s["log_weight"][ri, i],
                }
            )
    _write_ndjson(out / "couple.ndjson", rows)
    _write_csv(
        out / "couple_summary.csv",
        ["quantity", "value", "extra", "config_hash"],
        [
            ["gamma2_hat", rep.gamma2_hat, rep.gamma2_se, cfg.config_hash],
            ["prefactor", rep.prefactor, "", cfg.config_hash],
            ["fit_r2", rep.fit_r2, "", cfg.config_hash],
            ["p1_hat", rep.p1_hat, rep.p1_ci_lower, cfg.config_hash],
            ["a_hat", rep.a_hat, rep.a_ci_halfwidth, cfg.config_hash],
            ["tau_fraction", rep.tau_fraction, "", cfg.config_hash],
        ],
    )
    print(
        f"couple: gamma2={rep.gamma2_hat:.4g} (R2={rep.fit_r2:.3f}) "
        f"p1={rep.p1_hat:.3f} a={rep.a_hat:.3f} tau%={rep.tau_fraction:.1%}"
    )
    return 2 if rep.degenerate else 0


def _run_gradient(cfg: RunConfig, seed: int, out: Path) -> int:
    lat, model, scheme = _build(cfg)
    exp = cfg["experiment"]
    p = exp["params"]
    xi = np.zeros(lat.n_modes)
    xi[int(p["xi_mode_index"])] = 1.0
    w0 = smooth_field(lat, p["w0_scale"])
    obs = (
        ("coordinate", "exp-energy", "smooth-energy")
        if p["phi"] == "all"
        else (p["phi"],)
    )
    probe = GradientProbe(
        phi=obs[0], xi=xi, T=exp["T"], n_traj=int(exp["n_traj"]),
        mode_index=int(p["mode_index"]),
    )
    ests = gradient_via_malliavin(
        lat, model, scheme, probe, w0, seed=seed, observables=obs
    )
    fds = gradient_via_finite_difference(
        lat, model, scheme, probe, w0, eps=p["eps_fd"], seed=seed, observables=obs
    )
    rows = []
    inconclusive = False
    for e in ests + fds:
        rows.append([e.estimator, e.phi, e.value, e.ci_halfwidth, e.n_traj, cfg.config_hash])
        inconclusive |= e.inconclusive
        print(f"gradient[{e.estimator}/{e.phi}] = {e.value:.5g} +- {e.ci_halfwidth:.2g}")
    _write_csv(
        out / "gradient.csv",
        ["estimator", "phi", "value", "ci", "n_traj", "config_hash"],
        rows,
    )
    return 2 if inconclusive else 0


def _run_diagnose(cfg: RunConfig, seed: int, out: Path, check: str | None) -> int:
    lat, model, scheme = _build(cfg)
    exp = cfg["experiment"]
    p = exp["params"]
    check = check or p["check"]
    n_traj = int(exp["n_traj"])
    T = exp["T"]
    flagged = False

    if check == "moments":
        eta = p["eta"] if p["eta"] is not None else scheme.nu / (4.0 * model.b0)
        w0 = smooth_field(lat, p["w0_scale"])
        xi = smooth_field(lat, 1.0, flavor=1)
        xi /= np.linalg.norm(xi)
        reps = [
            exp_moment_sup(lat, model, scheme, w0, eta, T, n_traj, seed=seed),
            exp_moment_dissipative(lat, model, scheme, w0, eta, T, n_traj, seed=seed + 1),
            zeta_moment_check(
                lat, model, scheme, xi, w0,
                eta=scheme.nu**2 / (32.0 * model.b0), n=1, T=min(T, 1.0),
                n_traj=n_traj, seed=seed + 2,
            ),
        ]
        rows = [
            [r.statistic, r.estimate, r.ci, r.bound, r.passed, r.n_traj, cfg.config_hash]
            for r in reps
        ]
        _write_csv(
            out / "moments.csv",
            ["statistic", "estimate", "ci", "bound", "passed", "n_traj", "config_hash"],
            rows,
        )
        for r in reps:
            print(f"{r.statistic}: {r.estimate:.4g} +- {r.ci:.2g} (bound {r.bound:.4g}) pass={r.passed}")
        flagged = not all(r.passed for r in reps)

    elif check == "lyapunov":
        direction = smooth_field(lat, 1.0)
        h_dir = lat.unit_mode(1, 0, "sin")
        rep = lyapunov_check(
            lat, model, scheme, direction, np.asarray(p["lyapunov_scales"], float),
            h_dir, np.asarray(p["t_grid"], float), n_traj=n_traj, seed=seed,
        )
        w0 = smooth_field(lat, p["w0_scale"])
        e512 = energy_integral_moment_check(
            lat, model, scheme, w0, T=min(T, 1.0), n_traj=n_traj, seed=seed + 1
        )
        e513 = tangent_growth_moment_check(
            lat, model, scheme, w0, h_dir, eta=scheme.nu / (8.0 * model.b0),
            T=min(T, 1.0), n_traj=n_traj, seed=seed + 2,
        )
        rows = [
            ["lyapunov_slope@" + repr(float(t)), rep.slopes[i], rep.slope_ses[i],
             rep.ceilings[i], bool(rep.slopes[i] <= rep.ceilings[i] * 1.25 + 1.96 * rep.slope_ses[i]),
             n_traj, cfg.config_hash]
            for i, t in enumerate(rep.t_grid)
        ] + [
            [e.statistic, e.estimate, e.ci, e.bound, e.passed, e.n_traj, cfg.config_hash]
            for e in (e512, e513)
        ]
        _write_csv(
            out / "lyapunov.csv",
            ["statistic", "estimate", "ci", "bound", "passed", "n_traj", "config_hash"],
            rows,
        )
        print(f"lyapunov: slopes {rep.slopes} vs ceilings {rep.ceilings} pass={rep.passed}")
        flagged = not (rep.passed and e512.passed and e513.passed)

    elif check == "mixing":
        w0_a = np.zeros(lat.n_modes)
        w0_b = smooth_field(lat, p["w0_scale"])
        obs = [("exp-energy", 0), ("smooth-energy", 0), ("coordinate", 0)]
        rep = mixing_decay(
            lat, model, scheme, w0_a, w0_b, obs, T, n_traj, seed=seed,
            record_stride=int(exp["record_stride"]),
        )
        rows = [
            [name, rep.theta_hat[name], rep.theta_ci[name], rep.decayed[name], cfg.config_hash]
            for name in rep.theta_hat
        ]
        _write_csv(
            out / "mixing_summary.csv",
            ["observable", "theta_hat", "theta_ci", "decayed", "config_hash"],
            rows,
        )
        for name in rep.theta_hat:
            lines = [
                f"{t} {g}"
                for t, g in zip(rep.series["t"], rep.series["gaps"][name])
            ]
            _atomic_write(out / f"mixing_gap_{name}.dat", "\n".join(lines) + "\n")
        print(
            f"mixing: theta={rep.theta_hat} averages "
            f"{rep.avg_a:.4g}/{rep.avg_b:.4g} agree={rep.averages_agree}"
        )
        flagged = bool(rep.flags)

    elif check == "invariant":
        w0_b = smooth_field(lat, p["w0_scale"])
        rep = invariant_measure_sample(
            lat, model, scheme, w0_b, burn_in=p["burn_in"],
            n_keep=int(p["n_keep"]), thin_stride=int(p["thin_stride"]),
            n_chains=max(8, n_traj // 4), seed=seed,
        )
        _write_csv(
            out / "invariant_summary.csv",
            ["quantity", "value", "extra", "config_hash"],
            [
                ["mean_sq_start_a", rep.mean_sq_a, rep.joint_hw, cfg.config_hash],
                ["mean_sq_start_b", rep.mean_sq_b, rep.joint_hw, cfg.config_hash],
                ["mean_h1_sq", rep.mean_h1_sq, "", cfg.config_hash],
                ["mean_noise_input", rep.mean_noise_input, "", cfg.config_hash],
                ["agree", rep.agree, "", cfg.config_hash],
                ["balance_ok", rep.balance_ok, "", cfg.config_hash],
                ["burn_in_ok", rep.burn_in_ok, "", cfg.config_hash],
            ],
        )
        rows = [_header_row(cfg, seed)]
        for k in range(rep.n_samples):
            rows.append(
                {
                    "record": "sample",
                    "index": k,
                    "norm_sq_mean": float(rep.samples["norm_sq"][k].mean()),
                    "h1_sq_mean": float(rep.samples["h1_sq"][k].mean()),
                    "low_mode_mean": float(rep.samples["low_mode"][k].mean()),
                }
            )
        _write_ndjson(out / "invariant_samples.ndjson", rows)
        print(
            f"invariant: mean_sq {rep.mean_sq_a:.4g}/{rep.mean_sq_b:.4g} "
            f"agree={rep.agree} balance_ok={rep.balance_ok}"
        )
        flagged = bool(rep.flags)
    else:
        raise ConfigError([f"unknown diagnose check {check!r}"])

    return 2 if flagged else 0


def _run_validate_noise(cfg: RunConfig, seed: int, out: Path) -> int:
    lat, model, _ = _build(cfg)
    rep = validate_hypotheses(
        lat, model, int(cfg["experiment"]["params"]["n_samples"]), seed=seed
    )
    _write_csv(
        out / "noise_report.csv",
        ["quantity", "value", "bound", "config_hash"],
        [
            ["hs_norm_sq_max", rep.max_hs_sq, rep.b0, cfg.config_hash],
            ["lipschitz_ratio_max", rep.max_lipschitz_ratio, rep.l_q, cfg.config_hash],
            ["pseudo_inverse_residual", rep.max_pseudo_inverse_residual, 1e-12, cfg.config_hash],
            ["passed", rep.passed, "", cfg.config_hash],
        ],
    )
    print(
        f"validate-noise: HS {rep.max_hs_sq:.4g}<={rep.b0:.4g} "
        f"lip {rep.max_lipschitz_ratio:.4g}<={rep.l_q:.4g} "
        f"resid {rep.max_pseudo_inverse_residual:.2g} pass={rep.passed}"
    )
    return 0 if rep.passed else 2


def dispatch(cfg: RunConfig, out_dir: str | Path, seed: int | None = None,
             check: str | None = None) -> int:
    """Run the configured experiment; returns the process exit status."""
    seed = cfg["seed"] if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = cfg["experiment"]["kind"]
    if kind == "simulate":
        return _run_simulate(cfg, seed, out)
    if kind == "couple":
        return _run_couple(cfg, seed, out)
    if kind == "gradient":
        return _run_gradient(cfg, seed, out)
    if kind == "diagnose":
        return _run_diagnose(cfg, seed, out, check)
    if kind == "validate-noise":
        return _run_validate_noise(cfg, seed, out)
    raise ConfigError([f"experiment.kind: unhandled kind {kind!r}"])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vortex-mixer",
        description="Spectral stochastic vorticity simulator and verification harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "couple", "gradient", "diagnose", "validate-noise"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to a JSON run config")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--out", default=".", help="output directory")
        if name == "diagnose":
            sp.add_argument(
                "--check",
                choices=("moments", "lyapunov", "mixing", "invariant"),
                default=None,
            )
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text()
        cfg = parse_config(text)
        if cfg["experiment"]["kind"] != args.command:
            raise ConfigError(
                [
                    f"experiment.kind: config says {cfg['experiment']['kind']!r} "
                    f"but the {args.command!r} subcommand was invoked"
                ]
            )
        return dispatch(cfg, args.out, seed=args.seed,
                        check=getattr(args, "check", None))
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
