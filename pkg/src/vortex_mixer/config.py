"""Run configuration: parsing, exhaustive validation, and canonical hashing.

Configs are JSON documents.  Validation walks the whole tree and reports
every violation at once, naming the constraint that failed; unknown keys are
rejected as typo guards.  The canonical hash is taken over the fully
defaulted document so that equivalent configs share a fingerprint.
"""

import hashlib
import json
from dataclasses import dataclass

EXPERIMENT_KINDS = ("simulate", "couple", "gradient", "diagnose", "validate-noise")
DIAGNOSE_CHECKS = ("moments", "lyapunov", "mixing", "invariant")
OBSERVABLE_NAMES = ("coordinate", "exp-energy", "smooth-energy", "all")


class ConfigError(ValueError):
    """Carries the full list of validation violations."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {v}" for v in violations))


_SCHEMA = {
    "lattice": {"M": 32, "N": 4},
    "physics": {"nu": 1.0, "advection": True},
    "noise": {"modulation": "tanh-diagonal", "sigma": 1.0, "eps_mod": 0.5},
    "scheme": {"dt": 1e-3, "B1": None},
    "experiment": {
        "kind": None,  # required
        "T": 1.0,
        "n_traj": 100,
        "record_stride": 10,
        "params": {},
    },
    "seed": 0,
    "output": {"format": "ndjson"},
}

_PARAM_DEFAULTS = {
    "simulate": {"w0_scale": 0.5, "with_tangent": False},
    "couple": {
        "K_c": 50.0,
        "C_cap": 10.0,
        "delta": 0.1,
        "r_exponent": 0.5,
        "eta": None,
        "w0_scale": 1.0,
        "separation": 0.25,
        "fit_lo": None,
        "fit_hi": None,
    },
    "gradient": {
        "phi": "all",
        "mode_index": 0,
        "xi_mode_index": 0,
        "eps_fd": 1e-3,
        "w0_scale": 0.25,
    },
    "diagnose": {
        "check": "moments",
        "eta": None,
        "w0_scale": 2.0,
        "burn_in": 10.0,
        "n_keep": 200,
        "thin_stride": 50,
        "lyapunov_scales": [0.0, 2.0, 4.0, 6.0],
        "t_grid": [0.25, 0.5, 1.0],
    },
    "validate-noise": {"n_samples": 1000},
}


def _merge_defaults(user: dict, defaults: dict, path: str, errors: list[str]) -> dict:
    out = {}
    for key, dval in defaults.items():
        if isinstance(dval, dict) and key != "params":
            sub = user.get(key, {})
            if not isinstance(sub, dict):
                errors.append(f"{path}{key}: expected an object")
                sub = {}
            out[key] = _merge_defaults(sub, dval, f"{path}{key}.", errors)
        else:
            out[key] = user.get(key, dval)
    for key in user:
        if key not in defaults:
            errors.append(f"{path}{key}: unknown key (typo guard)")
    return out


def _check_number(doc, path, errors, lo=None, hi=None, integer=False, allow_none=False):
    parts = path.split(".")
    node = doc
    for p in parts[:-1]:
        node = node[p]
    val = node[parts[-1]]
    if val is None:
        if not allow_none:
            errors.append(f"{path}: value required")
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        errors.append(f"{path}: expected a number, got {val!r}")
        return None
    if integer and int(val) != val:
        errors.append(f"{path}: expected an integer, got {val!r}")
        return None
    if lo is not None and val < lo:
        errors.append(f"{path}: {val} below minimum {lo}")
    if hi is not None and val > hi:
        errors.append(f"{path}: {val} above maximum {hi}")
    return val


@dataclass(frozen=True)
class RunConfig:
    data: dict
    config_hash: str

    def __getitem__(self, key):
        return self.data[key]


def canonical_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def band_b0(doc: dict) -> float:
    """Hilbert-Schmidt ceiling implied by the configured lattice and noise."""
    from .noise import build_noise_model
    from .spectral import build_lattice

    lat = build_lattice(int(doc["lattice"]["M"]), int(doc["lattice"]["N"]))
    model = build_noise_model(
        lat,
        doc["noise"]["modulation"],
        doc["noise"]["sigma"],
        doc["noise"]["eps_mod"],
    )
    return model.b0


def parse_config(text: str) -> RunConfig:
    """Parse and validate; raises ConfigError listing every violation."""
    errors: list[str] = []
    try:
        user = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"not valid JSON: {e}"]) from e
    if not isinstance(user, dict):
        raise ConfigError(["top level must be an object"])

    doc = _merge_defaults(user, _SCHEMA, "", errors)

    M = _check_number(doc, "lattice.M", errors, lo=1, hi=512, integer=True)
    N = _check_number(doc, "lattice.N", errors, lo=1, hi=512, integer=True)
    if M is not None and N is not None and N > M:
        errors.append(f"lattice.N: {N} exceeds lattice.M={M} (band within truncation)")
    nu = _check_number(doc, "physics.nu", errors, lo=1e-12)
    if not isinstance(doc["physics"]["advection"], bool):
        errors.append("physics.advection: expected a boolean")

    if doc["noise"]["modulation"] not in ("constant", "tanh-diagonal"):
        errors.append(
            f"noise.modulation: {doc['noise']['modulation']!r} not one of "
            "('constant', 'tanh-diagonal')"
        )
    _check_number(doc, "noise.sigma", errors, lo=0.0)
    _check_number(doc, "noise.eps_mod", errors, lo=0.0, hi=0.9)

    dt = _check_number(doc, "scheme.dt", errors, lo=1e-12)
    b1 = _check_number(doc, "scheme.B1", errors, lo=0.0, allow_none=True)
    if b1 is not None and nu is not None and N is not None and b1 < nu * N * N:
        errors.append(
            f"scheme.B1: {b1} below nu*N^2={nu * N * N} "
            "(low-band relaxation must dominate viscosity on the band)"
        )

    kind = doc["experiment"]["kind"]
    if kind not in EXPERIMENT_KINDS:
        errors.append(
            f"experiment.kind: {kind!r} not one of {EXPERIMENT_KINDS}"
        )
    T = _check_number(doc, "experiment.T", errors, lo=1e-12)
    _check_number(doc, "experiment.n_traj", errors, lo=1, hi=1_000_000, integer=True)
    _check_number(doc, "experiment.record_stride", errors, lo=1, integer=True)
    if dt is not None and T is not None and T / dt > 5e7:
        errors.append(f"experiment.T: {T} with scheme.dt={dt} exceeds 5e7 steps")

    seed = doc["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        errors.append(f"seed: expected an integer in [0, 2^64), got {seed!r}")

    if doc["output"]["format"] not in ("ndjson", "csv"):
        errors.append(
            f"output.format: {doc['output']['format']!r} not one of ('ndjson', 'csv')"
        )

    params = doc["experiment"]["params"]
    if not isinstance(params, dict):
        errors.append("experiment.params: expected an object")
        params = {}
    if kind in _PARAM_DEFAULTS:
        merged = dict(_PARAM_DEFAULTS[kind])
        for key, val in params.items():
            if key not in merged:
                errors.append(f"experiment.params.{key}: unknown key for kind {kind!r}")
            else:
                merged[key] = val
        doc["experiment"]["params"] = merged
        _validate_params(kind, merged, doc, errors)

    if errors:
        raise ConfigError(errors)
    return RunConfig(data=doc, config_hash=canonical_hash(doc))


def _validate_params(kind: str, p: dict, doc: dict, errors: list[str]) -> None:
    def num(key, lo=None, hi=None, allow_none=False, integer=False):
        val = p[key]
        if val is None and allow_none:
            return None
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            errors.append(f"experiment.params.{key}: expected a number, got {val!r}")
            return None
        if integer and int(val) != val:
            errors.append(f"experiment.params.{key}: expected an integer")
        if lo is not None and val < lo:
            errors.append(f"experiment.params.{key}: {val} below minimum {lo}")
        if hi is not None and val > hi:
            errors.append(f"experiment.params.{key}: {val} above maximum {hi}")
        return val

    if kind == "simulate":
        num("w0_scale", lo=0.0)
        if not isinstance(p["with_tangent"], bool):
            errors.append("experiment.params.with_tangent: expected a boolean")
    elif kind == "couple":
        num("K_c", lo=0.0)
        num("C_cap", lo=0.0)
        num("delta", lo=0.0)
        num("r_exponent", lo=1e-9, hi=1.0)
        num("eta", lo=0.0, allow_none=True)
        num("w0_scale", lo=0.0)
        num("separation", lo=0.0)
        num("fit_lo", lo=0.0, allow_none=True)
        num("fit_hi", lo=0.0, allow_none=True)
    elif kind == "gradient":
        if p["phi"] not in OBSERVABLE_NAMES:
            errors.append(
                f"experiment.params.phi: {p['phi']!r} not one of {OBSERVABLE_NAMES}"
            )
        num("mode_index", lo=0, integer=True)
        num("xi_mode_index", lo=0, integer=True)
        num("eps_fd", lo=1e-6, hi=1e-2)
        num("w0_scale", lo=0.0)
    elif kind == "diagnose":
        if p["check"] not in DIAGNOSE_CHECKS:
            errors.append(
                f"experiment.params.check: {p['check']!r} not one of {DIAGNOSE_CHECKS}"
            )
        eta = num("eta", lo=0.0, allow_none=True)
        if eta is not None and p["check"] == "moments":
            try:
                ceiling = doc["physics"]["nu"] / (2.0 * band_b0(doc))
                if eta > ceiling:
                    errors.append(
                        f"experiment.params.eta: {eta} above nu/(2 B0)={ceiling:.3g} "
                        "(admissible exponential-moment range)"
                    )
            except Exception:
                pass  # lattice/noise errors already reported
        num("w0_scale", lo=0.0)
        burn = num("burn_in", lo=0.0)
        nu = doc["physics"]["nu"]
        if burn is not None and isinstance(nu, (int, float)) and burn < 10.0 / nu:
            errors.append(
                f"experiment.params.burn_in: {burn} below 10/nu={10.0 / nu} "
                "(invariant sampling needs relaxation time)"
            )
        num("n_keep", lo=1, integer=True)
        num("thin_stride", lo=1, integer=True)
        for name in ("lyapunov_scales", "t_grid"):
            if not isinstance(p[name], list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in p[name]
            ):
                errors.append(f"experiment.params.{name}: expected a list of numbers")
    elif kind == "validate-noise":
        num("n_samples", lo=100, integer=True)
