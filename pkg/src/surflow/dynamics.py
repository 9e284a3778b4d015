"""Synthetic data generator: a lumped-mass shear building under
band-limited stochastic base excitation.

Story stiffnesses scale with substructure parameters theta; damping is
Rayleigh, anchored at two modes; integration is Newmark (average
acceleration).  Low- and high-fidelity datasets share parameter priors
and one base-motion realization per dataset, and differ through the
integration step, a stiffness bias, and (optionally) per-record
excitation amplitude perturbations applied to the high-fidelity side.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ShapeError
from .seeding import derive_seed

THETA_LO = -0.3
THETA_HI = 0.3


@dataclass
class StructuralConfig:
    """Shear-chain model: ``n_dof`` stories, uniform nominal mass and
    stiffness, stories partitioned into ``n_groups`` substructures that
    share one stiffness parameter each."""

    n_dof: int = 18
    n_groups: int = 9
    story_mass: float = 1000.0
    story_stiffness: float = 2.0e6
    damping_ratio: float = 0.02
    damping_modes: tuple[int, int] = (1, 3)
    sensor_dof: int | None = None

    def __post_init__(self):
        if self.n_dof < 1 or self.n_groups < 1:
            raise ValueError("n_dof and n_groups must be positive")
        if self.n_dof % self.n_groups != 0:
            raise ValueError(f"n_dof ({self.n_dof}) must be a multiple of n_groups ({self.n_groups})")
        if self.story_mass <= 0 or self.story_stiffness <= 0:
            raise ValueError("mass and stiffness must be positive")
        if not 0.0 <= self.damping_ratio < 0.2:
            raise ValueError("damping_ratio must lie in [0, 0.2)")
        i, j = self.damping_modes
        if not (1 <= i < j <= self.n_dof):
            raise ValueError(f"damping_modes must be distinct 1-based modes within {self.n_dof}")
        if self.sensor_dof is not None and not 0 <= self.sensor_dof < self.n_dof:
            raise ValueError("sensor_dof out of range")

    @property
    def substructure_map(self) -> np.ndarray:
        """Story -> group assignment (contiguous blocks, every story mapped)."""
        per = self.n_dof // self.n_groups
        return np.repeat(np.arange(self.n_groups), per)

    @property
    def sensor(self) -> int:
        return self.n_dof - 1 if self.sensor_dof is None else self.sensor_dof

    def to_dict(self) -> dict:
        return {
            "n_dof": self.n_dof,
            "n_groups": self.n_groups,
            "story_mass": self.story_mass,
            "story_stiffness": self.story_stiffness,
            "damping_ratio": self.damping_ratio,
            "damping_modes": list(self.damping_modes),
            "sensor_dof": self.sensor_dof,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StructuralConfig":
        d = dict(d)
        d["damping_modes"] = tuple(d.get("damping_modes", (1, 3)))
        return cls(**d)


@dataclass
class ExcitationSpec:
    """Band-limited zero-mean Gaussian base acceleration."""

    dt: float
    duration: float
    seed: int
    bandwidth_hz: float = 8.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.dt <= 0 or self.duration <= 0:
            raise ValueError("dt and duration must be positive")
        steps = self.duration / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"duration ({self.duration}) must be an integer multiple of dt ({self.dt})")
        if self.bandwidth_hz <= 0 or self.bandwidth_hz >= 0.5 / self.dt:
            raise ValueError("bandwidth_hz must lie below the Nyquist frequency")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")

    @property
    def n_steps(self) -> int:
        return round(self.duration / self.dt)


@dataclass
class FidelityConfig:
    """One simulator fidelity: integration step, stiffness bias, and an
    optional half-width for uniform per-record excitation scaling."""

    level: str
    dt_sim: float
    stiffness_bias: float = 1.0
    excitation_perturbation: float | None = None

    def __post_init__(self):
        if self.level not in ("LF", "HF"):
            raise ValueError(f"level must be 'LF' or 'HF', got {self.level!r}")
        if self.dt_sim <= 0:
            raise ValueError("dt_sim must be positive")
        if self.stiffness_bias <= 0:
            raise ValueError("stiffness_bias must be positive")
        if self.excitation_perturbation is not None and not 0.0 <= self.excitation_perturbation < 1.0:
            raise ValueError("excitation_perturbation must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "dt_sim": self.dt_sim,
            "stiffness_bias": self.stiffness_bias,
            "excitation_perturbation": self.excitation_perturbation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FidelityConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters and matrices


def sample_parameters(n: int, m: int, seed: int, lo: float = THETA_LO, hi: float = THETA_HI) -> np.ndarray:
    """Independent uniform substructure parameters, one row per record."""
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    if hi <= lo:
        raise ValueError("upper bound must exceed lower bound")
    return np.random.default_rng(seed).uniform(lo, hi, size=(n, m))


def assemble_matrices(cfg: StructuralConfig, theta, stiffness_scale: float = 1.0):
    """Mass and stiffness matrices for one parameter vector.

    Story j stiffness is ``story_stiffness * stiffness_scale * (1 + theta[g(j)])``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (cfg.n_groups,):
        raise ShapeError(f"theta must have shape ({cfg.n_groups},), got {theta.shape}", tensor="theta")
    if np.any(theta <= -1.0):
        raise ValueError("theta entries must exceed -1 (stiffness must stay positive)")
    n = cfg.n_dof
    k = cfg.story_stiffness * stiffness_scale * (1.0 + theta[cfg.substructure_map])
    m_mat = np.diag(np.full(n, cfg.story_mass))
    k_mat = np.zeros((n, n))
    for j in range(n):
        k_mat[j, j] += k[j]
        if j + 1 < n:
            k_mat[j, j] += k[j + 1]
            k_mat[j, j + 1] -= k[j + 1]
            k_mat[j + 1, j] -= k[j + 1]
    return m_mat, k_mat


def modal_frequencies(m_mat: np.ndarray, k_mat: np.ndarray) -> np.ndarray:
    """Undamped natural circular frequencies, ascending."""
    d = np.sqrt(np.diag(m_mat))
    a = k_mat / np.outer(d, d)
    w2 = np.linalg.eigvalsh(a)
    if np.any(w2 <= 0):
        raise ValueError("stiffness matrix is not positive definite")
    return np.sqrt(w2)


def rayleigh_damping(m_mat: np.ndarray, k_mat: np.ndarray, zeta: float, modes: tuple[int, int] = (1, 3)) -> np.ndarray:
    """C = a0 M + a1 K with the target ratio ``zeta`` hit at two modes."""
    if zeta == 0.0:
        return np.zeros_like(m_mat)
    omega = modal_frequencies(m_mat, k_mat)
    i, j = modes
    wi, wj = omega[i - 1], omega[j - 1]
    if abs(wj - wi) < 1e-12 * max(wi, wj):
        raise ValueError(f"anchor modes {modes} have (near-)repeated frequencies")
    a0 = 2.0 * zeta * wi * wj / (wi + wj)
    a1 = 2.0 * zeta / (wi + wj)
    return a0 * m_mat + a1 * k_mat


# ---------------------------------------------------------------------------
# excitation


def _biquad_lowpass(x: np.ndarray, fc: float, fs: float) -> np.ndarray:
    """Second-order Butterworth-style low-pass biquad (audio-EQ-cookbook
    coefficients, Q = 1/sqrt(2)), run as a direct-form difference equation."""
    w0 = 2.0 * np.pi * fc / fs
    alpha = np.sin(w0) / np.sqrt(2.0)
    cw = np.cos(w0)
    a0 = 1.0 + alpha
    b0 = (1.0 - cw) / 2.0 / a0
    b1 = (1.0 - cw) / a0
    b2 = b0
    a1 = -2.0 * cw / a0
    a2 = (1.0 - alpha) / a0
    y = np.zeros_like(x)
    x1 = x2 = y1 = y2 = 0.0
    for i in range(len(x)):
        xi = x[i]
        yi = b0 * xi + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2
        y[i] = yi
        x2, x1 = x1, xi
        y2, y1 = y1, yi
    return y


def generate_excitation(spec: ExcitationSpec) -> np.ndarray:
    """Filtered white noise on the simulation grid, inclusive of t=0.

    The sequence is demeaned exactly and scaled to the requested
    standard deviation.  Returns ``spec.n_steps + 1`` samples.
    """
    rng = np.random.default_rng(spec.seed)
    white = rng.standard_normal(spec.n_steps + 1)
    series = _biquad_lowpass(white, spec.bandwidth_hz, 1.0 / spec.dt)
    series -= series.mean()
    sd = series.std()
    if sd > 0:
        series *= spec.amplitude / sd
    return series


# ---------------------------------------------------------------------------
# time integration


def newmark_transient(
    m_mat: np.ndarray,
    c_mat: np.ndarray,
    k_mat: np.ndarray,
    forces: np.ndarray,
    dt: float,
    beta: float = 0.25,
    gamma: float = 0.5,
):
    """Newmark time stepping from rest; ``forces`` has one row per sample.

    Returns displacement, velocity, and acceleration histories with the
    same leading length as ``forces``.
    """
    forces = np.asarray(forces, dtype=np.float64)
    if forces.ndim == 1:
        forces = forces[:, None]
    n_steps, n = forces.shape
    if m_mat.shape != (n, n) or k_mat.shape != (n, n) or c_mat.shape != (n, n):
        raise ShapeError(f"system matrices must be ({n}, {n}) to match the force history")
    a0 = 1.0 / (beta * dt * dt)
    a1 = gamma / (beta * dt)
    a2 = 1.0 / (beta * dt)
    a3 = 1.0 / (2.0 * beta) - 1.0
    a4 = gamma / beta - 1.0
    a5 = dt / 2.0 * (gamma / beta - 2.0)
    a6 = dt * (1.0 - gamma)
    a7 = gamma * dt
    k_eff = k_mat + a0 * m_mat + a1 * c_mat
    k_eff_inv = np.linalg.inv(k_eff)
    u = np.zeros((n_steps, n))
    v = np.zeros((n_steps, n))
    acc = np.zeros((n_steps, n))
    acc[0] = np.linalg.solve(m_mat, forces[0])
    for t in range(n_steps - 1):
        rhs = forces[t + 1]
        rhs = rhs + m_mat @ (a0 * u[t] + a2 * v[t] + a3 * acc[t])
        rhs = rhs + c_mat @ (a1 * u[t] + a4 * v[t] + a5 * acc[t])
        u_next = k_eff_inv @ rhs
        a_next = a0 * (u_next - u[t]) - a2 * v[t] - a3 * acc[t]
        v[t + 1] = v[t] + a6 * acc[t] + a7 * a_next
        u[t + 1] = u_next
        acc[t + 1] = a_next
    return u, v, acc


def _output_indices(n_samples: int, dt: float, out_rate: float, n_out: int | None) -> np.ndarray:
    step = 1.0 / (out_rate * dt)
    if abs(step - round(step)) > 1e-9:
        raise ValueError(f"1/(out_rate*dt) must be an integer, got {step}")
    step = round(step)
    max_out = (n_samples - 1) // step
    if n_out is None:
        n_out = max_out
    if n_out < 1 or n_out > max_out:
        raise ValueError(f"n_out must lie in [1, {max_out}], got {n_out}")
    return np.arange(1, n_out + 1) * step


def newmark_solve(
    m_mat: np.ndarray,
    c_mat: np.ndarray,
    k_mat: np.ndarray,
    f: np.ndarray | None = None,
    dt: float = 1e-3,
    beta: float = 0.25,
    gamma: float = 0.5,
    sensor_dof: int = 0,
    base_accel: np.ndarray | None = None,
    out_rate: float = 20.0,
    n_out: int | None = None,
) -> np.ndarray:
    """Sensor acceleration series resampled to the output rate.

    Provide either a nodal force history ``f`` (rows are time samples)
    or a base acceleration ``base_accel``; with a base motion the
    equivalent forces are ``-M 1 a_base`` and the returned series is the
    absolute acceleration at the sensor.  Output samples start at the
    first output interval (t=0 is excluded: the response there is
    identically zero).
    """
    if (f is None) == (base_accel is None):
        raise ValueError("provide exactly one of f and base_accel")
    if base_accel is not None:
        base_accel = np.asarray(base_accel, dtype=np.float64)
        forces = -(m_mat @ np.ones(m_mat.shape[0]))[None, :] * base_accel[:, None]
    else:
        forces = np.asarray(f, dtype=np.float64)
        if forces.ndim == 1:
            forces = forces[:, None]
    if not 0 <= sensor_dof < m_mat.shape[0]:
        raise ValueError("sensor_dof out of range")
    _, _, acc = newmark_transient(m_mat, c_mat, k_mat, forces, dt, beta, gamma)
    series = acc[:, sensor_dof]
    if base_accel is not None:
        series = series + base_accel
    idx = _output_indices(len(series), dt, out_rate, n_out)
    return series[idx]


def simulate_response(
    structure: StructuralConfig,
    theta,
    dt: float,
    base_accel: np.ndarray,
    stiffness_scale: float = 1.0,
    out_rate: float = 20.0,
    n_out: int | None = None,
) -> np.ndarray:
    """One record: assemble, damp, integrate, and resample."""
    m_mat, k_mat = assemble_matrices(structure, theta, stiffness_scale)
    c_mat = rayleigh_damping(m_mat, k_mat, structure.damping_ratio, structure.damping_modes)
    return newmark_solve(
        m_mat,
        c_mat,
        k_mat,
        dt=dt,
        sensor_dof=structure.sensor,
        base_accel=base_accel,
        out_rate=out_rate,
        n_out=n_out,
    )


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Paired parameters and response series for one fidelity level."""

    fidelity: str
    theta: np.ndarray
    y: np.ndarray
    theta_lo: np.ndarray
    theta_hi: np.ndarray
    sample_rate_hz: float
    seeds: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.theta_lo = np.broadcast_to(np.asarray(self.theta_lo, dtype=np.float64), (self.theta.shape[1],)).copy()
        self.theta_hi = np.broadcast_to(np.asarray(self.theta_hi, dtype=np.float64), (self.theta.shape[1],)).copy()
        if self.theta.ndim != 2 or self.y.ndim != 2:
            raise ShapeError("theta and y must be 2-D arrays")
        if self.theta.shape[0] != self.y.shape[0]:
            raise ShapeError(f"{self.theta.shape[0]} parameter rows but {self.y.shape[0]} series rows")
        tol = 1e-12
        if np.any(self.theta < self.theta_lo - tol) or np.any(self.theta > self.theta_hi + tol):
            raise ValueError("theta rows fall outside the stored prior bounds")

    @property
    def n_records(self) -> int:
        return self.theta.shape[0]

    @property
    def n_params(self) -> int:
        return self.theta.shape[1]

    @property
    def series_len(self) -> int:
        return self.y.shape[1]

    def save(self, prefix) -> None:
        """Write ``{prefix}.csv`` (17 significant digits) and ``{prefix}.manifest.json``."""
        prefix = str(prefix)
        header = [f"theta_{i + 1}" for i in range(self.n_params)] + [f"y_{i + 1}" for i in range(self.series_len)]
        with open(prefix + ".csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t_row, y_row in zip(self.theta, self.y):
                writer.writerow([f"{v:.17g}" for v in t_row] + [f"{v:.17g}" for v in y_row])
        manifest = {
            "fidelity": self.fidelity,
            "n_records": self.n_records,
            "n_params": self.n_params,
            "series_len": self.series_len,
            "sample_rate_hz": self.sample_rate_hz,
            "theta_lo": self.theta_lo.tolist(),
            "theta_hi": self.theta_hi.tolist(),
            "seeds": self.seeds,
            "meta": self.meta,
        }
        with open(prefix + ".manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, prefix) -> "Dataset":
        prefix = str(prefix)
        with open(prefix + ".manifest.json") as fh:
            manifest = json.load(fh)
        m = manifest["n_params"]
        data = np.loadtxt(prefix + ".csv", delimiter=",", skiprows=1, ndmin=2)
        if data.shape != (manifest["n_records"], m + manifest["series_len"]):
            raise ValueError(f"{prefix}.csv does not match its manifest row/column counts")
        return cls(
            fidelity=manifest["fidelity"],
            theta=data[:, :m],
            y=data[:, m:],
            theta_lo=np.asarray(manifest["theta_lo"]),
            theta_hi=np.asarray(manifest["theta_hi"]),
            sample_rate_hz=manifest["sample_rate_hz"],
            seeds=manifest["seeds"],
            meta=manifest["meta"],
        )


def generate_pairs(
    structure: StructuralConfig,
    lf: FidelityConfig,
    hf: FidelityConfig,
    n_lf: int,
    n_hf: int,
    seed: int,
    bandwidth_hz: float = 8.0,
    amplitude: float = 1.0,
    n_out: int = 200,
    out_rate: float = 20.0,
) -> tuple[Dataset, Dataset]:
    """Low- and high-fidelity datasets from one master seed.

    Both fidelities share a single base-motion realization generated on
    the high-fidelity grid and decimated exactly to the low-fidelity
    grid; per-record amplitude perturbations (when configured) apply to
    the high-fidelity records only.
    """
    if n_hf > n_lf:
        raise ValueError(f"n_hf ({n_hf}) must not exceed n_lf ({n_lf})")
    if lf.level != "LF" or hf.level != "HF":
        raise ValueError("fidelity configs must be passed as (LF, HF)")
    if hf.stiffness_bias != 1.0:
        raise ValueError("the high-fidelity solver is the reference: stiffness_bias must be 1")
    ratio = lf.dt_sim / hf.dt_sim
    if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
        raise ValueError(f"lf.dt_sim must be an integer multiple of hf.dt_sim, got ratio {ratio}")
    ratio = round(ratio)
    duration = n_out / out_rate
    exc = ExcitationSpec(
        dt=hf.dt_sim,
        duration=duration,
        seed=derive_seed(seed, "excitation"),
        bandwidth_hz=bandwidth_hz,
        amplitude=amplitude,
    )
    base_fine = generate_excitation(exc)
    base_coarse = base_fine[::ratio]

    m = structure.n_groups
    theta_lf = sample_parameters(n_lf, m, derive_seed(seed, "lf-theta"))
    theta_hf = sample_parameters(n_hf, m, derive_seed(seed, "hf-theta"))
    if hf.excitation_perturbation:
        perturb = np.random.default_rng(derive_seed(seed, "hf-perturb")).uniform(
            -hf.excitation_perturbation, hf.excitation_perturbation, size=n_hf
        )
    else:
        perturb = np.zeros(n_hf)

    y_lf = np.empty((n_lf, n_out))
    for i in range(n_lf):
        y_lf[i] = simulate_response(
            structure, theta_lf[i], lf.dt_sim, base_coarse, lf.stiffness_bias, out_rate, n_out
        )
    y_hf = np.empty((n_hf, n_out))
    for i in range(n_hf):
        y_hf[i] = simulate_response(
            structure, theta_hf[i], hf.dt_sim, base_fine * (1.0 + perturb[i]), 1.0, out_rate, n_out
        )

    common = {
        "master": int(seed),
        "excitation": exc.seed,
        "lf_theta": derive_seed(seed, "lf-theta"),
        "hf_theta": derive_seed(seed, "hf-theta"),
        "hf_perturb": derive_seed(seed, "hf-perturb"),
    }
    meta = {
        "structure": structure.to_dict(),
        "bandwidth_hz": bandwidth_hz,
        "amplitude": amplitude,
        "out_rate": out_rate,
    }
    lf_ds = Dataset(
        fidelity="LF",
        theta=theta_lf,
        y=y_lf,
        theta_lo=np.full(m, THETA_LO),
        theta_hi=np.full(m, THETA_HI),
        sample_rate_hz=out_rate,
        seeds=common,
        meta={**meta, "fidelity_config": lf.to_dict()},
    )
    hf_ds = Dataset(
        fidelity="HF",
        theta=theta_hf,
        y=y_hf,
        theta_lo=np.full(m, THETA_LO),
        theta_hi=np.full(m, THETA_HI),
        sample_rate_hz=out_rate,
        seeds=common,
        meta={**meta, "fidelity_config": hf.to_dict()},
    )
    return lf_ds, hf_ds
