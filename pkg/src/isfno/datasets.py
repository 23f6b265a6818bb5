"""Trajectory dataset generation, persistence (ISFN format) and pair access.

ISFN layout (little-endian throughout):
  bytes 0..3   magic "ISFN"
  bytes 4..7   format version (u32)
  bytes 8..11  header length in bytes (u32)
  ...          UTF-8 JSON header: spec echo, shape, dt, seed
  ...          raw float64 snapshots in [sequence][time][x...][channel] order

The header JSON is serialized with sorted keys and fixed separators, so
regenerating a dataset from the same spec yields a byte-identical file.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import solvers as sv
from .ist import one_soliton

__all__ = [
    "Dataset",
    "DatasetSpec",
    "FormatError",
    "GenerationError",
    "generate",
    "init_lowwave",
    "init_solitons",
    "init_uniform",
    "load",
    "pairs",
    "sample_initial",
]

MAGIC = b"ISFN"
FORMAT_VERSION = 1

SAMPLERS = ("uniform_physical", "lowwave_fourier", "soliton_superposition")


class FormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    def __init__(self, sequence: int, cause: Exception):
        super().__init__(f"trajectory {sequence} failed: {cause}")
        self.sequence = sequence
        self.cause = cause


@dataclass(frozen=True)
class DatasetSpec:
    equation: sv.EquationConfig
    n_sequences: int
    n_snapshots: int
    dt: float
    sampler: str = "uniform_physical"
    sampler_params: dict = dc_field(default_factory=dict)
    seed: int = 0
    validation_fraction: float = 0.10

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_snapshots < 2:
            raise ValueError("need at least two snapshots per sequence")
        if self.n_sequences < 1:
            raise ValueError("need at least one sequence")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLERS}")
        if self.sampler == "soliton_superposition" and self.equation.family != "kdv":
            raise ValueError("soliton superposition initial conditions are KdV only")
        if self.validation_fraction < 0.10:
            raise ValueError("validation fraction must be at least 0.10")

    @property
    def n_validation(self) -> int:
        return int(np.ceil(self.validation_fraction * self.n_sequences))

    def to_dict(self) -> dict:
        eq = self.equation
        return {
            "equation": {
                "family": eq.family,
                "grid": list(eq.grid),
                "beta": eq.beta,
                "lengths": list(eq.lengths),
                "dealias": eq.dealias,
            },
            "n_sequences": self.n_sequences,
            "n_snapshots": self.n_snapshots,
            "dt": self.dt,
            "sampler": self.sampler,
            "sampler_params": self.sampler_params,
            "seed": self.seed,
            "validation_fraction": self.validation_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        eq = d["equation"]
        cfg = sv.EquationConfig(
            family=eq["family"], grid=tuple(eq["grid"]), beta=eq["beta"],
            lengths=tuple(eq["lengths"]), dealias=eq["dealias"])
        return cls(
            equation=cfg, n_sequences=d["n_sequences"], n_snapshots=d["n_snapshots"],
            dt=d["dt"], sampler=d["sampler"], sampler_params=dict(d["sampler_params"]),
            seed=d["seed"], validation_fraction=d["validation_fraction"])


# ---------------------------------------------------------------------------
# initial-condition samplers


def init_uniform(grid, lo: float, hi: float, rng) -> np.ndarray:
    """I.i.d. uniform values per grid point (defaults to U(0, 0.03) upstream)."""
    if lo >= hi:
        raise ValueError("need lo < hi")
    rng = np.random.default_rng(rng)
    return rng.uniform(lo, hi, size=tuple(grid))


def init_lowwave(grid, band: int, amp_range, rng, kp_constraint: bool = False) -> np.ndarray:
    """Random low-wavenumber spectrum: coefficient xi * exp(i theta) per mode.

    Modes with integer index |kappa| <= band receive an unnormalized
    coefficient with xi in amp_range (a coefficient xi contributes physical
    amplitude 2 xi / N); everything above the band is exactly zero. Conjugate
    symmetry is built in, so the output is real; the DC coefficient keeps the
    real part of its draw.
    """
    rng = np.random.default_rng(rng)
    grid = tuple(int(n) for n in grid)
    lo, hi = amp_range
    spec = np.zeros(grid, dtype=np.complex128)
    d = len(grid)

    if d == 1:
        n = grid[0]
        for k in range(0, band + 1):
            xi = rng.uniform(lo, hi)
            theta = rng.uniform(0.0, 2.0 * np.pi)
            coeff = xi * np.exp(1j * theta)
            if k == 0:
                spec[0] = coeff.real
            else:
                spec[k] = coeff
                spec[-k] = np.conj(coeff)
    else:
        n1, n2 = grid
        for k1 in range(-band, band + 1):
            for k2 in range(0, band + 1):
                if k1 * k1 + k2 * k2 > band * band:
                    continue
                canonical = k2 > 0 or (k2 == 0 and k1 > 0)
                if not canonical and not (k1 == 0 and k2 == 0):
                    continue
                xi = rng.uniform(lo, hi)
                theta = rng.uniform(0.0, 2.0 * np.pi)
                coeff = xi * np.exp(1j * theta)
                if k1 == 0 and k2 == 0:
                    spec[0, 0] = coeff.real
                else:
                    spec[k1 % n1, k2 % n2] = coeff
                    spec[(-k1) % n1, (-k2) % n2] = np.conj(coeff)
    field = np.real(np.fft.ifftn(spec))
    if kp_constraint:
        field = sv.kp_project(field)
    return field


def init_solitons(grid, length: float, rng, m_range=(3, 8), s_range=(0.4, 2.0)) -> np.ndarray:
    """Superposition of M random solitons with periodic image wrapping."""
    rng = np.random.default_rng(rng)
    (n,) = tuple(grid)
    x = np.arange(n) * (length / n)
    m = int(rng.integers(m_range[0], m_range[1] + 1))
    field = np.zeros(n)
    for _ in range(m):
        s = rng.uniform(*s_range)
        c = rng.uniform(0.0, length)
        field += one_soliton(s, c, 0.0, x, length=length)
    return field


def sample_initial(spec: DatasetSpec, sequence: int) -> tuple[np.ndarray, float]:
    """Initial condition and burn-in time for one sequence (deterministic)."""
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=spec.seed, spawn_key=(sequence,)))
    p = spec.sampler_params
    eq = spec.equation
    if spec.sampler == "uniform_physical":
        lo, hi = p.get("lo", 0.0), p.get("hi", 0.03)
        field = init_uniform(eq.grid, lo, hi, rng)
    elif spec.sampler == "lowwave_fourier":
        band = int(p.get("band", 9))
        amp = tuple(p.get("amp_range", (0.0, 1.0)))
        field = init_lowwave(eq.grid, band, amp, rng, kp_constraint=eq.family == "kp")
    else:
        field = init_solitons(
            eq.grid, eq.lengths[0], rng,
            m_range=tuple(p.get("m_range", (3, 8))),
            s_range=tuple(p.get("s_range", (0.4, 2.0))))
    if eq.family == "kp":
        field = sv.kp_project(field)
    burn = p.get("burn_in", 0.0)
    if "burn_in_range" in p:
        b0, b1 = p["burn_in_range"]
        burn = rng.uniform(b0, b1)
    return field, float(burn)


# ---------------------------------------------------------------------------
# generation and persistence


def _run_sequence(spec: DatasetSpec, sequence: int) -> np.ndarray:
    field, burn = sample_initial(spec, sequence)
    eq = spec.equation
    state = sv.SolverState(field, t=0.0, dt=spec.dt)
    if burn > 0.0:
        state = sv.advance(eq, state, max(1, int(round(burn / spec.dt))))
    snaps = np.empty((spec.n_snapshots,) + eq.grid)
    snaps[0] = state.field
    for j in range(1, spec.n_snapshots):
        state = sv.advance(eq, state, 1)
        snaps[j] = state.field
    return snaps


def _header_bytes(spec: DatasetSpec) -> bytes:
    header = {
        "format": "ISFN",
        "version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "shape": [spec.n_sequences, spec.n_snapshots, *spec.equation.grid, 1],
        "dt": spec.dt,
        "seed": spec.seed,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_isfn(path, spec: DatasetSpec, data: np.ndarray) -> None:
    payload = np.ascontiguousarray(data, dtype="<f8")
    head = _header_bytes(spec)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload.tobytes())


def generate(spec: DatasetSpec, path, threads: int = 1, echo: bool = True) -> "Dataset":
    """Run the solver over all sequences and persist the result.

    A diverging sequence aborts the whole run (no silent skipping); the
    raised error names the offending sequence index. With threads > 1 the
    sequences run concurrently but are assembled in order, so the file is
    identical to a single-threaded run.
    """
    results: list = [None] * spec.n_sequences

    def run(j):
        try:
            return _run_sequence(spec, j)
        except (sv.DivergenceError, sv.StiffnessError) as exc:
            raise GenerationError(j, exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for j, snaps in enumerate(pool.map(run, range(spec.n_sequences))):
                results[j] = snaps
    else:
        for j in range(spec.n_sequences):
            results[j] = run(j)
    data = np.stack(results)[..., None]  # trailing channel axis
    write_isfn(path, spec, data)
    if echo:
        print(json.dumps({"written": str(path), **json.loads(_header_bytes(spec))},
                         sort_keys=True))
    return Dataset(spec, data)


def load(path) -> "Dataset":
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}; not an ISFN file")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported ISFN version {version}")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt ISFN header: {exc}") from exc
        shape = tuple(header["shape"])
        payload = fh.read()
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return Dataset(DatasetSpec.from_dict(header["spec"]), data)


@dataclass
class Dataset:
    spec: DatasetSpec
    data: np.ndarray  # (Z, S, *grid, channels)

    @property
    def n_train(self) -> int:
        return self.spec.n_sequences - self.spec.n_validation

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        """Whole-sequence split; the trailing sequences are validation."""
        return self.data[: self.n_train], self.data[self.n_train:]

    def pairs(self, n: int, subset: str = "train") -> tuple[np.ndarray, np.ndarray]:
        return pairs(self, n, subset)


def pairs(dataset: Dataset, n: int, subset: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """1-to-n training pairs with stride one, never crossing trajectories.

    Returns (inputs, targets) with shapes (P, *grid, c) and (P, n, *grid, c).
    """
    s = dataset.spec.n_snapshots
    if n < 1 or n > s - 1:
        raise ValueError(f"horizon n={n} needs at least n+1={n + 1} snapshots, have {s}")
    train, val = dataset.split()
    block = {"train": train, "validation": val, "all": dataset.data}[subset]
    per_traj = s - n
    xs, ys = [], []
    for traj in block:
        for i in range(per_traj):
            xs.append(traj[i])
            ys.append(traj[i + 1: i + 1 + n])
    if not xs:
        grid = dataset.data.shape[2:]
        return np.empty((0,) + grid), np.empty((0, n) + grid)
    return np.stack(xs), np.stack(ys)
