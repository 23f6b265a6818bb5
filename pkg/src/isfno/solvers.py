"""Pseudo-spectral reference solvers for the MS, KS, KdV and KP equations.

Periodic domains, integrating factors for the linear terms, and an embedded
Dormand-Prince 4(5) pair with adaptive substeps for the nonlinear terms.
Quadratic nonlinearities are dealiased with the 2/3 rule. All arithmetic is
plain float64 numpy; trajectories are bit-reproducible for a fixed config,
initial condition and thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.fft as sfft

__all__ = [
    "DivergenceError",
    "EquationConfig",
    "SolverState",
    "StiffnessError",
    "advance",
    "gamma_op",
    "kp_project",
    "linear_symbol",
    "linear_symbol_grid",
    "wavenumber_grids",
]

FAMILIES = ("ms", "ks", "kdv", "kp")

TWO_PI = 2.0 * np.pi
KDV_LENGTH = 20.0


class DivergenceError(ArithmeticError):
    """The field stopped being finite; carries the time of failure."""

    def __init__(self, t):
        super().__init__(f"solution became non-finite at t={t:.6g}")
        self.t = t


class StiffnessError(ArithmeticError):
    pass


@dataclass(frozen=True)
class EquationConfig:
    family: str
    grid: tuple[int, ...]
    beta: float | None = None
    lengths: tuple[float, ...] | None = None
    dealias: bool = True

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", fam)
        grid = tuple(int(n) for n in self.grid)
        object.__setattr__(self, "grid", grid)
        if len(grid) not in (1, 2):
            raise ValueError("only 1d and 2d grids are supported")
        if fam == "kp" and len(grid) != 2:
            raise ValueError("KP is a 2d equation")
        if fam == "kdv" and len(grid) != 1:
            raise ValueError("KdV is a 1d equation")
        if fam in ("ms", "ks"):
            if self.beta is None or self.beta <= 0:
                raise ValueError(f"{fam} requires beta > 0")
        if self.lengths is None:
            base = TWO_PI if fam in ("ms", "ks") else KDV_LENGTH
            object.__setattr__(self, "lengths", (base,) * len(grid))
        else:
            object.__setattr__(self, "lengths", tuple(float(l) for l in self.lengths))
        if len(self.lengths) != len(grid):
            raise ValueError("lengths and grid rank disagree")

    @property
    def dim(self) -> int:
        return len(self.grid)

    @property
    def tau(self) -> float:
        """MS time-scale factor beta/10."""
        if self.family != "ms":
            raise ValueError("tau is defined for the MS family only")
        return self.beta / 10.0


@dataclass
class SolverState:
    field: np.ndarray
    t: float
    dt: float
    h_last: float | None = None

    def __post_init__(self):
        self.field = np.asarray(self.field, dtype=np.float64)


def wavenumber_grids(cfg: EquationConfig) -> list[np.ndarray]:
    """Physical wavenumbers per axis in FFT layout (last axis rfft half)."""
    out = []
    for ax, (n, length) in enumerate(zip(cfg.grid, cfg.lengths)):
        if ax == cfg.dim - 1:
            k = np.arange(n // 2 + 1) * (TWO_PI / length)
        else:
            k = sfft.fftfreq(n, d=1.0 / n) * (TWO_PI / length)
        out.append(k)
    return out


def _mesh(kgrids):
    if len(kgrids) == 1:
        return (kgrids[0],)
    return np.meshgrid(*kgrids, indexing="ij")


def linear_symbol(cfg: EquationConfig, kappa) -> complex:
    """Growth rate of a single Fourier mode with physical wavenumber kappa.

    For KP, kappa is a (k1, k2) pair; the constrained k1=0 subspace carries a
    zero symbol by convention.
    """
    fam = cfg.family
    if fam in ("ms", "ks"):
        kap = np.atleast_1d(np.asarray(kappa, dtype=np.float64))
        mag2 = float(np.sum(kap**2))
        mag = np.sqrt(mag2)
        b = cfg.beta
        if fam == "ms":
            return complex(cfg.tau * (mag / b - mag2 / b**2))
        return complex(mag2 / b**2 - mag2**2 / b**4)
    if fam == "kdv":
        k = float(np.asarray(kappa).reshape(()))
        return 1j * k**3
    k1, k2 = (float(v) for v in kappa)
    if k1 == 0.0:
        return 0j
    return 1j * (k1**3 - k2**2 / k1)


def linear_symbol_grid(cfg: EquationConfig) -> np.ndarray:
    """linear_symbol evaluated on the full rfft mode layout."""
    kg = _mesh(wavenumber_grids(cfg))
    fam = cfg.family
    if fam in ("ms", "ks"):
        mag2 = sum(k**2 for k in kg)
        b = cfg.beta
        if fam == "ms":
            return (cfg.tau * (np.sqrt(mag2) / b - mag2 / b**2)).astype(np.complex128)
        return (mag2 / b**2 - mag2**2 / b**4).astype(np.complex128)
    if fam == "kdv":
        return 1j * kg[0] ** 3
    k1, k2 = kg
    with np.errstate(divide="ignore", invalid="ignore"):
        sym = 1j * (k1**3 - np.where(k1 != 0.0, k2**2 / np.where(k1 != 0.0, k1, 1.0), 0.0))
    sym[0, :] = 0.0
    return sym


def gamma_op(field: np.ndarray, lengths=None) -> np.ndarray:
    """Nonlocal operator F^{-1}(|kappa| F(field)); the DC mode maps to zero."""
    field = np.asarray(field, dtype=np.float64)
    d = field.ndim
    if d not in (1, 2):
        raise ValueError("gamma_op expects a 1d or 2d field")
    if lengths is None:
        lengths = (TWO_PI,) * d
    axes = tuple(range(d))
    spec = sfft.rfftn(field, axes=axes)
    ks = []
    for ax in range(d):
        n, length = field.shape[ax], lengths[ax]
        if ax == d - 1:
            k = np.arange(n // 2 + 1) * (TWO_PI / length)
        else:
            k = sfft.fftfreq(n, d=1.0 / n) * (TWO_PI / length)
        ks.append(k)
    mag = np.sqrt(sum(k**2 for k in _mesh(ks)))
    return sfft.irfftn(spec * mag, s=field.shape, axes=axes)


def kp_project(field: np.ndarray) -> np.ndarray:
    """Zero the k1=0, k2!=0 spectral row so that int(d^2_{x2} phi) dx1 == 0."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError("kp_project expects a 2d field")
    spec = sfft.rfftn(field, axes=(0, 1))
    spec[0, 1:] = 0.0
    return sfft.irfftn(spec, s=field.shape, axes=(0, 1))


# ---------------------------------------------------------------------------
# time stepping


def _dealias_mask(cfg: EquationConfig) -> np.ndarray:
    masks = []
    for ax, n in enumerate(cfg.grid):
        cut = n // 3
        if ax == cfg.dim - 1:
            idx = np.arange(n // 2 + 1)
        else:
            idx = np.abs(sfft.fftfreq(n, d=1.0 / n))
        masks.append(idx <= cut)
    if cfg.dim == 1:
        return masks[0]
    return np.logical_and.outer(masks[0], masks[1])


class _Rhs:
    """Spectral nonlinear term and linear symbol for one configuration."""

    def __init__(self, cfg: EquationConfig):
        self.cfg = cfg
        self.axes = tuple(range(cfg.dim))
        self.shape = cfg.grid
        self.symbol = linear_symbol_grid(cfg)
        self.mask = _dealias_mask(cfg) if cfg.dealias else None
        kg = _mesh(wavenumber_grids(cfg))
        self.ik = [1j * k for k in kg]
        fam = cfg.family
        if fam == "ms":
            self.quad_coeff = -cfg.tau / (2.0 * cfg.beta**2)
        elif fam == "ks":
            self.quad_coeff = -1.0 / (2.0 * cfg.beta**2)
        else:
            self.quad_coeff = -3.0  # from -6 phi phi_x = -3 (phi^2)_x

    def __call__(self, spec: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if cfg.dim == 1:
            n = self.shape[0]
            if cfg.family in ("ms", "ks"):
                grad = sfft.irfft(self.ik[0] * spec, n)
                out = self.quad_coeff * sfft.rfft(grad * grad)
            else:
                phi = sfft.irfft(spec, n)
                out = (self.quad_coeff * self.ik[0]) * sfft.rfft(phi * phi)
        elif cfg.family in ("ms", "ks"):
            grad_sq = 0.0
            for ik in self.ik:
                grad_sq = grad_sq + sfft.irfftn(ik * spec, s=self.shape, axes=self.axes) ** 2
            out = self.quad_coeff * sfft.rfftn(grad_sq, axes=self.axes)
        else:
            phi = sfft.irfftn(spec, s=self.shape, axes=self.axes)
            out = (self.quad_coeff * self.ik[0]) * sfft.rfftn(phi * phi, axes=self.axes)
        if self.mask is not None:
            out = np.where(self.mask, out, 0.0)
        return out


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                   187 / 2100, 1 / 40])


class _ExpTable:
    """exp(symbol * h * delta) for the tableau's offsets, cached per h."""

    def __init__(self, symbol: np.ndarray):
        self.symbol = symbol
        deltas = set()
        for i in range(1, 7):
            deltas.add(_DP_C[i])
            for j, a in enumerate(_DP_A[i]):
                if a != 0.0:
                    deltas.add(_DP_C[i] - _DP_C[j])
        for j in range(7):
            if _DP_B5[j] != 0.0 or _DP_B4[j] != 0.0:
                deltas.add(1.0 - _DP_C[j])
        deltas.add(1.0)
        self.deltas = sorted(deltas)
        self._h = None
        self._table = {}

    def for_step(self, h: float) -> dict[float, np.ndarray]:
        if h != self._h:
            self._h = h
            self._table = {d: np.exp(self.symbol * (h * d)) for d in self.deltas}
            self._table[0.0] = None  # identity, applied as a no-op
        return self._table


def _apply(factor, arr):
    return arr if factor is None else factor * arr


def _dp_substep(rhs: _Rhs, table: dict, spec: np.ndarray, h: float, m1: np.ndarray):
    """One embedded step in the integrating-factor frame.

    Stage states are propagated with bounded factors exp(L * (ci - cj) * h),
    ci >= cj, so decaying linear parts never produce growing exponentials.
    Returns (spec_new, error_estimate, m_last).
    """
    m = [m1]
    for i in range(1, 7):
        acc = _apply(table[_DP_C[i]], spec)
        for j, a in enumerate(_DP_A[i]):
            if a != 0.0:
                acc = acc + (h * a) * _apply(table.get(_DP_C[i] - _DP_C[j]), m[j])
        m.append(rhs(acc))
    new = _apply(table[1.0], spec)
    err = np.zeros_like(spec)
    for j in range(7):
        db = _DP_B5[j] - _DP_B4[j]
        if _DP_B5[j] != 0.0:
            new = new + (h * _DP_B5[j]) * _apply(table.get(1.0 - _DP_C[j]), m[j])
        if db != 0.0:
            err = err + (h * db) * _apply(table.get(1.0 - _DP_C[j]), m[j])
    return new, err, m[6]


def advance(cfg: EquationConfig, state: SolverState, steps: int, *,
            rtol: float = 1e-8, atol: float = 1e-10,
            max_substeps: int = 4096, fixed_substeps: int | None = None) -> SolverState:
    """Integrate `steps` output intervals of length state.dt.

    Adaptive embedded 4(5) substeps unless fixed_substeps pins the count.
    For KP the constraint row is re-projected after every output step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if cfg.family == "ms" and cfg.beta >= 50.0 and max(cfg.grid) <= 256:
        raise StiffnessError(
            f"MS with beta={cfg.beta:g} is unresolvable on a {max(cfg.grid)}-point grid; "
            "refusing to integrate")
    if tuple(state.field.shape) != cfg.grid:
        raise ValueError(f"state grid {state.field.shape} does not match config {cfg.grid}")

    rhs = _Rhs(cfg)
    table = _ExpTable(rhs.symbol)
    axes = rhs.axes
    dt = float(state.dt)

    spec = sfft.rfftn(state.field, axes=axes)
    if rhs.mask is not None:
        spec = np.where(rhs.mask, spec, 0.0)

    t = float(state.t)
    h = state.h_last if state.h_last else dt / 10.0

    for _ in range(steps):
        remaining = dt
        n_sub = 0
        if fixed_substeps:
            h_fixed = dt / fixed_substeps
            m1 = rhs(spec)
            for _ in range(fixed_substeps):
                tab = table.for_step(h_fixed)
                spec, _, m1 = _dp_substep(rhs, tab, spec, h_fixed, m1)
            remaining = 0.0
        else:
            m1 = rhs(spec)
            while remaining > 1e-14 * dt:
                h = min(h, remaining)
                tab = table.for_step(h)
                new, err, m_last = _dp_substep(rhs, tab, spec, h, m1)
                # norm-wise control: local error relative to the solution norm
                ref = max(float(np.linalg.norm(new.ravel())),
                          float(np.linalg.norm(spec.ravel())))
                err_norm = float(np.linalg.norm(err.ravel())) / (atol + rtol * ref)
                n_sub += 1
                if n_sub > max_substeps:
                    raise StiffnessError(
                        f"substep count exceeded {max_substeps} at t={t + dt - remaining:.6g}")
                if err_norm <= 1.0:
                    spec = new
                    remaining -= h
                    m1 = m_last  # first-same-as-last
                    if not np.all(np.isfinite(spec.view(np.float64))):
                        raise DivergenceError(t + dt - remaining)
                factor = 0.9 * err_norm ** -0.2 if err_norm > 0.0 else 5.0
                h = h * min(5.0, max(0.2, factor))
        t += dt
        if cfg.family == "kp":
            spec[0, 1:] = 0.0
        if not np.all(np.isfinite(spec.view(np.float64))):
            raise DivergenceError(t)

    out = sfft.irfftn(spec, s=cfg.grid, axes=axes)
    return replace(state, field=out, t=t, h_last=None if fixed_substeps else h)
