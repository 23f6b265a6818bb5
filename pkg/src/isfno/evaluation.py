"""Long-horizon rollouts, accumulated-error curves, spatial autocorrelation.

Rollouts feed the n-th predicted component back as the next input; the
prediction at absolute step j is component ((j - 1) mod n) + 1 of block
ceil(j / n), so step j = n maps to the last component of the first block.
The single-step baseline simply composes itself.

The autocorrelation of a window of late-time states is
    K(r) = < int phi(x) phi(x - r) dx  /  int phi(x)^2 dx >
with the time average taken inside the ratio per ensemble member and the
ensemble average outside; in two dimensions the shift runs along the first
axis and is averaged over the second. The integrals are evaluated through
the FFT power spectrum, which is exact for periodic grids.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import solvers as sv
from .models import ForwardDivergenceError, Model
from .training import relative_l2

__all__ = [
    "ErrorCurve",
    "Rollout",
    "autocorrelation",
    "config_hash",
    "export_csv",
    "horizon_error",
    "rollout",
]


@dataclass
class Rollout:
    states: np.ndarray          # (J+1, grid..., channels) including the input
    finite_steps: int           # number of valid predicted steps
    diverged: bool = False

    @property
    def predictions(self) -> np.ndarray:
        return self.states[1: self.finite_steps + 1]


@dataclass
class ErrorCurve:
    values: np.ndarray          # J(j) for j = 1..len
    ensemble: int
    truncated: bool = False
    diverged_members: int = 0


def rollout(model: Model, phi0: np.ndarray, j_total: int) -> Rollout:
    """Iterate the learned operator j_total steps; divergence truncates.

    phi0 has shape (grid..., channels); no batch axis.
    """
    if j_total < 1:
        raise ValueError("j_total must be at least 1")
    n = model.spec.n_steps
    states = np.empty((j_total + 1,) + phi0.shape)
    states[0] = phi0
    current = phi0
    done = 0
    while done < j_total:
        try:
            outs = model.forward_multi(current[None])
        except ForwardDivergenceError:
            return Rollout(states[: done + 1], done, diverged=True)
        block = [o.data[0] for o in outs]
        for step in block:
            if done >= j_total:
                break
            if not np.all(np.isfinite(step)):
                return Rollout(states[: done + 1], done, diverged=True)
            states[done + 1] = step
            done += 1
        current = block[n - 1]
        if not np.all(np.isfinite(current)):
            return Rollout(states[: done + 1], done, diverged=True)
    return Rollout(states, j_total)


def reference_trajectory(cfg: sv.EquationConfig, phi0: np.ndarray, dt: float,
                         j_total: int) -> tuple[np.ndarray, int]:
    """Solver states at t = dt .. j_total*dt; returns (states, valid_count)."""
    states = np.empty((j_total,) + phi0.shape)
    st = sv.SolverState(phi0, t=0.0, dt=dt)
    for j in range(j_total):
        try:
            st = sv.advance(cfg, st, 1)
        except (sv.DivergenceError, sv.StiffnessError):
            return states[:j], j
        states[j] = st.field
    return states, j_total


def horizon_error(model: Model, cfg: sv.EquationConfig, ensemble: list[np.ndarray],
                  j_total: int, dt: float, threads: int = 1) -> ErrorCurve:
    """Mean over the ensemble of the relative error against the solver.

    Members that diverge (model or reference) truncate the curve at the
    shortest valid length; the count of truncating members is reported.
    Members are independent; with threads > 1 they run concurrently and are
    reduced in ensemble order, so the result matches a serial run.
    """
    if not ensemble:
        raise ValueError("empty ensemble")

    def one_member(phi0):
        field0 = np.asarray(phi0, dtype=np.float64)
        roll = rollout(model, field0[..., None] if field0.ndim == len(cfg.grid)
                       else field0, j_total)
        ref, valid_ref = reference_trajectory(cfg, field0[..., 0]
                                              if field0.ndim > len(cfg.grid) else field0,
                                              dt, j_total)
        valid = min(roll.finite_steps, valid_ref)
        preds = roll.predictions[..., 0] if roll.predictions.ndim > ref.ndim else roll.predictions
        errs = np.array([relative_l2(preds[j][None], ref[j][None])
                         for j in range(valid)])
        return errs, valid

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_member, ensemble))
    else:
        results = [one_member(phi0) for phi0 in ensemble]
    per_member = [errs for errs, _ in results]
    diverged = sum(1 for _, valid in results if valid < j_total)
    shortest = min(valid for _, valid in results)
    if shortest == 0:
        return ErrorCurve(np.empty(0), len(ensemble), truncated=True,
                          diverged_members=diverged)
    stacked = np.stack([e[:shortest] for e in per_member])
    return ErrorCurve(stacked.mean(axis=0), len(ensemble),
                      truncated=shortest < j_total, diverged_members=diverged)


# ---------------------------------------------------------------------------
# autocorrelation


def _autocorr_single(window: np.ndarray) -> np.ndarray:
    """Time-averaged circular autocorrelation of one member's window.

    window: (T, n) in 1d or (T, n1, n2) in 2d; returns K(r) over shifts
    along the first spatial axis, normalized so K(0) = 1.
    """
    if window.ndim == 2:
        spec = np.fft.fft(window, axis=1)
        power = (spec * np.conj(spec)).real
        num = np.fft.ifft(power.sum(axis=0)).real
    else:
        spec = np.fft.fft(window, axis=1)
        power = (spec * np.conj(spec)).real
        num = np.fft.ifft(power.sum(axis=(0, 2)), axis=0).real
    denom = num[0]
    if denom <= 0.0:
        raise ValueError("degenerate statistic: the window has no energy")
    return num / denom


def autocorrelation(windows, demean: bool = False) -> np.ndarray:
    """Ensemble average of per-member time-averaged autocorrelations.

    `windows` is one array (T, grid...) or a list of them (one per ensemble
    member). Shifts run along the first spatial axis; in 2d the correlation
    is averaged over the second axis.
    """
    if isinstance(windows, np.ndarray):
        windows = [windows]
    curves = []
    for w in windows:
        w = np.asarray(w, dtype=np.float64)
        if demean:
            w = w - w.mean(axis=tuple(range(1, w.ndim)), keepdims=True)
        curves.append(_autocorr_single(w))
    return np.mean(curves, axis=0)


def autocorr_direct(window: np.ndarray, shifts=None) -> np.ndarray:
    """Direct-summation oracle for the 1d autocorrelation (O(n^2))."""
    t, n = window.shape
    shifts = range(n) if shifts is None else shifts
    num = np.array([sum(np.sum(w * np.roll(w, s)) for w in window) for s in shifts])
    return num / num[0]


# ---------------------------------------------------------------------------
# CSV export


def config_hash(cfg) -> str:
    """Short stable hash of any JSON-serializable configuration object."""
    if hasattr(cfg, "to_dict"):
        cfg = cfg.to_dict()
    elif hasattr(cfg, "__dict__"):
        cfg = {k: v for k, v in vars(cfg).items()}

    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, tuple):
            return list(o)
        return str(o)

    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=default)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def export_csv(values, path, metric: str, cfg) -> None:
    """Two-column CSV (index, value); the header names the metric and the
    configuration hash. Values are written with repr round-trip precision."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    tag = f"{metric}@{config_hash(cfg)}"
    with open(path, "w") as fh:
        fh.write(f"index,{tag}\n")
        for i, v in enumerate(values):
            fh.write(f"{i},{float(v)!r}\n")
