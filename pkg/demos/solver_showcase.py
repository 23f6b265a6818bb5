"""Tour of the pseudo-spectral reference solvers.

Runs each equation family on a small grid, printing conservation and
dispersion diagnostics, and (when matplotlib is importable) saving a figure
per family next to this script.

    python3 demos/solver_showcase.py
"""

import pathlib

import numpy as np

from isfno import ist
from isfno import solvers as sv

OUT = pathlib.Path(__file__).resolve().parent / "output"
OUT.mkdir(exist_ok=True)

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:  # pragma: no cover - plotting is optional
    plt = None


def save_waterfall(name, snaps, times, x):
    if plt is None:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    for t, snap in zip(times, snaps):
        ax.plot(x, snap - snap.mean() + 1.5 * t, lw=0.8)
    ax.set_xlabel("x")
    ax.set_ylabel("field (mean removed, offset by time)")
    ax.set_title(name)
    fig.tight_layout()
    fig.savefig(OUT / f"{name}.png", dpi=120)
    plt.close(fig)
    print(f"  figure -> {OUT / (name + '.png')}")


# --- chaotic Kuramoto-Sivashinsky ------------------------------------------
print("KS (beta=10): chaotic front, starting from tiny noise")
n = 256
x = np.linspace(0, 2 * np.pi, n, endpoint=False)
cfg = sv.EquationConfig("ks", (n,), beta=10.0)
rng = np.random.default_rng(0)
state = sv.SolverState(rng.uniform(0, 0.03, n), 0.0, 0.15)
snaps, times = [], []
for block in range(6):
    state = sv.advance(cfg, state, 100)
    snaps.append(state.field.copy())
    times.append(state.t)
    rms = np.std(state.field - state.field.mean())
print(f"  after t={state.t:.0f}: mean drift {state.field.mean():+.1f}, "
      f"fluctuation rms {rms:.2f}")
save_waterfall("ks_beta10", snaps, range(len(snaps)), x)

# --- Michelson-Sivashinsky giant cusp --------------------------------------
print("MS (beta=10): relaxation to the giant-cusp profile")
cfg = sv.EquationConfig("ms", (n,), beta=10.0)
state = sv.SolverState(rng.uniform(0, 0.03, n), 0.0, 0.15)
snaps = []
for _ in range(5):
    state = sv.advance(cfg, state, 120)
    snaps.append(state.field.copy())
profile = snaps[-1] - snaps[-1].mean()
print(f"  cusp depth max-min = {profile.max() - profile.min():.2f}")
save_waterfall("ms_beta10", snaps, range(len(snaps)), x)

# --- KdV two-soliton interaction --------------------------------------------
print("KdV: tall soliton overtakes a short one (elastic collision)")
n, length = 256, 20.0
x = np.arange(n) * (length / n)
cfg = sv.EquationConfig("kdv", (n,))
ic = (ist.one_soliton(1.8, 5.0, 0.0, x, length=length)
      + ist.one_soliton(0.5, 11.0, 0.0, x, length=length))
state = sv.SolverState(ic, 0.0, 0.05)
mass0 = ic.sum() * (length / n)
mom0 = (ic**2).sum() * (length / n)
snaps = [ic]
for _ in range(5):
    state = sv.advance(cfg, state, 40)
    snaps.append(state.field.copy())
mass1 = state.field.sum() * (length / n)
mom1 = (state.field**2).sum() * (length / n)
print(f"  over t={state.t:.0f}: mass drift {abs(mass1 - mass0):.2e}, "
      f"momentum drift {abs(mom1 - mom0):.2e}")
save_waterfall("kdv_two_solitons", snaps, range(len(snaps)), x)

# --- KP line waves ------------------------------------------------------------
print("KP: constrained 2d dispersive waves")
n2 = 32
cfg = sv.EquationConfig("kp", (n2, n2))
rng = np.random.default_rng(3)
ic = sv.kp_project(0.2 * rng.standard_normal((n2, n2)))
state = sv.advance(cfg, sv.SolverState(ic, 0.0, 0.01), 50)
spec = np.fft.rfftn(state.field, axes=(0, 1))
residual = np.max(np.abs(spec[0, 1:])) / np.max(np.abs(spec))
print(f"  constraint residual after 50 steps: {residual:.2e}")

print("done.")
