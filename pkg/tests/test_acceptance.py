"""Acceptance gate: one test per criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s`. The two scaled-training
criteria (9, 10) train real models and together take roughly 45 minutes on
one CPU core; everything else finishes in seconds.

Two assertions are encoded as strict xfails because the stated reference
values are mathematically unattainable (the analysis lives next to the
companion tests that pin the verified behavior):
  * the soliton bound-state eigenvalue: the s-soliton's Schrodinger well
    -phi has its ground state at -s/4, not -s/2 (Poschl-Teller potential
    -2a^2 sech^2(a x) with a = sqrt(s)/2 has the single eigenvalue -a^2);
    the GLM machinery, k = sqrt(s)/2, and the crest speed 4k^2 = s are all
    consistent with -s/4 and are verified green below;
  * the l=20 wrapped-soliton transport bound 1e-4: the inherent
    periodic-image interaction of the argument-wrapped profile sits at
    1.02e-4 independent of resolution and integrator tolerance (it drops to
    5e-9 on l=40); the image-summed periodization, which is an exact
    traveling wave of the periodic equation, passes at 2e-8 and is asserted
    as the companion.
"""

import time

import numpy as np
import pytest

from isfno import datasets as ds
from isfno import engine as eg
from isfno import evaluation as ev
from isfno import ist
from isfno import models as md
from isfno import solvers as sv
from isfno import training as tr
from isfno.cli import main as cli_main


def report(num, ok, name, detail=""):
    tag = "PASS" if ok else "FAIL"
    print(f"\n[criterion {num:>2}] {tag}  {name}  {detail}")
    return ok


# ---------------------------------------------------------------------------
# 1. exact invertibility of the coupling map


def test_criterion_1_invertibility():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(100):
        width = int(rng.integers(2, 5))
        kmax = int(rng.integers(1, 4))
        spec = md.ModelSpec("isfno_o", d_v=1, width=width, kmax=(kmax,),
                            n_steps=1, hidden=8)
        model = md.build(spec, seed=int(rng.integers(1 << 30)))
        for k in ("R.f.mlp.w1", "R.f.mlp.b1", "R.g.mlp.w1", "R.g.mlp.b1"):
            model.params[k] = rng.standard_normal(model.params[k].shape) * 0.5
        n = int(rng.integers(8, 17))
        f, g = model.coupling_maps((n,))
        z = eg.constant(rng.standard_normal((n, spec.d_z)))
        back = md.revnet_inverse(md.revnet_forward(z, f, g), f, g)
        worst = max(worst, float(np.max(np.abs(back.data - z.data))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-11 and elapsed < 10.0
    report(1, ok, "coupling inverse identity",
           f"worst max-norm {worst:.2e} over 100 cases in {elapsed:.1f}s")
    assert worst < 1e-11
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 2. exponential-layer semigroup


def test_criterion_2_semigroup():
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    kmax, d, n = 5, 3, 20
    worst = 0.0
    for _ in range(10):
        r = eg._self_conjugate_projection(
            rng.standard_normal((kmax, d, d, 2)) * 0.4, (kmax,))
        spec = md.ModelSpec("isfno_prime", d_v=1, width=d - 1, kmax=(kmax,),
                            n_steps=1, hidden=8)
        lin, _ = md.exp_fourier_layer_transfer({"A.r_lin": eg.constant(r)}, spec)
        z0 = rng.standard_normal((n, d))
        state = eg.constant(z0)
        c0 = np.fft.fft(z0, axis=0)[:kmax]
        for j in range(1, 6):
            state = md.exp_fourier_layer(state, lin, None, (kmax,), (n,))
            got = eg.pairs_to_complex(eg.fft_forward(state, (kmax,)).data.data)
            transfer = eg.pairs_to_complex(eg.matrix_exp(
                eg.SpectralWeights(eg.constant(float(j) * r), (kmax,))).data.data)
            expect = np.einsum("kij,kj->ki", transfer, c0)
            scale = max(np.max(np.abs(expect)), 1.0)
            worst = max(worst, float(np.max(np.abs(got - expect)) / scale))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 10.0
    report(2, ok, "exp-layer transfer equals exp(j r')",
           f"worst {worst:.2e} in {elapsed:.1f}s")
    assert worst < 1e-10
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 3. gradient oracle for every variant


def test_criterion_3_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    worst = {}
    for variant in md.VARIANTS:
        kmax = (1,) if variant == "isfno_star" else (2,)
        spec = md.ModelSpec(variant, d_v=1, width=2, kmax=kmax,
                            n_steps=1 if variant == "fno" else 2, hidden=3)
        model = md.build(spec, seed=13)
        for k in list(model.params):
            if not np.any(model.params[k]):
                model.params[k] = rng.standard_normal(model.params[k].shape) * 0.2
        assert model.parameter_count <= 200
        x = rng.standard_normal((2, 8, 1))
        y = rng.standard_normal((2, 2, 8, 1))
        with eg.Tape() as tape:
            leaves = model.bind(tape)
            loss = tr.model_loss(model, x, y, params=leaves)
            grads_by_node = tape.gradients(loss)
        analytic = np.concatenate(
            [grads_by_node[leaf.tape_id].ravel() for leaf in leaves.values()])
        h = 1e-5
        fd = np.empty_like(analytic)
        pos = 0
        for name, arr in model.params.items():
            flat = arr.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                fp = float(tr.model_loss(model, x, y).data)
                flat[i] = keep - h
                fm = float(tr.model_loss(model, x, y).data)
                flat[i] = keep
                fd[pos] = (fp - fm) / (2.0 * h)
                pos += 1
        rel = np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12)
        worst[variant] = rel
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-5}
    ok = not bad and elapsed < 120.0
    report(3, ok, "loss gradients match central differences",
           f"worst {max(worst.values()):.2e} across 9 variants in {elapsed:.0f}s")
    assert not bad, bad
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# 4. near-identity start


def test_criterion_4_near_identity_bitwise():
    rng = np.random.default_rng(104)
    ok = True
    for variant in ("isfno_star", "isfno_o", "isfno_prime",
                    "isfno_kappa", "isfno_kappa3"):
        spec = md.ModelSpec(variant, d_v=1, width=3, kmax=(3,), n_steps=4, hidden=8)
        model = md.build(spec, seed=14)
        if variant == "isfno_star":
            for k in list(model.params):
                if k.startswith("A."):
                    model.params[k] = np.zeros_like(model.params[k])
        phi = rng.standard_normal((2, 12, 1))
        outs = model.forward_multi(phi)
        ok = ok and all(np.array_equal(o.data, phi) for o in outs)
    report(4, ok, "zero-initialized reversible variants reproduce the input",
           "bitwise over all horizon steps")
    assert ok


# ---------------------------------------------------------------------------
# 5. solver dispersion


def test_criterion_5_dispersion():
    n, dt = 256, 0.15
    x = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    worst = 0.0
    for family, beta in (("ms", 10.0), ("ks", 10.0)):
        cfg = sv.EquationConfig(family, (n,), beta=beta)
        assert sv.linear_symbol(cfg, beta) == 0.0  # marginal mode
        for kappa in (2.0, 4.0, 7.0):
            rate = sv.linear_symbol(cfg, kappa).real
            st = sv.advance(cfg, sv.SolverState(1e-6 * np.cos(kappa * x), 0.0, dt), 1)
            amp = 2.0 * np.abs(np.fft.rfft(st.field)[int(kappa)]) / n
            expect = 1e-6 * np.exp(rate * dt)
            worst = max(worst, abs(amp - expect) / expect)
    ok = worst < 1e-3
    report(5, ok, "MS/KS single-mode growth matches the linear symbols",
           f"worst relative {worst:.2e}; kappa=beta marginal")
    assert worst < 1e-3


# ---------------------------------------------------------------------------
# 6. soliton fidelity


def _advance_soliton(profile_fn, t_end=1.0):
    n, length, s, c = 256, 20.0, 1.0, 10.0
    x = np.arange(n) * (length / n)
    cfg = sv.EquationConfig("kdv", (n,))
    st = sv.SolverState(profile_fn(x, s, c, 0.0, length), 0.0, 0.05)
    out = sv.advance(cfg, st, int(round(t_end / 0.05)))
    expect = profile_fn(x, s, c, t_end, length)
    return np.linalg.norm(out.field - expect) / np.linalg.norm(expect)


def _wrapped(x, s, c, t, length):
    arg = np.mod(x - c - s * t + length / 2.0, length) - length / 2.0
    return 0.5 * s / np.cosh(0.5 * np.sqrt(s) * arg) ** 2


def test_criterion_6_soliton_transport_and_mass():
    rel = _advance_soliton(lambda x, s, c, t, length:
                           ist.one_soliton(s, c, t, x, length=length))
    n, length = 256, 20.0
    x = np.arange(n) * (length / n)
    cfg = sv.EquationConfig("kdv", (n,))
    ic = ist.one_soliton(1.0, 10.0, 0.0, x, length=length)
    out = sv.advance(cfg, sv.SolverState(ic, 0.0, 0.1), 10)
    mass_drift = abs(np.sum(out.field) - np.sum(ic)) * (length / n)
    ok = rel < 1e-4 and mass_drift < 1e-10
    report(6, ok, "one-soliton transport and mass conservation",
           f"rel L2 {rel:.2e} over t=1 (image-sum periodization); "
           f"mass drift {mass_drift:.1e} per unit time")
    assert rel < 1e-4
    assert mass_drift < 1e-10


@pytest.mark.xfail(strict=True, reason=(
    "the argument-wrapped sech^2 profile is not a traveling solution of the "
    "periodic equation; its transport defect floors at 1.02e-4 on l=20 "
    "regardless of resolution or substep tolerance (5e-9 on l=40)"))
def test_criterion_6_wrapped_profile_at_stated_bound():
    rel = _advance_soliton(_wrapped)
    report(6, rel < 1e-4, "argument-wrapped profile at the stated 1e-4 bound",
           f"rel L2 {rel:.2e}")
    assert rel < 1e-4


# ---------------------------------------------------------------------------
# 7. IST spectrum


def _soliton_spectrum(s_values, positions):
    n, length = 512, 40.0
    x = np.arange(n) * (length / n)
    well = -sum(ist.one_soliton(s, c, 0.0, x, length=length)
                for s, c in zip(s_values, positions))
    eigs = ist.discrete_spectrum(ist.SchrodingerProblem(well, length))
    return eigs[eigs < -1e-3]


@pytest.mark.xfail(strict=True, reason=(
    "the stated eigenvalue -s/2 is inconsistent with the soliton profile: "
    "the well -(s/2) sech^2(sqrt(s)/2 x) is the Poschl-Teller potential "
    "-2 a^2 sech^2(a x) with a = sqrt(s)/2, whose only bound state is "
    "-a^2 = -s/4; -s/4 also matches the k = sqrt(s)/2 wavenumber that the "
    "reconstruction criterion requires"))
def test_criterion_7_eigenvalues_as_stated():
    bound = _soliton_spectrum([2.0], [20.0])
    ok = bound.size == 1 and abs(bound[0] + 1.0) < 1e-3
    two = _soliton_spectrum([0.8, 1.6], [12.0, 28.0])
    ok = ok and two.size == 2 and abs(two[0] + 0.8) < 1e-3 and abs(two[1] + 0.4) < 1e-3
    report(7, ok, "soliton eigenvalues at the stated -s/2",
           f"got {bound} and {two}")
    assert ok


def test_criterion_7_eigenvalues_verified():
    bound = _soliton_spectrum([2.0], [20.0])
    ok = bound.size == 1 and abs(bound[0] + 0.5) < 1e-3
    two = _soliton_spectrum([0.8, 1.6], [12.0, 28.0])
    ok = ok and two.size == 2 and abs(two[0] + 0.4) < 1e-3 and abs(two[1] + 0.2) < 1e-3
    report(7, ok, "soliton eigenvalues at the verified -s/4",
           f"single {bound}, pair {two}")
    assert ok


# ---------------------------------------------------------------------------
# 8. GLM reconstruction


def test_criterion_8_glm_reconstruction():
    n, length = 512, 40.0
    x = np.arange(n) * (length / n)
    one = ist.soliton_scattering([1.0], [20.0])
    rec = ist.reflectionless_reconstruct(one, x)
    ana = ist.one_soliton(1.0, 20.0, 0.0, x, length=length)
    rel_one = np.linalg.norm(rec - ana) / np.linalg.norm(ana)

    two = ist.soliton_scattering([1.6, 0.8], [15.0, 25.0])
    phi0 = ist.reflectionless_reconstruct(two, x)
    cfg = sv.EquationConfig("kdv", (n,), lengths=(length,))
    solved = sv.advance(cfg, sv.SolverState(phi0, 0.0, 0.05), 6)  # t = 0.3
    rec_t = ist.reflectionless_reconstruct(ist.evolve_scattering(two, 0.3), x)
    rel_two = np.linalg.norm(solved.field - rec_t) / np.linalg.norm(rec_t)

    ok = rel_one < 1e-6 and rel_two < 1e-3
    report(8, ok, "reflectionless GLM reconstruction",
           f"one-soliton {rel_one:.2e} (<1e-6); two-soliton vs solver "
           f"{rel_two:.2e} (<1e-3)")
    assert rel_one < 1e-6
    assert rel_two < 1e-3


# ---------------------------------------------------------------------------
# 9 and 10. scaled training experiment and rollout statistics


TOY_EPOCHS = 200
TOY_HORIZON = 5
WINDOW = (1000, 4000)


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    """32-sequence KS beta=4 dataset at N=64; burn-ins staggered so the
    recorded snapshots cover the mean-drift range seen in long rollouts."""
    spec = ds.DatasetSpec(
        equation=sv.EquationConfig("ks", (64,), beta=4.0),
        n_sequences=32, n_snapshots=51, dt=0.15,
        sampler="uniform_physical",
        sampler_params={"lo": 0.0, "hi": 0.03, "burn_in_range": [40.0, 640.0]},
        seed=42,
    )
    path = tmp_path_factory.mktemp("toy") / "ks_toy.isfn"
    return ds.generate(spec, path, echo=False)


def _train_toy(variant, dataset, tmp_path_factory):
    spec = md.ModelSpec(variant, d_v=1, width=8, kmax=(16,),
                        n_steps=1 if variant == "fno" else TOY_HORIZON, hidden=128)
    model = md.build(spec, seed=0)
    cfg = tr.TrainConfig(epochs=TOY_EPOCHS, batch_size=32, horizon=TOY_HORIZON, seed=0)
    ckpt = tmp_path_factory.mktemp(variant) / "best.isfm"
    report_ = tr.train(model, dataset, cfg, checkpoint_path=ckpt)
    return model, report_


@pytest.fixture(scope="module")
def trained_isfno(toy_dataset, tmp_path_factory):
    t0 = time.perf_counter()
    model, report_ = _train_toy("isfno_o", toy_dataset, tmp_path_factory)
    return model, report_, time.perf_counter() - t0


@pytest.fixture(scope="module")
def trained_fno(toy_dataset, tmp_path_factory):
    model, report_ = _train_toy("fno", toy_dataset, tmp_path_factory)
    return model, report_


@pytest.mark.slow
def test_criterion_9_scaled_training(trained_isfno, trained_fno):
    _, isfno_report, wall = trained_isfno
    _, fno_report = trained_fno
    isfno_val = min(isfno_report.val_loss)
    fno_val = min(fno_report.val_loss)
    ok = isfno_val < 0.05 and wall < 1800.0 and isfno_val <= fno_val
    report(9, ok, "toy KS training",
           f"isfno_o val {isfno_val:.2e} in {wall / 60:.1f} min "
           f"(<0.05, <30 min); fno val {fno_val:.2e}; isfno <= fno: "
           f"{isfno_val <= fno_val}")
    assert isfno_val < 0.05
    assert wall < 1800.0
    assert isfno_val <= fno_val


@pytest.mark.slow
def test_criterion_10_rollout_statistics(toy_dataset, trained_isfno):
    model, _, _ = trained_isfno
    eq = toy_dataset.spec.equation
    dt = toy_dataset.spec.dt
    rng = np.random.default_rng(777)
    w0, w1 = WINDOW
    model_windows, solver_windows = [], []
    for _ in range(2):
        ic = rng.uniform(0.0, 0.03, eq.grid[0])
        burned = sv.advance(eq, sv.SolverState(ic, 0.0, dt), 400).field
        roll = ev.rollout(model, burned[..., None], w1)
        assert roll.finite_steps == w1, "model rollout diverged"
        model_windows.append(roll.states[w0 + 1: w1 + 1][..., 0])
        ref, valid = ev.reference_trajectory(eq, burned, dt, w1)
        assert valid == w1
        solver_windows.append(ref[w0:])
    k_model = ev.autocorrelation(model_windows)
    k_solver = ev.autocorrelation(solver_windows)
    dev = float(np.max(np.abs(k_model - k_solver)))
    ok = k_model[0] == 1.0 and dev < 0.1
    report(10, ok, "long-rollout autocorrelation matches the solver",
           f"K(0)={k_model[0]}; max deviation {dev:.3f} over steps "
           f"{w0}..{w1} (<0.1)")
    assert k_model[0] == 1.0
    assert dev < 0.1


# ---------------------------------------------------------------------------
# 11. CLI determinism


def test_criterion_11_cli_determinism(tmp_path, capsys):
    args = ["gen-data", "--family", "ks", "--beta", "4", "--n-seq", "2",
            "--grid", "32", "--snapshots", "5", "--dt", "0.15", "--seed", "7",
            "--threads", "1"]
    assert cli_main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli_main(["gen-data", "--config", str(tmp_path / "a" / "manifest.json"),
                     "--threads", "1", "--out", str(tmp_path / "b")]) == 0
    data_a = (tmp_path / "a" / "dataset.isfn").read_bytes()
    data_b = (tmp_path / "b" / "dataset.isfn").read_bytes()

    train_args = ["train", "--variant", "isfno_prime",
                  "--data", str(tmp_path / "a" / "dataset.isfn"),
                  "--epochs", "2", "--horizon", "2", "--width", "2",
                  "--kmax", "4", "--hidden", "4", "--seed", "3", "--threads", "1"]
    assert cli_main(train_args + ["--out", str(tmp_path / "t1")]) == 0
    assert cli_main(train_args + ["--out", str(tmp_path / "t2")]) == 0
    ckpt_a = (tmp_path / "t1" / "model.isfm").read_bytes()
    ckpt_b = (tmp_path / "t2" / "model.isfm").read_bytes()
    capsys.readouterr()

    ok = data_a == data_b and ckpt_a == ckpt_b
    report(11, ok, "CLI runs are bit-reproducible from their manifests",
           f"dataset bytes equal: {data_a == data_b}; "
           f"checkpoint bytes equal: {ckpt_a == ckpt_b}")
    assert data_a == data_b
    assert ckpt_a == ckpt_b
