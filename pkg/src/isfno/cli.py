"""Command-line pipeline driver.

Subcommands: gen-data, train, rollout, autocorr, ist-demo, inspect. Every
run resolves its configuration from defaults, an optional config file (flat
key = value sections, or a previously written manifest.json) and command
flags, then writes the fully resolved configuration plus the tool version
to <out>/manifest.json. A run is reproducible from its manifest alone via
--config manifest.json.

Exit codes: 0 success, 2 usage error, 3 numerical divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import datasets as ds
from . import evaluation as ev
from . import ist
from . import models as md
from . import solvers as sv
from . import training as tr

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


# ---------------------------------------------------------------------------
# config files


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip('"').strip("'")


def _parse_config_text(text: str) -> dict:
    """Flat key = value sections; values use JSON literals where they parse."""
    out: dict[str, dict] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        if section is None:
            raise ValueError(f"config line {lineno}: key outside any [section]")
        key, raw = line.split("=", 1)
        out[section][key.strip()] = _parse_value(raw)
    return out


def load_config_file(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        blob = json.loads(text)
        return blob.get("config", blob)
    return _parse_config_text(text)


def resolve(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    """defaults < config file < explicit flags, per section."""
    out = {sec: dict(vals) for sec, vals in defaults.items()}
    for sec, vals in file_cfg.items():
        out.setdefault(sec, {}).update(vals)
    for sec, vals in flags.items():
        for key, val in vals.items():
            if val is not None:
                out.setdefault(sec, {})[key] = val
    return out


def write_manifest(outdir: Path, command: str, config: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": "isfno", "version": __version__,
                "command": command, "config": config}
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _equation_from(section: dict) -> sv.EquationConfig:
    lengths = section.get("lengths")
    return sv.EquationConfig(
        family=section["family"],
        grid=tuple(section["grid"]) if isinstance(section["grid"], list)
        else (int(section["grid"]),) * (2 if section["family"] in ("kp",) else 1),
        beta=section.get("beta"),
        lengths=tuple(lengths) if lengths else None,
        dealias=section.get("dealias", True),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    defaults = {
        "equation": {"family": "ks", "grid": 256, "beta": 10.0, "lengths": None,
                     "dealias": True},
        "dataset": {"n_sequences": 32, "snapshots": 101, "dt": 0.15,
                    "sampler": "uniform_physical", "sampler_params": {},
                    "seed": 0, "validation_fraction": 0.10},
    }
    file_cfg = load_config_file(args.config) if args.config else {}
    flags = {
        "equation": {"family": args.family, "grid": args.grid, "beta": args.beta},
        "dataset": {"n_sequences": args.n_seq, "snapshots": args.snapshots,
                    "dt": args.dt, "sampler": args.sampler, "seed": args.seed,
                    "sampler_params": json.loads(args.sampler_params)
                    if args.sampler_params else None},
    }
    cfg = resolve(defaults, file_cfg, flags)
    eq = _equation_from(cfg["equation"])
    dsec = cfg["dataset"]
    spec = ds.DatasetSpec(
        equation=eq, n_sequences=int(dsec["n_sequences"]),
        n_snapshots=int(dsec["snapshots"]), dt=float(dsec["dt"]),
        sampler=dsec["sampler"], sampler_params=dict(dsec["sampler_params"]),
        seed=int(dsec["seed"]),
        validation_fraction=float(dsec["validation_fraction"]))
    outdir = Path(args.out)
    cfg["equation"]["grid"] = list(eq.grid)
    cfg["equation"]["lengths"] = list(eq.lengths)
    write_manifest(outdir, "gen-data", cfg)
    ds.generate(spec, outdir / "dataset.isfn", threads=args.threads)
    return EXIT_OK


def _default_kmax(eq: sv.EquationConfig) -> int:
    n_min = min(eq.grid) // 2
    if eq.dim == 2:
        return min(64, n_min)
    return min(32 if eq.family == "kdv" else 128, n_min)


def cmd_train(args) -> int:
    dataset = ds.load(args.data)
    eq = dataset.spec.equation
    defaults = {
        "model": {"variant": args.variant, "width": 30 if eq.dim == 1 else 20,
                  "kmax": _default_kmax(eq), "hidden": 128},
        "train": {"epochs": 200, "batch_size": 32 if eq.dim == 1 else 4,
                  "learning_rate": 0.0025, "weight_decay": 1e-6,
                  "adam_epsilon": 1e-6, "scheduler_step": 100,
                  "scheduler_factor": 0.5, "clip_norm": 10.0,
                  "horizon": 20, "seed": 0},
    }
    file_cfg = load_config_file(args.config) if args.config else {}
    flags = {
        "model": {"variant": args.variant, "width": args.width, "kmax": args.kmax,
                  "hidden": args.hidden},
        "train": {"epochs": args.epochs, "batch_size": args.batch_size,
                  "learning_rate": args.lr, "horizon": args.horizon,
                  "seed": args.seed},
    }
    cfg = resolve(defaults, file_cfg, flags)
    msec, tsec = cfg["model"], cfg["train"]
    horizon = int(tsec["horizon"])
    if msec["variant"] == "fno" and horizon != 1:
        # the baseline is a single-step operator trained with the recurrent
        # loss over the configured horizon
        n_steps = 1
    else:
        n_steps = 1 if msec["variant"] == "fno" else horizon
    kmax = msec["kmax"]
    kmax = tuple(kmax) if isinstance(kmax, list) else (int(kmax),) * eq.dim
    spec = md.ModelSpec(variant=msec["variant"], d_v=1, width=int(msec["width"]),
                        kmax=kmax, n_steps=n_steps, hidden=int(msec["hidden"]))
    model = md.build(spec, seed=int(tsec["seed"]))
    tcfg = tr.TrainConfig(
        epochs=int(tsec["epochs"]), batch_size=int(tsec["batch_size"]),
        learning_rate=float(tsec["learning_rate"]),
        weight_decay=float(tsec["weight_decay"]),
        adam_epsilon=float(tsec["adam_epsilon"]),
        scheduler_step=int(tsec["scheduler_step"]),
        scheduler_factor=float(tsec["scheduler_factor"]),
        clip_norm=float(tsec["clip_norm"]), horizon=horizon,
        seed=int(tsec["seed"]))
    outdir = Path(args.out)
    cfg["model"]["kmax"] = list(kmax)
    write_manifest(outdir, "train", cfg)
    report = tr.train(model, dataset, tcfg, checkpoint_path=outdir / "model.isfm",
                      log_every=args.log_every)
    tr.write_report_csv(report, outdir / "report.csv")
    print(json.dumps({
        "checkpoint": report.checkpoint_path,
        "best_epoch": report.best_epoch,
        "best_val_loss": min(report.val_loss) if report.val_loss else None,
        "wall_time_s": round(report.wall_time, 3),
        "parameters": model.parameter_count,
    }, sort_keys=True))
    return EXIT_OK


def _rollout_initial_conditions(dataset: ds.Dataset, count: int, seed: int):
    """Fresh draws from the dataset's sampler, burned in like the data."""
    base = dataset.spec
    fresh = ds.DatasetSpec(
        equation=base.equation, n_sequences=max(count, 1), n_snapshots=2,
        dt=base.dt, sampler=base.sampler, sampler_params=base.sampler_params,
        seed=seed, validation_fraction=base.validation_fraction)
    ics = []
    for j in range(count):
        field, burn = ds.sample_initial(fresh, j)
        state = sv.SolverState(field, 0.0, base.dt)
        if burn > 0:
            state = sv.advance(base.equation, state, max(1, int(round(burn / base.dt))))
        ics.append(state.field)
    return ics


def cmd_rollout(args) -> int:
    dataset = ds.load(args.data)
    model = md.load_checkpoint(args.checkpoint)
    defaults = {"rollout": {"steps": 100, "ensemble": 1, "seed": 1000}}
    file_cfg = load_config_file(args.config) if args.config else {}
    flags = {"rollout": {"steps": args.steps, "ensemble": args.ensemble,
                         "seed": args.seed}}
    cfg = resolve(defaults, file_cfg, flags)
    rsec = cfg["rollout"]
    steps, ensemble = int(rsec["steps"]), int(rsec["ensemble"])
    outdir = Path(args.out)
    write_manifest(outdir, "rollout", cfg)

    ics = _rollout_initial_conditions(dataset, ensemble, int(rsec["seed"]))
    curve = ev.horizon_error(model, dataset.spec.equation,
                             ics, steps, dataset.spec.dt, threads=args.threads)
    ev.export_csv(curve.values, outdir / "horizon_error.csv", "horizon_error",
                  {"model": model.spec.to_dict(), "rollout": rsec})
    roll = ev.rollout(model, ics[0][..., None], steps)
    traj_spec = ds.DatasetSpec(
        equation=dataset.spec.equation, n_sequences=1,
        n_snapshots=roll.finite_steps + 1, dt=dataset.spec.dt,
        sampler=dataset.spec.sampler, sampler_params=dataset.spec.sampler_params,
        seed=int(rsec["seed"]), validation_fraction=dataset.spec.validation_fraction)
    ds.write_isfn(outdir / "rollout.isfn", traj_spec,
                  roll.states[: roll.finite_steps + 1][None])
    print(json.dumps({
        "steps": steps, "ensemble": ensemble,
        "diverged_members": curve.diverged_members,
        "truncated": bool(curve.truncated),
        "final_error": float(curve.values[-1]) if curve.values.size else None,
    }, sort_keys=True))
    return EXIT_DIVERGED if curve.truncated else EXIT_OK


def cmd_autocorr(args) -> int:
    dataset = ds.load(args.data)
    defaults = {"autocorr": {"window_start": 1000, "window_end": 4000,
                             "ensemble": 1, "seed": 2000, "source": "model"}}
    file_cfg = load_config_file(args.config) if args.config else {}
    flags = {"autocorr": {"window_start": args.window_start,
                          "window_end": args.window_end,
                          "ensemble": args.ensemble, "seed": args.seed,
                          "source": args.source}}
    cfg = resolve(defaults, file_cfg, flags)
    asec = cfg["autocorr"]
    w0, w1 = int(asec["window_start"]), int(asec["window_end"])
    ensemble = int(asec["ensemble"])
    if w1 <= w0:
        raise ValueError("window_end must exceed window_start")
    outdir = Path(args.out)
    write_manifest(outdir, "autocorr", cfg)

    ics = _rollout_initial_conditions(dataset, ensemble, int(asec["seed"]))
    windows = []
    eq = dataset.spec.equation
    for phi0 in ics:
        if asec["source"] == "model":
            model = md.load_checkpoint(args.checkpoint)
            roll = ev.rollout(model, phi0[..., None], w1)
            if roll.finite_steps < w1:
                print(json.dumps({"diverged_at": roll.finite_steps}))
                return EXIT_DIVERGED
            windows.append(roll.states[w0 + 1: w1 + 1][..., 0])
        else:
            states, valid = ev.reference_trajectory(eq, phi0, dataset.spec.dt, w1)
            if valid < w1:
                print(json.dumps({"diverged_at": valid}))
                return EXIT_DIVERGED
            windows.append(states[w0:])
    curve = ev.autocorrelation(windows)
    ev.export_csv(curve, outdir / "autocorr.csv", "autocorr",
                  {"window": [w0, w1], "source": asec["source"],
                   "dataset": dataset.spec.to_dict()})
    print(json.dumps({"k0": float(curve[0]), "length": int(curve.size)}))
    return EXIT_OK


def cmd_ist_demo(args) -> int:
    defaults = {"ist": {"s": [2.0], "c": [20.0], "grid": 512, "length": 40.0,
                        "t_max": 0.5, "snapshots": 6}}
    file_cfg = load_config_file(args.config) if args.config else {}
    flags = {"ist": {"s": args.s if args.s else None,
                     "c": args.c if args.c else None,
                     "grid": args.grid, "length": args.length,
                     "t_max": args.t_max, "snapshots": args.snapshots}}
    cfg = resolve(defaults, file_cfg, flags)
    isec = cfg["ist"]
    if args.empty:
        isec["s"], isec["c"] = [], []
    s, c = list(isec["s"]), list(isec["c"])
    if len(s) != len(c):
        raise ValueError("need one crest position per soliton speed")
    n, length = int(isec["grid"]), float(isec["length"])
    snapshots, t_max = int(isec["snapshots"]), float(isec["t_max"])
    x = np.arange(n) * (length / n)
    outdir = Path(args.out)
    write_manifest(outdir, "ist-demo", cfg)

    data = ist.soliton_scattering(s, c) if s else ist.ScatteringData(
        np.zeros(0), np.zeros(0), np.zeros(0))
    field0 = ist.reflectionless_reconstruct(data, x)
    if s:
        eigs = ist.discrete_spectrum(ist.SchrodingerProblem(-field0, length))
        print("discrete eigenvalues:", " ".join(f"{e:.6f}" for e in eigs))
    else:
        print("discrete eigenvalues: (empty spectrum)")

    dt = t_max / (snapshots - 1) if snapshots > 1 else t_max
    fields = np.empty((snapshots, n))
    for j in range(snapshots):
        fields[j] = ist.reflectionless_reconstruct(
            ist.evolve_scattering(data, j * dt), x)
    spec = ds.DatasetSpec(
        equation=sv.EquationConfig("kdv", (n,), lengths=(length,)),
        n_sequences=1, n_snapshots=snapshots, dt=dt if dt > 0 else 1.0,
        sampler="soliton_superposition",
        sampler_params={"s": s, "c": c}, seed=0)
    ds.write_isfn(outdir / "ist_fields.isfn", spec, fields[None, ..., None])
    print(json.dumps({"solitons": len(s), "written": str(outdir / "ist_fields.isfn")}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    for path in args.paths:
        raw = Path(path).read_bytes()
        magic = raw[:4]
        if magic == ds.MAGIC:
            version, header_len = struct.unpack("<II", raw[4:12])
            header = json.loads(raw[12: 12 + header_len].decode("utf-8"))
            print(json.dumps({"path": str(path), "kind": "ISFN",
                              "version": version, "header": header}, sort_keys=True))
        elif magic == md.CHECKPOINT_MAGIC:
            version, header_len = struct.unpack("<II", raw[4:12])
            header = json.loads(raw[12: 12 + header_len].decode("utf-8"))
            print(json.dumps({"path": str(path), "kind": "ISFM",
                              "version": version, "spec": header}, sort_keys=True))
        else:
            raise ds.FormatError(f"{path}: unrecognized magic {magic!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isfno",
        description="Spectral operator-learning pipeline: data generation, "
                    "training, rollout evaluation and IST demos.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a trajectory dataset")
    g.add_argument("--config")
    g.add_argument("--family", choices=sv.FAMILIES)
    g.add_argument("--grid", type=int)
    g.add_argument("--beta", type=float)
    g.add_argument("--n-seq", type=int)
    g.add_argument("--snapshots", type=int)
    g.add_argument("--dt", type=float)
    g.add_argument("--sampler", choices=ds.SAMPLERS)
    g.add_argument("--sampler-params", help="JSON object of sampler parameters")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--out", default="run")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train an operator model")
    t.add_argument("--config")
    t.add_argument("--variant", required=True, choices=md.VARIANTS)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--horizon", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--kmax", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", type=int, default=0)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="long-horizon rollout and error curve")
    r.add_argument("--config")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True, help="ISFN file defining equation and dt")
    r.add_argument("--steps", type=int)
    r.add_argument("--ensemble", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--out", default="run")
    r.set_defaults(func=cmd_rollout)

    a = sub.add_parser("autocorr", help="late-time spatial autocorrelation")
    a.add_argument("--config")
    a.add_argument("--checkpoint")
    a.add_argument("--data", required=True)
    a.add_argument("--window-start", type=int)
    a.add_argument("--window-end", type=int)
    a.add_argument("--ensemble", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--source", choices=("model", "solver"))
    a.add_argument("--threads", type=int, default=1)
    a.add_argument("--out", default="run")
    a.set_defaults(func=cmd_autocorr)

    i = sub.add_parser("ist-demo", help="soliton scattering demo")
    i.add_argument("--config")
    i.add_argument("--s", type=float, action="append",
                   help="soliton speed (repeatable)")
    i.add_argument("--c", type=float, action="append",
                   help="soliton crest position (repeatable)")
    i.add_argument("--empty", action="store_true",
                   help="demonstrate the empty-spectrum case")
    i.add_argument("--grid", type=int)
    i.add_argument("--length", type=float)
    i.add_argument("--t-max", type=float)
    i.add_argument("--snapshots", type=int)
    i.add_argument("--out", default="run")
    i.set_defaults(func=cmd_ist_demo)

    p = sub.add_parser("inspect", help="print ISFN/ISFM headers")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (sv.DivergenceError, sv.StiffnessError, ds.GenerationError,
            tr.TrainingDiverged, md.ForwardDivergenceError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ds.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
