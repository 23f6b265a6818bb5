"""Fourier-operator model zoo.

Nine variants share a small set of building blocks:

  * vanilla Fourier layers: alpha*z + gelu(w z + b + F^-1{r . F z});
  * exponential Fourier layers whose spectral transfer is a per-mode matrix
    exponential, optionally with a channel-wise quadratic term;
  * a reduced exponential layer for KdV with mode weights r'' (kappa/kmax)^p;
  * an additive two-partition coupling (RevNet) with a closed-form inverse;
  * zero-stacking lift paired with leading-channel truncation, a pairing
    that composes to the identity exactly.

Koopman-style variants (kfno_*) lift with a learnable affine map, evolve the
latent state with a shared advancement operator and project each step with a
two-layer perceptron. The reversible variants (isfno_*) wrap the latent
evolution between a coupling map and its exact inverse, so a zero-initialized
advancement operator reproduces the input bitwise at every horizon step.
The baseline `fno` is the n=1 collapse of kfno_star, rolled out recurrently.

Checkpoints use the ISFM container: magic, version, a JSON spec echo, then
named float64 parameter blobs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import engine as eg

__all__ = [
    "ForwardDivergenceError",
    "Model",
    "ModelSpec",
    "VARIANTS",
    "build",
    "expected_parameter_count",
    "load_checkpoint",
    "lift_zero_stack",
    "project_truncate",
    "pseudo_inverse_project",
    "revnet_forward",
    "revnet_inverse",
    "save_checkpoint",
]

VARIANTS = (
    "fno",
    "kfno_star", "kfno_o", "kfno_prime",
    "isfno_star", "isfno_o", "isfno_prime",
    "isfno_kappa", "isfno_kappa3",
)

CHECKPOINT_MAGIC = b"ISFM"
CHECKPOINT_VERSION = 1

N_LAYERS_H = 3
N_LAYERS_Q = 1
N_LAYERS_A_STAR = 2
N_LAYERS_SUBMAP = 2


class ForwardDivergenceError(ArithmeticError):
    def __init__(self, stage: str):
        super().__init__(f"non-finite values produced at stage {stage!r}")
        self.stage = stage


@dataclass(frozen=True)
class ModelSpec:
    """Declarative variant description.

    `width` is the latent channel count d_z for fno/kfno variants; for
    isfno variants it is the added width d_z*, the total being d_v + d_z*.
    The coupling split uses d_za = d_v so the inverse needed for projection
    only evaluates the g sub-map.
    """

    variant: str
    d_v: int
    width: int
    kmax: tuple[int, ...]
    n_steps: int
    hidden: int = 128

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "kmax", tuple(int(k) for k in self.kmax))
        if self.variant in ("isfno_kappa", "isfno_kappa3") and len(self.kmax) != 1:
            raise ValueError("the reduced KdV variants are 1d only")
        if self.n_steps < 1:
            raise ValueError("horizon must be at least 1")
        if self.variant == "fno" and self.n_steps != 1:
            raise ValueError("the baseline fno is a single-step operator (n_steps=1)")
        if self.d_v < 1 or self.width < 1:
            raise ValueError("channel counts must be positive")

    @property
    def is_isfno(self) -> bool:
        return self.variant.startswith("isfno")

    @property
    def d_z(self) -> int:
        return self.d_v + self.width if self.is_isfno else self.width

    @property
    def d_za(self) -> int:
        return self.d_v

    @property
    def d_zb(self) -> int:
        return self.d_z - self.d_za

    @property
    def gamma(self) -> int:
        return 1 if self.variant in ("kfno_o", "isfno_o") else 0

    @property
    def advancement(self) -> str:
        if self.variant in ("fno", "kfno_star", "isfno_star"):
            return "star"
        if self.variant in ("kfno_o", "isfno_o", "kfno_prime", "isfno_prime"):
            return "exp"
        return "kappa"

    @property
    def mode_extents(self) -> tuple[int, ...]:
        return eg._mode_extents(self.kmax)

    @property
    def n_modes(self) -> int:
        return int(np.prod(self.mode_extents))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "d_v": self.d_v, "width": self.width,
            "kmax": list(self.kmax), "n_steps": self.n_steps, "hidden": self.hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(variant=d["variant"], d_v=d["d_v"], width=d["width"],
                   kmax=tuple(d["kmax"]), n_steps=d["n_steps"], hidden=d["hidden"])


# ---------------------------------------------------------------------------
# initialization


def _affine_init(rng, d_in, d_out):
    bound = 1.0 / np.sqrt(d_in)
    return (rng.uniform(-bound, bound, size=(d_in, d_out)),
            rng.uniform(-bound, bound, size=(d_out,)))


def _fourier_layer_params(rng, spec: ModelSpec, d: int) -> dict:
    w, b = _affine_init(rng, d, d)
    r = rng.uniform(-1.0, 1.0, size=spec.mode_extents + (d, d, 2)) / d
    return {"wf": w, "bf": b, "r": r}


def _submap_params(rng, spec: ModelSpec, d_in: int, d_out: int) -> dict:
    """Adapter -> two Fourier layers at width d_z* -> perceptron to d_out.

    The perceptron's final layer starts at zero so the coupling map is the
    identity at initialization (required for exact input reproduction by
    freshly built reversible variants).
    """
    d_star = spec.width
    p = {}
    if d_in != d_star:
        p["adapt.w"], p["adapt.b"] = _affine_init(rng, d_in, d_star)
    for i in range(N_LAYERS_SUBMAP):
        for key, val in _fourier_layer_params(rng, spec, d_star).items():
            p[f"fl{i}.{key}"] = val
    p["mlp.w0"], p["mlp.b0"] = _affine_init(rng, d_star, spec.hidden)
    p["mlp.w1"] = np.zeros((spec.hidden, d_out))
    p["mlp.b1"] = np.zeros(d_out)
    return p


def _advancement_params(rng, spec: ModelSpec) -> dict:
    d = spec.d_z
    if spec.advancement == "star":
        p = {}
        for i in range(N_LAYERS_A_STAR):
            for key, val in _fourier_layer_params(rng, spec, d).items():
                p[f"{i}.{key}"] = val
        return p
    if spec.advancement == "exp":
        p = {"r_lin": np.zeros(spec.mode_extents + (d, d, 2))}
        if spec.gamma:
            p["r_quad"] = np.zeros(spec.mode_extents + (d, d, 2))
        return p
    p = {"r_red": np.zeros((d, d, 2))}
    if spec.variant == "isfno_kappa":
        p["p"] = np.array(3.0)  # learnable exponent, started at the cubic law
    return p


def build(spec: ModelSpec, seed: int = 0) -> "Model":
    """Construct a model with the documented initialization rules.

    Channel-affine weights and biases are uniform(-1/sqrt(d_in), ...); the
    per-mode mixing weights of vanilla Fourier layers are uniform scaled by
    1/d; all exponential-layer weights start at zero (identity transfer); the
    final perceptron layers of the coupling sub-maps start at zero.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def put(prefix, sub):
        for k, v in sub.items():
            params[f"{prefix}.{k}"] = np.asarray(v, dtype=np.float64)

    if spec.is_isfno:
        put("R.f", _submap_params(rng, spec, spec.d_za, spec.d_zb))
        put("R.g", _submap_params(rng, spec, spec.d_zb, spec.d_za))
        put("A", _advancement_params(rng, spec))
    else:
        w, b = _affine_init(rng, spec.d_v, spec.d_z)
        params["lift.w"], params["lift.b"] = w, b
        for i in range(N_LAYERS_H):
            put(f"H.{i}", _fourier_layer_params(rng, spec, spec.d_z))
        put("A", _advancement_params(rng, spec))
        for i in range(N_LAYERS_Q):
            put(f"Q.{i}", _fourier_layer_params(rng, spec, spec.d_z))
        params["P.w0"], params["P.b0"] = _affine_init(rng, spec.d_z, spec.hidden)
        params["P.w1"], params["P.b1"] = _affine_init(rng, spec.hidden, spec.d_v)
    return Model(spec, params)


def expected_parameter_count(spec: ModelSpec) -> int:
    """Closed-form parameter count per variant.

    Building blocks (d = operating width, M = number of retained modes):
      affine(d_in, d_out)     d_in*d_out + d_out
      fourier layer at d      d*d + d + 2*M*d*d
      perceptron(d_in, h, d_out)  affine(d_in,h) + affine(h,d_out)
      advancement: star = 2 fourier layers; exp = 2*M*d*d (x2 if quadratic);
                   kappa = 2*d*d (+1 learnable exponent)
    """
    m = spec.n_modes
    d = spec.d_z

    def affine(i, o):
        return i * o + o

    def fourier(width):
        return affine(width, width) + 2 * m * width * width

    if spec.advancement == "star":
        adv = N_LAYERS_A_STAR * fourier(d)
    elif spec.advancement == "exp":
        adv = 2 * m * d * d * (2 if spec.gamma else 1)
    else:
        adv = 2 * d * d + (1 if spec.variant == "isfno_kappa" else 0)

    if spec.is_isfno:
        def submap(d_in, d_out):
            total = 0 if d_in == spec.width else affine(d_in, spec.width)
            total += N_LAYERS_SUBMAP * fourier(spec.width)
            total += affine(spec.width, spec.hidden) + affine(spec.hidden, d_out)
            return total

        return submap(spec.d_za, spec.d_zb) + submap(spec.d_zb, spec.d_za) + adv
    total = affine(spec.d_v, d)
    total += N_LAYERS_H * fourier(d) + N_LAYERS_Q * fourier(d) + adv
    total += affine(d, spec.hidden) + affine(spec.hidden, spec.d_v)
    return total


# ---------------------------------------------------------------------------
# building-block forward functions (engine tensors in, engine tensors out)


def fourier_layer(z, p, prefix, kmax, grid, alpha: int):
    spec_z = eg.fft_forward(z, kmax)
    mixed = eg.spectral_mix(spec_z, eg.SpectralWeights(p[f"{prefix}.r"], kmax))
    body = eg.gelu(eg.add(
        eg.affine_channel(z, p[f"{prefix}.wf"], p[f"{prefix}.bf"]),
        eg.fft_inverse(mixed, grid)))
    return eg.add(z, body) if alpha else body


def _exp_minus_identity(weights: eg.SpectralWeights) -> eg.SpectralWeights:
    # weights on the self-conjugate hyperplane are symmetrized first so the
    # exponential transfer commutes with realness enforcement (exact
    # semigroup on every retained mode)
    exp = eg.matrix_exp(eg.project_self_conjugate(weights))
    eye = eg._eye_pairs(exp.data.shape)
    return eg.SpectralWeights(eg.sub(exp.data, eg.constant(eye)), weights.kmax)


def exp_fourier_layer_transfer(p, spec: ModelSpec):
    """Per-forward precomputation: exp(r) - I for the layer's weight sets."""
    lin = _exp_minus_identity(eg.SpectralWeights(p["A.r_lin"], spec.kmax))
    quad = None
    if spec.gamma:
        quad = _exp_minus_identity(eg.SpectralWeights(p["A.r_quad"], spec.kmax))
    return lin, quad


def exp_fourier_layer(z, lin, quad, kmax, grid):
    spec_z = eg.fft_forward(z, kmax)
    out = eg.add(z, eg.fft_inverse(eg.spectral_mix(spec_z, lin), grid))
    if quad is not None:
        q = eg.fft_inverse(eg.spectral_mix(spec_z, quad), grid)
        out = eg.add(out, eg.square(q))
    return out


def kdv_mode_weights(p, spec: ModelSpec):
    """Stack r'' (kappa/kmax)^p over modes kappa = 0 .. kmax inclusive.

    Mode zero carries an exactly-zero weight; at kappa = kmax the weight is
    exactly r''. The exponent is either fixed at 3 or a learnable scalar.
    """
    (kmax,) = spec.kmax
    ratios = np.arange(kmax + 1) / kmax
    r_red = p["A.r_red"]
    if spec.variant == "isfno_kappa3":
        rho = eg.constant(ratios[:, None, None, None] ** 3)
        stacked = eg.mul(rho, r_red)
    else:
        log_rho = eg.constant(np.log(ratios[1:]))
        rho_pos = eg.exp_elem(eg.mul(p["A.p"], log_rho))
        rho_pos = eg.reshape(rho_pos, (kmax, 1, 1, 1))
        stacked = eg.mul(rho_pos, r_red)
        stacked = eg.concat([eg.constant(np.zeros((1,) + stacked.shape[1:])), stacked],
                            axis=0)
    return eg.SpectralWeights(stacked, (kmax + 1,))


def kdv_exp_layer_transfer(p, spec: ModelSpec):
    return _exp_minus_identity(kdv_mode_weights(p, spec)), None


def submap_apply(z, p, prefix, spec: ModelSpec, grid):
    """Adapter, two cutoff Fourier layers (no skip), perceptron to target."""
    if f"{prefix}.adapt.w" in p:
        z = eg.affine_channel(z, p[f"{prefix}.adapt.w"], p[f"{prefix}.adapt.b"])
    for i in range(N_LAYERS_SUBMAP):
        z = fourier_layer(z, p, f"{prefix}.fl{i}", spec.kmax, grid, alpha=0)
    z = eg.gelu(eg.affine_channel(z, p[f"{prefix}.mlp.w0"], p[f"{prefix}.mlp.b0"]))
    return eg.affine_channel(z, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])


def _split(z, d_za):
    d_z = z.shape[-1]
    return eg.slice_axis(z, -1, 0, d_za), eg.slice_axis(z, -1, d_za, d_z)


def revnet_forward(z, f, g):
    """a' = a + g(b + f(a)), b' = b + f(a); f and g map between partitions."""
    a, b = _split(z, f.d_in)
    fb = eg.add(b, f(a))
    a_new = eg.add(a, g(fb))
    return eg.concat([a_new, fb], axis=-1)


def revnet_inverse(z, f, g):
    """Exact inverse: a = a' - g(b'), b = b' - f(a)."""
    a_new, b_new = _split(z, f.d_in)
    a = eg.sub(a_new, g(b_new))
    b = eg.sub(b_new, f(a))
    return eg.concat([a, b], axis=-1)


class _Submap:
    """Callable wrapper carrying the partition width it consumes."""

    def __init__(self, p, prefix, spec, grid, d_in):
        self.p, self.prefix, self.spec, self.grid, self.d_in = p, prefix, spec, grid, d_in

    def __call__(self, z):
        return submap_apply(z, self.p, self.prefix, self.spec, self.grid)


def lift_zero_stack(phi, d_z: int):
    """Stack d_z - d_v zero channels onto the field."""
    pad_width = d_z - phi.shape[-1]
    zeros = np.zeros(phi.shape[:-1] + (pad_width,))
    return eg.concat([phi, eg.constant(zeros)], axis=-1)


def project_truncate(z, d_v: int):
    """Extract the leading d_v channels; exact left inverse of the lift."""
    return eg.slice_axis(z, -1, 0, d_v)


def pseudo_inverse_project(z, w, b):
    """Least-squares inverse of an affine lift z = phi w + b.

    w has shape (d_v, d_z) and must have full row rank (full column rank of
    its transpose); recovers phi = (z - b) w^T (w w^T)^{-1}.
    """
    w_t = eg.transpose2(w)
    gram = eg.matmul2(w, w_t)
    cond = np.linalg.cond(gram.data if isinstance(gram, eg.DiffTensor) else gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError("lift weight matrix is rank deficient")
    corrected = eg.sub(z, b)
    return eg.matmul2(eg.matmul2(corrected, w_t), eg.matinv(gram))


# ---------------------------------------------------------------------------
# the model


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray] = dc_field(default_factory=dict)

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def bind(self, tape: eg.Tape) -> dict[str, eg.DiffTensor]:
        """Register every parameter as a leaf on the tape."""
        return {name: tape.leaf(arr, name) for name, arr in self.params.items()}

    def _tensors(self, params):
        if params is not None:
            return params
        return {k: eg.constant(v) for k, v in self.params.items()}

    # -- forward pipelines ---------------------------------------------------

    def forward_multi(self, phi, params=None) -> list[eg.DiffTensor]:
        """All n horizon steps; phi has shape ([batch,] grid..., d_v)."""
        p = self._tensors(params)
        phi = phi if isinstance(phi, eg.DiffTensor) else eg.constant(phi)
        d_spatial = len(self.spec.kmax)
        grid = phi.shape[-d_spatial - 1: -1]
        if phi.shape[-1] != self.spec.d_v:
            raise eg.ShapeError(f"expected {self.spec.d_v} channels, got {phi.shape[-1]}")
        unbatched = len(phi.shape) == d_spatial + 1
        if unbatched:
            phi = eg.reshape(phi, (1,) + tuple(phi.shape))
        if self.spec.variant == "fno":
            outs = []
            state = phi
            for j in range(self.spec.n_steps):
                state = self._fno_step(state, p, grid, stage=f"step{j + 1}")
                outs.append(state)
        elif self.spec.is_isfno:
            outs = self._isfno_forward(phi, p, grid)
        else:
            outs = self._kfno_forward(phi, p, grid)
        if unbatched:
            outs = [eg.reshape(o, tuple(o.shape)[1:]) for o in outs]
        return outs

    def single_step(self, phi, params=None) -> eg.DiffTensor:
        return self.forward_multi(phi, params)[0]

    def _check(self, t, stage):
        if not np.all(np.isfinite(t.data)):
            raise ForwardDivergenceError(stage)
        return t

    def _advancement(self, p, grid):
        """Returns a closure applying A once, precomputing transfers."""
        spec = self.spec
        if spec.advancement == "star":
            def step(z):
                for i in range(N_LAYERS_A_STAR):
                    z = fourier_layer(z, p, f"A.{i}", spec.kmax, grid, alpha=1)
                return z
            return step
        if spec.advancement == "exp":
            lin, quad = exp_fourier_layer_transfer(p, spec)
            return lambda z: exp_fourier_layer(z, lin, quad, spec.kmax, grid)
        lin, quad = kdv_exp_layer_transfer(p, spec)
        kmax_inc = (spec.kmax[0] + 1,)
        return lambda z: exp_fourier_layer(z, lin, quad, kmax_inc, grid)

    def _fno_step(self, phi, p, grid, stage):
        spec = self.spec
        z = eg.affine_channel(phi, p["lift.w"], p["lift.b"])
        for i in range(N_LAYERS_H):
            z = fourier_layer(z, p, f"H.{i}", spec.kmax, grid, alpha=1)
        z = self._advancement(p, grid)(z)
        for i in range(N_LAYERS_Q):
            z = fourier_layer(z, p, f"Q.{i}", spec.kmax, grid, alpha=1)
        out = self._project(z, p)
        return self._check(out, stage)

    def _project(self, z, p):
        hidden = eg.gelu(eg.affine_channel(z, p["P.w0"], p["P.b0"]))
        return eg.affine_channel(hidden, p["P.w1"], p["P.b1"])

    def _latent_steps(self, z, p, grid):
        """Apply the advancement operator n times, checking each state."""
        advance = self._advancement(p, grid)
        states = []
        for j in range(self.spec.n_steps):
            z = self._check(advance(z), stage=f"A^{j + 1}")
            states.append(z)
        return states

    @staticmethod
    def _stack_steps(states):
        """Concatenate per-step states along the batch axis (exactly
        equivalent per sample; lets the shared maps run once)."""
        return eg.concat(states, axis=0) if len(states) > 1 else states[0]

    @staticmethod
    def _unstack_steps(block, n, batch):
        if n == 1:
            return [block]
        return [eg.slice_axis(block, 0, j * batch, (j + 1) * batch) for j in range(n)]

    def _kfno_forward(self, phi, p, grid):
        spec = self.spec
        batch = phi.shape[0]
        z = eg.affine_channel(phi, p["lift.w"], p["lift.b"])
        for i in range(N_LAYERS_H):
            z = fourier_layer(z, p, f"H.{i}", spec.kmax, grid, alpha=1)
        stacked = self._stack_steps(self._latent_steps(z, p, grid))
        for i in range(N_LAYERS_Q):
            stacked = fourier_layer(stacked, p, f"Q.{i}", spec.kmax, grid, alpha=1)
        projected = self._check(self._project(stacked, p), stage="P")
        return self._unstack_steps(projected, spec.n_steps, batch)

    def _isfno_forward(self, phi, p, grid):
        spec = self.spec
        batch = phi.shape[0]
        f = _Submap(p, "R.f", spec, grid, spec.d_za)
        g = _Submap(p, "R.g", spec, grid, spec.d_zb)
        z = revnet_forward(lift_zero_stack(phi, spec.d_z), f, g)
        stacked = self._stack_steps(self._latent_steps(z, p, grid))
        # with d_za = d_v only the a-partition of the inverse is needed
        a_new, b_new = _split(stacked, spec.d_za)
        a = self._check(eg.sub(a_new, g(b_new)), stage="Rinv")
        return self._unstack_steps(a, spec.n_steps, batch)

    def coupling_maps(self, grid, params=None):
        """The (f, g) pair used by the reversible wrapper, for direct tests."""
        p = self._tensors(params)
        return (_Submap(p, "R.f", self.spec, grid, self.spec.d_za),
                _Submap(p, "R.g", self.spec, grid, self.spec.d_zb))


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(model: Model, path) -> None:
    head = json.dumps(model.spec.to_dict(), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for name, arr in model.params.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an ISFM checkpoint")
        version, head_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        spec = ModelSpec.from_dict(json.loads(fh.read(head_len).decode("utf-8")))
        params: dict[str, np.ndarray] = {}
        while True:
            raw = fh.read(4)
            if not raw:
                break
            (name_len,) = struct.unpack("<I", raw)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
    model = Model(spec, params)
    reference = build(spec, seed=0)
    expected = {k: v.shape for k, v in reference.params.items()}
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        raise ValueError("checkpoint parameters do not match the spec's architecture")
    return model
