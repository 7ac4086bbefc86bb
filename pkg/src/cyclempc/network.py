"""Recurrent surrogate model of cycle-to-cycle combustion dynamics.

The model is a small stack of dense layers wrapped around a single LSTM
cell.  Per engine cycle it maps a 5-component input (previous measured
IMEP and CA50 plus the three actuator commands) to the 4 measured
outputs (IMEP, CA50, NOx, MPRR), carrying an 8-component internal state
(4 LSTM cell values followed by 4 hidden values) from cycle to cycle:

    state(k+1) = f(state(k), u(k))
    y(k)       = g(state(k), u(k))

Inputs and outputs are z-score normalized per channel; the constants
live next to the weights so a weights file is self-contained.  All
forward functions accept a trailing feature axis and broadcast over
leading batch axes.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

INPUT_NAMES = ("imep_prev", "ca50_prev", "doi_fuel", "doi_water", "nvo")
OUTPUT_NAMES = ("imep", "ca50", "nox", "mprr")

N_INPUTS = 5
N_OUTPUTS = 4
LSTM_HIDDEN = 4
N_STATES = 2 * LSTM_HIDDEN

ACTIVATIONS = ("tanh", "linear", "sigmoid")


class NetworkError(Exception):
    """Base class for surrogate-model errors."""


class LayerDimensionError(NetworkError):
    """An array fed to / produced by a layer has the wrong width."""

    def __init__(self, layer_index, message):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index}: {message}")


class NonFiniteLayerError(NetworkError):
    """A layer produced NaN/Inf values."""

    def __init__(self, layer_index):
        self.layer_index = layer_index
        super().__init__(f"non-finite values produced by layer {layer_index}")


@dataclass(frozen=True)
class LayerSpec:
    """Shape declaration for one layer.

    kind is "dense" or "lstm".  Dense layers apply ``act(W x + b)``;
    the single LSTM layer uses the standard gate structure and ignores
    ``activation``.
    """

    kind: str
    input_width: int
    output_width: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("dense", "lstm"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_width < 1 or self.output_width < 1:
            raise ValueError("layer widths must be >= 1")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer shapes for the full model.

    Validity: at least one layer, exactly one lstm layer, the lstm
    hidden width equals 4 (the carried state is 2*4), chained widths
    match, the first layer takes the 5 cycle inputs and the last layer
    emits the 4 outputs.
    """

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("NetworkSpec needs at least one layer")
        lstm_positions = [i for i, l in enumerate(self.layers) if l.kind == "lstm"]
        if len(lstm_positions) != 1:
            raise ValueError("NetworkSpec must contain exactly one lstm layer")
        if self.layers[lstm_positions[0]].output_width != LSTM_HIDDEN:
            raise ValueError(f"lstm hidden width must be {LSTM_HIDDEN}")
        if self.layers[0].input_width != N_INPUTS:
            raise ValueError(f"first layer must take {N_INPUTS} inputs")
        if self.layers[-1].output_width != N_OUTPUTS:
            raise ValueError(f"last layer must emit {N_OUTPUTS} outputs")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.output_width != b.input_width:
                raise ValueError(
                    f"width mismatch: {a.output_width} -> {b.input_width}"
                )

    @property
    def lstm_index(self) -> int:
        return next(i for i, l in enumerate(self.layers) if l.kind == "lstm")


def default_network_spec(fc_in=(24, 24, 16), fc_out=(24, 24)) -> NetworkSpec:
    """Default architecture: 5 -> fc_in -> lstm(4) -> fc_out -> 4.

    Hidden dense layers use tanh, the output layer is linear.  With the
    default widths the model has 2300 learnable parameters.
    """
    layers = []
    w = N_INPUTS
    for width in fc_in:
        layers.append(LayerSpec("dense", w, width, "tanh"))
        w = width
    layers.append(LayerSpec("lstm", w, LSTM_HIDDEN))
    w = LSTM_HIDDEN
    for width in fc_out:
        layers.append(LayerSpec("dense", w, width, "tanh"))
        w = width
    layers.append(LayerSpec("dense", w, N_OUTPUTS, "linear"))
    return NetworkSpec(tuple(layers))


@dataclass
class DenseWeights:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    def arrays(self):
        return [self.w, self.b]


@dataclass
class LstmWeights:
    """Gate parameters, input-gate/forget/candidate/output order."""

    wi: np.ndarray
    wf: np.ndarray
    wg: np.ndarray
    wo: np.ndarray
    ui: np.ndarray
    uf: np.ndarray
    ug: np.ndarray
    uo: np.ndarray
    bi: np.ndarray
    bf: np.ndarray
    bg: np.ndarray
    bo: np.ndarray

    def arrays(self):
        return [self.wi, self.wf, self.wg, self.wo,
                self.ui, self.uf, self.ug, self.uo,
                self.bi, self.bf, self.bg, self.bo]


@dataclass
class Normalization:
    """Per-channel z-score constants. Scales must be strictly positive."""

    input_offset: np.ndarray
    input_scale: np.ndarray
    output_offset: np.ndarray
    output_scale: np.ndarray

    def validate(self):
        for name, arr, n in (
            ("input_offset", self.input_offset, N_INPUTS),
            ("input_scale", self.input_scale, N_INPUTS),
            ("output_offset", self.output_offset, N_OUTPUTS),
            ("output_scale", self.output_scale, N_OUTPUTS),
        ):
            if np.asarray(arr).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if np.any(self.input_scale <= 0) or np.any(self.output_scale <= 0):
            raise ValueError("normalization scales must be strictly positive")

    @classmethod
    def identity(cls) -> "Normalization":
        return cls(np.zeros(N_INPUTS), np.ones(N_INPUTS),
                   np.zeros(N_OUTPUTS), np.ones(N_OUTPUTS))


@dataclass
class LstmState:
    """Carried model state: cell values c then hidden values h."""

    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls) -> "LstmState":
        return cls(np.zeros(LSTM_HIDDEN), np.zeros(LSTM_HIDDEN))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.c, self.h])

    @classmethod
    def from_vector(cls, x) -> "LstmState":
        x = np.asarray(x, dtype=float)
        if x.shape != (N_STATES,):
            raise ValueError(f"state vector must have shape ({N_STATES},)")
        return cls(x[:LSTM_HIDDEN].copy(), x[LSTM_HIDDEN:].copy())

    def copy(self) -> "LstmState":
        return LstmState(self.c.copy(), self.h.copy())


@dataclass
class ModelInput:
    """One cycle's model input, in physical units."""

    imep_prev: float
    ca50_prev: float
    doi_fuel: float
    doi_water: float
    nvo: float

    def to_array(self) -> np.ndarray:
        return np.array([self.imep_prev, self.ca50_prev,
                         self.doi_fuel, self.doi_water, self.nvo])

    @classmethod
    def from_array(cls, arr) -> "ModelInput":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (N_INPUTS,):
            raise ValueError(f"model input must have shape ({N_INPUTS},)")
        return cls(*(float(v) for v in arr))


@dataclass
class ModelOutput:
    """One cycle's measured/predicted outputs, in physical units."""

    imep: float
    ca50: float
    nox: float
    mprr: float

    def to_array(self) -> np.ndarray:
        return np.array([self.imep, self.ca50, self.nox, self.mprr])

    @classmethod
    def from_array(cls, arr) -> "ModelOutput":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (N_OUTPUTS,):
            raise ValueError(f"model output must have shape ({N_OUTPUTS},)")
        return cls(*(float(v) for v in arr))


@dataclass
class ModelJacobians:
    """First derivatives of one model step, physical units.

    d_state_next_d_state : (8, 8)
    d_state_next_d_input : (8, 5)
    d_output_d_state     : (4, 8)
    d_output_d_input     : (4, 5)
    """

    d_state_next_d_state: np.ndarray
    d_state_next_d_input: np.ndarray
    d_output_d_state: np.ndarray
    d_output_d_input: np.ndarray


@dataclass
class NetworkWeights:
    """Parameter container bound to a NetworkSpec plus normalization."""

    spec: NetworkSpec
    layers: list = field(default_factory=list)
    norm: Normalization = field(default_factory=Normalization.identity)

    def parameter_arrays(self) -> list:
        """Flat list of parameter arrays in serialization order."""
        out = []
        for lw in self.layers:
            out.extend(lw.arrays())
        return out

    @property
    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.parameter_arrays()))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.parameter_arrays()])

    def from_vector(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.parameter_count,):
            raise ValueError("parameter vector has wrong length")
        pos = 0
        for a in self.parameter_arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def copy(self) -> "NetworkWeights":
        return copy.deepcopy(self)


def zero_weights(spec: NetworkSpec, norm: Normalization | None = None) -> NetworkWeights:
    """All-zero parameters (useful as a structural fixture)."""
    layers = []
    for ls in spec.layers:
        if ls.kind == "dense":
            layers.append(DenseWeights(np.zeros((ls.output_width, ls.input_width)),
                                       np.zeros(ls.output_width)))
        else:
            n, m = ls.output_width, ls.input_width
            layers.append(LstmWeights(*(np.zeros((n, m)) for _ in range(4)),
                                      *(np.zeros((n, n)) for _ in range(4)),
                                      *(np.zeros(n) for _ in range(4))))
    return NetworkWeights(spec, layers, norm or Normalization.identity())


def random_weights(spec: NetworkSpec, seed: int = 0,
                   norm: Normalization | None = None,
                   output_scale: float = 1.0) -> NetworkWeights:
    """Seeded uniform init, ~1/sqrt(fan_in) scale, forget-gate bias +1.

    The final dense layer is scaled by ``output_scale`` on top; training
    passes a small value so initial predictions sit at the output mean.
    """
    rng = np.random.default_rng(seed)
    w = zero_weights(spec, norm)
    last = len(spec.layers) - 1
    for idx, (ls, lw) in enumerate(zip(spec.layers, w.layers)):
        s = 1.0 / np.sqrt(ls.input_width)
        if ls.kind == "dense":
            if idx == last:
                s *= output_scale
            lw.w[...] = rng.uniform(-s, s, lw.w.shape)
        else:
            sr = 1.0 / np.sqrt(ls.output_width)
            for g in (lw.wi, lw.wf, lw.wg, lw.wo):
                g[...] = rng.uniform(-s, s, g.shape)
            for g in (lw.ui, lw.uf, lw.ug, lw.uo):
                g[...] = rng.uniform(-sr, sr, g.shape)
            lw.bf[...] = 1.0  # keep early memory open
    return w


# ---------------------------------------------------------------------------
# forward passes


def _sigmoid(x):
    # split by sign to stay overflow-free
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _apply_activation(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "linear":
        return z
    return _sigmoid(z)


def _activation_derivative(name, post):
    # derivative expressed from the post-activation value
    if name == "tanh":
        return 1.0 - post * post
    if name == "linear":
        return np.ones_like(post)
    return post * (1.0 - post)


def _check_finite(layer_index, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteLayerError(layer_index)


def dense_forward(layer: LayerSpec, lw: DenseWeights, x: np.ndarray,
                  layer_index: int = -1) -> np.ndarray:
    """act(W x + b) with batch broadcasting over leading axes."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer.input_width:
        raise LayerDimensionError(
            layer_index, f"expected input width {layer.input_width}, got {x.shape[-1]}")
    out = _apply_activation(layer.activation, x @ lw.w.T + lw.b)
    _check_finite(layer_index, out)
    return out


def lstm_step(lw: LstmWeights, state: LstmState, x: np.ndarray,
              layer_index: int = -1):
    """One standard LSTM cell update.

    i = sig(Wi x + Ui h + bi)      f = sig(Wf x + Uf h + bf)
    g = tanh(Wg x + Ug h + bg)     o = sig(Wo x + Uo h + bo)
    c+ = f*c + i*g                 h+ = o*tanh(c+)
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != lw.wi.shape[1]:
        raise LayerDimensionError(
            layer_index, f"expected input width {lw.wi.shape[1]}, got {x.shape[-1]}")
    c, h = state.c, state.h
    i = _sigmoid(x @ lw.wi.T + h @ lw.ui.T + lw.bi)
    f = _sigmoid(x @ lw.wf.T + h @ lw.uf.T + lw.bf)
    g = np.tanh(x @ lw.wg.T + h @ lw.ug.T + lw.bg)
    o = _sigmoid(x @ lw.wo.T + h @ lw.uo.T + lw.bo)
    c_next = f * c + i * g
    h_next = o * np.tanh(c_next)
    _check_finite(layer_index, c_next)
    _check_finite(layer_index, h_next)
    return LstmState(c_next, h_next)


def normalize_input(norm: Normalization, u: np.ndarray) -> np.ndarray:
    return (np.asarray(u, dtype=float) - norm.input_offset) / norm.input_scale


def denormalize_output(norm: Normalization, y_n: np.ndarray) -> np.ndarray:
    return np.asarray(y_n, dtype=float) * norm.output_scale + norm.output_offset


def model_step_arrays(weights: NetworkWeights, state: LstmState, u: np.ndarray):
    """Raw one-cycle step on arrays: returns (next LstmState, outputs).

    ``u`` is physical, shape (..., 5); outputs are physical (..., 4).
    Batch axes broadcast through every layer.
    """
    spec = weights.spec
    v = normalize_input(weights.norm, u)
    next_state = state
    for idx, (ls, lw) in enumerate(zip(spec.layers, weights.layers)):
        if ls.kind == "dense":
            v = dense_forward(ls, lw, v, idx)
        else:
            next_state = lstm_step(lw, state, v, idx)
            v = next_state.h
    y = denormalize_output(weights.norm, v)
    return next_state, y


def model_step(weights: NetworkWeights, state: LstmState, u: ModelInput):
    """One cycle of the surrogate: (state, u) -> (next state, output).

    Pure function of its arguments; repeated calls give identical
    results.  Raises LayerDimensionError / NonFiniteLayerError with the
    offending layer index.
    """
    next_state, y = model_step_arrays(weights, state, u.to_array())
    return next_state, ModelOutput.from_array(y)


# ---------------------------------------------------------------------------
# analytic jacobians (forward accumulation, 13 seed directions)


def model_jacobians(weights: NetworkWeights, state: LstmState,
                    u: ModelInput) -> ModelJacobians:
    """Exact first derivatives of one step at (state, u), physical units.

    Forward-mode accumulation: every intermediate carries a (width, 13)
    sensitivity block over seed directions [c(4), h(4), u(5)].
    """
    spec = weights.spec
    nd = N_STATES + N_INPUTS
    norm = weights.norm

    u_arr = u.to_array()
    v = normalize_input(norm, u_arr)
    jv = np.zeros((N_INPUTS, nd))
    jv[:, N_STATES:] = np.diag(1.0 / norm.input_scale)

    c, h = state.c, state.h
    jc = np.zeros((LSTM_HIDDEN, nd))
    jc[:, :LSTM_HIDDEN] = np.eye(LSTM_HIDDEN)
    jh = np.zeros((LSTM_HIDDEN, nd))
    jh[:, LSTM_HIDDEN:N_STATES] = np.eye(LSTM_HIDDEN)

    jc_next = jh_next = None
    for idx, (ls, lw) in enumerate(zip(spec.layers, weights.layers)):
        if ls.kind == "dense":
            pre = lw.w @ v + lw.b
            post = _apply_activation(ls.activation, pre)
            dact = _activation_derivative(ls.activation, post)
            jv = dact[:, None] * (lw.w @ jv)
            v = post
        else:
            pre_i = lw.wi @ v + lw.ui @ h + lw.bi
            pre_f = lw.wf @ v + lw.uf @ h + lw.bf
            pre_g = lw.wg @ v + lw.ug @ h + lw.bg
            pre_o = lw.wo @ v + lw.uo @ h + lw.bo
            gi = _sigmoid(pre_i)
            gf = _sigmoid(pre_f)
            gg = np.tanh(pre_g)
            go = _sigmoid(pre_o)

            j_pre_i = lw.wi @ jv + lw.ui @ jh
            j_pre_f = lw.wf @ jv + lw.uf @ jh
            j_pre_g = lw.wg @ jv + lw.ug @ jh
            j_pre_o = lw.wo @ jv + lw.uo @ jh
            j_i = (gi * (1 - gi))[:, None] * j_pre_i
            j_f = (gf * (1 - gf))[:, None] * j_pre_f
            j_g = (1 - gg * gg)[:, None] * j_pre_g
            j_o = (go * (1 - go))[:, None] * j_pre_o

            c_next = gf * c + gi * gg
            jc_next = (gf[:, None] * jc + c[:, None] * j_f
                       + gi[:, None] * j_g + gg[:, None] * j_i)
            tc = np.tanh(c_next)
            j_tc = (1 - tc * tc)[:, None] * jc_next
            h_next = go * tc
            jh_next = go[:, None] * j_tc + tc[:, None] * j_o

            v = h_next
            jv = jh_next

    jy = norm.output_scale[:, None] * jv
    jx_next = np.vstack([jc_next, jh_next])
    return ModelJacobians(
        d_state_next_d_state=jx_next[:, :N_STATES].copy(),
        d_state_next_d_input=jx_next[:, N_STATES:].copy(),
        d_output_d_state=jy[:, :N_STATES].copy(),
        d_output_d_input=jy[:, N_STATES:].copy(),
    )
