"""Dataset generation and surrogate training.

Training runs Adam with a cosine-decayed learning rate on truncated
backpropagation through time: the training sequence is split into
``batch_size`` contiguous chunks processed in parallel, each chunk is
walked window by window, and the LSTM state is carried (detached)
across window boundaries.  The loss is the mean squared error of the
normalized outputs, all four channels weighted equally.

Nothing here shuffles the cycle ordering: closed-chain feedback only
means anything if windows keep their temporal order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import network as net
from .network import LstmState, NetworkSpec, NetworkWeights, Normalization, random_weights
from .ocp import DEFAULT_U_MAX, DEFAULT_U_MIN
from .plant import Actuation, PlantParams, PlantState, excitation_sequence, plant_step

DATASET_HEADER = ("cycle", "imep_prev", "ca50_prev", "doi_fuel", "doi_water",
                  "nvo", "imep", "ca50", "nox", "mprr")


class TrainingError(Exception):
    pass


class TrainingDivergedError(TrainingError):
    """Loss went non-finite or exploded; carries the epoch history."""

    def __init__(self, message, history):
        self.history = history
        super().__init__(message)


@dataclass
class Dataset:
    """Closed-chain cycle records.

    ``inputs[k]`` holds the measured (imep, ca50) of cycle k-1 plus the
    actuators applied at cycle k; ``outputs[k]`` the measured outputs of
    cycle k.  The train/validation split is sequential: the first
    ``train_fraction`` of cycles train, the rest validate.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    train_fraction: float = 0.8

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.outputs = np.asarray(self.outputs, dtype=float)
        if self.inputs.ndim != 2 or self.inputs.shape[1] != net.N_INPUTS:
            raise ValueError("inputs must have shape (n, 5)")
        if self.outputs.shape != (self.inputs.shape[0], net.N_OUTPUTS):
            raise ValueError("outputs must have shape (n, 4)")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")

    @property
    def n_cycles(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_train(self) -> int:
        return int(self.n_cycles * self.train_fraction)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DATASET_HEADER)
            for k in range(self.n_cycles):
                row = [k] + [format(v, ".17g") for v in self.inputs[k]] \
                    + [format(v, ".17g") for v in self.outputs[k]]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, train_fraction: float = 0.8) -> "Dataset":
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = tuple(next(rd))
            if header != DATASET_HEADER:
                raise ValueError(f"unexpected dataset header {header}")
            rows = [[float(v) for v in row[1:]] for row in rd]
        arr = np.asarray(rows, dtype=float)
        return cls(arr[:, :5], arr[:, 5:], train_fraction)


def generate_dataset(params: PlantParams, n_cycles: int, seed: int,
                     train_fraction: float = 0.8,
                     hold_range: tuple[int, int] = (2, 15)) -> Dataset:
    """Excite the plant over the full actuator box and record cycles.

    The feedback entries of each input row are the plant's *noisy*
    measured outputs of the previous cycle, exactly what the controller
    will see online.  Requires n_cycles >= 1000 so every actuator
    channel gets dense coverage.
    """
    if n_cycles < 1000:
        raise ValueError("n_cycles must be >= 1000 for meaningful coverage")
    params.validate()
    rng = np.random.default_rng(seed)
    acts = excitation_sequence(n_cycles, DEFAULT_U_MIN, DEFAULT_U_MAX, rng,
                               hold_range)

    inputs = np.empty((n_cycles, net.N_INPUTS))
    outputs = np.empty((n_cycles, net.N_OUTPUTS))
    state = PlantState()
    mid = Actuation(*((np.asarray(DEFAULT_U_MIN) + DEFAULT_U_MAX) / 2.0))
    state, prev = plant_step(state, mid, params, rng)  # priming cycle
    for k in range(n_cycles):
        inputs[k, 0] = prev.imep
        inputs[k, 1] = prev.ca50
        inputs[k, 2:] = acts[k]
        state, meas = plant_step(state, Actuation(*acts[k]), params, rng)
        outputs[k] = meas.to_array()
        prev = meas
    return Dataset(inputs, outputs, train_fraction)


@dataclass
class TrainConfig:
    window: int = 32
    batch_size: int = 16
    learning_rate: float = 0.01
    lr_min_factor: float = 0.01
    max_epochs: int = 150
    patience: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.window < 3:
            raise ValueError("BPTT window must be >= 3")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FitReport:
    """Per-output accuracy plus the epoch history.

    NRMSE is 100 * RMSE / (max - min of that output over the full
    dataset); a zero range falls back to a denominator of 1.0 so
    constant outputs report ~0 instead of dividing by zero.
    """

    rmse_train: np.ndarray
    nrmse_train: np.ndarray
    rmse_val: np.ndarray
    nrmse_val: np.ndarray
    output_range: np.ndarray
    history: list = field(default_factory=list)
    best_epoch: int = -1

    def summary(self) -> str:
        lines = ["fit report (one-step-ahead, teacher forced)"]
        for i, name in enumerate(net.OUTPUT_NAMES):
            lines.append(
                f"  {name:>5}: rmse train {self.rmse_train[i]:.4g} / "
                f"val {self.rmse_val[i]:.4g}   nrmse train "
                f"{self.nrmse_train[i]:.2f}% / val {self.nrmse_val[i]:.2f}%")
        if self.best_epoch >= 0:
            lines.append(f"  best epoch: {self.best_epoch} of {len(self.history)}")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["output", "rmse_train", "nrmse_train_pct",
                        "rmse_val", "nrmse_val_pct", "range"])
            for i, name in enumerate(net.OUTPUT_NAMES):
                w.writerow([name] + [format(v, ".17g") for v in
                                     (self.rmse_train[i], self.nrmse_train[i],
                                      self.rmse_val[i], self.nrmse_val[i],
                                      self.output_range[i])])

    def history_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for e in self.history:
                w.writerow([e.epoch] + [format(v, ".17g") for v in
                                        (e.train_loss, e.val_loss, e.lr)])


# ---------------------------------------------------------------------------
# forward / backward over one window


def _stack_layers(spec: NetworkSpec, side: str):
    idx = spec.lstm_index
    if side == "in":
        return list(range(0, idx))
    return list(range(idx + 1, len(spec.layers)))


def _dense_stack_forward(weights, layer_ids, x_flat, cache=None):
    v = x_flat
    for li in layer_ids:
        ls, lw = weights.spec.layers[li], weights.layers[li]
        post = net.dense_forward(ls, lw, v, li)
        if cache is not None:
            cache.append((li, v, post))
        v = post
    return v


def _dense_stack_backward(weights, cache, d_out, grads):
    dv = d_out
    for li, x_in, post in reversed(cache):
        ls, lw = weights.spec.layers[li], weights.layers[li]
        dpre = dv * net._activation_derivative(ls.activation, post)
        g = grads[li]
        g[0] += dpre.T @ x_in     # dW
        g[1] += dpre.sum(axis=0)  # db
        dv = dpre @ lw.w
    return dv


def window_forward(weights: NetworkWeights, x_norm: np.ndarray,
                   c0: np.ndarray, h0: np.ndarray, want_cache: bool = True):
    """Run a (B, W, 5) normalized window through the model.

    Returns (y_norm (B, W, 4), cache, c_T, h_T).  The per-step math is
    the same gate algebra as a chain of model_step calls; a unit test
    pins the equivalence.
    """
    spec = weights.spec
    b, w, _ = x_norm.shape
    li = spec.lstm_index
    lw = weights.layers[li]

    in_cache = [] if want_cache else None
    x_flat = x_norm.reshape(b * w, -1)
    x16 = _dense_stack_forward(weights, _stack_layers(spec, "in"), x_flat,
                               in_cache)
    x_seq = x16.reshape(b, w, -1)

    gi = np.empty((b, w, net.LSTM_HIDDEN))
    gf = np.empty_like(gi)
    gg = np.empty_like(gi)
    go = np.empty_like(gi)
    tanh_c = np.empty_like(gi)
    c_full = np.empty((b, w + 1, net.LSTM_HIDDEN))
    h_full = np.empty_like(c_full)
    c_full[:, 0] = c0
    h_full[:, 0] = h0
    for t in range(w):
        xt = x_seq[:, t]
        hp = h_full[:, t]
        i_t = net._sigmoid(xt @ lw.wi.T + hp @ lw.ui.T + lw.bi)
        f_t = net._sigmoid(xt @ lw.wf.T + hp @ lw.uf.T + lw.bf)
        g_t = np.tanh(xt @ lw.wg.T + hp @ lw.ug.T + lw.bg)
        o_t = net._sigmoid(xt @ lw.wo.T + hp @ lw.uo.T + lw.bo)
        c_t = f_t * c_full[:, t] + i_t * g_t
        tc = np.tanh(c_t)
        gi[:, t], gf[:, t], gg[:, t], go[:, t] = i_t, f_t, g_t, o_t
        tanh_c[:, t] = tc
        c_full[:, t + 1] = c_t
        h_full[:, t + 1] = o_t * tc

    out_cache = [] if want_cache else None
    h_flat = h_full[:, 1:].reshape(b * w, -1)
    y_flat = _dense_stack_forward(weights, _stack_layers(spec, "out"), h_flat,
                                  out_cache)
    y_norm = y_flat.reshape(b, w, -1)
    cache = None
    if want_cache:
        cache = (in_cache, x_seq, gi, gf, gg, go, tanh_c, c_full, h_full,
                 out_cache)
    return y_norm, cache, c_full[:, -1].copy(), h_full[:, -1].copy()


def window_loss_and_gradient(weights: NetworkWeights, x_norm, t_norm,
                             c0, h0):
    """Window MSE loss plus gradients w.r.t. every parameter array.

    Returns (loss, grads, c_T, h_T) where grads maps layer index to the
    list of gradient arrays in that layer's ``arrays()`` order.
    """
    spec = weights.spec
    b, w, _ = x_norm.shape
    y_norm, cache, c_t, h_t = window_forward(weights, x_norm, c0, h0)
    (in_cache, x_seq, gi, gf, gg, go, tanh_c, c_full, h_full,
     out_cache) = cache

    diff = y_norm - t_norm
    loss = float(np.mean(diff * diff))

    grads = {i: [np.zeros_like(a) for a in lw.arrays()]
             for i, lw in enumerate(weights.layers)}

    d_y = (2.0 / diff.size) * diff
    d_h_seq = _dense_stack_backward(weights, out_cache,
                                    d_y.reshape(b * w, -1), grads)
    d_h_seq = d_h_seq.reshape(b, w, -1)

    li = spec.lstm_index
    lw = weights.layers[li]
    g = grads[li]
    (dwi, dwf, dwg, dwo, dui, duf, dug, duo, dbi, dbf, dbg, dbo) = g

    dx_seq = np.empty_like(x_seq)
    dh_rec = np.zeros((b, net.LSTM_HIDDEN))
    dc_rec = np.zeros_like(dh_rec)
    for t in range(w - 1, -1, -1):
        i_t, f_t, g_t, o_t = gi[:, t], gf[:, t], gg[:, t], go[:, t]
        tc = tanh_c[:, t]
        dh = d_h_seq[:, t] + dh_rec
        d_o = dh * tc
        dpre_o = d_o * o_t * (1.0 - o_t)
        dct = dc_rec + dh * o_t * (1.0 - tc * tc)
        d_f = dct * c_full[:, t]
        dpre_f = d_f * f_t * (1.0 - f_t)
        d_i = dct * g_t
        dpre_i = d_i * i_t * (1.0 - i_t)
        d_g = dct * i_t
        dpre_g = d_g * (1.0 - g_t * g_t)
        dc_rec = dct * f_t

        xt = x_seq[:, t]
        hp = h_full[:, t]
        dwi += dpre_i.T @ xt
        dwf += dpre_f.T @ xt
        dwg += dpre_g.T @ xt
        dwo += dpre_o.T @ xt
        dui += dpre_i.T @ hp
        duf += dpre_f.T @ hp
        dug += dpre_g.T @ hp
        duo += dpre_o.T @ hp
        dbi += dpre_i.sum(axis=0)
        dbf += dpre_f.sum(axis=0)
        dbg += dpre_g.sum(axis=0)
        dbo += dpre_o.sum(axis=0)

        dx_seq[:, t] = (dpre_i @ lw.wi + dpre_f @ lw.wf
                        + dpre_g @ lw.wg + dpre_o @ lw.wo)
        dh_rec = (dpre_i @ lw.ui + dpre_f @ lw.uf
                  + dpre_g @ lw.ug + dpre_o @ lw.uo)

    _dense_stack_backward(weights, in_cache, dx_seq.reshape(b * w, -1), grads)
    return loss, grads, c_t, h_t


def gradient_vector(weights: NetworkWeights, grads: dict) -> np.ndarray:
    """Flatten a grads dict into weights.to_vector() ordering."""
    parts = []
    for i in range(len(weights.layers)):
        parts.extend(a.ravel() for a in grads[i])
    return np.concatenate(parts)


class _Adam:
    def __init__(self, arrays, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, grad_arrays, lr):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(self.arrays, grad_arrays, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _fit_normalization(inputs, outputs) -> Normalization:
    def stats(arr):
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return mean, std
    in_off, in_sc = stats(inputs)
    out_off, out_sc = stats(outputs)
    return Normalization(in_off, in_sc, out_off, out_sc)


def _chunk(arr, n_chunks):
    n = arr.shape[0]
    length = n // n_chunks
    return arr[:n_chunks * length].reshape(n_chunks, length, arr.shape[1])


def train(dataset: Dataset, spec: NetworkSpec, config: TrainConfig):
    """Fit the surrogate; returns (best NetworkWeights, FitReport).

    Deterministic for a fixed config: the seed drives initialization
    and nothing else is stochastic.  Early stopping tracks the
    validation loss and the returned weights are the best observed.
    Only the training slice ever feeds gradients; validation targets
    are touched exclusively through the evaluation pass.
    """
    n_train = dataset.n_train
    train_in = dataset.inputs[:n_train]
    train_out = dataset.outputs[:n_train]
    val_in = dataset.inputs[n_train:]
    val_out = dataset.outputs[n_train:]
    if len(val_in) < 2:
        raise ValueError("validation slice is empty; lower train_fraction")

    norm = _fit_normalization(train_in, train_out)
    weights = random_weights(spec, config.seed, norm, output_scale=0.01)

    b = min(config.batch_size, max(1, n_train // config.window))
    xn = _chunk(net.normalize_input(norm, train_in), b)
    tn = _chunk((train_out - norm.output_offset) / norm.output_scale, b)
    n_windows = xn.shape[1] // config.window
    if n_windows == 0:
        raise ValueError("training slice shorter than one BPTT window per chunk")

    bv = min(config.batch_size, max(1, len(val_in) // 8))
    xv = _chunk(net.normalize_input(norm, val_in), bv)
    tv = _chunk((val_out - norm.output_offset) / norm.output_scale, bv)

    params = weights.parameter_arrays()
    adam = _Adam(params)
    lr0 = config.learning_rate
    lr_min = lr0 * config.lr_min_factor

    history = []
    best_val = math.inf
    best_vec = weights.to_vector()
    best_epoch = -1
    for epoch in range(config.max_epochs):
        lr = lr_min + 0.5 * (lr0 - lr_min) * (
            1.0 + math.cos(math.pi * epoch / config.max_epochs))
        c = np.zeros((b, net.LSTM_HIDDEN))
        h = np.zeros_like(c)
        losses = []
        for wi in range(n_windows):
            sl = slice(wi * config.window, (wi + 1) * config.window)
            loss, grads, c, h = window_loss_and_gradient(
                weights, xn[:, sl], tn[:, sl], c, h)
            flat = []
            for i in range(len(weights.layers)):
                flat.extend(grads[i])
            adam.step(flat, lr)
            losses.append(loss)
        train_loss = float(np.mean(losses))

        yv, _, _, _ = window_forward(weights, xv, np.zeros((bv, 4)),
                                     np.zeros((bv, 4)), want_cache=False)
        val_loss = float(np.mean((yv - tv) ** 2))
        history.append(EpochStats(epoch, train_loss, val_loss, lr))

        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}", history)
        if train_loss > 1e12:
            raise TrainingDivergedError(
                f"loss exploded to {train_loss:.3g} at epoch {epoch}", history)

        if val_loss < best_val:
            best_val = val_loss
            best_vec = weights.to_vector()
            best_epoch = epoch
        elif epoch - best_epoch > config.patience:
            break

    best = weights.copy()
    best.from_vector(best_vec)
    report = evaluate(best, dataset)
    report.history = history
    report.best_epoch = best_epoch
    return best, report


def predict_sequence(weights: NetworkWeights, inputs: np.ndarray,
                     state: LstmState | None = None) -> np.ndarray:
    """Teacher-forced one-step-ahead predictions over a full sequence."""
    state = state or LstmState.zeros()
    xn = net.normalize_input(weights.norm, np.asarray(inputs, dtype=float))
    y_norm, _, _, _ = window_forward(weights, xn[None, :, :],
                                     state.c[None, :], state.h[None, :],
                                     want_cache=False)
    return net.denormalize_output(weights.norm, y_norm[0])


def evaluate(weights: NetworkWeights, dataset: Dataset) -> FitReport:
    """One-step-ahead RMSE / NRMSE per output on both splits.

    The LSTM state is warm-started by teacher forcing through the whole
    sequence from zeros, so validation metrics start from a converged
    state at the split boundary.
    """
    pred = predict_sequence(weights, dataset.inputs)
    err = pred - dataset.outputs
    n_train = dataset.n_train

    def rmse(seg):
        return np.sqrt(np.mean(seg * seg, axis=0))

    rng_full = dataset.outputs.max(axis=0) - dataset.outputs.min(axis=0)
    denom = np.where(rng_full > 1e-12, rng_full, 1.0)
    rmse_train = rmse(err[:n_train])
    rmse_val = rmse(err[n_train:])
    return FitReport(
        rmse_train=rmse_train,
        nrmse_train=100.0 * rmse_train / denom,
        rmse_val=rmse_val,
        nrmse_val=100.0 * rmse_val / denom,
        output_range=rng_full,
    )
