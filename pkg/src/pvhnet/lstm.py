"""Stacked LSTM smoother for per-frame joint vectors.

Each output frame is predicted from a sliding window of the last ``lookback``
frames. The recurrent state is reset for every window, so smoothing is
stateless across calls and independent of sequence order. Backpropagation
through the unrolled window is written out by hand.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from pvhnet.autodiff import Parameter
from pvhnet.errors import DivergedLoss, EmptyDataset, ShapeMismatch
from pvhnet.optim import AdadeltaState, adadelta_step

log = logging.getLogger(__name__)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class SmootherConfig:
    layers: int = 2
    cells: int = 1024
    lookback: int = 5
    width: int = 78
    batch_size: int = 32
    rho: float = 0.95
    epsilon: float = 1e-6
    init_seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.lookback < 1:
            raise ValueError(f"lookback must be at least 1, got {self.lookback}")
        if self.layers < 1 or self.cells < 1 or self.width < 1:
            raise ValueError("layers, cells and width must be positive")

    def to_dict(self) -> dict:
        return dict(vars(self))

    @classmethod
    def from_dict(cls, d: dict) -> "SmootherConfig":
        return cls(**d)


@dataclass
class LSTMLayer:
    """One LSTM layer with stacked gate weights.

    ``weight`` is ``(input_width + cells, 4 * cells)`` acting on ``[x, h]``;
    gate column blocks are ordered input, forget, output, candidate.
    """

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 2 or self.weight.shape[1] % 4:
            raise ShapeMismatch(f"gate weight must be (in + cells, 4 cells), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeMismatch(f"gate bias must be ({self.weight.shape[1]},), got {self.bias.shape}")
        if self.input_width < 0:
            raise ShapeMismatch("gate weight has fewer rows than cells")

    @property
    def cells(self) -> int:
        return self.weight.shape[1] // 4

    @property
    def input_width(self) -> int:
        return self.weight.shape[0] - self.cells

    @classmethod
    def init(cls, input_width: int, cells: int, rng, dtype=np.float64, forget_bias: float = 1.0):
        bound = 1.0 / math.sqrt(cells)
        w = rng.uniform(-bound, bound, (input_width + cells, 4 * cells)).astype(dtype)
        b = np.zeros(4 * cells, dtype=dtype)
        b[cells:2 * cells] = forget_bias
        return cls(w, b)


def _gates(layer: LSTMLayer, x, h):
    z = np.concatenate([x, h], axis=-1) @ layer.weight + layer.bias
    c = layer.cells
    return _sigmoid(z[..., :c]), _sigmoid(z[..., c:2 * c]), _sigmoid(z[..., 2 * c:3 * c]), np.tanh(z[..., 3 * c:])


def lstm_step(layer: LSTMLayer, x, prev_hidden, prev_cell):
    """One time step; works on single vectors or ``(B, width)`` batches."""
    x, h, c = np.asarray(x), np.asarray(prev_hidden), np.asarray(prev_cell)
    if x.shape[-1] != layer.input_width:
        raise ShapeMismatch(f"input width {x.shape[-1]} != layer input width {layer.input_width}")
    if h.shape[-1] != layer.cells or c.shape[-1] != layer.cells:
        raise ShapeMismatch(f"state width must be {layer.cells}, got {h.shape[-1]} and {c.shape[-1]}")
    i, f, o, g = _gates(layer, x, h)
    cell = f * c + i * g
    return o * np.tanh(cell), cell


def sliding_windows(frames: np.ndarray, lookback: int) -> np.ndarray:
    """``(T, lookback, W)`` windows ending at every frame, zero-padded at the start."""
    frames = np.asarray(frames)
    t, w = frames.shape
    padded = np.concatenate([np.zeros((lookback - 1, w), dtype=frames.dtype), frames])
    view = np.lib.stride_tricks.sliding_window_view(padded, lookback, axis=0)
    return np.ascontiguousarray(np.moveaxis(view, -1, 1))


class Smoother:
    """Stacked LSTM plus an affine read-out of the top hidden state.

    Inputs and targets are standardized with per-coordinate ``mean``/``std``
    taken from the training inputs; the padding of early windows is zero in
    that standardized space.
    """

    def __init__(self, config: SmootherConfig, params: dict[str, Parameter] | None = None,
                 mean=None, std=None):
        self.config = config
        dtype = np.dtype(config.dtype)
        if params is None:
            rng = np.random.default_rng(config.init_seed)
            params = {}
            width = config.width
            for l in range(config.layers):
                layer = LSTMLayer.init(width, config.cells, rng, dtype)
                params[f"lstm{l}.w"] = Parameter(f"lstm{l}.w", layer.weight)
                params[f"lstm{l}.b"] = Parameter(f"lstm{l}.b", layer.bias)
                width = config.cells
            bound = math.sqrt(3.0 / config.cells)
            params["proj.w"] = Parameter("proj.w", rng.uniform(-bound, bound, (config.cells, config.width)).astype(dtype))
            params["proj.b"] = Parameter("proj.b", np.zeros(config.width, dtype=dtype))
        self.params = params
        self.mean = np.zeros(config.width) if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = np.ones(config.width) if std is None else np.asarray(std, dtype=np.float64)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def layer(self, l: int) -> LSTMLayer:
        return LSTMLayer(self.params[f"lstm{l}.w"].data, self.params[f"lstm{l}.b"].data)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        out["stats.mean"], out["stats.std"] = self.mean, self.std
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeMismatch(f"{k}: stored {state[k].shape}, expected {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)
        self.mean = np.asarray(state["stats.mean"], dtype=np.float64)
        self.std = np.asarray(state["stats.std"], dtype=np.float64)

    def standardize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def forward_windows(self, windows: np.ndarray, keep_cache: bool = False):
        """Standardized ``(B, f, W)`` windows to standardized ``(B, W)`` outputs."""
        b, steps, _ = windows.shape
        seq = windows
        cache = []
        for l in range(self.config.layers):
            layer = self.layer(l)
            h = np.zeros((b, layer.cells), dtype=windows.dtype)
            c = np.zeros_like(h)
            hs, steps_cache = [], []
            for t in range(steps):
                x = seq[:, t]
                i, f, o, g = _gates(layer, x, h)
                c_new = f * c + i * g
                tc = np.tanh(c_new)
                h_new = o * tc
                if keep_cache:
                    steps_cache.append((x, h, c, i, f, o, g, tc))
                h, c = h_new, c_new
                hs.append(h)
            seq = np.stack(hs, axis=1)
            cache.append(steps_cache)
        top = seq[:, -1]
        out = top @ self.params["proj.w"].data + self.params["proj.b"].data
        return (out, (cache, top)) if keep_cache else out

    def backward_windows(self, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every parameter given ``dLoss/dOutput``."""
        steps_cache, top = cache
        grads = {"proj.w": top.T @ grad_out, "proj.b": grad_out.sum(axis=0)}
        steps = len(steps_cache[0])
        # gradient arriving at each step's hidden output from the layer above
        dh_above = [None] * steps
        dh_above[-1] = grad_out @ self.params["proj.w"].data.T
        for l in reversed(range(self.config.layers)):
            layer = self.layer(l)
            cells = layer.cells
            w = layer.weight
            dw = np.zeros_like(w)
            db = np.zeros_like(layer.bias)
            dh_next = np.zeros_like(steps_cache[l][0][1])
            dc_next = np.zeros_like(dh_next)
            dx_list = [None] * steps
            for t in reversed(range(steps)):
                x, h_prev, c_prev, i, f, o, g, tc = steps_cache[l][t]
                dh = dh_next if dh_above[t] is None else dh_next + dh_above[t]
                dc = dc_next + dh * o * (1.0 - tc * tc)
                dz = np.concatenate([
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dh * tc * o * (1.0 - o),
                    dc * i * (1.0 - g * g),
                ], axis=-1)
                xh = np.concatenate([x, h_prev], axis=-1)
                dw += xh.T @ dz
                db += dz.sum(axis=0)
                dxh = dz @ w.T
                dx_list[t] = dxh[:, :-cells]
                dh_next = dxh[:, -cells:]
                dc_next = dc * f
            grads[f"lstm{l}.w"], grads[f"lstm{l}.b"] = dw, db
            dh_above = dx_list
        return grads

    def window_loss(self, windows, targets):
        """MSE (mean over all coordinates) and its gradients, both in standardized units."""
        out, cache = self.forward_windows(windows, keep_cache=True)
        diff = out - targets
        loss = float(np.mean(diff * diff))
        grads = self.backward_windows(cache, (2.0 / diff.size) * diff)
        return loss, grads

    def smooth(self, frames) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.config.width:
            raise ShapeMismatch(f"frames must be (T, {self.config.width}), got {frames.shape}")
        windows = sliding_windows(self.standardize(frames).astype(self.config.dtype), self.config.lookback)
        out = self.forward_windows(windows)
        return out.astype(np.float64) * self.std + self.mean


def build_smoother(config: SmootherConfig) -> Smoother:
    return Smoother(config)


def smooth_sequence(config: SmootherConfig, model: Smoother, frames) -> np.ndarray:
    """Smoothed ``(T, 3J)`` sequence; output length equals input length."""
    if model.config.lookback != config.lookback or model.config.width != config.width:
        raise ShapeMismatch("smoother config does not match the model")
    return model.smooth(frames)


def _training_windows(model: Smoother, sequences):
    xs, ys = [], []
    for noisy, truth in sequences:
        noisy, truth = np.asarray(noisy, dtype=np.float64), np.asarray(truth, dtype=np.float64)
        if noisy.shape != truth.shape:
            raise ShapeMismatch(f"noisy {noisy.shape} and truth {truth.shape} sequences differ")
        xs.append(sliding_windows(model.standardize(noisy), model.config.lookback))
        ys.append(model.standardize(truth))
    dtype = model.config.dtype
    return np.concatenate(xs).astype(dtype), np.concatenate(ys).astype(dtype)


def train_smoother(config: SmootherConfig, sequences, epochs: int, seed: int = 0,
                   model: Smoother | None = None, state: AdadeltaState | None = None):
    """Adadelta on the windowed MSE against ground-truth joints.

    ``sequences`` holds ``(noisy, truth)`` pairs of ``(T, 3J)`` arrays.
    A fresh model takes its standardization statistics from the noisy
    inputs; a passed-in model keeps its own. Returns
    ``(model, history)``.
    """
    sequences = list(sequences)
    if not sequences or not any(len(n) for n, _ in sequences):
        raise EmptyDataset("smoother training needs at least one non-empty sequence")
    fresh = model is None
    model = model or build_smoother(config)
    if epochs <= 0:
        return model, []
    if fresh:
        stacked = np.concatenate([np.asarray(n, dtype=np.float64) for n, _ in sequences])
        model.mean = stacked.mean(axis=0)
        model.std = np.maximum(stacked.std(axis=0), 1e-6)
    x_all, y_all = _training_windows(model, sequences)
    params = model.parameters()
    state = state or AdadeltaState(rho=config.rho, epsilon=config.epsilon)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(x_all))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = model.window_loss(x_all[idx], y_all[idx])
            if not math.isfinite(loss):
                raise DivergedLoss(f"non-finite smoother loss at epoch {epoch + 1}")
            adadelta_step(params, grads, state)
            total += loss * len(idx)
        history.append(total / len(x_all))
        log.info("smoother epoch %d mse %.6g", epoch + 1, history[-1])
    return model, history
