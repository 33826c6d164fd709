"""Recurrent layers (Elman RNN, LSTM, bidirectional LSTM) and the multi-output head.

Row convention throughout: a batch of B inputs at one time step is a B x d
matrix, and a gate weight is stored as a (hidden + input) x hidden matrix
whose first ``hidden`` rows multiply y_{t-1} and whose remaining rows
multiply x_t, so ``[y_{t-1}, x_t] @ w + b`` matches the usual column-vector
form transposed.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidValue, ShapeError
from .variational import VariationalGaussian, sample_weights

CELL_KINDS = ("rnn", "lstm", "bilstm")
GATES = ("i", "f", "o", "c")


@dataclass
class NetworkConfig:
    cell_kind: str = "bilstm"
    hidden: int = 64
    input_dim: int = 1
    horizon: int = 48
    bayesian: bool = True
    prior_sigma: float = 1.0
    rho_init: float = -3.0

    def __post_init__(self):
        self.cell_kind = self.cell_kind.lower()
        if self.cell_kind not in CELL_KINDS:
            raise InvalidValue(f"cell_kind must be one of {CELL_KINDS}, got {self.cell_kind!r}")
        if self.hidden < 1 or self.input_dim < 1 or self.horizon < 1:
            raise InvalidValue("hidden, input_dim and horizon must be >= 1")

    @property
    def feature_dim(self):
        return 2 * self.hidden if self.cell_kind == "bilstm" else self.hidden


@dataclass
class LstmParams:
    w_i: ad.Node
    w_f: ad.Node
    w_o: ad.Node
    w_c: ad.Node
    b_i: ad.Node
    b_f: ad.Node
    b_o: ad.Node
    b_c: ad.Node

    def __post_init__(self):
        shapes = {w.shape for w in (self.w_i, self.w_f, self.w_o, self.w_c)}
        if len(shapes) != 1:
            raise ShapeError(f"gate weights differ in shape: {shapes}")
        hidden = self.w_i.shape[1]
        for b in (self.b_i, self.b_f, self.b_o, self.b_c):
            if b.shape != (1, hidden):
                raise ShapeError(f"bias shape {b.shape} != (1, {hidden})")

    @property
    def hidden(self):
        return self.w_i.shape[1]

    @property
    def input_dim(self):
        return self.w_i.shape[0] - self.hidden

    @classmethod
    def from_tensors(cls, tensors, prefix):
        return cls(**{f"{kind}_{g}": tensors[f"{prefix}.{kind}_{g}"]
                      for kind in ("w", "b") for g in GATES})


@dataclass
class CellState:
    c: ad.Node
    y: ad.Node

    @classmethod
    def zeros(cls, batch, hidden):
        z = np.zeros((batch, hidden))
        return cls(ad.constant(z), ad.constant(z))


def lstm_cell_step(params, x_t, prev):
    """One LSTM update; returns the new CellState."""
    x_t = x_t if isinstance(x_t, ad.Node) else ad.constant(x_t)
    if x_t.shape[1] != params.input_dim:
        raise ShapeError(f"x_t has {x_t.shape[1]} features, cell expects {params.input_dim}")
    if prev.c.shape[1] != params.hidden or prev.y.shape[1] != params.hidden:
        raise ShapeError("previous state width does not match the cell")
    yx = ad.concat_cols(prev.y, x_t)
    i = ad.sigmoid(ad.add(ad.matmul(yx, params.w_i), params.b_i))
    f = ad.sigmoid(ad.add(ad.matmul(yx, params.w_f), params.b_f))
    o = ad.sigmoid(ad.add(ad.matmul(yx, params.w_o), params.b_o))
    c_tilde = ad.tanh(ad.add(ad.matmul(yx, params.w_c), params.b_c))
    c = ad.add(ad.mul(prev.c, f), ad.mul(i, c_tilde))
    y = ad.mul(o, ad.tanh(c))
    return CellState(c, y)


def rnn_cell_step(w, b, x_t, prev_y):
    """Elman update tanh([y_{t-1}, x_t] @ w + b)."""
    x_t = x_t if isinstance(x_t, ad.Node) else ad.constant(x_t)
    prev_y = prev_y if isinstance(prev_y, ad.Node) else ad.constant(prev_y)
    if w.shape[0] != prev_y.shape[1] + x_t.shape[1]:
        raise ShapeError(f"rnn weight rows {w.shape[0]} != hidden + input")
    return ad.tanh(ad.add(ad.matmul(ad.concat_cols(prev_y, x_t), w), b))


def _sequence_nodes(sequence):
    if len(sequence) == 0:
        raise InvalidValue("sequence must be nonempty")
    return [x if isinstance(x, ad.Node) else ad.constant(x) for x in sequence]


def lstm_unroll(params, sequence):
    """Run the LSTM over ``sequence`` from zero state; returns the last output.

    Gate weights are fused into a single matrix so each step costs one
    matmul; numerically the same update as repeated :func:`lstm_cell_step`.
    """
    xs = _sequence_nodes(sequence)
    h = params.hidden
    batch = xs[0].shape[0]
    w = ad.concat_cols(params.w_i, params.w_f, params.w_o, params.w_c)
    b = ad.concat_cols(params.b_i, params.b_f, params.b_o, params.b_c)
    w_y = ad.slice_rows(w, 0, h)
    w_x = ad.slice_rows(w, h, w.shape[0])
    # input projections for all steps in one matmul
    x_all = ad.concat_rows(*xs) if len(xs) > 1 else xs[0]
    proj = ad.add(ad.matmul(x_all, w_x), b)
    c = y = None
    for t in range(len(xs)):
        z = ad.slice_rows(proj, t * batch, (t + 1) * batch) if len(xs) > 1 else proj
        if y is not None:
            z = ad.add(z, ad.matmul(y, w_y))
        cy = ad.lstm_gates(z, c)
        c = ad.slice_cols(cy, 0, h)
        y = ad.slice_cols(cy, h, 2 * h)
    return y


def rnn_unroll(w, b, sequence):
    xs = _sequence_nodes(sequence)
    h = w.shape[1]
    batch = xs[0].shape[0]
    w_y = ad.slice_rows(w, 0, h)
    w_x = ad.slice_rows(w, h, w.shape[0])
    x_all = ad.concat_rows(*xs) if len(xs) > 1 else xs[0]
    proj = ad.add(ad.matmul(x_all, w_x), b)
    y = None
    for t in range(len(xs)):
        z = ad.slice_rows(proj, t * batch, (t + 1) * batch) if len(xs) > 1 else proj
        if y is not None:
            z = ad.add(z, ad.matmul(y, w_y))
        y = ad.tanh(z)
    return y


def bilstm_forward(fwd, bwd, sequence):
    """concat(last forward output, last backward output), width 2 * hidden."""
    xs = _sequence_nodes(sequence)
    y_fwd = lstm_unroll(fwd, xs)
    y_bwd = lstm_unroll(bwd, xs[::-1])
    return ad.concat_cols(y_fwd, y_bwd)


def dense_head(w, b, features):
    """Affine regression head, no output activation."""
    features = features if isinstance(features, ad.Node) else ad.constant(features)
    if features.shape[1] != w.shape[0]:
        raise ShapeError(f"head expects {w.shape[0]} features, got {features.shape[1]}")
    return ad.add(ad.matmul(features, w), b)


# -- parameter containers ------------------------------------------------------


def tensor_shapes(config):
    """Name -> shape for every parameter tensor of a network."""
    h, d = config.hidden, config.input_dim
    shapes = {}
    directions = ("fwd", "bwd") if config.cell_kind == "bilstm" else ("fwd",)
    for prefix in directions:
        if config.cell_kind == "rnn":
            shapes[f"{prefix}.w"] = (h + d, h)
            shapes[f"{prefix}.b"] = (1, h)
        else:
            for g in GATES:
                shapes[f"{prefix}.w_{g}"] = (h + d, h)
            for g in GATES:
                shapes[f"{prefix}.b_{g}"] = (1, h)
    shapes["head.w"] = (config.feature_dim, config.horizon)
    shapes["head.b"] = (1, config.horizon)
    return shapes


def _fan_in(name, shape, config):
    if name.startswith("head"):
        return config.feature_dim
    return config.hidden + config.input_dim


class Network:
    """A recurrent encoder plus dense head, deterministic or variational."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors
        expected = tensor_shapes(config)
        if set(tensors) != set(expected):
            raise InvalidValue(f"tensor names {sorted(tensors)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(f"{name}: shape {tensors[name].shape} != {shape}")

    @classmethod
    def initialize(cls, config, rng):
        tensors = {}
        for name, shape in tensor_shapes(config).items():
            bound = 1.0 / math.sqrt(_fan_in(name, shape, config))
            mu = rng.uniform(-bound, bound, size=shape)
            if config.bayesian:
                tensors[name] = VariationalGaussian(
                    mu, np.full(shape, config.rho_init), config.prior_sigma)
            else:
                tensors[name] = ad.leaf(mu)
        return cls(config, tensors)

    def parameters(self):
        out = []
        for name in sorted(self.tensors):
            t = self.tensors[name]
            out.extend(t.parameters() if isinstance(t, VariationalGaussian) else [t])
        return out

    def variational(self):
        if not self.config.bayesian:
            return []
        return [self.tensors[name] for name in sorted(self.tensors)]

    def draw_noise(self, rng):
        return {name: rng.standard_normal(t.shape) for name, t in sorted(self.tensors.items())}

    def resolve(self, noise=None):
        """Concrete weight nodes for one forward pass.

        ``noise`` is a name -> array mapping, a numpy Generator (fresh draw),
        or None for the posterior mean. Ignored in deterministic mode.
        """
        if not self.config.bayesian:
            return dict(self.tensors)
        if isinstance(noise, np.random.Generator):
            noise = self.draw_noise(noise)
        out = {}
        for name, vg in self.tensors.items():
            out[name] = vg.mu if noise is None else sample_weights(vg, noise[name])
        return out

    def forward(self, windows, noise=None, dropout=0.0, dropout_rng=None):
        """Map windows (B x k x input_dim, or k x input_dim) to a B x H node.

        ``dropout`` applies inverted dropout to the recurrent features feeding
        the head; it is meant for training passes only.
        """
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim == 2:
            windows = windows[None]
        if windows.ndim != 3 or windows.shape[2] != self.config.input_dim:
            raise ShapeError(f"windows must be B x k x {self.config.input_dim}, got {windows.shape}")
        if windows.shape[1] == 0:
            raise InvalidValue("window has no time steps")
        w = self.resolve(noise)
        seq = [ad.constant(windows[:, t, :]) for t in range(windows.shape[1])]
        kind = self.config.cell_kind
        if kind == "rnn":
            feats = rnn_unroll(w["fwd.w"], w["fwd.b"], seq)
        elif kind == "lstm":
            feats = lstm_unroll(LstmParams.from_tensors(w, "fwd"), seq)
        else:
            feats = bilstm_forward(LstmParams.from_tensors(w, "fwd"),
                                   LstmParams.from_tensors(w, "bwd"), seq)
        if dropout > 0:
            keep = (dropout_rng.random(feats.shape) >= dropout) / (1.0 - dropout)
            feats = ad.mul(feats, ad.constant(keep))
        return dense_head(w["head.w"], w["head.b"], feats)

    # -- (de)serialisation helpers --------------------------------------------

    def state(self):
        out = {}
        for name, t in sorted(self.tensors.items()):
            if isinstance(t, VariationalGaussian):
                out[name] = {"mu": t.mu.value.copy(), "rho": t.rho.value.copy(),
                             "prior_sigma": t.prior_sigma}
            else:
                out[name] = {"value": t.value.copy()}
        return out

    def load_state(self, state):
        for name, entry in state.items():
            t = self.tensors[name]
            if isinstance(t, VariationalGaussian):
                t.mu.value[...] = entry["mu"]
                t.rho.value[...] = entry["rho"]
            else:
                t.value[...] = entry["value"]

    @classmethod
    def from_state(cls, config, state):
        tensors = {}
        for name, entry in state.items():
            if config.bayesian:
                tensors[name] = VariationalGaussian(np.asarray(entry["mu"], dtype=float),
                                                    np.asarray(entry["rho"], dtype=float),
                                                    entry.get("prior_sigma", config.prior_sigma))
            else:
                tensors[name] = ad.leaf(np.asarray(entry["value"], dtype=float))
        return cls(config, tensors)


def network_forward(network, window, noise_source=None):
    """Single-window convenience wrapper returning an H-vector of floats."""
    return network.forward(window, noise_source).value[0].copy()


def block_layout(horizon, block_size=None):
    """Split the horizon into contiguous [start, stop) blocks of ``block_size`` steps."""
    s = horizon if block_size is None else int(block_size)
    if not 1 <= s <= horizon:
        raise InvalidValue(f"block_size must lie in [1, {horizon}]")
    return [(start, min(start + s, horizon)) for start in range(0, horizon, s)]


class BlockedModel:
    """One network per horizon block; a single block is plain multi-output."""

    def __init__(self, networks, blocks):
        if len(networks) != len(blocks):
            raise InvalidValue("need one network per block")
        for net, (a, b) in zip(networks, blocks):
            if net.config.horizon != b - a:
                raise ShapeError(f"network horizon {net.config.horizon} != block width {b - a}")
        self.networks = networks
        self.blocks = blocks

    @property
    def horizon(self):
        return self.blocks[-1][1]

    @property
    def bayesian(self):
        return self.networks[0].config.bayesian

    @classmethod
    def initialize(cls, config, block_size, rng):
        blocks = block_layout(config.horizon, block_size)
        nets = []
        for a, b in blocks:
            cfg = NetworkConfig(**{**config.__dict__, "horizon": b - a})
            nets.append(Network.initialize(cfg, rng))
        return cls(nets, blocks)

    def predict(self, windows, rng=None):
        """Plain array forecast; ``rng=None`` runs every block at its posterior mean."""
        outs = [net.forward(windows, rng).value for net in self.networks]
        return np.concatenate(outs, axis=1)
