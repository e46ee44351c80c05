"""Layers for the trajectory predictor: FC, LSTM cell, GCN, EvolveGCN cell, VAE.

Parameters are flat dicts of Tensors keyed by short names so a whole model is
one name->Tensor mapping that checkpoints can serialize.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeMismatch, Tensor, concat


def _param(rng, shape, scale=None):
    if scale is None:
        scale = 1.0 / np.sqrt(max(1, shape[0]))
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def init_fc(rng, n_in, n_out, scale=None):
    return {"W": _param(rng, (n_in, n_out), scale),
            "b": Tensor(np.zeros((1, n_out)), requires_grad=True)}


def fc(x, params, activation=None):
    """Affine map x @ W + b with optional relu."""
    if x.shape[-1] != params["W"].shape[0]:
        raise ShapeMismatch(f"fc input {x.shape} vs W {params['W'].shape}")
    out = x @ params["W"] + params["b"]
    if activation == "relu":
        out = out.relu()
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")
    return out


def init_lstm(rng, n_in, n_hidden):
    return {"Wx": _param(rng, (n_in, 4 * n_hidden)),
            "Wh": _param(rng, (n_hidden, 4 * n_hidden)),
            "b": Tensor(np.zeros((1, 4 * n_hidden)), requires_grad=True)}


def lstm_step(x, state, params):
    """One gated recurrence step; state is (h, c), both (batch, hidden)."""
    h_prev, c_prev = state
    n_hidden = params["Wh"].shape[0]
    if h_prev.shape[-1] != n_hidden or c_prev.shape[-1] != n_hidden:
        raise ShapeMismatch("lstm state width does not match parameters")
    gates = x @ params["Wx"] + h_prev @ params["Wh"] + params["b"]
    i = gates[:, :n_hidden].sigmoid()
    f = gates[:, n_hidden:2 * n_hidden].sigmoid()
    o = gates[:, 2 * n_hidden:3 * n_hidden].sigmoid()
    g = gates[:, 3 * n_hidden:].tanh()
    c = f * c_prev + i * g
    h = o * c.tanh()
    return h, (h, c)


def lstm_zero_state(n_hidden, batch=1):
    return (Tensor(np.zeros((batch, n_hidden))), Tensor(np.zeros((batch, n_hidden))))


def normalize_adjacency(adj):
    """Symmetric self-loop normalization D^-1/2 (A+I) D^-1/2 (plain numpy)."""
    adj = np.asarray(adj, dtype=float)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeMismatch(f"adjacency must be square, got {adj.shape}")
    if np.any(adj < 0):
        raise ValueError("adjacency entries must be nonnegative")
    a_hat = adj + np.eye(adj.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def gcn_layer(adj, h, w):
    """Graph convolution relu(A_hat h W); adj is a raw adjacency ndarray."""
    a_hat = Tensor(normalize_adjacency(adj))
    if h.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"gcn features {h.shape} vs weights {w.shape}")
    return (a_hat @ h @ w).relu()


@dataclass
class EgCellState:
    """Evolving GCN weight matrix plus the LSTM cell carry, both (rows, cols)."""

    weight: Tensor
    carry: Tensor

    @classmethod
    def initial(cls, weight):
        return cls(weight, Tensor(np.zeros(weight.shape)))


def init_eg_cell(rng, n_in, n_out):
    """EG cell: weight (n_in, n_out) evolved by an LSTM over its columns."""
    return {"W0": _param(rng, (n_in, n_out)), **init_lstm(rng, n_in, n_in)}


def eg_step(state: EgCellState, params) -> EgCellState:
    """Evolve the GCN weight matrix one step (columns as the LSTM batch).

    The weight matrix itself is both the LSTM input and its hidden state.
    """
    w_cols = state.weight.T  # (cols, rows): one batch row per weight column
    h, (_, c) = lstm_step(w_cols, (w_cols, state.carry.T), params)
    return EgCellState(h.T, c.T)


def init_vae(rng, n_in, n_latent, n_hidden):
    if n_latent >= n_in:
        raise ValueError(f"latent dim {n_latent} must be below input dim {n_in}")
    return {
        "enc1": init_fc(rng, n_in, n_hidden),
        "mu": init_fc(rng, n_hidden, n_latent),
        "logstd": init_fc(rng, n_hidden, n_latent),
        "dec1": init_fc(rng, n_latent, n_hidden),
        "out": init_fc(rng, n_hidden, n_in),
    }


def vae_forward(traj, params, rng=None, noise=None):
    """Encoder -> reparameterized sample -> decoder.

    Deterministic when rng and noise are both None (z = mean). A frozen noise
    array makes gradients finite-difference checkable.
    """
    hidden = fc(traj, params["enc1"], activation="relu")
    z_mean = fc(hidden, params["mu"])
    z_logstd = fc(hidden, params["logstd"])
    if noise is None and rng is not None:
        noise = rng.standard_normal(z_mean.shape)
    if noise is None:
        z_sample = z_mean
    else:
        z_sample = z_mean + z_logstd.exp() * Tensor(noise)
    dec_hidden = fc(z_sample, params["dec1"], activation="relu")
    reconstruction = fc(dec_hidden, params["out"])
    return {"z_mean": z_mean, "z_logstd": z_logstd, "z_sample": z_sample,
            "reconstruction": reconstruction}


def vae_decode(z, params):
    return fc(fc(z, params["dec1"], activation="relu"), params["out"])


def vae_kl(z_mean, z_logstd):
    """KL(q || N(0, I)) summed over coordinates."""
    var = (z_logstd * 2.0).exp()
    return 0.5 * (var + z_mean.square() - 1.0 - z_logstd * 2.0).sum()


def flatten_params(tree, prefix=""):
    """Flatten nested dicts of Tensors into {dotted.name: Tensor}."""
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_params(value, prefix=name + "."))
        else:
            flat[name] = value
    return flat


def zero_grads(params):
    for t in flatten_params(params).values():
        t.grad = None
