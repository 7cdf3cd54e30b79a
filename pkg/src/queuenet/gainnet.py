"""Learned Kalman gain network with local measurement grouping.

Each interior segment ``i`` (1-based, ``1 < i < N``) forms a group from
segments ``i-1, i, i+1``. One set of shared weights maps each group's
features to a 3-element gain row; hidden states are kept per group. The
network never sees ``N``, so a trained model runs on any section with at
least three segments.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import neural as nn
from .exceptions import GroupingError, NumericError

GROUP_SIZE = 3


@dataclass(frozen=True)
class GainNetConfig:
    fc_q: int = 8
    gru_q: int = 4
    fc_sigma: int = 8
    gru_sigma: int = 4
    fc_s_sigma: int = 8
    fc_s_meas: int = 8
    gru_s: int = 4
    fc_gain: int = 8
    fc_update: int = 8
    # physical gain = output_scale * (q_max / v_free) * raw network output
    output_scale: float = 0.03

    def __post_init__(self):
        for f in fields(self):
            if f.name != "output_scale" and getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if not self.output_scale > 0:
            raise ValueError("output_scale must be positive")

    def to_dict(self):
        return asdict(self)


def _dense_count(i, o):
    return i * o + o


def _gru_count(i, h):
    return 3 * (h * i + h * h + h)


def parameter_count(config: GainNetConfig) -> int:
    c = config
    return (
        _dense_count(1, c.fc_q) + _gru_count(c.fc_q, c.gru_q)
        + _dense_count(1, c.fc_sigma) + _gru_count(c.gru_q + c.fc_sigma, c.gru_sigma)
        + _dense_count(c.gru_sigma, c.fc_s_sigma) + _dense_count(2 * GROUP_SIZE, c.fc_s_meas)
        + _gru_count(c.fc_s_sigma + c.fc_s_meas, c.gru_s)
        + _dense_count(c.gru_sigma + c.gru_s, c.fc_gain) + _dense_count(c.fc_gain, GROUP_SIZE)
        + _dense_count(GROUP_SIZE + c.gru_s, c.fc_update) + _dense_count(c.gru_sigma + c.fc_update, c.gru_sigma)
    )


def _layout(c: GainNetConfig):
    """(kind, name, in_dim, out_dim, activation) for every block, in pipeline order."""
    G = GROUP_SIZE
    return [
        ("dense", "a.fc", 1, c.fc_q, "relu"),
        ("gru", "a.gru", c.fc_q, c.gru_q, None),
        ("dense", "b.fc", 1, c.fc_sigma, "relu"),
        ("gru", "b.gru", c.gru_q + c.fc_sigma, c.gru_sigma, None),
        ("dense", "c.fc_sigma", c.gru_sigma, c.fc_s_sigma, "relu"),
        ("dense", "c.fc_meas", 2 * G, c.fc_s_meas, "relu"),
        ("gru", "c.gru", c.fc_s_sigma + c.fc_s_meas, c.gru_s, None),
        ("dense", "d.fc_hidden", c.gru_sigma + c.gru_s, c.fc_gain, "relu"),
        ("dense", "d.fc_out", c.fc_gain, G, "identity"),
        ("dense", "e.fc_hidden", G + c.gru_s, c.fc_update, "relu"),
        ("dense", "e.fc_out", c.gru_sigma + c.fc_update, c.gru_sigma, "relu"),
    ]


@dataclass
class GainNetState:
    """Recurrent state, one row per (sequence, group)."""

    h_q: object
    h_sigma: object
    h_s: object

    @classmethod
    def zeros(cls, config: GainNetConfig, rows: int):
        return cls(np.zeros((rows, config.gru_q)), np.zeros((rows, config.gru_sigma)), np.zeros((rows, config.gru_s)))

    def detached(self):
        return GainNetState(np.array(nn.val(self.h_q)), np.array(nn.val(self.h_sigma)), np.array(nn.val(self.h_s)))


@dataclass
class GainFeatures:
    """Normalized network inputs, one row per (sequence, group)."""

    d_update: object  # (B, 1) forward update difference of the previous step
    d_evol: object  # (B, 1) forward evolution difference of the previous step
    d_meas: object  # (B, 3) grouped measurement difference
    d_innov: object  # (B, 3) grouped innovation


class GainNet:
    def __init__(self, config: GainNetConfig = GainNetConfig(), seed=0):
        self.config = config
        specs, fan_in = [], {}
        for kind, name, i, o, _ in _layout(config):
            block = nn.DenseLayer.specs(name, i, o) if kind == "dense" else nn.GruCell.specs(name, i, o)
            specs += block
            for pname, _shape in block:
                fan_in[pname] = o if pname.endswith(".U") else i
        self.store = nn.ParameterStore(specs)
        self.layers = {}
        for kind, name, i, o, act in _layout(config):
            if kind == "dense":
                self.layers[name] = nn.DenseLayer(self.store, name, i, o, act)
            else:
                self.layers[name] = nn.GruCell(self.store, name, i, o)
        nn.init_uniform(self.store, fan_in, np.random.default_rng(seed))

    @property
    def n_parameters(self) -> int:
        return self.store.size

    def initial_state(self, rows: int) -> GainNetState:
        return GainNetState.zeros(self.config, rows)

    def forward(self, tape, feats: GainFeatures, state: GainNetState):
        """Run submodules a-e; return ``(K, new_state)`` with ``K`` of shape ``(B, 3)``."""
        L = self.layers
        check = tape is None
        q = L["a.gru"].forward(tape, L["a.fc"].forward(tape, feats.d_update), state.h_q)
        if check:
            _finite(q, "a (process noise)")
        sigma_in = nn.concat(tape, [q, L["b.fc"].forward(tape, feats.d_evol)])
        sigma = L["b.gru"].forward(tape, sigma_in, state.h_sigma)
        if check:
            _finite(sigma, "b (state covariance)")
        meas = L["c.fc_meas"].forward(tape, nn.concat(tape, [feats.d_meas, feats.d_innov]))
        s_in = nn.concat(tape, [L["c.fc_sigma"].forward(tape, sigma), meas])
        s = L["c.gru"].forward(tape, s_in, state.h_s)
        if check:
            _finite(s, "c (measurement covariance)")
        gain = L["d.fc_out"].forward(tape, L["d.fc_hidden"].forward(tape, nn.concat(tape, [sigma, s])))
        if check:
            _finite(gain, "d (gain)")
        upd = L["e.fc_hidden"].forward(tape, nn.concat(tape, [gain, s]))
        h_sigma = L["e.fc_out"].forward(tape, nn.concat(tape, [sigma, upd]))
        if check:
            _finite(h_sigma, "e (hidden state update)")
        return gain, GainNetState(q, h_sigma, s)

    def compute_gain(self, feats: GainFeatures, state: GainNetState, gain_scale=1.0):
        """Inference convenience: physical gain rows and the next state."""
        k, new_state = self.forward(None, feats, state)
        return k * gain_scale, new_state

    def to_config(self):
        return self.config.to_dict()


def _finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in gain submodule {where}")


def group_index(n_segments: int) -> np.ndarray:
    """0-based ``(G, 3)`` index of each interior segment's neighbourhood."""
    if n_segments < GROUP_SIZE:
        raise GroupingError(f"grouped update needs at least 3 segments, section has {n_segments}")
    centers = np.arange(1, n_segments - 1)
    return np.stack([centers - 1, centers, centers + 1], axis=1)


def build_groups(y_t, y_prev, y_pred, n_segments: int):
    """List of ``(i, meas_diff, innovation)`` for interior segments, ``i`` 1-based."""
    y_t, y_prev, y_pred = (np.asarray(v, dtype=float) for v in (y_t, y_prev, y_pred))
    for v in (y_t, y_prev, y_pred):
        if v.shape != (n_segments,):
            raise GroupingError(f"expected vectors of length {n_segments}, got {v.shape}")
    idx = group_index(n_segments)
    meas, innov = y_t - y_prev, y_t - y_pred
    return [(int(row[1]) + 1, meas[row], innov[row]) for row in idx]


def grouped_update(x_prior: float, gains, innovations) -> float:
    """``x_prior`` plus the sum of per-group gain/innovation dot products."""
    gains = np.atleast_2d(np.asarray(gains, dtype=float))
    innovations = np.atleast_2d(np.asarray(innovations, dtype=float))
    if gains.shape[0] < 1:
        raise GroupingError("need at least one group")
    return float(x_prior + np.sum(gains * innovations))
