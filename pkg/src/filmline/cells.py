"""LSTM and GRU cell steps built from the autodiff primitives.

Both cells use separate per-gate weight matrices so the parameter layout maps
one-to-one onto the textbook gate equations. Inputs are [batch, in] rows with
[batch, hidden] states; single rows work too via a leading batch of 1 handled
by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tensor, bias_add, matmul, mul, sigmoid, sub, tanh


def _param(rng: np.random.Generator, rows: int, cols: int, scds: float = 0.1) -> Tensor:
    return Tensor(rng.standard_normal((rows, cols)) * scds, requires_grad=True)


@dataclass
class LstmParams:
    w_xi: Tensor
    w_hi: Tensor
    b_i: Tensor
    w_xf: Tensor
    w_hf: Tensor
    b_f: Tensor
    w_xg: Tensor
    w_hg: Tensor
    b_g: Tensor
    w_xo: Tensor
    w_ho: Tensor
    b_o: Tensor

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator) -> "LstmParams":
        s = 1.0 / np.sqrt(max(in_dim, hidden))
        kw = {}
        for gate in "ifgo":
            kw[f"w_x{gate}"] = _param(rng, in_dim, hidden, s)
            kw[f"w_h{gate}"] = _param(rng, hidden, hidden, s)
            kw[f"b_{gate}"] = Tensor(np.zeros(hidden), requires_grad=True)
        return cls(**kw)

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class GruParams:
    w_xz: Tensor
    w_hz: Tensor
    b_z: Tensor
    w_xr: Tensor
    w_hr: Tensor
    b_r: Tensor
    w_xn: Tensor
    w_hn: Tensor
    b_n: Tensor

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator) -> "GruParams":
        s = 1.0 / np.sqrt(max(in_dim, hidden))
        kw = {}
        for gate in "zrn":
            kw[f"w_x{gate}"] = _param(rng, in_dim, hidden, s)
            kw[f"w_h{gate}"] = _param(rng, hidden, hidden, s)
            kw[f"b_{gate}"] = Tensor(np.zeros(hidden), requires_grad=True)
        return cls(**kw)

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]


def _gate(x: Tensor, h: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    return bias_add(matmul(x, wx) + matmul(h, wh), b)


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams):
    """One LSTM step: sigmoid input/forget/output gates, tanh candidate."""
    i = sigmoid(_gate(x_t, h_prev, p.w_xi, p.w_hi, p.b_i))
    f = sigmoid(_gate(x_t, h_prev, p.w_xf, p.w_hf, p.b_f))
    g = tanh(_gate(x_t, h_prev, p.w_xg, p.w_hg, p.b_g))
    o = sigmoid(_gate(x_t, h_prev, p.w_xo, p.w_ho, p.b_o))
    c_t = mul(f, c_prev) + mul(i, g)
    h_t = mul(o, tanh(c_t))
    return h_t, c_t


def gru_cell(x_t: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One GRU step; update gate z = 1 keeps the previous hidden state."""
    z = sigmoid(_gate(x_t, h_prev, p.w_xz, p.w_hz, p.b_z))
    r = sigmoid(_gate(x_t, h_prev, p.w_xr, p.w_hr, p.b_r))
    n = tanh(bias_add(matmul(x_t, p.w_xn) + matmul(mul(r, h_prev), p.w_hn), p.b_n))
    one_minus_z = sub(Tensor(np.ones_like(z.data)), z)
    return mul(z, h_prev) + mul(one_minus_z, n)
