"""Vanilla recurrent and LSTM layers with per-timestep pre-activation retention."""

from __future__ import annotations

import numpy as np

from .. import autograd as ag
from ..autograd import GradMap, Tape, Var
from ..errors import DimensionError
from .base import Layer, LayerCache
from .dense import uniform_init
from .pegrad import lstm_pe_grad, rnn_pe_grad


class _Recurrent(Layer):
    has_params = True
    gates = 1

    def __init__(self, n_in: int, hidden: int, name: str, rng=None,
                 return_sequences: bool = False):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.hidden = n_in, hidden
        self.return_sequences = return_sequences
        rows = self.gates * hidden
        self.params["W"] = uniform_init(rng, (rows, hidden), hidden)
        self.params["V"] = uniform_init(rng, (rows, n_in), hidden)
        self.params["b"] = uniform_init(rng, (rows,), hidden)

    def _check(self, x: Var) -> None:
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise DimensionError(f"{self.name}: expected [t, T, {self.n_in}], got {x.shape}")

    def _cell(self, z: Var, state):
        raise NotImplementedError

    def _initial_state(self, tau: int, tape: Tape):
        return tape.constant(np.zeros((tau, self.hidden))), None

    def forward(self, tape: Tape, x: Var, cache: bool = True) -> Var:
        self._check(x)
        tau, steps = x.shape[:2]
        W = ag.transpose(self._param(tape, "W"))
        # input projection for all timesteps at once; z_t stays a per-step node
        xv = x @ ag.transpose(self._param(tape, "V")) + self._param(tape, "b")
        h, state = self._initial_state(tau, tape)
        zs, hs, outs = [], [], []
        for t in range(steps):
            z = h @ W + xv[:, t, :]
            if cache:
                tape.retain(z)
            zs.append(z)
            hs.append(h.value)
            h, state = self._cell(z, state)
            outs.append(h)
        if cache:
            xval = x.value
            self.cache = LayerCache(X=[xval[:, t, :] for t in range(steps)], Z=zs,
                                    aux={"H": hs})
        return ag.stack(outs, axis=1) if self.return_sequences else h

    def _pe_fn(self):
        raise NotImplementedError

    def pe_grads(self, grads: GradMap) -> dict[str, np.ndarray]:
        c = self._require_cache()
        dzs = [grads[z.id] for z in c.Z]
        gw, gv, gb = self._pe_fn()(dzs, c.aux["H"], c.X)
        return {f"{self.name}.W": gw, f"{self.name}.V": gv, f"{self.name}.b": gb}


class RNN(_Recurrent):
    """``z_t = W h_{t-1} + V x_t + b``, ``h_t = phi(z_t)`` with zero initial state."""

    def __init__(self, n_in, hidden, name="rnn", rng=None, activation="tanh",
                 return_sequences=False):
        super().__init__(n_in, hidden, name, rng, return_sequences)
        self.act = {"tanh": ag.tanh, "sigmoid": ag.sigmoid, "relu": ag.relu}[activation]

    def _cell(self, z, state):
        return self.act(z), None

    def _pe_fn(self):
        return rnn_pe_grad


class LSTM(_Recurrent):
    """LSTM with stacked gate weights, rows ordered forget, input, candidate, output."""

    gates = 4

    def __init__(self, n_in, hidden, name="lstm", rng=None, return_sequences=False):
        super().__init__(n_in, hidden, name, rng, return_sequences)

    def _initial_state(self, tau, tape):
        zeros = tape.constant(np.zeros((tau, self.hidden)))
        return zeros, zeros

    def _cell(self, z, c_prev):
        m = self.hidden
        f = ag.sigmoid(z[:, 0:m])
        i = ag.sigmoid(z[:, m:2 * m])
        g = ag.tanh(z[:, 2 * m:3 * m])
        o = ag.sigmoid(z[:, 3 * m:4 * m])
        c = f * c_prev + i * g
        return o * ag.tanh(c), c

    def _pe_fn(self):
        return lstm_pe_grad
