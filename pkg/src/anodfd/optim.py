from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place.

    ``params`` and ``grads`` map names to arrays. Moment buffers are created
    lazily as zeros. Returns ``state`` with ``t`` advanced by one.
    """
    if state.t < 0:
        raise ConfigError(f"Adam step counter must be >= 0, got {state.t}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ConfigError(f"gradient for {name!r} has shape {g.shape}, parameter has {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        if m.shape != theta.shape or v.shape != theta.shape:
            raise ConfigError(f"Adam moments for {name!r} do not match parameter shape {theta.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype, copy=False)
    return state


class Adam:
    """Adam over a list of named ``Parameter`` objects."""

    def __init__(self, parameters, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.parameters = list(parameters)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        params = {p.name: p.data for p in self.parameters if p.requires_grad}
        grads = {p.name: p.grad for p in self.parameters if p.requires_grad}
        adam_step(params, grads, self.state)

    def zero_grad(self):
        for p in self.parameters:
            p.zero_grad()

    def state_arrays(self):
        """Flat name -> array view of the state for checkpointing."""
        out = {"opt/t": np.asarray(self.state.t)}
        for name in sorted(self.state.m):
            out[f"opt/m/{name}"] = self.state.m[name]
            out[f"opt/v/{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays):
        names = {p.name: p for p in self.parameters}
        self.state.t = int(round(float(arrays["opt/t"])))
        self.state.m, self.state.v = {}, {}
        for key, value in arrays.items():
            for kind, store in (("opt/m/", self.state.m), ("opt/v/", self.state.v)):
                if key.startswith(kind):
                    name = key[len(kind):]
                    if name not in names:
                        raise ConfigError(f"optimizer state for unknown parameter {name!r}")
                    if value.shape != names[name].shape:
                        raise ConfigError(
                            f"optimizer state {key} has shape {value.shape}, parameter has {names[name].shape}")
                    store[name] = np.array(value, dtype=names[name].dtype)
