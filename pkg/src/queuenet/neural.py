"""Small reverse-mode autodiff over batched numpy arrays.

Only the operators needed by the gain network and the filter recursion are
provided. Trainable parameters are not graph nodes: every layer holds views
into a :class:`ParameterStore`'s flat ``theta``/``grad`` vectors, so a
backward pass leaves the gradient already aligned with the store.

Every op takes the tape as its first argument. With ``tape=None`` the op runs
on plain arrays and records nothing, which is the inference path.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .exceptions import CheckpointError, OptimizerError

CHECKPOINT_VERSION = 1


class Var:
    __slots__ = ("value", "grad", "_back")

    def __init__(self, value, back=None):
        self.value = value
        self.grad = None
        self._back = back

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Records nodes in creation order; ``backward`` walks them once in reverse."""

    def __init__(self):
        self.nodes = []

    def record(self, value, back=None) -> Var:
        v = Var(value, back)
        self.nodes.append(v)
        return v

    def leaf(self, value) -> Var:
        return self.record(np.asarray(value, dtype=float))

    def backward(self, output: Var, seed=None):
        if not self.nodes:
            raise RuntimeError("backward called before any forward pass was recorded")
        output.grad = np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=float)
        for node in reversed(self.nodes):
            if node.grad is not None and node._back is not None:
                node._back(node.grad)


def val(x):
    return x.value if isinstance(x, Var) else x


def _acc(x, g):
    if isinstance(x, Var):
        x.grad = g if x.grad is None else x.grad + g


def _unary(tape, x, y, back):
    if tape is None or not isinstance(x, Var):
        return y
    return tape.record(y, back)


def _binary(tape, a, b, y, back):
    if tape is None or not (isinstance(a, Var) or isinstance(b, Var)):
        return y
    return tape.record(y, back)


def add(tape, a, b):
    def back(g):
        _acc(a, g)
        _acc(b, g)
    return _binary(tape, a, b, val(a) + val(b), back)


def sub(tape, a, b):
    def back(g):
        _acc(a, g)
        _acc(b, -g)
    return _binary(tape, a, b, val(a) - val(b), back)


def mul(tape, a, b):
    av, bv = val(a), val(b)

    def back(g):
        _acc(a, g * bv)
        _acc(b, g * av)
    return _binary(tape, a, b, av * bv, back)


def scale(tape, x, c: float):
    return _unary(tape, x, val(x) * c, lambda g: _acc(x, g * c))


def clip(tape, x, lo, hi):
    xv = val(x)
    y = np.minimum(np.maximum(xv, lo), hi)
    return _unary(tape, x, y, lambda g: _acc(x, g * ((xv >= lo) & (xv <= hi))))


def concat(tape, xs):
    values = [val(x) for x in xs]
    y = np.concatenate(values, axis=1)
    if tape is None or not any(isinstance(x, Var) for x in xs):
        return y
    widths = np.cumsum([0] + [v.shape[1] for v in values])

    def back(g):
        for x, a, b in zip(xs, widths[:-1], widths[1:]):
            _acc(x, g[:, a:b])
    return tape.record(y, back)


def stack(tape, xs):
    """List of ``(S,)`` -> ``(S, T)``."""
    y = np.stack([val(x) for x in xs], axis=1)
    if tape is None or not any(isinstance(x, Var) for x in xs):
        return y

    def back(g):
        for k, x in enumerate(xs):
            _acc(x, g[:, k])
    return tape.record(y, back)


def gather_groups(tape, x, index):
    """``(S, N)`` with ``index`` ``(G, 3)`` -> ``(S*G, 3)``."""
    xv = val(x)
    S, N = xv.shape
    y = xv[:, index].reshape(S * index.shape[0], index.shape[1])

    def back(g):
        gx = np.zeros((S, N))
        np.add.at(gx, (slice(None), index), g.reshape(S, *index.shape))
        _acc(x, gx)
    return _unary(tape, x, y, back)


def repeat_rows(tape, x, groups: int):
    """``(S,)`` -> ``(S*groups, 1)``, each sequence value repeated per group."""
    xv = val(x)
    y = np.repeat(xv, groups)[:, None]
    return _unary(tape, x, y, lambda g: _acc(x, g.reshape(xv.size, groups).sum(axis=1)))


def group_dot_sum(tape, k, d, groups: int):
    """Per-sequence sum over groups of row-wise dot products -> ``(S,)``."""
    kv, dv = val(k), val(d)
    y = (kv * dv).sum(axis=1).reshape(-1, groups).sum(axis=1)

    def back(g):
        gr = np.repeat(g, groups)[:, None]
        _acc(k, gr * dv)
        _acc(d, gr * kv)
    return _binary(tape, k, d, y, back)


def measure(tape, model, x):
    """Expected speeds ``(S, N)`` for queue lengths ``(S,)``."""
    xv = val(x)
    y = model.expected_speeds(xv)

    def back(g):
        _acc(x, (g * model.jacobian(xv)).sum(axis=1))
    return _unary(tape, x, y, back)


def rmse_mean(tape, est, truth, eps=1e-12):
    """Mean over sequences of per-sequence RMSE; ``est``/``truth`` are ``(S, T)``."""
    ev = val(est)
    resid = ev - truth
    per_seq = np.sqrt(np.mean(resid**2, axis=1) + eps)
    y = np.array(per_seq.mean())
    S, T = ev.shape

    def back(g):
        _acc(est, g * resid / (T * S * per_seq[:, None]))
    return _unary(tape, est, y, back)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class ParameterStore:
    """Flat parameter vector with named, shaped slices and Adam moments."""

    def __init__(self, specs):
        self.slices = {}
        offset = 0
        for name, shape in specs:
            if name in self.slices:
                raise ValueError(f"duplicate parameter name {name!r}")
            n = int(np.prod(shape))
            self.slices[name] = (offset, tuple(shape))
            offset += n
        self.theta = np.zeros(offset)
        self.grad = np.zeros(offset)
        self.m = np.zeros(offset)
        self.v = np.zeros(offset)
        self.step = 0

    @property
    def size(self) -> int:
        return self.theta.size

    def _view(self, arr, name):
        off, shape = self.slices[name]
        return arr[off:off + int(np.prod(shape))].reshape(shape)

    def param(self, name):
        return self._view(self.theta, name)

    def grad_of(self, name):
        return self._view(self.grad, name)

    def zero_grad(self):
        self.grad[:] = 0.0

    def set_flat(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape != self.theta.shape:
            raise CheckpointError(f"expected {self.theta.size} parameters, got {values.size}")
        self.theta[:] = values

    def names_with(self, mask):
        out = []
        for name, (off, shape) in self.slices.items():
            if np.any(mask[off:off + int(np.prod(shape))]):
                out.append(name)
        return out


class DenseLayer:
    """``y = act(x W^T + b)`` on a batch ``(B, in_dim)``."""

    def __init__(self, store, name, in_dim, out_dim, activation="identity"):
        if activation not in ("identity", "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.name = name
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        self.W = store.param(f"{name}.W")
        self.b = store.param(f"{name}.b")
        self.gW = store.grad_of(f"{name}.W")
        self.gb = store.grad_of(f"{name}.b")

    @staticmethod
    def specs(name, in_dim, out_dim):
        return [(f"{name}.W", (out_dim, in_dim)), (f"{name}.b", (out_dim,))]

    def forward(self, tape, x):
        xv = val(x)
        if xv.shape[-1] != self.in_dim:
            raise ValueError(f"{self.name}: expected input width {self.in_dim}, got {xv.shape[-1]}")
        z = xv @ self.W.T + self.b
        y = np.maximum(z, 0.0) if self.activation == "relu" else z
        if tape is None:
            return y
        W, gW, gb, relu = self.W, self.gW, self.gb, self.activation == "relu"

        def back(g):
            if relu:
                g = g * (z > 0)
            gW[...] += g.T @ xv
            gb[...] += g.sum(axis=0)
            _acc(x, g @ W)
        return tape.record(y, back)


class GruCell:
    """Gated recurrent unit with ``h' = (1 - z) * h + z * n``.

    ``z`` and ``r`` are sigmoid gates and ``n = tanh(W_n x + U_n (r * h) + b_n)``.
    Gate blocks are stacked in the order z, r, n.
    """

    def __init__(self, store, name, in_dim, hidden_dim):
        self.name = name
        self.in_dim, self.hidden_dim = in_dim, hidden_dim
        self.W = store.param(f"{name}.W")
        self.U = store.param(f"{name}.U")
        self.b = store.param(f"{name}.b")
        self.gW = store.grad_of(f"{name}.W")
        self.gU = store.grad_of(f"{name}.U")
        self.gb = store.grad_of(f"{name}.b")

    @staticmethod
    def specs(name, in_dim, hidden_dim):
        H = hidden_dim
        return [(f"{name}.W", (3 * H, in_dim)), (f"{name}.U", (3 * H, H)), (f"{name}.b", (3 * H,))]

    def forward(self, tape, x, h):
        xv, hv = val(x), val(h)
        if xv.shape[-1] != self.in_dim or hv.shape[-1] != self.hidden_dim:
            raise ValueError(f"{self.name}: dimension mismatch {xv.shape} / {hv.shape}")
        H = self.hidden_dim
        W, U = self.W, self.U
        xw = xv @ W.T + self.b
        hu = hv @ U[: 2 * H].T
        z = _sigmoid(xw[:, :H] + hu[:, :H])
        r = _sigmoid(xw[:, H:2 * H] + hu[:, H:])
        rh = r * hv
        n = np.tanh(xw[:, 2 * H:] + rh @ U[2 * H:].T)
        y = (1.0 - z) * hv + z * n
        if tape is None:
            return y
        gW, gU, gb = self.gW, self.gU, self.gb

        def back(g):
            dz = g * (n - hv)
            dn = g * z
            dh = g * (1.0 - z)
            dan = dn * (1.0 - n * n)
            drh = dan @ U[2 * H:]
            dr = drh * hv
            dh = dh + drh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            da = np.concatenate([daz, dar, dan], axis=1)
            gW[...] += da.T @ xv
            gb[...] += da.sum(axis=0)
            gU[: 2 * H] += np.concatenate([daz, dar], axis=1).T @ hv
            gU[2 * H:] += dan.T @ rh
            _acc(x, da @ W)
            _acc(h, dh + daz @ U[:H] + dar @ U[H:2 * H])
        return tape.record(y, back)


def init_uniform(store: ParameterStore, fan_in: dict, rng: np.random.Generator):
    """Uniform in ``+-sqrt(1/fan_in)`` for every slice; ``fan_in`` maps slice name -> fan-in."""
    for name in store.slices:
        bound = math.sqrt(1.0 / fan_in[name])
        p = store.param(name)
        p[...] = rng.uniform(-bound, bound, size=p.shape)


def adam_step(store: ParameterStore, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    g = np.asarray(grads, dtype=float)
    if g.shape != store.theta.shape:
        raise OptimizerError(f"gradient length {g.size} != parameter count {store.size}")
    bad = ~np.isfinite(g)
    if bad.any():
        raise OptimizerError(f"non-finite gradient in slices: {', '.join(store.names_with(bad))}")
    store.step += 1
    t = store.step
    store.m *= beta1
    store.m += (1.0 - beta1) * g
    store.v *= beta2
    store.v += (1.0 - beta2) * g * g
    m_hat = store.m / (1.0 - beta1**t)
    v_hat = store.v / (1.0 - beta2**t)
    store.theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def clip_global_norm(g, max_norm):
    norm = float(np.sqrt(np.dot(g, g)))
    if norm > max_norm:
        g *= max_norm / norm
    return norm


def finite_difference_check(loss_fn, store: ParameterStore, indices, step=1e-5, floor=1e-6):
    """Compare taped gradients to central differences at ``indices``.

    ``loss_fn(tape)`` must return a scalar ``Var`` when given a tape and a
    plain float when given ``None``. Returns the maximum relative error.
    """
    store.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    analytic = store.grad.copy()
    worst = 0.0
    for i in indices:
        orig = store.theta[i]
        store.theta[i] = orig + step
        up = float(loss_fn(None))
        store.theta[i] = orig - step
        down = float(loss_fn(None))
        store.theta[i] = orig
        numeric = (up - down) / (2 * step)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def save_checkpoint(path, store: ParameterStore, config: dict, extra=None):
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "slices": {k: [off, list(shape)] for k, (off, shape) in store.slices.items()},
        "size": store.size,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), theta=store.theta)


def load_checkpoint(path):
    """Return ``(header, theta)``; shape checks are the caller's job."""
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            theta = np.array(data["theta"], dtype=float)
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if theta.size != header["size"]:
        raise CheckpointError(f"checkpoint declares {header['size']} parameters but holds {theta.size}")
    return header, theta
