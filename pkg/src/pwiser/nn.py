"""Dense tensor ops with a reverse-mode tape, parameter storage and optimizers.

Every op takes an optional :class:`Tape`. With a tape the op records a closure
that, during :meth:`Tape.backward`, reads the gradient of its output and adds
the gradients of its inputs. Without a tape the op only computes the forward
value (inference).
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import StateError

SIGMOID_EPS = 1e-7


class Var:
    """A value on the tape together with its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=True):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def accumulate_rows(self, idx, g):
        """Add row gradients ``g[k]`` into row ``idx[k]``."""
        full = np.zeros(self.value.shape)
        np.add.at(full, idx, g)
        self.accumulate(full)


class ParamVar(Var):
    """A parameter leaf; gradients go straight into the store's buffer."""

    __slots__ = ("store", "name")

    def __init__(self, store, name):
        super().__init__(store[name], requires_grad=True)
        self.store = store
        self.name = name
        self.grad = store.grad(name)

    def accumulate(self, g):
        np.add(self.grad, g, out=self.grad)
        self.store.has_grad = True

    def accumulate_rows(self, idx, g):
        np.add.at(self.grad, idx, g)
        self.store.has_grad = True


def constant(value) -> Var:
    return Var(np.asarray(value, dtype=np.float64), requires_grad=False)


class Tape:
    """Ordered record of backward closures."""

    def __init__(self):
        self._ops = []

    def __len__(self):
        return len(self._ops)

    def record(self, fn):
        self._ops.append(fn)

    def backward(self, seeds):
        """Propagate ``seeds`` (pairs of ``(var, dL/dvar)``) back to every leaf.

        Closures run in exact reverse order of recording. The tape is consumed.
        """
        for var, g in seeds:
            var.accumulate(np.asarray(g, dtype=np.float64))
        for fn in reversed(self._ops):
            fn()
        self._ops.clear()


class ParamStore:
    """Named float64 parameters with same-shaped gradient buffers.

    Iteration order is sorted by name. ``decay`` marks which tensors receive
    weight decay (dense weights and embeddings, not biases).
    """

    def __init__(self):
        self._data = {}
        self._grads = {}
        self._decay = {}
        self.has_grad = False

    def add(self, name, value, decay=True):
        if name in self._data:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        self._data[name] = value
        self._grads[name] = np.zeros_like(value)
        self._decay[name] = decay
        return value

    def __getitem__(self, name):
        return self._data[name]

    def __contains__(self, name):
        return name in self._data

    def __len__(self):
        return len(self._data)

    def names(self):
        return sorted(self._data)

    def items(self):
        return [(k, self._data[k]) for k in self.names()]

    def grad(self, name):
        return self._grads[name]

    def decays(self, name):
        return self._decay[name]

    def num_values(self):
        return sum(v.size for v in self._data.values())

    def var(self, name) -> ParamVar:
        return ParamVar(self, name)

    def zero_grad(self):
        for g in self._grads.values():
            g.fill(0.0)
        self.has_grad = False

    def set(self, name, value):
        """Overwrite a parameter in place (shape must match)."""
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._data[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {self._data[name].shape}")
        self._data[name][...] = value

    def state_dict(self):
        return {k: v.copy() for k, v in self.items()}

    def load_state_dict(self, state):
        missing = set(self._data) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            self.set(k, v)


# -- initialisation ----------------------------------------------------------

def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def embedding_normal(rng, rows, dim, std=0.01):
    return rng.normal(0.0, std, size=(rows, dim))


# -- ops ---------------------------------------------------------------------

def embed_lookup(tape, table: Var, indices, flatten=False) -> Var:
    """Gather rows of ``table``; backward scatter-adds into the rows used.

    With 2-D ``indices`` of shape (n, F) and ``flatten=True`` the result is the
    concatenation of the F looked-up rows, shape (n, F * d).
    """
    indices = np.asarray(indices)
    rows = table.value.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= rows):
        raise IndexError(f"embedding index out of range [0, {rows})")
    value = table.value[indices]
    if flatten:
        value = value.reshape(indices.shape[0], -1)
    out = Var(value)
    if tape is not None and table.requires_grad:
        dim = table.value.shape[1]

        def backward():
            if out.grad is None:
                return
            table.accumulate_rows(indices.reshape(-1), out.grad.reshape(-1, dim))

        tape.record(backward)
    return out


def dense(tape, x: Var, W: Var, b: Var, activation="none") -> Var:
    """``act(x @ W + b)`` with ``activation`` in {"relu", "none"}."""
    if activation not in ("relu", "none"):
        raise ValueError(f"unknown activation {activation!r}")
    xv, Wv, bv = x.value, W.value, b.value
    if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[0] or bv.shape != (Wv.shape[1],):
        raise ValueError(f"shape mismatch: x{xv.shape} W{Wv.shape} b{bv.shape}")
    z = xv @ Wv + bv
    if activation == "relu":
        mask = z > 0
        z = np.where(mask, z, 0.0)
    out = Var(z)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            if activation == "relu":
                g = np.where(mask, g, 0.0)
            if W.requires_grad:
                W.accumulate(xv.T @ g)
            if b.requires_grad:
                b.accumulate(g.sum(axis=0))
            if x.requires_grad:
                x.accumulate(g @ Wv.T)

        tape.record(backward)
    return out


def softmax(tape, logits: Var) -> Var:
    """Row-wise softmax, max-subtracted for stability."""
    z = logits.value
    if z.ndim != 2 or z.shape[1] < 1:
        raise ValueError(f"softmax expects an n x E matrix, got {z.shape}")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    out = Var(p)
    if tape is not None and logits.requires_grad:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            logits.accumulate(p * (g - np.sum(g * p, axis=1, keepdims=True)))

        tape.record(backward)
    return out


def sigmoid(tape, x: Var) -> Var:
    """Logistic function, clamped to [eps, 1 - eps] so outputs stay inside (0, 1)."""
    z = x.value
    p = np.empty_like(z)
    pos = z >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    p[~pos] = ez / (1.0 + ez)
    p = np.clip(p, SIGMOID_EPS, 1.0 - SIGMOID_EPS)
    out = Var(p)
    if tape is not None and x.requires_grad:
        def backward():
            if out.grad is not None:
                x.accumulate(out.grad * p * (1.0 - p))

        tape.record(backward)
    return out


def multiply(tape, a: Var, b: Var) -> Var:
    out = Var(a.value * b.value)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            if a.requires_grad:
                a.accumulate(out.grad * b.value)
            if b.requires_grad:
                b.accumulate(out.grad * a.value)

        tape.record(backward)
    return out


def expert_bank(tape, x: Var, Ws, bs, activation="relu") -> Var:
    """Apply E dense layers at once, returning an (n, E, h) stack.

    ``x`` is either a shared (n, d) input or a per-expert (n, E, d) stack.
    Each ``Ws[e]``/``bs[e]`` stays a separate parameter; the shared-input case
    runs as a single matrix product over the concatenated weights.
    """
    if activation not in ("relu", "none"):
        raise ValueError(f"unknown activation {activation!r}")
    E = len(Ws)
    W_stack = np.stack([W.value for W in Ws])  # E x d x h
    b_stack = np.stack([b.value for b in bs])  # E x h
    _, d, h = W_stack.shape
    xv = x.value
    if xv.ndim == 2:
        if xv.shape[1] != d:
            raise ValueError(f"shape mismatch: x{xv.shape} W{W_stack.shape}")
        W_all = W_stack.transpose(1, 0, 2).reshape(d, E * h)
        z = (xv @ W_all).reshape(-1, E, h) + b_stack
    else:
        if xv.shape[1:] != (E, d):
            raise ValueError(f"shape mismatch: x{xv.shape} W{W_stack.shape}")
        z = np.matmul(xv.transpose(1, 0, 2), W_stack).transpose(1, 0, 2) + b_stack
    if activation == "relu":
        mask = z > 0
        z = np.where(mask, z, 0.0)
    out = Var(z)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            if activation == "relu":
                g = np.where(mask, g, 0.0)
            gb = g.sum(axis=0)
            if xv.ndim == 2:
                g_all = g.reshape(-1, E * h)
                gW = (xv.T @ g_all).reshape(d, E, h).transpose(1, 0, 2)
                if x.requires_grad:
                    x.accumulate(g_all @ W_all.T)
            else:
                gt = g.transpose(1, 0, 2)  # E x n x h
                gW = np.matmul(xv.transpose(1, 2, 0), gt)
                if x.requires_grad:
                    x.accumulate(np.matmul(gt, W_stack.transpose(0, 2, 1)).transpose(1, 0, 2))
            for e in range(E):
                if Ws[e].requires_grad:
                    Ws[e].accumulate(gW[e])
                if bs[e].requires_grad:
                    bs[e].accumulate(gb[e])

        tape.record(backward)
    return out


def mixture(tape, gate: Var, experts: Var, select=None) -> Var:
    """Gate-weighted sum over an (n, E, h) expert stack.

    ``select`` optionally picks (and orders) the experts the gate covers.
    """
    stacked = experts.value if select is None else experts.value[:, select]
    gv = gate.value
    if gv.shape[1] != stacked.shape[1]:
        raise ValueError(f"gate width {gv.shape[1]} != {stacked.shape[1]} experts")
    out = Var(np.einsum("ne,neh->nh", gv, stacked))
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            if gate.requires_grad:
                gate.accumulate(np.einsum("nh,neh->ne", g, stacked))
            if experts.requires_grad:
                ge = gv[:, :, None] * g[:, None, :]
                if select is None:
                    experts.accumulate(ge)
                else:
                    full = np.zeros(experts.value.shape)
                    full[:, select] = ge
                    experts.accumulate(full)

        tape.record(backward)
    return out


def squeeze_column(tape, x: Var) -> Var:
    """(n, 1) -> (n,)."""
    out = Var(x.value[:, 0])
    if tape is not None and x.requires_grad:
        def backward():
            if out.grad is not None:
                x.accumulate(out.grad[:, None])

        tape.record(backward)
    return out


# -- optimizers --------------------------------------------------------------

class SGD:
    def __init__(self, lr=1e-3, weight_decay=0.0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0

    def step(self, params: ParamStore):
        if not params.has_grad:
            raise StateError("optimizer step without gradients; run backward first")
        for name in params.names():
            p, g = params[name], params.grad(name)
            if self.weight_decay and params.decays(name):
                g = g + self.weight_decay * p
            p -= self.lr * g
        params.zero_grad()
        self.step_count += 1


class Adam:
    """Adam with bias correction and classic L2 decay added to the gradient."""

    def __init__(self, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params: ParamStore):
        if not params.has_grad:
            raise StateError("optimizer step without gradients; run backward first")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in params.names():
            p, g = params[name], params.grad(name)
            if self.weight_decay and params.decays(name):
                g = g + self.weight_decay * p
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        params.zero_grad()


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"PWSR"
CHECKPOINT_VERSION = 1


def dump_tensors(tensors) -> bytes:
    """Serialise ``(name, array)`` pairs in the given order.

    Layout: magic ``PWSR``, u32 version, then per tensor u32 name length, UTF-8
    name, u32 rank, u64 dims, float64 data row-major; all little-endian.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def parse_tensors(data: bytes) -> dict:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(data):
                raise ValueError(f"truncated tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint: {exc}") from None
    return out


def save_tensors(path, tensors):
    Path(path).write_bytes(dump_tensors(tensors))


def load_tensors(path) -> dict:
    return parse_tensors(Path(path).read_bytes())
