"""Small numpy network stack for server-set inputs.

Architecture (shared by the policy and the Q-functions)::

    per-server rows --shared encoder MLP--> H_s
    [mean_s H_s, max_s H_s, preference] --trunk MLP--> z
    [H_s, z] --shared head MLP--> one output per server slot

Pooling and the head only see real servers, so outputs for dummy slots are
inert and the parameter count does not depend on the number of servers.
Everything is float64 with hand-written reverse-mode gradients.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PSI = -1e9
CHECKPOINT_MAGIC = b"MECNNCK\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes, unknown version or truncated payload."""


class SpecMismatchError(CheckpointError):
    """Checkpoint was written for a different network spec."""


@dataclass(frozen=True)
class NetworkSpec:
    per_server_input_dim: int
    e_max: int
    encoder_widths: tuple = (64, 64)
    trunk_widths: tuple = (128, 128)
    head_widths: tuple = (64,)
    activation: str = "relu"
    preference_dim: int = 2

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        widths = (*self.encoder_widths, *self.trunk_widths, *self.head_widths)
        if not self.encoder_widths or not self.trunk_widths or min(widths) <= 0:
            raise ValueError("layer widths must be positive and encoder/trunk nonempty")
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))

    @property
    def head_dim(self) -> int:
        return self.e_max + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_widths", "trunk_widths", "head_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)

    def layout(self) -> dict:
        shapes = {}
        prev = self.per_server_input_dim
        for i, w in enumerate(self.encoder_widths):
            shapes[f"enc{i}.W"], shapes[f"enc{i}.b"] = (prev, w), (w,)
            prev = w
        d = prev
        prev = 2 * d + self.preference_dim
        for i, w in enumerate(self.trunk_widths):
            shapes[f"trunk{i}.W"], shapes[f"trunk{i}.b"] = (prev, w), (w,)
            prev = w
        prev = d + prev
        for i, w in enumerate(self.head_widths):
            shapes[f"head{i}.W"], shapes[f"head{i}.b"] = (prev, w), (w,)
            prev = w
        shapes["out.W"], shapes["out.b"] = (prev, 1), (1,)
        return shapes


class ParamSet:
    """Flat float64 parameter vector with named views per layer."""

    def __init__(self, layout: dict, vector: np.ndarray | None = None):
        self.layout = {k: tuple(v) for k, v in layout.items()}
        self._slices = {}
        off = 0
        for name, shape in self.layout.items():
            size = int(np.prod(shape))
            self._slices[name] = (off, off + size, shape)
            off += size
        if vector is None:
            vector = np.zeros(off)
        if vector.shape != (off,):
            raise ValueError(f"expected {off} parameters, got {vector.shape}")
        self.vector = vector

    def __getitem__(self, name: str) -> np.ndarray:
        a, b, shape = self._slices[name]
        return self.vector[a:b].reshape(shape)

    def __len__(self):
        return self.vector.size

    def names(self):
        return list(self.layout)

    def copy(self) -> "ParamSet":
        return ParamSet(self.layout, self.vector.copy())

    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.layout)


class ForwardTrace:
    """Cached activations of one forward pass; backward may consume it once."""

    def __init__(self, **cache):
        self.cache = cache
        self.used = False

    def consume(self) -> dict:
        if self.used:
            raise RuntimeError("forward trace was already consumed by a backward pass")
        self.used = True
        return self.cache


def _act(x, kind):
    return np.maximum(x, 0.0) if kind == "relu" else np.tanh(x)


def _mm(x, W):
    """``x @ W`` over the last axis through a single 2-D product."""
    return (x.reshape(-1, x.shape[-1]) @ W).reshape(x.shape[:-1] + (W.shape[1],))


def _act_grad(y, kind):
    return (y > 0.0).astype(float) if kind == "relu" else 1.0 - y * y


class ServerSetNet:
    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.layout = spec.layout()

    def init_params(self, rng: np.random.Generator, zero_output: bool = False) -> ParamSet:
        """Uniform fan-in init; ``zero_output`` zeroes the last layer."""
        p = ParamSet(self.layout)
        for name, shape in self.layout.items():
            if name.endswith(".W"):
                bound = 1.0 / np.sqrt(shape[0])
                p[name][...] = rng.uniform(-bound, bound, size=shape)
        if zero_output:
            p["out.W"][...] = 0.0
        return p

    def _head_names(self) -> list[str]:
        return [f"head{i}" for i in range(len(self.spec.head_widths))] + ["out"]

    def forward(self, params: ParamSet, servers: np.ndarray, preference: np.ndarray,
                mask: np.ndarray):
        """Raw per-slot outputs ``(B, S)`` and the trace for :meth:`backward`."""
        spec = self.spec
        act = spec.activation
        m = mask[..., None].astype(float)
        h = servers
        enc = [h]
        for i in range(len(spec.encoder_widths)):
            h = _act(_mm(h, params[f"enc{i}.W"]) + params[f"enc{i}.b"], act)
            enc.append(h)
        B, S, d = h.shape
        cnt = m.sum(axis=1)
        mean = (h * m).sum(axis=1) / cnt
        # running max over the (short) server axis; slot 0 is always live
        mx = h[:, 0, :].copy()
        arg = np.zeros((B, d), dtype=np.int64)
        for s in range(1, S):
            better = mask[:, s, None] & (h[:, s, :] > mx)
            mx = np.where(better, h[:, s, :], mx)
            arg[better] = s
        z = np.concatenate([mean, mx, preference], axis=1)
        trunk = [z]
        for i in range(len(spec.trunk_widths)):
            z = _act(z @ params[f"trunk{i}.W"] + params[f"trunk{i}.b"], act)
            trunk.append(z)
        # first head layer on concat(h_s, z), split so z is multiplied once per row
        names = self._head_names()
        W0 = params[f"{names[0]}.W"]
        g = _mm(h, W0[:d]) + (z @ W0[d:] + params[f"{names[0]}.b"])[:, None, :]
        head = []
        for name in names[1:]:
            g = _act(g, act)
            head.append(g)
            g = _mm(g, params[f"{name}.W"]) + params[f"{name}.b"]
        out = g[..., 0]
        trace = ForwardTrace(enc=enc, trunk=trunk, head=head, mask=mask, m=m,
                             cnt=cnt, arg=arg)
        return out, trace

    def backward(self, params: ParamSet, trace: ForwardTrace, out_grad: np.ndarray) -> ParamSet:
        """Gradient of ``sum(out_grad * out)`` with respect to every parameter.

        Entries of ``out_grad`` on masked slots are ignored.
        """
        c = trace.consume()
        spec = self.spec
        act = spec.activation
        grads = params.zeros_like()
        mask, m = c["mask"], c["m"]
        dy = np.where(mask, out_grad, 0.0)[..., None]

        def dense_back(x, dy, name, need_input=True):
            x2 = x.reshape(-1, x.shape[-1])
            d2 = dy.reshape(-1, dy.shape[-1])
            grads[f"{name}.W"][...] = x2.T @ d2
            grads[f"{name}.b"][...] = d2.sum(axis=0)
            return _mm(dy, params[f"{name}.W"].T) if need_input else None

        names = self._head_names()
        head = c["head"]
        dg = dy
        for k in reversed(range(1, len(names))):
            dg = dense_back(head[k - 1], dg, names[k])
            dg = dg * _act_grad(head[k - 1], act)
        # split first head layer
        enc, trunk = c["enc"], c["trunk"]
        h, z = enc[-1], trunk[-1]
        B, S, d = h.shape
        W0 = params[f"{names[0]}.W"]
        dg2 = dg.reshape(-1, dg.shape[-1])
        dgs = dg.sum(axis=1)
        gW0 = grads[f"{names[0]}.W"]
        gW0[:d] = h.reshape(-1, d).T @ dg2
        gW0[d:] = z.T @ dgs
        grads[f"{names[0]}.b"][...] = dgs.sum(axis=0)
        dh = _mm(dg, W0[:d].T)
        dz = dgs @ W0[d:].T

        for i in reversed(range(len(spec.trunk_widths))):
            dz = dz * _act_grad(trunk[i + 1], act)
            dz = dense_back(trunk[i], dz, f"trunk{i}")
        dmean = dz[:, :d]
        dmax = dz[:, d:2 * d]
        dh += m * (dmean / c["cnt"])[:, None, :]
        arg = c["arg"]
        for s in range(S):
            dh[:, s, :] += np.where(arg == s, dmax, 0.0)

        for i in reversed(range(len(spec.encoder_widths))):
            dh = dh * _act_grad(enc[i + 1], act)
            dh = dense_back(enc[i], dh, f"enc{i}", need_input=i > 0)
        return grads


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities over valid slots; masked slots hold ``-inf``."""
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        raise ValueError("every action is masked")
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward_policy(net: ServerSetNet, params: ParamSet, servers, preference, mask):
    """Return ``(probs, log_probs, logits, trace)``; masked probs are exactly 0.

    ``log_probs`` is set to 0 on masked slots so products with ``probs`` vanish.
    """
    logits, trace = net.forward(params, servers, preference, mask)
    logp = masked_log_softmax(logits, mask)
    probs = np.where(mask, np.exp(logp), 0.0)
    return probs, np.where(mask, logp, 0.0), logits, trace


def forward_q(net: ServerSetNet, params: ParamSet, servers, preference, mask):
    """Return ``(q, trace)`` with masked entries set to ``PSI``."""
    q, trace = net.forward(params, servers, preference, mask)
    return np.where(mask, q, PSI), trace


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: ParamSet, grads: ParamSet) -> ParamSet:
        """Update ``params`` in place and return it."""
        g = grads.vector
        if g.shape != params.vector.shape:
            raise ValueError("gradient and parameter shapes differ")
        if not np.all(np.isfinite(g)):
            bad = [n for n in grads.names() if not np.all(np.isfinite(grads[n]))]
            raise FloatingPointError(f"non-finite gradient in {bad} at step {self.t + 1}")
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        params.vector -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params


def save_checkpoint(path, spec: NetworkSpec, params: dict, meta: dict | None = None) -> None:
    """Write named ParamSets (all sharing ``spec``'s layout) to ``path``."""
    names = list(params)
    header = json.dumps({"spec": spec.to_dict(), "e_max": spec.e_max, "sets": names,
                         "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].vector, dtype="<f8").tobytes())


def load_checkpoint(path, expected_spec: NetworkSpec | None = None):
    """Return ``(spec, {name: ParamSet}, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack("<II", raw[8:16])
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated header") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(raw[16:16 + hlen])
    spec = NetworkSpec.from_dict(header["spec"])
    if header["e_max"] != spec.e_max:
        raise CheckpointFormatError(f"{path}: inconsistent e_max")
    if expected_spec is not None and spec != expected_spec:
        raise SpecMismatchError(f"{path}: checkpoint spec {spec} != expected {expected_spec}")
    layout = spec.layout()
    size = sum(int(np.prod(s)) for s in layout.values())
    off = 16 + hlen
    sets = {}
    for n in header["sets"]:
        chunk = raw[off:off + 8 * size]
        if len(chunk) != 8 * size:
            raise CheckpointFormatError(f"{path}: truncated parameter block {n!r}")
        sets[n] = ParamSet(layout, np.frombuffer(chunk, dtype="<f8").astype(np.float64))
        off += 8 * size
    return spec, sets, header["meta"]
