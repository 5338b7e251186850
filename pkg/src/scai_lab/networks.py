"""The three networks (prediction, fitness feedback, correction) and checkpoints.

All three are small same-padding conv stacks over per-group heatmap stacks:

    phi:   (A, B, C)            -> predicted distal map
    gamma: (B, C, distal map)   -> reconstructed anchor map
    corr:  (predicted, e_s)     -> residual added to the predicted distal map

One set of weights is shared by every structural group; the groups are
stacked along the batch axis (see :meth:`GroupSchema.gather`).
"""

from dataclasses import dataclass
import hashlib
import json
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Parameter, ShapeError

CKPT_VERSION = 1
ROLES = ("phi", "gamma", "corr")
IN_CHANNELS = {"phi": 3, "gamma": 3, "corr": 2}


@dataclass(frozen=True)
class NetSpec:
    hidden: int = 8
    layers: int = 4
    kernel: int = 5


class ConvNet:
    """relu conv stack ending in a single-channel linear conv."""

    def __init__(self, name, in_ch, spec=NetSpec(), rng=None, zero_last=False, dtype=None):
        dtype = dtype or nx.default_dtype()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name, self.in_ch, self.spec = name, in_ch, spec
        k = spec.kernel
        chans = [in_ch] + [spec.hidden] * (spec.layers - 1) + [1]
        self.params = []
        for i, (ci, co) in enumerate(zip(chans[:-1], chans[1:])):
            last = i == spec.layers - 1
            fan_in = ci * k * k
            if last and zero_last:
                w = np.zeros((co, ci, k, k))
            else:
                std = np.sqrt((1.0 if last else 2.0) / fan_in)
                w = rng.normal(0, std, size=(co, ci, k, k))
            self.params.append(Parameter(f"{name}.{i}.w", w.astype(dtype)))
            self.params.append(Parameter(f"{name}.{i}.b", np.zeros(co, dtype)))

    def __call__(self, x):
        x = nx.constant(x)
        if x.data.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"{self.name}: expected (N, {self.in_ch}, H, W), got {x.shape}")
        n = len(self.params) // 2
        for i in range(n):
            x = nx.conv2d(x, self.params[2 * i], self.params[2 * i + 1])
            if i < n - 1:
                x = nx.relu(x)
        return x

    def state(self):
        return {p.name: p.data for p in self.params}

    def load_state(self, state):
        for p in self.params:
            arr = np.asarray(state[p.name])
            if arr.shape != p.data.shape:
                raise ShapeError(f"{p.name}: shape {arr.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)

    def copy(self):
        other = ConvNet.__new__(ConvNet)
        other.name, other.in_ch, other.spec = self.name, self.in_ch, self.spec
        other.params = [Parameter(p.name, p.data.copy()) for p in self.params]
        return other

    def digest(self):
        return params_hash(self.state())


def params_hash(state):
    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        h.update(name.encode())
        h.update(str(arr.dtype.str).encode() + str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class SCAINet:
    """The three networks plus the schema they were built for."""

    def __init__(self, schema, spec=NetSpec(), seed=0, dtype=None):
        self.schema, self.spec, self.seed = schema, spec, seed
        rng = lambda i: np.random.default_rng([seed, i])
        self.phi = ConvNet("phi", 3, spec, rng(0), zero_last=True, dtype=dtype)
        self.gamma = ConvNet("gamma", 3, spec, rng(1), zero_last=False, dtype=dtype)
        self.corr = ConvNet("corr", 2, spec, rng(2), zero_last=True, dtype=dtype)

    @property
    def nets(self):
        return {"phi": self.phi, "gamma": self.gamma, "corr": self.corr}

    def copy(self):
        other = SCAINet.__new__(SCAINet)
        other.schema, other.spec, other.seed = self.schema, self.spec, self.seed
        other.phi, other.gamma, other.corr = self.phi.copy(), self.gamma.copy(), self.corr.copy()
        return other

    def digests(self):
        return {k: n.digest() for k, n in self.nets.items()}


def phi_forward(net, proximals):
    return net.phi(proximals)


def gamma_forward(net, context, distal):
    """Reconstruct the anchor map from the (B, C) context and a distal map."""
    context, distal = nx.constant(context), nx.constant(distal)
    if context.shape[0] != distal.shape[0] or context.shape[2:] != distal.shape[2:]:
        raise ShapeError(f"gamma: context {context.shape} vs distal {distal.shape}")
    return net.gamma(nx.concat([context, distal]))


def feedback_error(anchor, reconstructed):
    """e_s = reconstructed - anchor and its per-instance L2 norm (both Tensors)."""
    anchor, reconstructed = nx.constant(anchor), nx.constant(reconstructed)
    if anchor.shape != reconstructed.shape:
        raise ShapeError(f"feedback_error: {anchor.shape} vs {reconstructed.shape}")
    e = nx.sub(reconstructed, anchor)
    return e, nx.l2norm(e, batched=True)


def c_forward(net, pred, e):
    """Returns (delta, corrected) with corrected = pred + delta exactly."""
    pred, e = nx.constant(pred), nx.constant(e)
    if pred.shape != e.shape:
        raise ShapeError(f"corr: prediction {pred.shape} vs feedback {e.shape}")
    delta = net.corr(nx.concat([pred, e]))
    return delta, nx.add(pred, delta)


def pipeline(net, inputs, zero_feedback=False, post=True):
    """One SCAI forward over gathered group inputs (no labels needed).

    ``inputs`` is the dict from :meth:`GroupSchema.gather`. The feedback fed to
    the correction net comes from the uncorrected prediction; the
    post-correction feedback is what adaptation minimises. Returns a dict of
    Tensors.
    """
    anchor = inputs["anchor"]
    pred = phi_forward(net, inputs["proximals"])
    with nx.no_grad():
        recon_pre = gamma_forward(net, inputs["context"], nx.constant(pred.data))
    e_pre, n_pre = feedback_error(anchor, recon_pre)
    e_in = np.zeros_like(e_pre.data) if zero_feedback else e_pre.data
    delta, corrected = c_forward(net, pred, e_in)
    out = {"pred": pred, "recon_pre": recon_pre, "e_pre": e_pre, "norm_pre": n_pre,
           "delta": delta, "corrected": corrected}
    if post:
        recon = gamma_forward(net, inputs["context"], corrected)
        e_post, n_post = feedback_error(anchor, recon)
        out.update(recon=recon, e_post=e_post, norm_post=n_post)
    return out


# -- checkpoints ------------------------------------------------------------------

class CheckpointError(RuntimeError):
    pass


def _opt_entries(opt_states):
    arrays, scalars = [], {}
    for role in sorted(opt_states or {}):
        st = opt_states[role]
        scalars[role] = {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2,
                         "eps": st.eps, "step": st.step}
        for kind in ("m", "v"):
            d = getattr(st, kind)
            for name in sorted(d):
                arrays.append((f"opt/{role}/{kind}/{name}", d[name]))
    return arrays, scalars


def save_checkpoint(path, net, opt_states=None, meta=None):
    """Write ``net`` (+ optional Adam states) to ``path``; returns the content hash.

    Layout: one JSON header line, then the little-endian payload in header
    order. The content hash covers parameters, optimiser state and shapes but
    not the free-form metadata.
    """
    arrays = []
    for role in ROLES:
        for p in net.nets[role].params:
            arrays.append((p.name, p.data))
    opt_arrays, opt_scalars = _opt_entries(opt_states)
    arrays += opt_arrays
    entries, chunks = [], []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        entries.append([name, dt.str, list(arr.shape)])
        chunks.append(arr.astype(dt, copy=False).tobytes())
    payload = b"".join(chunks)
    structure = {"arrays": entries, "optimizer": opt_scalars,
                 "spec": [net.spec.hidden, net.spec.layers, net.spec.kernel]}
    content = hashlib.sha256(json.dumps(structure, sort_keys=True).encode() + payload).hexdigest()
    header = dict(structure, format_version=CKPT_VERSION,
                  schema=net.schema.to_dict(), seed=net.seed,
                  meta=meta or {}, payload_sha256=hashlib.sha256(payload).hexdigest(),
                  payload_bytes=len(payload), content_hash=content)
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + payload)
    return content


def load_checkpoint(path):
    """Returns (net, opt_states, meta, content_hash)."""
    from .numerics.adam import AdamState
    from .synth import GroupSchema

    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')}, "
                              f"expected {CKPT_VERSION}")
    payload = raw[nl + 1:]
    if len(payload) != header["payload_bytes"] or \
            hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: corrupt payload (digest mismatch)")

    arrays, off = {}, 0
    for name, dts, shape in header["arrays"]:
        dt = np.dtype(dts)
        n = int(np.prod(shape)) * dt.itemsize
        arrays[name] = np.frombuffer(payload, dt, count=n // dt.itemsize, offset=off).reshape(shape).copy()
        off += n

    spec = NetSpec(*header["spec"])
    net = SCAINet(GroupSchema.from_dict(header["schema"]), spec, header["seed"],
                  dtype=arrays["phi.0.w"].dtype.type)
    for role in ROLES:
        net.nets[role].load_state(arrays)
    opt_states = {}
    for role, sc in header["optimizer"].items():
        pre = f"opt/{role}/"
        m = {k[len(pre) + 2:]: v for k, v in arrays.items() if k.startswith(pre + "m/")}
        v = {k[len(pre) + 2:]: a for k, a in arrays.items() if k.startswith(pre + "v/")}
        opt_states[role] = AdamState(lr=sc["lr"], beta1=sc["beta1"], beta2=sc["beta2"],
                                     eps=sc["eps"], step=sc["step"], m=m, v=v)
    return net, opt_states, header["meta"], header["content_hash"]
