"""Sinusoidal fully-connected network for continuous SDF regression.

Implements the network, exact input gradients, exact parameter gradients of
the L1 + Eikonal training loss (including the second-order path through the
gradient norm), and an Adam optimizer with decoupled weight decay. Everything
runs on plain numpy so the arithmetic is fully controlled: training uses
float32, verification uses float64.

Layer convention: every hidden layer computes sin(omega0 * (W a + b)) and the
output layer is linear. Weights of each layer are initialized uniformly in
[-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0], biases start at zero.

The input gradient is evaluated by a reverse sweep (cheap because the output
is scalar); parameter gradients of losses involving that input gradient are
obtained by differentiating the combined primal + reverse graph. Batched
passes run on preallocated per-(architecture, dtype) workspaces; they are
deterministic but not thread-safe.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DEFAULT_LAYER_DIMS = (3, 256, 256, 256, 256, 1)
DEFAULT_OMEGA0 = 10.0

# Rows processed per block in the batched passes. Fixed so that float32
# accumulation order (and therefore results) is reproducible across runs.
_CHUNK = 4096

_CKPT_MAGIC = b"SDFN"
_CKPT_VERSION = 1


class SirenNetwork:
    """Fully-connected sine network mapping R^3 -> R.

    Parameters live in ``weights`` (list of (out, in) arrays) and ``biases``
    (list of (out,) arrays), all sharing one dtype.
    """

    def __init__(self, weights, biases, omega0: float = DEFAULT_OMEGA0):
        if len(weights) != len(biases) or not weights:
            raise ValueError("weights and biases must be non-empty and aligned")
        self.weights = list(weights)
        self.biases = list(biases)
        self.omega0 = float(omega0)
        dims = [weights[0].shape[1]] + [w.shape[0] for w in weights]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} has inconsistent shapes")
        if dims[0] != 3 or dims[-1] != 1:
            raise ValueError("network must map 3 inputs to 1 output")
        self.layer_dims = tuple(dims)
        self.dtype = np.dtype(self.weights[0].dtype)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self):
        """Yields all parameter arrays (weight then bias, layer by layer)."""
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self) -> "SirenNetwork":
        return SirenNetwork(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.omega0,
        )


def init_siren(
    layer_dims=DEFAULT_LAYER_DIMS,
    omega0: float = DEFAULT_OMEGA0,
    seed=None,
    dtype=np.float32,
) -> SirenNetwork:
    """Creates a network with fan-in scaled uniform weights and zero biases.

    Every layer with fan-in n draws its weights from
    U(-sqrt(6/n)/omega0, +sqrt(6/n)/omega0). Deterministic under ``seed``.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or dims[0] != 3 or dims[-1] != 1:
        raise ValueError("layer_dims must start at 3 and end at 1")
    if any(d < 1 for d in dims):
        raise ValueError("layer_dims must be positive")
    if omega0 <= 0:
        raise ValueError("omega0 must be positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in) / omega0
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return SirenNetwork(weights, biases, omega0)


class _Workspace:
    """Preallocated per-layer buffers for the batched passes.

    For K sine layers of widths h_l the pass keeps, per layer: activations
    ``a`` (the layer inputs, a[0] holds the staged points), cosine factors
    ``c``, the reverse-sweep values ``v`` and scaled cosines ``s``, plus small
    seed and scratch arrays. All shapes are (chunk, width).
    """

    def __init__(self, dims: tuple[int, ...], dtype: np.dtype):
        b = _CHUNK
        hidden = dims[1:-1]
        self.dims = dims
        self.a = [np.zeros((b, dims[0]), dtype=dtype)] + [
            np.empty((b, h), dtype=dtype) for h in hidden
        ]
        self.c = [np.empty((b, h), dtype=dtype) for h in hidden]
        self.v = [np.empty((b, h), dtype=dtype) for h in hidden]
        self.s = [np.empty((b, h), dtype=dtype) for h in hidden]
        self.sbar = [np.empty((b, h), dtype=dtype) for h in hidden]
        self.zbar = [np.empty((b, h), dtype=dtype) for h in hidden]
        self.abar = [np.empty((b, h), dtype=dtype) for h in hidden]
        self.v0 = np.empty((b, dims[0]), dtype=dtype)
        self.fvals = np.empty((b, 1), dtype=dtype)
        self.f_bar = np.zeros((b, 1), dtype=dtype)
        self.g_bar = np.zeros((b, dims[0]), dtype=dtype)
        self.gw_scratch = None  # lazily created (h_out, h_in) GEMM outputs


_WORKSPACES: dict = {}


def _workspace(net: SirenNetwork) -> _Workspace:
    key = (net.layer_dims, net.dtype.str)
    ws = _WORKSPACES.get(key)
    if ws is None:
        ws = _Workspace(net.layer_dims, net.dtype)
        _WORKSPACES[key] = ws
    return ws


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("inputs must have shape (3,) or (N, 3)")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite input coordinates")
    return arr, single


def _stage_chunk(ws: _Workspace, chunk: np.ndarray) -> int:
    """Copies a (b, 3) chunk into ws.a[0]; all passes slice to b rows."""
    b = chunk.shape[0]
    ws.a[0][:b] = chunk
    return b


def _primal(net: SirenNetwork, ws: _Workspace, b: int) -> None:
    """Forward pass over the staged chunk; fills ws.a, ws.c, ws.fvals."""
    om = net.dtype.type(net.omega0)
    k = net.n_layers - 1
    for l in range(k):
        z = ws.a[l + 1][:b]
        np.matmul(ws.a[l][:b], net.weights[l].T, out=z)
        z += net.biases[l]
        z *= om
        np.cos(z, out=ws.c[l][:b])
        np.sin(z, out=z)  # a[l+1] now holds the activation
    np.matmul(ws.a[k][:b], net.weights[k].T, out=ws.fvals[:b])
    ws.fvals[:b] += net.biases[k][0]


def _reverse_gradient(net: SirenNetwork, ws: _Workspace, b: int) -> None:
    """Reverse sweep producing the input gradient in ws.v0.

    Also fills ws.v (incoming reverse values) and ws.s (om * c * v), which the
    parameter backprop reuses.
    """
    om = net.dtype.type(net.omega0)
    k = net.n_layers - 1
    ws.v[k - 1][:b] = net.weights[k][0]
    for l in range(k - 1, -1, -1):
        s = ws.s[l][:b]
        np.multiply(ws.c[l][:b], ws.v[l][:b], out=s)
        s *= om
        out = ws.v0[:b] if l == 0 else ws.v[l - 1][:b]
        np.matmul(s, net.weights[l], out=out)


def forward(net: SirenNetwork, x):
    """Evaluates the field. (3,) -> float, (N, 3) -> (N,)."""
    arr, single = _as_batch(x)
    ws = _workspace(net)
    n = arr.shape[0]
    out = np.empty(n, dtype=net.dtype)
    for i0 in range(0, n, _CHUNK):
        chunk = np.asarray(arr[i0 : i0 + _CHUNK], dtype=net.dtype)
        b = _stage_chunk(ws, chunk)
        _primal(net, ws, b)
        out[i0 : i0 + b] = ws.fvals[:b, 0]
    return float(out[0]) if single else out


def forward_with_gradient(net: SirenNetwork, x):
    """Field values and input gradients in one pass: (N,), (N, 3)."""
    arr, _ = _as_batch(x)
    ws = _workspace(net)
    n = arr.shape[0]
    vals = np.empty(n, dtype=net.dtype)
    grads = np.empty((n, 3), dtype=net.dtype)
    for i0 in range(0, n, _CHUNK):
        chunk = np.asarray(arr[i0 : i0 + _CHUNK], dtype=net.dtype)
        b = _stage_chunk(ws, chunk)
        _primal(net, ws, b)
        _reverse_gradient(net, ws, b)
        vals[i0 : i0 + b] = ws.fvals[:b, 0]
        grads[i0 : i0 + b] = ws.v0[:b]
    return vals, grads


def input_gradient(net: SirenNetwork, x):
    """Exact gradient of the field w.r.t. the input point(s)."""
    arr, single = _as_batch(x)
    _, grads = forward_with_gradient(net, arr)
    return grads[0] if single else grads


@dataclass
class LossTerms:
    """Weighted batch loss with its two components (already lambda-scaled)."""

    total: float
    sdf: float
    eikonal: float


def _backward_params(net: SirenNetwork, ws: _Workspace, b: int, grads_w, grads_b) -> None:
    """Parameter gradients for the staged chunk, accumulated in place.

    Expects fresh _primal and _reverse_gradient results plus the loss adjoints
    in ws.f_bar (of the field value) and ws.g_bar (of the input gradient).
    Differentiates the combined primal + reverse graph, so the Eikonal path
    through the input gradient is exact.
    """
    om = net.dtype.type(net.omega0)
    k = net.n_layers - 1
    if ws.gw_scratch is None:
        ws.gw_scratch = [np.empty_like(w) for w in net.weights]
    # upward sweep: adjoints of the reverse-gradient chain (v_bar rides in
    # ws.v, overwriting values that are no longer needed; c_bar in ws.s)
    vbar = ws.g_bar[:b]
    for l in range(k):
        sbar = ws.sbar[l][:b]
        np.matmul(vbar, net.weights[l].T, out=sbar)
        np.matmul(ws.s[l][:b].T, vbar, out=ws.gw_scratch[l])
        grads_w[l] += ws.gw_scratch[l]
        # c_bar = om * v * sbar, stored over ws.s[l]
        cbar = ws.s[l][:b]
        np.multiply(ws.v[l][:b], sbar, out=cbar)
        cbar *= om
        if l < k - 1:
            # v_bar = om * c * sbar, stored over ws.v[l]
            np.multiply(ws.c[l][:b], sbar, out=ws.v[l][:b])
            ws.v[l][:b] *= om
            vbar = ws.v[l][:b]
        else:
            # v_K is the broadcast output weight row: fold om*c*sbar into it
            np.multiply(ws.c[l][:b], sbar, out=ws.v[l][:b])
            grads_w[k][0] += om * ws.v[l][:b].sum(axis=0, dtype=net.dtype)
    # output layer value path
    np.matmul(ws.f_bar[:b].T, ws.a[k][:b], out=ws.gw_scratch[k])
    grads_w[k] += ws.gw_scratch[k]
    grads_b[k] += ws.f_bar[:b].sum(dtype=net.dtype)
    # downward sweep: ordinary backprop through the primal chain, with the
    # cosine adjoints (in ws.s) joining at each layer
    np.multiply(ws.f_bar[:b], net.weights[k][0], out=ws.abar[k - 1][:b])
    for l in range(k - 1, -1, -1):
        abar = ws.abar[l][:b]
        zbar = ws.zbar[l][:b]
        # z_bar = om * (c * a_bar - sin * c_bar); sin lives in ws.a[l+1],
        # c_bar in ws.s[l]; ws.sbar[l] is dead and serves as scratch
        np.multiply(ws.a[l + 1][:b], ws.s[l][:b], out=zbar)
        zbar *= -1.0
        np.multiply(ws.c[l][:b], abar, out=ws.sbar[l][:b])
        zbar += ws.sbar[l][:b]
        zbar *= om
        np.matmul(zbar.T, ws.a[l][:b], out=ws.gw_scratch[l])
        grads_w[l] += ws.gw_scratch[l]
        grads_b[l] += zbar.sum(axis=0, dtype=net.dtype)
        if l > 0:
            np.matmul(zbar, net.weights[l], out=ws.abar[l - 1][:b])


def loss_param_gradients(
    net: SirenNetwork,
    positions,
    targets,
    lambda_sdf: float,
    lambda_eikonal: float,
):
    """Batch-mean loss value and exact gradients w.r.t. every parameter.

    Loss: lambda_sdf * mean |f(x) - s| + lambda_eikonal * mean | ||grad f|| - 1 |.
    The Eikonal term is differentiated through the input-gradient computation,
    so the returned parameter gradients include the second-order path.

    Returns (LossTerms, (grads_w, grads_b)) with gradients matching the
    network's parameter shapes. L1 and Eikonal subgradients at their
    non-differentiable points are taken as 0.
    """
    pos = np.asarray(positions, dtype=net.dtype)
    tgt = np.asarray(targets, dtype=net.dtype).reshape(-1)
    if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] != tgt.shape[0]:
        raise ValueError("positions must be (N, 3) aligned with targets (N,)")
    n = pos.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if not (np.isfinite(pos).all() and np.isfinite(tgt).all()):
        raise ValueError("non-finite training batch")

    ws = _workspace(net)
    grads_w = [np.zeros_like(w) for w in net.weights]
    grads_b = [np.zeros_like(b) for b in net.biases]
    sdf_sum = 0.0
    eik_sum = 0.0
    inv_n = 1.0 / n
    lam_s = net.dtype.type(lambda_sdf * inv_n)
    lam_e = net.dtype.type(lambda_eikonal * inv_n)
    one = net.dtype.type(1.0)
    for i0 in range(0, n, _CHUNK):
        chunk = np.asarray(pos[i0 : i0 + _CHUNK], dtype=net.dtype)
        b = _stage_chunk(ws, chunk)
        _primal(net, ws, b)
        _reverse_gradient(net, ws, b)
        vals = ws.fvals[:b, 0]
        grads = ws.v0[:b]
        r = vals - tgt[i0 : i0 + b]
        gnorm = np.sqrt(np.einsum("bj,bj->b", grads, grads))
        sdf_sum += float(np.abs(r).sum(dtype=np.float64))
        eik_sum += float(np.abs(gnorm - one).sum(dtype=np.float64))
        ws.f_bar[:b, 0] = lam_s * np.sign(r)
        safe = np.where(gnorm > 0, gnorm, one)
        ws.g_bar[:b] = (lam_e * np.sign(gnorm - one) / safe)[:, None] * grads
        ws.g_bar[:b][gnorm == 0] = 0
        _backward_params(net, ws, b, grads_w, grads_b)
    sdf_term = lambda_sdf * sdf_sum * inv_n
    eik_term = lambda_eikonal * eik_sum * inv_n
    terms = LossTerms(total=sdf_term + eik_term, sdf=sdf_term, eikonal=eik_term)
    return terms, (grads_w, grads_b)


@dataclass
class AdamState:
    """Adam moment accumulators mirroring the network parameters."""

    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: SirenNetwork) -> "AdamState":
        return cls(
            m_w=[np.zeros_like(w) for w in net.weights],
            v_w=[np.zeros_like(w) for w in net.weights],
            m_b=[np.zeros_like(b) for b in net.biases],
            v_b=[np.zeros_like(b) for b in net.biases],
        )


def adam_step(
    net: SirenNetwork,
    state: AdamState,
    grads,
    lr: float = 4e-4,
    weight_decay: float = 0.012,
    decay_mode: str = "decoupled",
) -> None:
    """One bias-corrected Adam update, in place.

    decay_mode "decoupled" scales parameters by (1 - lr*wd) before applying
    the Adam delta; "l2" instead adds wd*theta to the gradient.
    """
    grads_w, grads_b = grads
    if len(grads_w) != net.n_layers or len(grads_b) != net.n_layers:
        raise ValueError("gradient list length mismatch")
    for gw, gb, w, b in zip(grads_w, grads_b, net.weights, net.biases):
        if np.shape(gw) != w.shape or np.shape(gb) != np.shape(b):
            raise ValueError("gradient shape mismatch")
    if decay_mode not in ("decoupled", "l2"):
        raise ValueError("decay_mode must be 'decoupled' or 'l2'")
    state.step += 1
    t = state.step
    dt = net.dtype
    b1 = dt.type(state.beta1)
    b2 = dt.type(state.beta2)
    one = dt.type(1.0)
    corr1 = dt.type(1.0 - state.beta1**t)
    corr2 = dt.type(1.0 - state.beta2**t)
    lr_t = dt.type(lr)
    eps = dt.type(state.eps)
    decay = dt.type(1.0 - lr * weight_decay)
    wd = dt.type(weight_decay)
    params = list(zip(net.weights, state.m_w, state.v_w, grads_w)) + list(
        zip(net.biases, state.m_b, state.v_b, grads_b)
    )
    for theta, m, v, g in params:
        g = np.asarray(g, dtype=dt)
        if decay_mode == "l2":
            g = g + wd * theta
        else:
            theta *= decay
        m *= b1
        m += (one - b1) * g
        v *= b2
        v += (one - b2) * (g * g)
        theta -= lr_t * (m / corr1) / (np.sqrt(v / corr2) + eps)


def save_checkpoint(net: SirenNetwork, path) -> None:
    """Writes the versioned binary checkpoint (float32 parameters)."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(net.layer_dims)))
        f.write(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
        f.write(struct.pack("<d", net.omega0))
        for w, b in zip(net.weights, net.biases):
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path) -> SirenNetwork:
    """Reads a checkpoint written by save_checkpoint."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    version, n_dims = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims
    (omega0,) = struct.unpack_from("<d", data, off)
    off += 8
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, dtype="<f4", count=fan_out * fan_in, offset=off)
        off += 4 * fan_out * fan_in
        b = np.frombuffer(data, dtype="<f4", count=fan_out, offset=off)
        off += 4 * fan_out
        weights.append(w.reshape(fan_out, fan_in).copy())
        biases.append(b.copy())
    if off != len(data):
        raise ValueError(f"{path}: truncated or oversized checkpoint")
    return SirenNetwork(weights, biases, omega0)
