"""Dense float64 tensors with a define-by-run tape and reverse-mode gradients.

Everything runs on CPU numpy. Each differentiable op computes its forward
result eagerly and records a backward closure on a module-level tape; calling
:func:`backward` on a scalar replays the recorded subgraph in reverse
(topological) order. The tape is meant to be reset between training
iterations, so graphs never outlive the step that built them.

Backward closures capture the array objects they saw at forward time. Code
that mutates tensors between forward and backward (optimizers, mainly) must
rebind ``.data`` instead of writing into the array, otherwise gradients would
be taken at the wrong point.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class ContractViolation(ValueError):
    """An operation was invoked outside its declared contract."""


def _mix64(a: int, b: int) -> int:
    # splitmix64 finalizer over a combined pair, used to derive child seeds
    z = (a ^ ((b + 1) * 0x9E3779B97F4A7C15)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RngStream:
    """Counter-based random stream: same (seed, counter) gives the same draws.

    Built on Philox, which is itself counter-based, so the position of every
    draw is pinned by (seed, counter) and independent streams can be split off
    without correlation or overlap. Each draw call occupies its own 2^64-block
    slice of the counter space and advances ``counter`` by one.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def child(self, *tags: int) -> "RngStream":
        """Derive an independent stream from integer tags (order matters)."""
        seed = self.seed
        for t in tags:
            seed = _mix64(seed, int(t) & _MASK64)
        return RngStream(seed)

    def _gen(self) -> np.random.Generator:
        bg = np.random.Philox(key=self.seed, counter=self.counter << 64)
        self.counter += 1
        return np.random.Generator(bg)

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return self._gen().normal(mean, std, size=shape).astype(np.float64)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        out = self._gen().uniform(low, high, size=shape)
        return float(out) if shape is None else out.astype(np.float64)

    def integers(self, low: int, high: int, shape=None):
        out = self._gen().integers(low, high, size=shape)
        return int(out) if shape is None else out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen().permutation(n)


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # note: np.ascontiguousarray would promote 0-d scalars to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Recorded op sequence for one forward pass. Creation order is topological."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)


_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _tape


def reset_tape():
    _tape.nodes.clear()


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def _make(inputs, data, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.nodes.append(_Node(tuple(inputs), out, backward))
    return out


def backward(loss: Tensor, leaves=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of reachable leaf tensors.

    ``loss`` must be a scalar produced on the active tape. Repeated calls add
    into existing ``.grad`` buffers. When ``leaves`` is given, only those
    tensors receive gradient (everything else still participates in the chain,
    its leaves just are not written). That filter is what implements the
    "treat the other network as a constant" cuts in adversarial training.
    """
    if loss.data.shape != ():
        raise ContractViolation("backward expects a scalar loss")
    nodes = _tape.nodes
    idx = None
    for i in range(len(nodes) - 1, -1, -1):
        if nodes[i].output is loss:
            idx = i
            break
    if idx is None:
        raise ContractViolation("loss is not on the active tape")

    grads = {id(loss): np.ones((), dtype=np.float64)}
    holders = {}
    for node in reversed(nodes[: idx + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not t.requires_grad:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + ig
            else:
                grads[tid] = ig
                holders[tid] = t

    allowed = None if leaves is None else {id(t) for t in leaves}
    for tid, g in grads.items():
        t = holders[tid]
        if allowed is not None and tid not in allowed:
            continue
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# ops


def _as4d(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise ContractViolation(f"{op} expects a 4d (B,C,H,W) tensor")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    # xp is already padded. Returns (B, Ho*Wo, C*kh*kw) with windows flattened
    # row-major, plus the output extents.
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=np.float64)
    out[:, :, p : p + h, p : p + w] = x
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with square odd kernels, NCHW layout."""
    _as4d(x, "conv2d")
    if weight.data.ndim != 4:
        raise ContractViolation("conv2d weight must be (Cout,Cin,kh,kw)")
    cout, cin, kh, kw = weight.data.shape
    if kh % 2 != 1 or kw % 2 != 1:
        raise ContractViolation("conv2d kernel extents must be odd")
    if x.data.shape[1] != cin:
        raise ContractViolation(
            f"conv2d channel mismatch: input has {x.data.shape[1]}, weight wants {cin}"
        )
    if bias.data.shape != (cout,):
        raise ContractViolation("conv2d bias must be (Cout,)")
    if stride < 1 or padding < 0:
        raise ContractViolation("conv2d needs stride >= 1 and padding >= 0")
    b, _, h, w = x.data.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractViolation("conv2d output would be empty")

    xd, wd, bd = x.data, weight.data, bias.data
    cols, ho, wo = _im2col(_pad(xd, padding), kh, kw, stride)
    wmat = wd.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T
    out += bd
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(b, cout, ho, wo)

    def bwd(g):
        gmat = np.ascontiguousarray(g.reshape(b, cout, ho * wo).transpose(0, 2, 1))
        gx = gw = gb = None
        if weight.requires_grad:
            # recompute columns instead of keeping them alive on the tape
            cols2, _, _ = _im2col(_pad(xd, padding), kh, kw, stride)
            gw = np.tensordot(gmat, cols2, axes=([0, 1], [0, 1])).reshape(wd.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = gmat @ wmat
            hp, wp = h + 2 * padding, w + 2 * padding
            gxp = np.zeros((b, cin, hp, wp), dtype=np.float64)
            d6 = dcols.reshape(b, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            for i in range(kh):
                hi = i + (ho - 1) * stride + 1
                for j in range(kw):
                    wj = j + (wo - 1) * stride + 1
                    gxp[:, :, i:hi:stride, j:wj:stride] += d6[:, :, :, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    return _make([x, weight, bias], out, bwd)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Max pooling. Ties inside a window go to the first element in row-major order."""
    _as4d(x, "maxpool2d")
    b, c, h, w = x.data.shape
    if h % stride != 0 or w % stride != 0:
        raise ContractViolation("maxpool2d needs H and W divisible by stride")
    if k < 1 or stride < 1 or k > h or k > w:
        raise ContractViolation("maxpool2d window does not fit the input")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        oh, ow = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = oh[None, None] * stride + arg // k
        cols = ow[None, None] * stride + arg % k
        bc = np.arange(b * c).reshape(b, c, 1, 1)
        idx = (bc * h + rows) * w + cols
        gx = np.zeros(b * c * h * w, dtype=np.float64)
        np.add.at(gx, idx.ravel(), g.ravel())
        return (gx.reshape(b, c, h, w),)

    return _make([x], np.ascontiguousarray(out), bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _as4d(x, "upsample_nearest2x")
    b, c, h, w = x.data.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2))
    out = np.ascontiguousarray(out).reshape(b, c, 2 * h, 2 * w)

    def bwd(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make([x], out, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _make([x], np.where(mask, x.data, 0.0), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ContractViolation("add expects matching shapes")

    def bwd(g):
        return g, g

    return _make([a, b], a.data + b.data, bwd)


def scale(x: Tensor, factor: float) -> Tensor:
    f = float(factor)

    def bwd(g):
        return (f * g,)

    return _make([x], f * x.data, bwd)


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractViolation("concat_channels needs at least one tensor")
    first = parts[0].data.shape
    for p in parts:
        s = p.data.shape
        if len(s) != 4 or s[0] != first[0] or s[2:] != first[2:]:
            raise ContractViolation("concat_channels expects matching B,H,W extents")
    sizes = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    edges = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(sizes)))

    return _make(parts, out, bwd)


def tensor_sum(x: Tensor) -> Tensor:
    shp = x.data.shape

    def bwd(g):
        return (np.broadcast_to(g, shp).astype(np.float64),)

    return _make([x], np.asarray(x.data.sum()), bwd)


def mse_sum(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences over every element (no averaging)."""
    if a.data.shape != b.data.shape:
        raise ContractViolation("mse_sum expects matching shapes")
    diff = a.data - b.data

    def bwd(g):
        d = 2.0 * g * diff
        return d, -d

    return _make([a, b], np.asarray(np.sum(diff * diff)), bwd)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Per-channel batch normalization.

    Returns (output, new_running_mean, new_running_var). The function never
    mutates the moment arrays it is handed; callers decide whether to adopt
    the returned ones. Train mode normalizes with biased batch statistics and
    folds them into the running moments (unbiased variance, the usual
    convention); eval mode normalizes with the running moments.
    """
    _as4d(x, "batchnorm2d")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ContractViolation("batchnorm2d scale/shift must be (C,)")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ContractViolation("batchnorm2d running moments must be (C,)")
    xd = x.data
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if n < 2:
            raise ContractViolation("batchnorm2d train mode needs B*H*W >= 2")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        new_rm = (1.0 - momentum) * running_mean + momentum * mean
        new_rv = (1.0 - momentum) * running_var + momentum * var * (n / (n - 1.0))
    else:
        n = 0
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * ivar[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            giv = (gamma.data * ivar)[None, :, None, None]
            if training:
                mg = g.mean(axis=(0, 2, 3))[None, :, None, None]
                mgx = (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                gx = giv * (g - mg - xhat * mgx)
            else:
                gx = giv * g
        return gx, gg, gb

    return _make([x, gamma, beta], out, bwd), new_rm, new_rv


def grad_check(f, x: Tensor, h: float = 1e-5, indices=None) -> float:
    """Max relative mismatch between tape gradients and central differences.

    ``f`` must map a tensor to a scalar tensor and be deterministic. When
    ``indices`` is given (flat positions into ``x``), only those elements are
    probed, which keeps large closures affordable; the analytic gradient is
    always the full one.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ContractViolation("grad_check step must lie in [1e-6, 1e-3]")
    base = x.data.copy()
    probe = Tensor(base.copy(), requires_grad=True)
    mark = len(_tape.nodes)
    loss = f(probe)
    backward(loss, leaves=[probe])
    del _tape.nodes[mark:]
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    for i in indices:
        bump = np.zeros_like(flat)
        bump[i] = h
        with no_grad():
            hi = f(Tensor((flat + bump).reshape(base.shape))).item()
            lo = f(Tensor((flat - bump).reshape(base.shape))).item()
        fd = (hi - lo) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - fd) / max(1.0, abs(a))
        if err > worst:
            worst = err
    return worst
