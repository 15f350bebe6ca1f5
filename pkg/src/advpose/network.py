"""Stacked-hourglass networks for heatmap regression and reconstruction.

The pose network maps a color crop to M joint heatmaps at a quarter of the
input resolution. The critic network reuses the exact same layer plan (same
channel widths, same block sequence) but reads heatmap-resolution input, so
its stem convolves at stride 1 and skips the max-pool. With matching config,
the two differ only in the first conv's input channel count, which keeps
their per-layer parameter counts aligned.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .heatmap import bilinear_resize
from .tensor import (
    ContractViolation,
    RngStream,
    Tensor,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    maxpool2d,
    relu,
    upsample_nearest2x,
)

CHECKPOINT_MAGIC = b"HGW1"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    num_stacks: int = 1
    num_joints: int = 14
    input_res: int = 64
    heatmap_res: int = 16
    base_channels: int = 32
    hourglass_depth: int = 2
    conditional: bool = True

    def validate(self):
        if self.num_stacks < 1:
            raise ContractViolation("num_stacks must be >= 1")
        if self.num_joints < 1:
            raise ContractViolation("num_joints must be >= 1")
        if self.heatmap_res * 4 != self.input_res:
            raise ContractViolation("heatmap_res must be input_res / 4")
        if self.hourglass_depth < 1:
            raise ContractViolation("hourglass_depth must be >= 1")
        if self.heatmap_res % (1 << self.hourglass_depth) != 0:
            raise ContractViolation("heatmap_res must be divisible by 2^hourglass_depth")
        if self.base_channels < 4:
            raise ContractViolation("base_channels must be >= 4")
        return self


class Conv:
    """Conv layer owning its weight/bias plus the stride/padding it was built with."""

    def __init__(self, name, cin, cout, k, stride, padding, rng: RngStream):
        std = np.sqrt(2.0 / (cin * k * k))
        self.name = name
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(rng.normal((cout, cin, k, k), std=std), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_parameters(self):
        return [(self.name + ".weight", self.weight), (self.name + ".bias", self.bias)]

    def named_state(self):
        return []


class BatchNorm:
    def __init__(self, name, channels):
        self.name = name
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x, training):
        out, rm, rv = batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training
        )
        if training:
            self.running_mean, self.running_var = rm, rv
        return out

    def named_parameters(self):
        return [(self.name + ".scale", self.gamma), (self.name + ".shift", self.beta)]

    def named_state(self):
        return [
            (self.name + ".running_mean", self.running_mean),
            (self.name + ".running_var", self.running_var),
        ]

    def load_state(self, name, value):
        if name.endswith(".running_mean"):
            self.running_mean = value
        else:
            self.running_var = value


class Residual:
    """Pre-activation bottleneck: norm/relu then 1x1, 3x3, 1x1 at half width."""

    def __init__(self, name, cin, cout, rng):
        mid = max(cout // 2, 1)
        self.bn1 = BatchNorm(name + ".bn1", cin)
        self.conv1 = Conv(name + ".conv1", cin, mid, 1, 1, 0, rng)
        self.bn2 = BatchNorm(name + ".bn2", mid)
        self.conv2 = Conv(name + ".conv2", mid, mid, 3, 1, 1, rng)
        self.bn3 = BatchNorm(name + ".bn3", mid)
        self.conv3 = Conv(name + ".conv3", mid, cout, 1, 1, 0, rng)
        self.proj = Conv(name + ".proj", cin, cout, 1, 1, 0, rng) if cin != cout else None

    def __call__(self, x, training):
        y = self.conv1(relu(self.bn1(x, training)))
        y = self.conv2(relu(self.bn2(y, training)))
        y = self.conv3(relu(self.bn3(y, training)))
        skip = self.proj(x) if self.proj is not None else x
        return add(y, skip)

    def _layers(self):
        layers = [self.bn1, self.conv1, self.bn2, self.conv2, self.bn3, self.conv3]
        if self.proj is not None:
            layers.append(self.proj)
        return layers

    def named_parameters(self):
        return [p for l in self._layers() for p in l.named_parameters()]

    def named_state(self):
        return [s for l in self._layers() for s in l.named_state()]


class Hourglass:
    """Recursive pool/process/upsample block with an identity-resolution branch."""

    def __init__(self, name, depth, channels, rng):
        self.up1 = Residual(name + ".up1", channels, channels, rng)
        self.low1 = Residual(name + ".low1", channels, channels, rng)
        if depth > 1:
            self.low2 = Hourglass(name + ".low2", depth - 1, channels, rng)
        else:
            self.low2 = Residual(name + ".low2", channels, channels, rng)
        self.low3 = Residual(name + ".low3", channels, channels, rng)

    def __call__(self, x, training):
        up = self.up1(x, training)
        low = self.low1(maxpool2d(x), training)
        low = self.low2(low, training)
        low = self.low3(low, training)
        return add(up, upsample_nearest2x(low))

    def named_parameters(self):
        return [
            p
            for l in (self.up1, self.low1, self.low2, self.low3)
            for p in l.named_parameters()
        ]

    def named_state(self):
        return [
            s for l in (self.up1, self.low1, self.low2, self.low3) for s in l.named_state()
        ]


class HourglassNet:
    """Trunk shared by the pose network and the critic.

    ``downsample`` selects the stem behavior: True runs the 7x7 conv at
    stride 2 followed by a max-pool (so spatial extent drops by 4), False
    keeps resolution, which is what the heatmap-resolution critic needs. The
    layer plan and channel widths are identical either way.
    """

    def __init__(self, in_channels, num_stacks, channels, depth, num_joints, downsample, rng):
        if channels % 4 != 0:
            raise ContractViolation("base channels must be divisible by 4")
        self.in_channels = in_channels
        self.num_stacks = num_stacks
        self.num_joints = num_joints
        self.downsample = downsample
        c4, c2 = channels // 4, channels // 2
        self.conv1 = Conv("stem.conv1", in_channels, c4, 7, 2 if downsample else 1, 3, rng)
        self.bn1 = BatchNorm("stem.bn1", c4)
        self.res1 = Residual("stem.res1", c4, c2, rng)
        self.res2 = Residual("stem.res2", c2, c2, rng)
        self.res3 = Residual("stem.res3", c2, channels, rng)
        self.hourglasses = []
        self.lin_convs = []
        self.lin_bns = []
        self.heat_convs = []
        self.remap_feats = []
        self.remap_heats = []
        for i in range(num_stacks):
            pre = f"stack{i}"
            self.hourglasses.append(Hourglass(pre + ".hg", depth, channels, rng))
            self.lin_convs.append(Conv(pre + ".lin", channels, channels, 1, 1, 0, rng))
            self.lin_bns.append(BatchNorm(pre + ".lin_bn", channels))
            self.heat_convs.append(Conv(pre + ".heat", channels, num_joints, 1, 1, 0, rng))
            if i < num_stacks - 1:
                self.remap_feats.append(Conv(pre + ".remap_feat", channels, channels, 1, 1, 0, rng))
                self.remap_heats.append(Conv(pre + ".remap_heat", num_joints, channels, 1, 1, 0, rng))

    def forward(self, x: Tensor, training: bool = False):
        t = relu(self.bn1(self.conv1(x), training))
        t = self.res1(t, training)
        if self.downsample:
            t = maxpool2d(t)
        t = self.res2(t, training)
        t = self.res3(t, training)
        outs = []
        for i in range(self.num_stacks):
            hg = self.hourglasses[i](t, training)
            lin = relu(self.lin_bns[i](self.lin_convs[i](hg), training))
            heat = self.heat_convs[i](lin)
            outs.append(heat)
            if i < self.num_stacks - 1:
                t = add(add(t, self.remap_feats[i](lin)), self.remap_heats[i](heat))
        return outs

    def _layers(self):
        layers = [self.conv1, self.bn1, self.res1, self.res2, self.res3]
        for i in range(self.num_stacks):
            layers += [self.hourglasses[i], self.lin_convs[i], self.lin_bns[i], self.heat_convs[i]]
            if i < self.num_stacks - 1:
                layers += [self.remap_feats[i], self.remap_heats[i]]
        return layers

    def named_parameters(self):
        return [p for l in self._layers() for p in l.named_parameters()]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def batchnorms(self):
        found = []

        def walk(layer):
            if isinstance(layer, BatchNorm):
                found.append(layer)
            elif isinstance(layer, Residual):
                for sub in layer._layers():
                    walk(sub)
            elif isinstance(layer, Hourglass):
                for sub in (layer.up1, layer.low1, layer.low2, layer.low3):
                    walk(sub)

        for layer in self._layers():
            walk(layer)
        return found

    def named_state(self):
        return [s for l in self._layers() for s in l.named_state()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def build_generator(cfg: NetworkConfig, rng: RngStream) -> HourglassNet:
    cfg.validate()
    net = HourglassNet(
        3, cfg.num_stacks, cfg.base_channels, cfg.hourglass_depth, cfg.num_joints, True, rng
    )
    net.expected_res = cfg.input_res
    net.conditional = False
    return net


def build_discriminator(cfg: NetworkConfig, rng: RngStream, num_stacks: int = 1) -> HourglassNet:
    """Reconstruction critic. Runs at heatmap resolution, single stack by default."""
    cfg.validate()
    cin = cfg.num_joints + (3 if cfg.conditional else 0)
    net = HourglassNet(
        cin, num_stacks, cfg.base_channels, cfg.hourglass_depth, cfg.num_joints, False, rng
    )
    net.expected_res = cfg.heatmap_res
    net.conditional = cfg.conditional
    return net


def forward_generator(net: HourglassNet, image: Tensor, training: bool = False):
    """All N stack outputs, ordered first to last."""
    if image.data.ndim != 4 or image.data.shape[1] != 3:
        raise ContractViolation("generator input must be (B,3,R,R)")
    if image.data.shape[2] != net.expected_res or image.data.shape[3] != net.expected_res:
        raise ContractViolation(f"generator expects {net.expected_res}px input")
    return net.forward(image, training)


def forward_discriminator(net: HourglassNet, heatmaps: Tensor, image=None, training: bool = False):
    """Reconstructed heatmaps for real or predicted input maps.

    Conditional critics take the color image alongside; it is bilinearly
    reduced to heatmap resolution and appended on the channel axis.
    """
    if heatmaps.data.ndim != 4 or heatmaps.data.shape[1] != net.num_joints:
        raise ContractViolation("critic input must be (B,M,r,r)")
    r = net.expected_res
    if heatmaps.data.shape[2] != r or heatmaps.data.shape[3] != r:
        raise ContractViolation(f"critic expects {r}px heatmaps")
    if net.conditional:
        if image is None:
            raise ContractViolation("conditional critic needs the image")
        small = bilinear_resize(image.data if isinstance(image, Tensor) else image, r, r)
        x = concat_channels([heatmaps, Tensor(small)])
    else:
        if image is not None:
            raise ContractViolation("unconditional critic takes no image")
        x = heatmaps
    return net.forward(x, training)[-1]


# ---------------------------------------------------------------------------
# checkpoints: versioned little-endian container of (name, shape, f64 values)
# for every parameter and every running moment, ordered by construction path


def _entries(net: HourglassNet):
    for name, t in net.named_parameters():
        yield name, t.data
    for name, arr in net.named_state():
        yield name, arr


def save_checkpoint(net: HourglassNet, path):
    with open(path, "wb") as fh:
        entries = list(_entries(net))
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def read_checkpoint(path):
    """Parse a checkpoint into an ordered {name: array} dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ContractViolation("not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ContractViolation(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(raw):
        raise ContractViolation("checkpoint has trailing bytes")
    return out


def load_checkpoint(net: HourglassNet, path):
    """Restore parameters and running moments in place. Shapes must match."""
    stored = read_checkpoint(path)
    own_params = dict(net.named_parameters())
    state_owners = {}
    for layer in net.batchnorms():
        for name, _ in layer.named_state():
            state_owners[name] = layer
    expected = set(own_params) | set(state_owners)
    if set(stored) != expected:
        missing = sorted(expected - set(stored))[:3]
        extra = sorted(set(stored) - expected)[:3]
        raise ContractViolation(f"checkpoint entry mismatch: missing={missing} extra={extra}")
    for name, arr in stored.items():
        if name in own_params:
            if own_params[name].data.shape != arr.shape:
                raise ContractViolation(f"shape mismatch for {name}")
            own_params[name].data = arr.copy()
        else:
            layer = state_owners[name]
            if layer.named_state()[0][1].shape != arr.shape:
                raise ContractViolation(f"shape mismatch for {name}")
            layer.load_state(name, arr.copy())
