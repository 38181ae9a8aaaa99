"""U-Net denoiser / segmentation builders, initialisation and checkpoints."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "jointdn-checkpoint"
CHECKPOINT_VERSION = 1
HEADS = ("residual", "sigmoid")


@dataclass(frozen=True)
class Layer:
    kind: str  # conv3 | conv1 | bn | lrelu | pool | up | concat | push | head
    name: str = ""
    cin: int = 0
    cout: int = 0

    def describe(self) -> str:
        parts = [f"kind={self.kind}"]
        if self.name:
            parts.append(f"name={self.name}")
        if self.cin or self.cout:
            parts += [f"cin={self.cin}", f"cout={self.cout}"]
        return " ".join(parts)


@dataclass
class Network:
    in_channels: int
    out_channels: int
    scales: int
    base_width: int
    head: str
    layers: list[Layer]
    params: dict[str, Tensor]
    running: dict[str, list[np.ndarray]] = field(default_factory=dict)
    frozen: bool = False

    @property
    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self) -> "Network":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
        return self

    def copy(self) -> "Network":
        params = {k: Tensor(p.values.copy(), requires_grad=p.requires_grad, name=k) for k, p in self.params.items()}
        running = {k: [a.copy() for a in v] for k, v in self.running.items()}
        return Network(self.in_channels, self.out_channels, self.scales, self.base_width, self.head,
                       list(self.layers), params, running, self.frozen)

    def state_bytes(self) -> bytes:
        return b"".join(p.values.tobytes() for p in self.params.values())

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return forward(self, x, mode)


def _width(base: int, level: int) -> int:
    return base * 2**level


def build_unet(in_channels: int, out_channels: int, scales: int = 2, base_width: int = 8,
               head: str = "residual", seed: int | None = 0) -> Network:
    """Build a U-Net with BN + LeakyReLU double convolutions.

    ``head="residual"`` adds the raw input to the final 1×1 convolution
    (requires ``in_channels == out_channels``); ``head="sigmoid"`` squashes
    the output to (0, 1).
    """
    if scales < 1:
        raise ValueError(f"scales must be >= 1, got {scales}")
    if base_width < 1 or in_channels < 1 or out_channels < 1:
        raise ValueError("channel counts must be positive")
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}, got {head!r}")
    if head == "residual" and in_channels != out_channels:
        raise ValueError("residual head needs in_channels == out_channels")

    layers: list[Layer] = []

    def double(prefix: str, cin: int, cout: int) -> None:
        for j, c0 in ((1, cin), (2, cout)):
            layers.append(Layer("conv3", f"{prefix}.conv{j}", c0, cout))
            layers.append(Layer("bn", f"{prefix}.bn{j}", cout, cout))
            layers.append(Layer("lrelu"))

    cin = in_channels
    for level in range(scales):
        w = _width(base_width, level)
        double(f"enc{level}", cin, w)
        layers.append(Layer("push"))
        layers.append(Layer("pool"))
        cin = w
    double("mid", cin, _width(base_width, scales))
    cin = _width(base_width, scales)
    for level in reversed(range(scales)):
        w = _width(base_width, level)
        layers.append(Layer("up"))
        layers.append(Layer("concat"))
        double(f"dec{level}", cin + w, w)
        cin = w
    layers.append(Layer("conv1", "out.conv", cin, out_channels))
    layers.append(Layer("head", head))

    params: dict[str, Tensor] = {}
    running: dict[str, list[np.ndarray]] = {}
    for layer in layers:
        if layer.kind in ("conv3", "conv1"):
            k = 3 if layer.kind == "conv3" else 1
            params[f"{layer.name}.weight"] = Tensor(np.zeros((layer.cout, layer.cin, k, k)), True, f"{layer.name}.weight")
            params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.cout), True, f"{layer.name}.bias")
        elif layer.kind == "bn":
            params[f"{layer.name}.gamma"] = Tensor(np.ones(layer.cout), True, f"{layer.name}.gamma")
            params[f"{layer.name}.beta"] = Tensor(np.zeros(layer.cout), True, f"{layer.name}.beta")
            running[layer.name] = [np.zeros(layer.cout), np.ones(layer.cout)]

    net = Network(in_channels, out_channels, scales, base_width, head, layers, params, running)
    if seed is not None:
        init_params(net, seed)
    return net


def init_params(net: Network, seed: int) -> Network:
    """Fan-in uniform conv weights (bound sqrt(6 / fan_in)), zero biases, unit BN.

    The output convolution of a residual network starts at zero, so a fresh
    denoiser is exactly the identity map.
    """
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if layer.kind in ("conv3", "conv1"):
            w = net.params[f"{layer.name}.weight"]
            fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            bound = np.sqrt(6.0 / fan_in)
            w.values = rng.uniform(-bound, bound, size=w.shape)
            if net.head == "residual" and layer.kind == "conv1":
                w.values = np.zeros(w.shape)
            net.params[f"{layer.name}.bias"].values = np.zeros(layer.cout)
        elif layer.kind == "bn":
            net.params[f"{layer.name}.gamma"].values = np.ones(layer.cout)
            net.params[f"{layer.name}.beta"].values = np.zeros(layer.cout)
            net.running[layer.name] = [np.zeros(layer.cout), np.ones(layer.cout)]
    return net


def forward(net: Network, x: Tensor, mode: str = "train") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.values.ndim != 4:
        raise ValueError(f"input must be N×C×H×W, got shape {x.shape}")
    if x.shape[1] != net.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, network expects {net.in_channels}")
    div = 2**net.scales
    h, w = x.shape[2:]
    if h % div or w % div:
        raise ValueError(f"spatial dims {h}×{w} must be divisible by {div} for {net.scales} scales")

    p = net.params
    skips: list[Tensor] = []
    y = x
    for layer in net.layers:
        kind = layer.kind
        if kind == "conv3":
            y = ad.conv2d(y, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"], padding=1)
        elif kind == "conv1":
            y = ad.conv2d(y, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"], padding=0)
        elif kind == "bn":
            rm, rv = net.running[layer.name]
            y = ad.batchnorm2d(y, p[f"{layer.name}.gamma"], p[f"{layer.name}.beta"], rm, rv, mode=mode)
        elif kind == "lrelu":
            y = ad.leaky_relu(y)
        elif kind == "push":
            skips.append(y)
        elif kind == "pool":
            y = ad.maxpool2(y)
        elif kind == "up":
            y = ad.upsample_nearest2(y)
        elif kind == "concat":
            y = ad.concat_channels(y, skips.pop())
        elif kind == "head":
            y = ad.add(y, x) if layer.name == "residual" else ad.sigmoid(y)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    assert not skips, "unconsumed skip connection"
    return y


# ---------------------------------------------------------------- checkpoints

def _header(net: Network) -> list[str]:
    lines = [
        f"format={CHECKPOINT_FORMAT}",
        f"version={CHECKPOINT_VERSION}",
        f"in_channels={net.in_channels}",
        f"out_channels={net.out_channels}",
        f"scales={net.scales}",
        f"base_width={net.base_width}",
        f"head={net.head}",
        f"frozen={int(net.frozen)}",
        f"layers={len(net.layers)}",
    ]
    lines += [f"layer.{i}={layer.describe()}" for i, layer in enumerate(net.layers)]
    names = list(net.params) + [f"{k}.running_mean" for k in net.running] + [f"{k}.running_var" for k in net.running]
    lines.append(f"tensors={len(names)}")
    lines += [f"tensor.{i}={name}" for i, name in enumerate(names)]
    lines.append("end")
    return lines


def checkpoint_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(("\n".join(_header(net)) + "\n").encode("ascii"))
    for t in net.params.values():
        ad.dump_tensor(t, buf)
    for rm, _ in net.running.values():
        ad.dump_tensor(rm, buf)
    for _, rv in net.running.values():
        ad.dump_tensor(rv, buf)
    return buf.getvalue()


def save_checkpoint(net: Network, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path: str | Path) -> Network:
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)
    meta: dict[str, str] = {}
    while True:
        line = buf.readline()
        if not line:
            raise ValueError(f"{path}: truncated header (no 'end' line)")
        text = line.decode("ascii", errors="replace").rstrip("\n")
        if text == "end":
            break
        key, sep, value = text.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed header line {text!r}")
        meta[key] = value

    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint (format={meta.get('format')!r})")
    if meta.get("version") != str(CHECKPOINT_VERSION):
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')!r}, expected {CHECKPOINT_VERSION}")
    try:
        net = build_unet(int(meta["in_channels"]), int(meta["out_channels"]), int(meta["scales"]),
                         int(meta["base_width"]), meta["head"], seed=None)
    except KeyError as exc:
        raise ValueError(f"{path}: header missing key {exc.args[0]!r}") from None
    expected = _header(net)
    n_layers = int(meta.get("layers", -1))
    if n_layers != len(net.layers) or any(
        meta.get(f"layer.{i}") != layer.describe() for i, layer in enumerate(net.layers)
    ):
        raise ValueError(f"{path}: layer descriptors do not match the declared architecture")
    names = [line.split("=", 1)[1] for line in expected if line.startswith("tensor.")]
    if int(meta.get("tensors", -1)) != len(names):
        raise ValueError(f"{path}: expected {len(names)} tensors, header declares {meta.get('tensors')}")

    def read(name: str, shape: tuple[int, ...]) -> np.ndarray:
        try:
            arr = ad.load_tensor(buf)
        except ValueError as exc:
            raise ValueError(f"{path}: tensor {name}: {exc}") from None
        if arr.shape != shape:
            raise ValueError(f"{path}: tensor {name} has shape {arr.shape}, expected {shape}")
        return arr

    for name, t in net.params.items():
        t.values = read(name, t.shape)
    for key, (rm, rv) in net.running.items():
        net.running[key][0] = read(f"{key}.running_mean", rm.shape)
    for key, (rm, rv) in net.running.items():
        net.running[key][1] = read(f"{key}.running_var", rv.shape)
    if buf.read(1):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    if meta.get("frozen") == "1":
        net.freeze()
    return net
