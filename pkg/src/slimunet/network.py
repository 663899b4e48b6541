"""Slim U-Net and standard U-Net graphs: construction, counting, execution.

A :class:`LayerGraph` is a flat, ordered list of :class:`LayerSpec` entries
plus skip pairs ``(source layer, concat layer)``. Counting parameters and
MACs only needs the graph; :class:`Network` instantiates the layers and runs
them.

Both variants share the same skeleton (four pooling levels, channel doubling
from ``base_filters``):

* encoder level: conv3x3 -> BN -> ReLU (twice in the standard U-Net), the
  ReLU output feeds the skip, then 2x2 max-pool -> dropout;
* bottleneck: conv3x3 -> BN -> ReLU (twice in the standard U-Net) at
  ``16 * base_filters`` channels;
* decoder level: 2x upsample -> conv3x3 halving channels -> ReLU (no BN),
  concat(skip, up) -> dropout -> conv3x3 -> BN -> ReLU (twice in the
  standard U-Net);
* head: conv1x1 to one channel -> sigmoid.

With ``base_filters=32`` and a single input channel this gives 4,705,377
trainable parameters for the slim variant and 8,635,809 for the standard
one. Moving BN statistics are not trainable and are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

SLIM = "slim"
STANDARD = "std"
LEVELS = 4


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_channels: int
    out_channels: int


@dataclass
class LayerGraph:
    variant: str
    base_filters: int
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    skips: list[tuple[str, str]] = field(default_factory=list)

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)


@dataclass
class ParamReport:
    per_layer: list[tuple[str, int]]
    total_trainable: int

    def format(self) -> str:
        width = max(len(name) for name, _ in self.per_layer)
        lines = [f"{name:<{width}}  {count:>10,d}" for name, count in self.per_layer]
        lines.append(f"{'total':<{width}}  {self.total_trainable:>10,d}")
        return "\n".join(lines)


def _conv_block(layers, prefix, c_in, c_out, repeats):
    for r in range(1, repeats + 1):
        layers.append(LayerSpec(f"{prefix}_conv{r}", "conv3x3", c_in, c_out))
        layers.append(LayerSpec(f"{prefix}_bn{r}", "batchnorm", c_out, c_out))
        layers.append(LayerSpec(f"{prefix}_relu{r}", "relu", c_out, c_out))
        c_in = c_out
    return f"{prefix}_relu{repeats}"


def _build(variant, base_filters, input_shape):
    if base_filters < 1:
        raise ValueError("base_filters must be positive")
    c, h, w = input_shape
    factor = 2 ** LEVELS
    if h % factor or w % factor:
        raise ValueError(
            f"input spatial size {h}x{w} must be divisible by {factor}"
        )
    repeats = 1 if variant == SLIM else 2
    layers: list[LayerSpec] = []
    skips: list[tuple[str, str]] = []
    sources = {}

    c_in = c
    for level in range(1, LEVELS + 1):
        c_out = base_filters * 2 ** (level - 1)
        sources[level] = _conv_block(layers, f"enc{level}", c_in, c_out, repeats)
        layers.append(LayerSpec(f"enc{level}_pool", "maxpool2x2", c_out, c_out))
        layers.append(LayerSpec(f"enc{level}_drop", "dropout", c_out, c_out))
        c_in = c_out

    c_mid = base_filters * 2 ** LEVELS
    _conv_block(layers, "mid", c_in, c_mid, repeats)
    c_in = c_mid

    for level in range(LEVELS, 0, -1):
        c_out = base_filters * 2 ** (level - 1)
        p = f"dec{level}"
        layers.append(LayerSpec(f"{p}_up", "upsample2x2", c_in, c_in))
        layers.append(LayerSpec(f"{p}_upconv", "conv3x3", c_in, c_out))
        layers.append(LayerSpec(f"{p}_uprelu", "relu", c_out, c_out))
        layers.append(LayerSpec(f"{p}_concat", "concat_channels", c_out, 2 * c_out))
        skips.append((sources[level], f"{p}_concat"))
        layers.append(LayerSpec(f"{p}_drop", "dropout", 2 * c_out, 2 * c_out))
        _conv_block(layers, p, 2 * c_out, c_out, repeats)
        c_in = c_out

    layers.append(LayerSpec("head_conv", "conv1x1", c_in, 1))
    layers.append(LayerSpec("head_sigmoid", "sigmoid", 1, 1))
    return LayerGraph(variant, base_filters, tuple(input_shape), layers, skips)


def build_slim_unet(base_filters: int = 32, input_shape=(1, 128, 128)) -> LayerGraph:
    """Slim U-Net: one conv/BN/ReLU per encoder, bottleneck and decoder stage."""
    return _build(SLIM, base_filters, input_shape)


def build_std_unet(base_filters: int = 32, input_shape=(1, 128, 128)) -> LayerGraph:
    """Standard U-Net: two conv/BN/ReLU pairs per stage."""
    return _build(STANDARD, base_filters, input_shape)


def build_graph(variant: str, base_filters: int = 32, input_shape=(1, 128, 128)) -> LayerGraph:
    if variant == SLIM:
        return build_slim_unet(base_filters, input_shape)
    if variant == STANDARD:
        return build_std_unet(base_filters, input_shape)
    raise ValueError(f"unknown model variant {variant!r} (expected 'slim' or 'std')")


def _layer_params(spec: LayerSpec) -> int:
    if spec.kind == "conv3x3":
        return 9 * spec.in_channels * spec.out_channels + spec.out_channels
    if spec.kind == "conv1x1":
        return spec.in_channels * spec.out_channels + spec.out_channels
    if spec.kind == "batchnorm":
        return 2 * spec.out_channels
    return 0


def count_params(graph: LayerGraph) -> ParamReport:
    per_layer = [(s.name, _layer_params(s)) for s in graph.layers if _layer_params(s)]
    return ParamReport(per_layer, sum(n for _, n in per_layer))


def infer_shapes(graph: LayerGraph, batch: int = 1) -> list[tuple[str, tuple[int, int, int, int]]]:
    """Output shape of every layer for a batch of ``batch`` inputs."""
    c, h, w = graph.input_shape
    shapes = []
    for spec in graph.layers:
        if spec.kind == "maxpool2x2":
            h, w = h // 2, w // 2
        elif spec.kind == "upsample2x2":
            h, w = h * 2, w * 2
        c = spec.out_channels
        shapes.append((spec.name, (batch, c, h, w)))
    return shapes


def count_macs(graph: LayerGraph) -> int:
    """Multiply-accumulates of one forward pass over a single image (convs only)."""
    total = 0
    for spec, (_, shape) in zip(graph.layers, infer_shapes(graph)):
        if spec.kind in ("conv3x3", "conv1x1"):
            k2 = 9 if spec.kind == "conv3x3" else 1
            total += shape[2] * shape[3] * k2 * spec.in_channels * spec.out_channels
    return total


class Network:
    """Executable instance of a :class:`LayerGraph`.

    ``forward`` caches what ``backward`` needs; parameter gradients are
    accumulated into each :class:`~slimunet.autodiff.Param` and must be reset
    with :meth:`zero_grad` between steps.
    """

    def __init__(self, graph: LayerGraph, dropout: float = 0.125, rng=None,
                 dtype=np.float32):
        self.graph = graph
        self.dtype = np.dtype(dtype)
        self.dropout = dropout
        self.rng = rng if rng is not None else ad.make_rng(0, "dropout")
        self.layers = [self._make_layer(spec) for spec in graph.layers]
        self._skip_source = {src: dst for src, dst in graph.skips}
        self._skip_target = {dst: src for src, dst in graph.skips}
        self._pending = None

    def _make_layer(self, spec: LayerSpec) -> ad.Layer:
        kind = spec.kind
        if kind == "conv3x3":
            return ad.Conv2D(spec.name, spec.in_channels, spec.out_channels, 3, self.dtype)
        if kind == "conv1x1":
            return ad.Conv2D(spec.name, spec.in_channels, spec.out_channels, 1, self.dtype)
        if kind == "batchnorm":
            return ad.BatchNorm(spec.name, spec.out_channels, self.dtype)
        if kind == "relu":
            return ad.ReLU(spec.name)
        if kind == "sigmoid":
            return ad.Sigmoid(spec.name)
        if kind == "dropout":
            return ad.Dropout(spec.name, self.dropout, self.rng)
        if kind == "maxpool2x2":
            return ad.MaxPool(spec.name)
        if kind == "upsample2x2":
            return ad.Upsample(spec.name)
        if kind == "concat_channels":
            return ad.Concat(spec.name)
        raise ValueError(f"unknown layer kind {kind!r}")

    @property
    def variant(self) -> str:
        return self.graph.variant

    def params(self) -> list[ad.Param]:
        return [p for layer in self.layers for p in layer.params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def set_rng(self, rng) -> None:
        self.rng = rng
        for layer in self.layers:
            if isinstance(layer, ad.Dropout):
                layer.rng = rng

    def forward(self, x: np.ndarray, mode: str = "train", use_skips: bool = True) -> np.ndarray:
        """Run the graph on ``x`` of shape ``(n, c, h, w)``.

        ``use_skips=False`` feeds zeros in place of every skip tensor, which
        is only useful to probe that the skip paths matter.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        ad._check_4d(x)
        c, h, w = self.graph.input_shape
        if x.shape[1] != c or x.shape[2] % 16 or x.shape[3] % 16:
            raise ad.ShapeError(
                f"input shape {x.shape} incompatible with graph input {self.graph.input_shape}"
            )
        x = x.astype(self.dtype, copy=False)
        saved = {}
        for layer in self.layers:
            if isinstance(layer, ad.Concat):
                skip = saved.pop(self._skip_target[layer.name])
                if not use_skips:
                    skip = np.zeros_like(skip)
                x = layer.forward(skip, x, mode)
            else:
                x = layer.forward(x, mode)
            if layer.name in self._skip_source:
                saved[layer.name] = x
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Backpropagate ``d loss / d output``; returns the input gradient."""
        pending = {}
        grad = grad.astype(self.dtype, copy=False)
        for layer in reversed(self.layers):
            if layer.name in pending:
                grad = grad + pending.pop(layer.name)
            if isinstance(layer, ad.Concat):
                g_skip, grad = layer.backward(grad)
                pending[self._skip_target[layer.name]] = g_skip
            else:
                grad = layer.backward(grad)
        return grad

    def state_dict(self) -> dict[str, np.ndarray]:
        """All parameters and BN moving statistics, in layer order."""
        state = {}
        for layer in self.layers:
            for p in layer.params():
                state[p.name] = p.data
            state.update(layer.buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(
                f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}"
            )
        for name, target in own.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise ValueError(f"{name}: shape {value.shape} != expected {target.shape}")
            target[...] = value


def init_params(net: Network, rng: np.random.Generator) -> None:
    """He-normal conv kernels (variance ``2 / fan_in``, ``fan_in = k*k*c_in``).

    Biases and BN betas are zero, BN gammas one, moving stats reset to 0/1.
    """
    for layer in net.layers:
        if isinstance(layer, ad.Conv2D):
            k, _, c_in, _ = layer.weight.data.shape
            std = np.sqrt(2.0 / (k * k * c_in))
            layer.weight.data[...] = rng.normal(0.0, std, layer.weight.data.shape)
            layer.bias.data[...] = 0
        elif isinstance(layer, ad.BatchNorm):
            layer.gamma.data[...] = 1
            layer.beta.data[...] = 0
            layer.moving_mean[...] = 0
            layer.moving_var[...] = 1
    net.zero_grad()


def graph_from_state(state: dict[str, np.ndarray], input_size: int = 128) -> LayerGraph:
    """Recover the graph a checkpoint was saved from (variant, width, channels)."""
    try:
        kernel = state["enc1_conv1/kernel"]
    except KeyError:
        raise ValueError("checkpoint does not contain a U-Net (no enc1_conv1/kernel)") from None
    variant = STANDARD if "enc1_conv2/kernel" in state else SLIM
    _, _, c_in, base = kernel.shape
    return build_graph(variant, int(base), (int(c_in), input_size, input_size))
