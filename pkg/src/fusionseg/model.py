"""Baseline and multi-stream fused 3D CNNs.

The baseline is eight 3x3x3 valid convolutions (four blocks of two) that
shrink a 25^3 patch to 9^3, two unit-kernel dense layers and a 5-way
classifier.  A fused variant runs one single-channel copy of the first
blocks per modality, merges the streams after block 1, 2 or 4, and finishes
with the baseline's remaining layers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError, StateError
from .fusion import Fusion, FusionSpec
from .nn import Conv3d, Dropout, Parameter, ReLU
from .tensor import validate

FUSION_BLOCK = {"early": 1, "middle": 2, "late": 4}

FULL_CHANNELS = (30, 30, 40, 40, 40, 40, 50, 50)
FULL_DENSE = (150, 150)
TINY_CHANNELS = (2, 2, 3, 3, 3, 3, 4, 4)
TINY_DENSE = (5, 5)
SMALL_CHANNELS = (8, 8, 10, 10, 10, 10, 12, 12)
SMALL_DENSE = (32, 32)


@dataclass(frozen=True)
class ArchitectureSpec:
    """Everything needed to rebuild a network (apart from its weights)."""

    fusion: FusionSpec | None = None
    modalities: int = 4
    block_channels: tuple = FULL_CHANNELS
    dense_channels: tuple = FULL_DENSE
    classes: int = 5
    input_patch: int = 25
    output_patch: int = 9
    conv_dropout: float = 0.02
    dense_dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "dense_channels", tuple(int(c) for c in self.dense_channels))
        if len(self.block_channels) != 8:
            raise ConfigurationError(f"expected 8 conv layer widths, got {len(self.block_channels)}")
        if min(self.block_channels + self.dense_channels) < 1 or self.classes < 2:
            raise ConfigurationError("channel counts must be positive and classes >= 2")
        if self.input_patch - 2 * len(self.block_channels) != self.output_patch:
            raise ConfigurationError(
                f"eight 3x3x3 valid convs map {self.input_patch} to "
                f"{self.input_patch - 16}, not output_patch={self.output_patch}")
        if self.fusion is not None and self.modalities < 2:
            raise ConfigurationError("fused variants need at least two modalities")

    @property
    def variant(self) -> str:
        return "baseline" if self.fusion is None else f"{self.fusion.point}-{self.fusion.function}"

    @classmethod
    def preset(cls, name: str, fusion: FusionSpec | None = None, **overrides) -> "ArchitectureSpec":
        widths = {
            "full": (FULL_CHANNELS, FULL_DENSE),
            "small": (SMALL_CHANNELS, SMALL_DENSE),
            "tiny": (TINY_CHANNELS, TINY_DENSE),
        }
        if name not in widths:
            raise ConfigurationError(f"unknown architecture preset {name!r}; choose from {sorted(widths)}")
        blocks, dense = widths[name]
        kw = dict(block_channels=blocks, dense_channels=dense)
        kw.update(overrides)
        return cls(fusion=fusion, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = None if self.fusion is None else {"point": self.fusion.point,
                                                        "function": self.fusion.function}
        d["block_channels"] = list(self.block_channels)
        d["dense_channels"] = list(self.dense_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        fusion = d.pop("fusion", None)
        if fusion is not None:
            fusion = FusionSpec(fusion["point"], fusion["function"])
        return cls(fusion=fusion, **d)


def conv_layer_names():
    return [f"conv{b}-{i}" for b in range(1, 5) for i in (1, 2)]


def _conv_block(prefix, block, in_ch, channels, rate, rng, dtype):
    """Layers of conv block ``block`` (1-based): conv, relu, conv, relu, dropout."""
    c1, c2 = channels[2 * (block - 1)], channels[2 * (block - 1) + 1]
    return [
        Conv3d(f"{prefix}conv{block}-1", in_ch, c1, 3, rng, dtype),
        ReLU(f"{prefix}conv{block}-1/relu"),
        Conv3d(f"{prefix}conv{block}-2", c1, c2, 3, rng, dtype),
        ReLU(f"{prefix}conv{block}-2/relu"),
        Dropout(rate, f"{prefix}conv{block}/dropout"),
    ]


@dataclass
class _Trace:
    """Per-sample record needed by backward."""

    stream_caches: list = field(default_factory=list)
    fusion_cache: object = None
    trunk_caches: list = field(default_factory=list)


class Network:
    """A built network: layers, parameter registry and attached spec."""

    def __init__(self, spec: ArchitectureSpec, streams, fusion, trunk, block_shapes, dtype):
        self.spec = spec
        self.streams = streams
        self.fusion = fusion
        self.trunk = trunk
        self.block_shapes = block_shapes
        self.dtype = np.dtype(dtype)
        self.registry: dict[str, Parameter] = {}
        for layer in self.layers():
            for p in layer.parameters():
                if p.name in self.registry:
                    raise ConfigurationError(f"duplicate parameter name {p.name}")
                self.registry[p.name] = p
        self._tape: list[_Trace] | None = None

    @property
    def input_shape(self):
        n = self.spec.input_patch
        return (self.spec.modalities, n, n, n)

    @property
    def output_shape(self):
        n = self.spec.output_patch
        return (self.spec.classes, n, n, n)

    def layers(self):
        for stream in self.streams:
            yield from stream
        if self.fusion is not None:
            yield self.fusion
        yield from self.trunk

    def parameters(self) -> list[Parameter]:
        return list(self.registry.values())

    def zero_grad(self):
        for p in self.registry.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.registry.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, p in self.registry.items():
            p.value[...] = state[name]

    # -- forward -----------------------------------------------------------

    def forward_sample(self, x, train=False, rng=None, trace=None):
        """Run one ``(modalities, P, P, P)`` sample.

        Returns ``(logits, tape_entry)``.  If ``trace`` is a dict it receives
        named intermediate tensors (block outputs, fusion input/output).
        """
        tape = _Trace()
        if self.fusion is None:
            h = x
        else:
            outs = []
            for i, stream in enumerate(self.streams):
                h, caches = _run(stream, x[i:i + 1], train, rng, trace, f"stream{i}/")
                tape.stream_caches.append(caches)
                outs.append(h)
            h = np.stack(outs)
            if trace is not None:
                trace["fusion/input"] = h
            h, tape.fusion_cache = self.fusion.forward(h, train, rng)
            if trace is not None:
                trace["fusion/output"] = h
        h, tape.trunk_caches = _run(self.trunk, h, train, rng, trace, "")
        return h, tape

    def forward(self, batch, mode="eval", rng=None, record=None):
        """Forward a ``(B, modalities, P, P, P)`` batch; returns ``(B, classes, p, p, p)`` logits.

        Train mode draws fresh dropout masks per sample from ``rng``.  The
        per-sample caches needed by :meth:`backward` are kept when ``record``
        is true (default: train mode only).
        """
        if mode not in ("train", "eval"):
            raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
        batch = np.asarray(batch)
        if batch.ndim != 5 or batch.shape[1:] != self.input_shape:
            raise ShapeError("network input must be (B,) + input shape",
                             batch.shape, (None,) + self.input_shape)
        train = mode == "train"
        if train and rng is None:
            raise ConfigurationError("train-mode forward needs an rng for dropout")
        if record is None:
            record = train
        batch = validate(batch.astype(self.dtype, copy=False), "network input")
        out = np.empty((batch.shape[0],) + self.output_shape, dtype=self.dtype)
        tape = []
        for b in range(batch.shape[0]):
            out[b], entry = self.forward_sample(batch[b], train, rng)
            if record:
                tape.append(entry)
        self._tape = tape if record else None
        return out

    # -- backward ----------------------------------------------------------

    def backward(self, grad_logits):
        """Overwrite every gradient buffer with d(loss)/d(param).

        ``grad_logits`` is the cotangent of the batch loss w.r.t. the logits
        of the matching forward call; per-sample contributions are summed in
        sample order.
        """
        if self._tape is None:
            raise StateError("backward called without a recorded forward pass")
        grad_logits = np.asarray(grad_logits)
        if grad_logits.shape != (len(self._tape),) + self.output_shape:
            raise ShapeError("grad_logits does not match the last forward",
                             grad_logits.shape, (len(self._tape),) + self.output_shape)
        self.zero_grad()
        for b, tape in enumerate(self._tape):
            g = _unrun(self.trunk, grad_logits[b].astype(self.dtype, copy=False), tape.trunk_caches)
            if self.fusion is not None:
                g = self.fusion.backward(g, tape.fusion_cache)
                for i, stream in enumerate(self.streams):
                    _unrun(stream, g[i], tape.stream_caches[i])
        self._tape = None

    def __repr__(self):
        return f"Network({self.spec.variant}, params={sum(p.size for p in self.registry.values())})"


def _run(layers, h, train, rng, trace, prefix):
    caches = []
    for layer in layers:
        h, cache = layer.forward(h, train, rng)
        caches.append(cache)
        if trace is not None and layer.kind == "dropout" and layer.name.startswith(prefix + "conv"):
            block = layer.name[len(prefix):].split("/")[0]
            trace[f"{prefix}{block}"] = h
    return h, caches


def _unrun(layers, g, caches):
    for layer, cache in zip(reversed(layers), reversed(caches)):
        g = layer.backward(g, cache)
    return g


def _shape_chain(layers, shape):
    shapes = {}
    for layer in layers:
        shape = layer.output_shape(shape)
        if layer.kind == "dropout" and "conv" in layer.name:
            shapes[layer.name.rsplit("/", 1)[0].split("/")[-1]] = shape
    return shape, shapes


def build(spec: ArchitectureSpec, rng=None, dtype=np.float32) -> Network:
    """Construct a network for ``spec`` with seeded uniform sqrt(6/fan-in) weights and zero biases."""
    if rng is None:
        rng = np.random.default_rng(0)
    ch = spec.block_channels
    fuse_block = 0 if spec.fusion is None else FUSION_BLOCK[spec.fusion.point]

    streams = []
    fusion = None
    if spec.fusion is not None:
        for i in range(spec.modalities):
            layers = []
            in_ch = 1
            for block in range(1, fuse_block + 1):
                layers += _conv_block(f"stream{i}/", block, in_ch, ch, spec.conv_dropout, rng, dtype)
                in_ch = ch[2 * block - 1]
            layers[0].input_grad = False
            streams.append(layers)
        fusion = Fusion(spec.fusion.function, spec.modalities, ch[2 * fuse_block - 1], rng, dtype)

    trunk = []
    in_ch = spec.modalities if spec.fusion is None else ch[2 * fuse_block - 1]
    for block in range(fuse_block + 1, 5):
        trunk += _conv_block("", block, in_ch, ch, spec.conv_dropout, rng, dtype)
        in_ch = ch[2 * block - 1]
    for j, width in enumerate(spec.dense_channels, start=1):
        trunk += [
            Conv3d(f"dense{j}", in_ch, width, 1, rng, dtype),
            ReLU(f"dense{j}/relu"),
            Dropout(spec.dense_dropout, f"dense{j}/dropout"),
        ]
        in_ch = width
    trunk.append(Conv3d("classifier", in_ch, spec.classes, 1, rng, dtype, kind="softmax-classifier"))
    if spec.fusion is None:
        trunk[0].input_grad = False

    # Shape chain: 25 -> 21 -> 17 -> 13 -> 9 across the four conv blocks.
    p = spec.input_patch
    block_shapes = {}
    if streams:
        shape = (1, p, p, p)
        for stream in streams:
            stream_out, shapes = _shape_chain(stream, shape)
        block_shapes.update(shapes)
        shape = fusion.output_shape((spec.modalities,) + stream_out)
    else:
        shape = (spec.modalities, p, p, p)
    out, shapes = _shape_chain(trunk, shape)
    block_shapes.update(shapes)
    for block in range(1, 5):
        expected = (ch[2 * block - 1],) + (p - 4 * block,) * 3
        if block_shapes[f"conv{block}"] != expected:
            raise ShapeError(f"conv{block} output shape", block_shapes[f"conv{block}"], expected)
    o = spec.output_patch
    if out != (spec.classes, o, o, o):
        raise ShapeError("network output shape", out, (spec.classes, o, o, o))
    return Network(spec, streams, fusion, trunk, block_shapes, dtype)


@dataclass
class ParamRow:
    layer: str
    weights: int
    biases: int

    @property
    def total(self) -> int:
        return self.weights + self.biases


@dataclass
class ParamTable:
    rows: list[ParamRow]

    @property
    def total(self) -> int:
        return sum(r.total for r in self.rows)

    def __getitem__(self, layer: str) -> ParamRow:
        for r in self.rows:
            if r.layer == layer:
                return r
        raise KeyError(layer)

    def format(self) -> str:
        width = max([len(r.layer) for r in self.rows] + [5])
        lines = [f"{'layer':<{width}}  {'weights':>9}  {'biases':>7}  {'total':>9}"]
        for r in self.rows:
            lines.append(f"{r.layer:<{width}}  {r.weights:>9}  {r.biases:>7}  {r.total:>9}")
        lines.append(f"{'TOTAL':<{width}}  {'':>9}  {'':>7}  {self.total:>9}")
        return "\n".join(lines)


def count_parameters(net: Network) -> ParamTable:
    rows = []
    for layer in net.layers():
        params = layer.parameters()
        if not params:
            continue
        w = sum(p.size for p in params if p.regularized)
        b = sum(p.size for p in params if not p.regularized)
        rows.append(ParamRow(layer.name, w, b))
    return ParamTable(rows)
