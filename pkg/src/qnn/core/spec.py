"""Declarative network descriptions and closed-form parameter counts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from ..errors import ConfigError, ShapeError

KINDS = ("conv", "linear", "batchnorm", "relu", "pool", "residual-block")
COMPUTE_KINDS = ("conv", "linear", "residual-block")


@dataclass
class LayerSpec:
    """One entry of a :class:`ModelSpec`.

    ``residual-block`` expands to act -> conv1 -> BN -> act -> conv2 -> BN,
    added to a parameter-free shortcut.  ``shortcut_map[j]`` names the block
    input channel added to output channel ``j`` (-1 adds nothing, i.e. zero
    padding).  When it is None the shortcut is the identity if
    ``in_channels == out_channels`` and otherwise zero-pads (or truncates)
    positionally to ``out_channels``.
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    weight_bits: int = 32
    act_bits: int = 32
    width_multiplier: float = 1.0
    mid_channels: int = 0
    pool: str = ""
    shortcut_map: Optional[list] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @property
    def pad(self) -> int:
        return self.kernel // 2

    def default_shortcut(self) -> list:
        hid = min(self.in_channels, self.out_channels)
        return list(range(hid)) + [-1] * (self.out_channels - hid)

    def needs_shortcut_map(self) -> bool:
        return self.shortcut_map is not None or self.in_channels != self.out_channels

    def param_count(self) -> int:
        k2 = self.kernel * self.kernel
        if self.kind == "conv":
            return self.in_channels * self.out_channels * k2
        if self.kind == "linear":
            return self.in_channels * self.out_channels + self.out_channels
        if self.kind == "batchnorm":
            return 2 * self.out_channels
        if self.kind == "residual-block":
            return (self.in_channels * self.mid_channels * k2 + 2 * self.mid_channels
                    + self.mid_channels * self.out_channels * k2 + 2 * self.out_channels)
        return 0

    def weight_count(self) -> int:
        """Conv/linear weight entries only (no BN, no bias)."""
        k2 = self.kernel * self.kernel
        if self.kind == "conv":
            return self.in_channels * self.out_channels * k2
        if self.kind == "linear":
            return self.in_channels * self.out_channels
        if self.kind == "residual-block":
            return (self.in_channels * self.mid_channels + self.mid_channels * self.out_channels) * k2
        return 0


@dataclass
class ModelSpec:
    layers: list
    input_shape: tuple
    num_classes: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)

    # -- serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "meta": self.meta,
            "layers": [asdict(layer) for layer in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            layers = [LayerSpec(**layer) for layer in d["layers"]]
            return cls(layers=layers, input_shape=tuple(d["input_shape"]),
                       num_classes=int(d["num_classes"]), name=d.get("name", ""),
                       meta=dict(d.get("meta", {})))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model spec: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))

    def copy(self) -> "ModelSpec":
        return ModelSpec.from_dict(json.loads(self.to_json()))

    # -- structure -------------------------------------------------------
    def compute_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind in COMPUTE_KINDS]

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def weight_count(self) -> int:
        return sum(layer.weight_count() for layer in self.layers)

    def infer_shapes(self) -> list:
        """Propagate the per-sample activation shape; returns the shape after each layer."""
        shape = tuple(self.input_shape)
        shapes = []
        for i, layer in enumerate(self.layers):
            c = shape[0]
            k = layer.kind
            if k == "conv":
                if len(shape) != 3 or c != layer.in_channels:
                    raise ShapeError(f"layer {i} (conv): input {shape}, expects {layer.in_channels} channels")
                h = (shape[1] + 2 * layer.pad - layer.kernel) // layer.stride + 1
                w = (shape[2] + 2 * layer.pad - layer.kernel) // layer.stride + 1
                if h <= 0 or w <= 0:
                    raise ShapeError(f"layer {i} (conv): output {h}x{w}")
                shape = (layer.out_channels, h, w)
            elif k == "residual-block":
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} (residual-block): input {shape}")
                if c != layer.in_channels:
                    raise ShapeError(f"layer {i} (residual-block): {c} incoming channels, expects {layer.in_channels}")
                if layer.shortcut_map is not None:
                    if len(layer.shortcut_map) != layer.out_channels:
                        raise ShapeError(f"layer {i}: shortcut_map length != {layer.out_channels}")
                    if layer.shortcut_map and max(layer.shortcut_map) >= layer.in_channels:
                        raise ShapeError(f"layer {i}: shortcut_map refers past {layer.in_channels} block inputs")
                h = (shape[1] + 2 * layer.pad - layer.kernel) // layer.stride + 1
                w = (shape[2] + 2 * layer.pad - layer.kernel) // layer.stride + 1
                shape = (layer.out_channels, h, w)
            elif k == "batchnorm":
                if c != layer.out_channels or layer.in_channels != layer.out_channels:
                    raise ShapeError(f"layer {i} (batchnorm): {c} channels, expects {layer.out_channels}")
            elif k == "relu":
                pass
            elif k == "pool":
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} (pool): input {shape}")
                if layer.pool == "global":
                    shape = (c,)
                else:
                    if shape[1] % layer.kernel or shape[2] % layer.kernel:
                        raise ShapeError(f"layer {i} (pool): {shape[1:]} not divisible by {layer.kernel}")
                    shape = (c, shape[1] // layer.kernel, shape[2] // layer.kernel)
            elif k == "linear":
                flat = 1
                for d in shape:
                    flat *= d
                if flat != layer.in_channels:
                    raise ShapeError(f"layer {i} (linear): {flat} input features, expects {layer.in_channels}")
                shape = (layer.out_channels,)
            if k in ("relu", "pool", "batchnorm") and layer.in_channels and layer.in_channels != shape[0]:
                raise ShapeError(f"layer {i} ({k}): channel count {layer.in_channels} != {shape[0]}")
            shapes.append(shape)
        return shapes

    def validate(self) -> None:
        """Check adjacent dims agree and the first/last compute layers are full precision."""
        shapes = self.infer_shapes()
        if shapes and shapes[-1] != (self.num_classes,):
            raise ShapeError(f"network output {shapes[-1]} != ({self.num_classes},)")
        comp = self.compute_layers()
        for idx in (comp[0], comp[-1]) if comp else ():
            layer = self.layers[idx]
            if layer.weight_bits != 32 or layer.act_bits != 32:
                raise ConfigError(f"layer {idx}: first and last compute layers must stay at 32 bits")

    def with_bits(self, weight_bits: int, act_bits: int) -> "ModelSpec":
        """Set the bit-widths of every hidden compute layer."""
        out = self.copy()
        comp = out.compute_layers()
        for idx in comp[1:-1]:
            out.layers[idx].weight_bits = int(weight_bits)
            out.layers[idx].act_bits = int(act_bits)
        return out


# -- templates -----------------------------------------------------------

def _bn(c):
    return LayerSpec("batchnorm", c, c)


def _relu(c):
    return LayerSpec("relu", c, c)


def _block(cin, cout, stride=1, bits=(32, 32)):
    return LayerSpec("residual-block", cin, cout, kernel=3, stride=stride, mid_channels=cout,
                     weight_bits=bits[0], act_bits=bits[1])


def toy_resnet(in_channels=1, num_classes=10, base=8, image_size=8, blocks_per_stage=1,
               weight_bits=32, act_bits=32) -> ModelSpec:
    """Desk-scale residual net: stem conv, three stages (base, 2*base, 4*base)."""
    layers = [LayerSpec("conv", in_channels, base, kernel=3), _bn(base)]
    cin = base
    for stage, mult in enumerate((1, 2, 4)):
        cout = base * mult
        for b in range(blocks_per_stage):
            stride = 2 if (stage > 0 and b == 0) else 1
            layers.append(_block(cin, cout, stride))
            cin = cout
    layers += [_relu(cin), LayerSpec("pool", cin, cin, pool="global"),
               LayerSpec("linear", cin, num_classes)]
    spec = ModelSpec(layers, (in_channels, image_size, image_size), num_classes, name="toy_resnet")
    return spec.with_bits(weight_bits, act_bits)


def resnet20(in_channels=3, num_classes=10, image_size=32, weight_bits=32, act_bits=32) -> ModelSpec:
    """CIFAR ResNet-20 layout (16/32/64 channels, 3 blocks per stage)."""
    spec = toy_resnet(in_channels, num_classes, base=16, image_size=image_size,
                      blocks_per_stage=3, weight_bits=weight_bits, act_bits=act_bits)
    spec.name = "resnet20"
    return spec


def small_cnn(in_channels=1, num_classes=10, base=8, image_size=8, weight_bits=32, act_bits=32) -> ModelSpec:
    c2 = 2 * base
    layers = [
        LayerSpec("conv", in_channels, base, kernel=3), _bn(base), _relu(base),
        LayerSpec("conv", base, c2, kernel=3), _bn(c2), _relu(c2),
        LayerSpec("pool", c2, c2, kernel=2, pool="max"),
        LayerSpec("conv", c2, c2, kernel=3), _bn(c2), _relu(c2),
        LayerSpec("pool", c2, c2, pool="global"),
        LayerSpec("linear", c2, num_classes),
    ]
    spec = ModelSpec(layers, (in_channels, image_size, image_size), num_classes, name="small_cnn")
    return spec.with_bits(weight_bits, act_bits)


def mlp(in_features=2, num_classes=2, hidden=16, weight_bits=32, act_bits=32) -> ModelSpec:
    layers = [
        LayerSpec("linear", in_features, hidden), _bn(hidden), _relu(hidden),
        LayerSpec("linear", hidden, hidden), _bn(hidden), _relu(hidden),
        LayerSpec("linear", hidden, num_classes),
    ]
    spec = ModelSpec(layers, (in_features,), num_classes, name="mlp")
    return spec.with_bits(weight_bits, act_bits)


TEMPLATES = {
    "toy_resnet": toy_resnet,
    "resnet20": resnet20,
    "small_cnn": small_cnn,
    "mlp": mlp,
}


def build_template(name: str, **kwargs) -> ModelSpec:
    if name not in TEMPLATES:
        raise ConfigError(f"unknown model template {name!r}; choose from {sorted(TEMPLATES)}")
    return TEMPLATES[name](**kwargs)


def set_layer(spec: ModelSpec, index: int, **changes) -> ModelSpec:
    out = spec.copy()
    out.layers[index] = replace(out.layers[index], **changes)
    return out
