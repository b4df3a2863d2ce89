"""Layer modules and the :class:`Network` assembled from a :class:`ModelSpec`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .. import quant
from ..errors import ShapeError
from . import functional as F
from .spec import LayerSpec, ModelSpec
from .tensor import Tensor, as_tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _act(x: Tensor, bits: int) -> Tensor:
    """ReLU, followed by the activation quantizer for quantized layers."""
    x = F.relu(x)
    return quant.quantize_activation_tensor(x, bits) if bits < quant.FULL_PRECISION else x


class Module:
    def params(self):
        return []

    def buffers(self):
        return []

    def bn_layers(self):
        return []


class Conv(Module):
    def __init__(self, cin, cout, kernel, stride, weight_bits, act_bits, rng, dtype, quantize_input=True):
        self.stride, self.pad, self.kernel = stride, kernel // 2, kernel
        self.weight_bits, self.act_bits = weight_bits, act_bits
        self.quantize_input = quantize_input
        fan_in = cin * kernel * kernel
        self.weight = Tensor(he_normal(rng, (cout, cin, kernel, kernel), fan_in, dtype), requires_grad=True)
        # inference-time weights (e.g. saved binary weights); bypasses the quantizer
        self.frozen = None
        # optional inference kernel taking and returning numpy arrays
        self.packed = None

    def params(self):
        return [("weight", self.weight)]

    def effective_weight(self) -> np.ndarray:
        if self.frozen is not None:
            return self.frozen
        return quant.effective_weight(self.weight.data, self.weight_bits)

    def forward(self, x, training):
        if self.quantize_input and self.act_bits < quant.FULL_PRECISION:
            x = quant.quantize_activation_tensor(x, self.act_bits)
        if self.packed is not None:
            return Tensor(self.packed(x.data))
        w = Tensor(self.frozen) if self.frozen is not None else quant.quantize_weight_tensor(self.weight, self.weight_bits)
        return F.conv2d(x, w, self.stride, self.pad)


class Linear(Module):
    def __init__(self, cin, cout, weight_bits, act_bits, rng, dtype):
        self.weight_bits, self.act_bits = weight_bits, act_bits
        self.weight = Tensor(he_normal(rng, (cout, cin), cin, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.frozen = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def effective_weight(self) -> np.ndarray:
        if self.frozen is not None:
            return self.frozen
        return quant.effective_weight(self.weight.data, self.weight_bits)

    def forward(self, x, training):
        if x.ndim > 2:
            x = F.flatten(x)
        if self.act_bits < quant.FULL_PRECISION:
            x = quant.quantize_activation_tensor(x, self.act_bits)
        w = Tensor(self.frozen) if self.frozen is not None else quant.quantize_weight_tensor(self.weight, self.weight_bits)
        return F.linear(x, w, self.bias)


class BatchNorm(Module):
    def __init__(self, channels, dtype, gamma_init=1.0, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.gamma = Tensor(np.full(channels, gamma_init, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps
        # 0/1 per channel; pruned-but-not-removed channels are forced to 0
        self.mask = None

    @property
    def channels(self):
        return self.gamma.shape[0]

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def bn_layers(self):
        return [("", self)]

    def _shape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, training):
        out = F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training, self.momentum, self.eps)
        if self.mask is not None:
            out = F.mul(out, self.mask.reshape(self._shape(out)))
        return out


class ReLU(Module):
    def forward(self, x, training):
        return F.relu(x)


class Pool(Module):
    def __init__(self, mode, kernel):
        self.mode, self.kernel = mode, kernel

    def forward(self, x, training):
        if self.mode == "global":
            return F.global_avg_pool2d(x)
        return F.max_pool2d(x, self.kernel)


class ResidualBlock(Module):
    """act -> conv1 -> BN1 -> act -> conv2 -> BN2, plus a parameter-free shortcut.

    The stream mask (from BN2) is applied after the addition so that a pruned
    output channel is exactly zero downstream.
    """

    def __init__(self, layer: LayerSpec, rng, dtype, gamma_init=1.0):
        self.spec = layer
        self.act_bits = layer.act_bits
        self.conv1 = Conv(layer.in_channels, layer.mid_channels, layer.kernel, layer.stride,
                          layer.weight_bits, layer.act_bits, rng, dtype, quantize_input=False)
        self.bn1 = BatchNorm(layer.mid_channels, dtype, gamma_init)
        self.conv2 = Conv(layer.mid_channels, layer.out_channels, layer.kernel, 1,
                          layer.weight_bits, layer.act_bits, rng, dtype, quantize_input=False)
        self.bn2 = BatchNorm(layer.out_channels, dtype, gamma_init)
        self.shortcut_map = layer.shortcut_map if layer.shortcut_map is not None else (
            layer.default_shortcut() if layer.in_channels != layer.out_channels else None)

    def params(self):
        out = []
        for name, mod in (("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)):
            out += [(f"{name}.{p}", t) for p, t in mod.params()]
        return out

    def buffers(self):
        out = []
        for name, mod in (("bn1", self.bn1), ("bn2", self.bn2)):
            out += [(f"{name}.{b}", arr) for b, arr in mod.buffers()]
        return out

    def bn_layers(self):
        return [("bn1", self.bn1), ("bn2", self.bn2)]

    def forward(self, x, training):
        h = self.conv1.forward(_act(x, self.act_bits), training)
        h = self.bn1.forward(h, training)
        h = self.conv2.forward(_act(h, self.act_bits), training)
        h = F.batch_norm(h, self.bn2.gamma, self.bn2.beta, self.bn2.running_mean, self.bn2.running_var,
                         training, self.bn2.momentum, self.bn2.eps)
        stride = self.spec.stride
        if self.shortcut_map is not None:
            sc = F.channel_map(x, self.shortcut_map, stride)
        elif stride > 1:
            sc = F.channel_map(x, list(range(x.shape[1])), stride)
        else:
            sc = x
        out = F.add(h, sc)
        if self.bn2.mask is not None:
            out = F.mul(out, self.bn2.mask.reshape(1, -1, 1, 1))
        return out


class Network:
    """A runnable network built from a :class:`ModelSpec`.

    Parameters are initialised from ``seed`` in declaration order, so the
    same spec and seed always give the same network.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float64, gamma_init: float = 1.0):
        spec.validate()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.modules = []
        for layer in spec.layers:
            self.modules.append(self._build(layer, rng, gamma_init))

    def _build(self, layer: LayerSpec, rng, gamma_init):
        k = layer.kind
        if k == "conv":
            return Conv(layer.in_channels, layer.out_channels, layer.kernel, layer.stride,
                        layer.weight_bits, layer.act_bits, rng, self.dtype)
        if k == "linear":
            return Linear(layer.in_channels, layer.out_channels, layer.weight_bits, layer.act_bits, rng, self.dtype)
        if k == "batchnorm":
            return BatchNorm(layer.out_channels, self.dtype, gamma_init)
        if k == "relu":
            return ReLU()
        if k == "pool":
            return Pool(layer.pool, layer.kernel)
        return ResidualBlock(layer, rng, self.dtype, gamma_init)

    # -- running ---------------------------------------------------------
    def forward(self, x, training: bool = False) -> Tensor:
        x = as_tensor(x, dtype=self.dtype)
        if x.data.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        expected = tuple(self.spec.input_shape)
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"network expects inputs of shape (N, {', '.join(map(str, expected))}), got {x.shape}")
        for mod in self.modules:
            x = mod.forward(x, training)
        return x

    __call__ = forward

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        from .tensor import no_grad
        outs = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                outs.append(self.forward(x[i:i + batch_size], training=False).data)
        return np.concatenate(outs, axis=0)

    # -- parameters ------------------------------------------------------
    def named_parameters(self):
        for i, mod in enumerate(self.modules):
            for name, t in mod.params():
                yield f"{i}.{name}", t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self):
        for i, mod in enumerate(self.modules):
            for name, arr in mod.buffers():
                yield f"{i}.{name}", arr

    def bn_layers(self):
        """(name, BatchNorm) for every BN in declaration order."""
        out = []
        for i, mod in enumerate(self.modules):
            for name, bn in mod.bn_layers():
                out.append((f"{i}.{name}" if name else f"{i}", bn))
        return out

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def layer_blobs(self):
        """Per-layer flat parameter blob (params then buffers) in declaration order."""
        blobs = []
        for mod in self.modules:
            parts = [t.data.reshape(-1) for _, t in mod.params()] + [a.reshape(-1) for _, a in mod.buffers()]
            blobs.append(np.concatenate(parts).astype(np.float64) if parts else np.zeros(0))
        return blobs

    def load_layer_blobs(self, blobs):
        if len(blobs) != len(self.modules):
            raise ShapeError(f"{len(blobs)} parameter blobs for {len(self.modules)} layers")
        for i, (mod, blob) in enumerate(zip(self.modules, blobs)):
            items = [t.data for _, t in mod.params()] + [a for _, a in mod.buffers()]
            need = sum(a.size for a in items)
            if blob.size != need:
                raise ShapeError(f"layer {i}: blob has {blob.size} values, expects {need}")
            off = 0
            for arr in items:
                arr[...] = blob[off:off + arr.size].reshape(arr.shape).astype(arr.dtype)
                off += arr.size

    def state_dict(self):
        sd = OrderedDict()
        for name, t in self.named_parameters():
            sd[name] = t.data.copy()
        for name, arr in self.named_buffers():
            sd[name] = arr.copy()
        return sd

    def load_state_dict(self, sd):
        for name, t in self.named_parameters():
            t.data[...] = sd[name]
        for name, arr in self.named_buffers():
            arr[...] = sd[name]

    def param_count(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def freeze_quantized(self):
        """Store each quantized layer's effective weights (inference mode)."""
        for conv in self.quantized_layers():
            conv.frozen = conv.effective_weight()

    def quantized_layers(self):
        out = []
        for mod in self.modules:
            if isinstance(mod, ResidualBlock):
                out += [mod.conv1, mod.conv2]
            elif isinstance(mod, (Conv, Linear)):
                out.append(mod)
        return [m for m in out if m.weight_bits < quant.FULL_PRECISION]
