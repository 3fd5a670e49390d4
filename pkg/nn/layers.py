# polarseg/nn/layers.py
"""Module containers and the ResNet-style building blocks of the encoders."""
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import logger
from core import functional as F
from core.errors import CheckpointError
from core.tensor import Tensor


class Module:
    """Holds Tensor parameters, numpy buffers and child modules as plain attributes."""
    training: bool = True
    _buffer_names: Tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def decay_names(self) -> List[str]:
        return [name for name, p in self.named_parameters() if p.decay]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def to_dtype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for name in self._buffer_names:
            setattr(self, name, getattr(self, name).astype(dtype))
        for _, child in self.named_children():
            child._cast_buffers(dtype)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into the existing parameters/buffers; names and shapes must match exactly."""
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError("Checkpoint tensors do not match the model",
                                  details={"missing": missing[:10], "unexpected": unexpected[:10]})
        for name, array in own.items():
            if state[name].shape != array.shape:
                raise CheckpointError(f"Shape mismatch for '{name}'",
                                      details={"expected": list(array.shape), "found": list(state[name].shape)})
        for name, p in self.named_parameters():
            p.data = np.array(state[name], copy=True)
            p.zero_grad()
        self._load_buffers(state, "")

    def _load_buffers(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        for name in self._buffer_names:
            setattr(self, name, np.array(state[prefix + name], copy=True))
        for name, child in self.named_children():
            child._load_buffers(state, f"{prefix}{name}.")


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        self.items: List[Module] = list(modules)

    def named_children(self) -> Iterator[Tuple[str, Module]]:
        for index, module in enumerate(self.items):
            yield str(index), module

    def __getitem__(self, index: int) -> Module:
        return self.items[index]

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Module]:
        return iter(self.items)


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = False):
        self.stride = stride
        self.weight = Tensor(he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size)), requires_grad=True)
        self.weight.decay = True
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        mode = "train" if self.training else "eval"
        if self.training and x.shape[0] < 2:
            logger.debug("BatchNorm2d: batch of 1 in training mode, applying the affine transform only")
            mode = "affine"
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             mode=mode, momentum=self.momentum, eps=self.eps)


class ConvBnRelu(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, relu: bool = True):
        self.conv = Conv2d(in_channels, out_channels, kernel_size, rng, stride=stride)
        self.bn = BatchNorm2d(out_channels)
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn(self.conv(x))
        return F.relu(out) if self.relu else out


class BasicBlock(Module):
    """Two 3x3 convolutions with an identity (or 1x1 projection) shortcut."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, stride: int = 1):
        self.conv1 = ConvBnRelu(in_channels, out_channels, 3, rng, stride=stride)
        self.conv2 = ConvBnRelu(out_channels, out_channels, 3, rng, relu=False)
        self.downsample: Optional[ConvBnRelu] = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = ConvBnRelu(in_channels, out_channels, 1, rng, stride=stride, relu=False)

    def forward(self, x: Tensor) -> Tensor:
        shortcut = x if self.downsample is None else self.downsample(x)
        return F.relu(F.add(self.conv2(self.conv1(x)), shortcut))


class Stem(Module):
    """7x7 stride-2 convolution: the first downsampling."""

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator):
        self.conv = ConvBnRelu(in_channels, width, 7, rng, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class ResNetStage(Module):
    """
    `blocks` BasicBlocks halving the resolution once. The first stage halves with a
    2x2 max pool (ResNet's stem pool), later stages with a stride-2 first block.
    """

    def __init__(self, in_channels: int, out_channels: int, blocks: int, rng: np.random.Generator, pool: bool = False):
        self.pool = pool
        first_stride = 1 if pool else 2
        self.blocks = ModuleList(
            [BasicBlock(in_channels, out_channels, rng, stride=first_stride)]
            + [BasicBlock(out_channels, out_channels, rng) for _ in range(blocks - 1)]
        )

    def forward(self, x: Tensor) -> Tensor:
        if self.pool:
            x = F.max_pool2d(x, 2)
        for block in self.blocks:
            x = block(x)
        return x


class Encoder(Module):
    """Stem + four residual stages; returns the five stage outputs (1/2 ... 1/32)."""

    def __init__(self, in_channels: int, widths: Sequence[int], blocks: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.stem = Stem(in_channels, widths[0], rng)
        self.stages = ModuleList([
            ResNetStage(widths[i], widths[i + 1], blocks, rng, pool=(i == 0)) for i in range(4)
        ])

    def forward(self, x: Tensor) -> List[Tensor]:
        features = [self.stem(x)]
        for stage in self.stages:
            features.append(stage(features[-1]))
        return features
