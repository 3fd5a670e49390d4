# polarseg/nn/eafnet.py
"""
EAFNet: per-branch ResNet encoders, EAC channel attention, a fusion branch that
accumulates attention-weighted branch features stage by stage, spatial pyramid
pooling on the deepest fusion feature and a ladder decoder.
"""
import math
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from api.models import EafnetConfig
from config import logger
from core import functional as F
from core.errors import InputValidationError, ShapeMismatchError
from core.tensor import Tensor
from nn.layers import Conv2d, ConvBnRelu, Encoder, Module, ModuleList, ResNetStage

STAGE_NAMES: Tuple[str, ...] = ("conv0", "layer1", "layer2", "layer3", "layer4")
DOWNSAMPLE = 32


def adaptive_kernel_size(channels: int, b: float = 1.0, gamma: float = 2.0, parity: str = "even") -> int:
    """
    t = trunc(|log2(C) + b| / gamma). parity="even" rounds odd t up to the next even
    number; parity="odd" rounds even t up to the next odd number. Never below 1.
    """
    if channels < 1:
        raise InputValidationError(f"adaptive_kernel_size needs at least one channel, got {channels}")
    t = int(abs(math.log2(channels) + b) / gamma)
    if parity == "even":
        k = t if t % 2 == 0 else t + 1
    elif parity == "odd":
        k = t if t % 2 == 1 else t + 1
    else:
        raise InputValidationError(f"Unknown kernel parity '{parity}'")
    return max(k, 1)


class EacModule(Module):
    """Efficient attention complementary module: GAP -> 1-D channel conv -> sigmoid -> rescale."""

    def __init__(self, channels: int, rng: np.random.Generator, b: float = 1.0, gamma: float = 2.0,
                 parity: str = "even", init: str = "normal"):
        self.channels = channels
        self.kernel_size = adaptive_kernel_size(channels, b, gamma, parity)
        values = (np.zeros(self.kernel_size) if init == "zeros"
                  else rng.normal(0.0, math.sqrt(1.0 / self.kernel_size), size=self.kernel_size))
        self.kernel = Tensor(values, requires_grad=True)
        self.kernel.decay = True

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Returns (D, E): per-channel weights (N, C) and the reweighted map."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatchError(f"EAC module expects {self.channels} channels, got shape {x.shape}",
                                     details={"expected": self.channels, "shape": list(x.shape)})
        pooled = F.global_avg_pool(x)
        weights = F.sigmoid(F.conv1d_channels(pooled, self.kernel))
        return weights, F.channel_scale(x, weights)


def fuse_stage(features: Sequence[Tensor], modules: Sequence[EacModule], m_prev: Optional[Tensor] = None,
               weights_out: Optional[List[Tensor]] = None) -> Tensor:
    """
    m_next = sum_b E_b(y_b) + m_prev. m_prev is absent at the first stage.
    Attention weights are appended to weights_out in branch order when given.
    """
    if not features or len(features) != len(modules):
        raise ShapeMismatchError("fuse_stage needs one EAC module per branch feature",
                                 details={"features": len(features), "modules": len(modules)})
    shape = features[0].shape
    for y in list(features) + ([m_prev] if m_prev is not None else []):
        if y.shape != shape:
            raise ShapeMismatchError(f"fuse_stage: feature shapes disagree ({y.shape} vs {shape})",
                                     details={"expected": list(shape), "found": list(y.shape)})
    fused = m_prev
    for y, module in zip(features, modules):
        weights, reweighted = module(y)
        if weights_out is not None:
            weights_out.append(weights)
        fused = reweighted if fused is None else F.add(fused, reweighted)
    return fused


class SpatialPyramidPooling(Module):
    """Grid average pools, 1x1 conv per level, upsample, concat with the input, 1x1 blend."""

    def __init__(self, in_channels: int, levels: Sequence[int], out_channels: int, rng: np.random.Generator):
        self.levels = list(levels)
        level_width = max(in_channels // 4, 1)
        self.convs = ModuleList([Conv2d(in_channels, level_width, 1, rng, bias=True) for _ in self.levels])
        self.blend = ConvBnRelu(in_channels + level_width * len(self.levels), out_channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        parts = [x]
        for grid, conv in zip(self.levels, self.convs):
            pooled = F.relu(conv(F.avg_pool_grid(x, grid)))
            parts.append(F.resize_bilinear(pooled, h, w))
        return self.blend(F.concat(parts, axis=1))


class LadderUpsample(Module):
    """1x1 lateral on the skip feature + bilinear-upsampled deeper feature, then a 3x3 conv."""

    def __init__(self, skip_channels: int, width: int, rng: np.random.Generator):
        self.lateral = ConvBnRelu(skip_channels, width, 1, rng)
        self.blend = ConvBnRelu(width, width, 3, rng)

    def forward(self, skip: Tensor, deeper: Tensor) -> Tensor:
        up = F.resize_bilinear(deeper, skip.shape[2], skip.shape[3])
        return self.blend(F.add(self.lateral(skip), up))


class EAFNet(Module):
    """
    One branch: SwiftNet-style baseline (encoder -> SPP -> ladder decoder).
    Two or three branches: independent encoders per branch plus a fusion branch,
    m0 = sum_b EAC(y_b^0), m_i = sum_b EAC(y_b^i) + stage_i(m_{i-1}).
    """

    def __init__(self, cfg: EafnetConfig):
        rng = np.random.default_rng(cfg.seed)
        widths = cfg.widths
        self.cfg = cfg
        self.branch_names = [b.name for b in cfg.branches]
        self.encoders = ModuleList([Encoder(b.channels, widths, cfg.blocks_per_stage, rng) for b in cfg.branches])
        self.fusion_stages: Optional[ModuleList] = None
        self.eac: Optional[ModuleList] = None
        if cfg.is_fused:
            self.fusion_stages = ModuleList([
                ResNetStage(widths[i], widths[i + 1], cfg.blocks_per_stage, rng, pool=(i == 0)) for i in range(4)
            ])
            self.eac = ModuleList([
                ModuleList([EacModule(widths[s], rng, cfg.eac_b, cfg.eac_gamma, cfg.kernel_parity, cfg.eac_kernel_init)
                            for _ in cfg.branches])
                for s in range(len(STAGE_NAMES))
            ])
        self.spp = SpatialPyramidPooling(widths[4], cfg.spp_levels, cfg.decoder_width, rng)
        self.ladder = ModuleList([LadderUpsample(widths[i], cfg.decoder_width, rng) for i in (3, 2, 1)])
        self.classifier = Conv2d(cfg.decoder_width, cfg.num_classes, 1, rng, bias=True)
        self.last_attention: Dict[Tuple[str, str], np.ndarray] = {}

    @property
    def is_fused(self) -> bool:
        return self.cfg.is_fused

    def _check_inputs(self, inputs: Sequence[Union[Tensor, np.ndarray]]) -> List[Tensor]:
        if len(inputs) != len(self.encoders):
            raise InputValidationError(f"Model expects {len(self.encoders)} branch input(s), got {len(inputs)}",
                                       details={"branches": self.branch_names})
        dtype = self.classifier.weight.dtype
        tensors = []
        for name, encoder, item in zip(self.branch_names, self.encoders, inputs):
            x = item if isinstance(item, Tensor) else Tensor(np.asarray(item, dtype=dtype))
            if x.dtype != dtype and not x.requires_grad:
                x = Tensor(x.data.astype(dtype))
            if x.ndim != 4 or x.shape[1] != encoder.in_channels:
                raise ShapeMismatchError(f"Branch '{name}' expects N x {encoder.in_channels} x H x W, got {x.shape}",
                                         details={"branch": name, "shape": list(x.shape)})
            tensors.append(x)
        n, _, h, w = tensors[0].shape
        if any(t.shape[0] != n or t.shape[2:] != (h, w) for t in tensors):
            raise ShapeMismatchError("Branch inputs disagree in batch or spatial size",
                                     details={"shapes": [list(t.shape) for t in tensors]})
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise InputValidationError(f"Input size {h}x{w} is not divisible by {DOWNSAMPLE}",
                                       details={"height": h, "width": w})
        return tensors

    def encode(self, inputs: Sequence[Tensor], record_attention: bool = False) -> List[Tensor]:
        """Five features at 1/2 ... 1/32: fusion features when fused, else the single encoder's."""
        branch_features = [encoder(x) for encoder, x in zip(self.encoders, inputs)]
        if not self.is_fused:
            return branch_features[0]
        if record_attention:
            self.last_attention = {}
        fused: List[Tensor] = []
        for s, name in enumerate(STAGE_NAMES):
            m_prev = None if s == 0 else self.fusion_stages[s - 1](fused[-1])
            weights: List[Tensor] = []
            fused.append(fuse_stage([f[s] for f in branch_features], list(self.eac[s]), m_prev, weights))
            if record_attention:
                for branch, d in zip(self.branch_names, weights):
                    self.last_attention[(name, branch)] = d.data.copy()
        return fused

    def forward(self, inputs: Sequence[Union[Tensor, np.ndarray]], record_attention: bool = False) -> Tensor:
        tensors = self._check_inputs(inputs)
        h, w = tensors[0].shape[2:]
        features = self.encode(tensors, record_attention)
        x = self.spp(features[4])
        for level, skip in zip(self.ladder, (features[3], features[2], features[1])):
            x = level(skip, x)
        logits = self.classifier(x)
        while logits.shape[2] < h:
            logits = F.bilinear_upsample(logits, 2)
        return logits


def build_model(cfg: EafnetConfig, dtype=np.float32) -> EAFNet:
    model = EAFNet(cfg).to_dtype(dtype)
    logger.info(f"Built EAFNet: branches={model.branch_names} widths={cfg.widths} "
                f"params={sum(p.size for p in model.parameters())}")
    return model
