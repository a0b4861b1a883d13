"""Multi-source adversarial segmentation network.

One sub-network per source domain (encoder, domain classifier behind a
gradient reversal layer, source decoder) and a single target decoder whose
first up-sampling stage consumes the element-wise sum of every encoder's
features.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torch.autograd import Function

DEPTH = 4
CHECKPOINT_FORMAT = "msatl-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass
class NetConfig:
    n_sources: int = 2
    base_width: int = 32
    depth: int = DEPTH
    norm_groups: int = 8
    grl_lambda: float = 1.0
    out_classes: int = 2
    in_channels: int = 1
    classifier_hidden: tuple[int, ...] = (256, 64)

    def __post_init__(self):
        self.classifier_hidden = tuple(self.classifier_hidden)
        if self.n_sources < 1:
            raise ValueError("n_sources must be at least 1")
        if self.depth != DEPTH:
            raise ValueError(f"depth is fixed at {DEPTH}")
        if self.norm_groups < 1 or self.base_width < 1:
            raise ValueError("base_width and norm_groups must be positive")
        if self.base_width < self.norm_groups:
            raise ValueError("base_width must be at least norm_groups")
        if self.grl_lambda < 0:
            raise ValueError("grl_lambda must be non-negative")

    @classmethod
    def from_dict(cls, d) -> "NetConfig":
        return cls(**dict(d))


# --------------------------------------------------------------------------
# gradient reversal


class _GradReverse(Function):
    generate_vmap_rule = True

    @staticmethod
    def forward(x, lambd):
        return x.view_as(x)

    @staticmethod
    def setup_context(ctx, inputs, output):
        ctx.lambd = inputs[1]

    @staticmethod
    def backward(ctx, grad_output):
        return grl_backward(grad_output, ctx.lambd), None


def grl(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    """Identity forward; gradients are multiplied by ``-lambd`` on the way back."""
    if lambd < 0:
        raise ValueError("GRL scale must be non-negative")
    return _GradReverse.apply(x, float(lambd))


def grl_backward(upstream_grad: torch.Tensor, lambd: float) -> torch.Tensor:
    return upstream_grad.neg() * lambd


# --------------------------------------------------------------------------
# building blocks


def _groups(channels: int, norm_groups: int) -> int:
    g = min(norm_groups, channels)
    while channels % g:
        g -= 1
    return g


class ConvBlock(nn.Sequential):
    """Two 3x3 convolutions, each followed by group norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, norm_groups: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, stride=1, padding=1),
            nn.GroupNorm(_groups(out_ch, norm_groups), out_ch),
            nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1),
            nn.GroupNorm(_groups(out_ch, norm_groups), out_ch),
            nn.ReLU(),
        )


class Down(nn.Module):
    def __init__(self, in_ch, out_ch, norm_groups):
        super().__init__()
        self.pool = nn.MaxPool2d(2)
        self.conv = ConvBlock(in_ch, out_ch, norm_groups)

    def forward(self, x):
        return self.conv(self.pool(x))


class Up(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch, norm_groups):
        super().__init__()
        self.conv = ConvBlock(in_ch + skip_ch, out_ch, norm_groups)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(torch.cat([x, skip], dim=1))


@dataclass
class FeaturePack:
    """Encoder output: four pre-pool skips (largest first) and the bottleneck."""

    skips: tuple[torch.Tensor, ...]
    bottleneck: torch.Tensor

    def __post_init__(self):
        self.skips = tuple(self.skips)

    def __add__(self, other: "FeaturePack") -> "FeaturePack":
        if self.shapes() != other.shapes():
            raise ShapeError(f"cannot add feature packs of shapes {self.shapes()} and {other.shapes()}")
        return FeaturePack(tuple(a + b for a, b in zip(self.skips, other.skips)),
                           self.bottleneck + other.bottleneck)

    def scale(self, k: float) -> "FeaturePack":
        return FeaturePack(tuple(s * k for s in self.skips), self.bottleneck * k)

    def zeros_like(self) -> "FeaturePack":
        return FeaturePack(tuple(torch.zeros_like(s) for s in self.skips),
                           torch.zeros_like(self.bottleneck))

    def select(self, index) -> "FeaturePack":
        return FeaturePack(tuple(s[index] for s in self.skips), self.bottleneck[index])

    def shapes(self):
        return tuple(tuple(s.shape) for s in self.skips) + (tuple(self.bottleneck.shape),)

    @property
    def batch_size(self) -> int:
        return self.bottleneck.shape[0]


def sum_packs(packs: Sequence[FeaturePack]) -> FeaturePack:
    """Sum in list order, so the reduction is bitwise reproducible."""
    total = packs[0]
    for p in packs[1:]:
        total = total + p
    return total


class Encoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.base_width
        self.stem = ConvBlock(cfg.in_channels, w, cfg.norm_groups)
        self.downs = nn.ModuleList(
            Down(w * 2 ** k, w * 2 ** (k + 1), cfg.norm_groups) for k in range(DEPTH)
        )

    def forward(self, x: torch.Tensor) -> FeaturePack:
        h, w = x.shape[-2:]
        factor = 2 ** DEPTH
        if h % factor or w % factor:
            raise ShapeError(f"spatial size {h}x{w} must be divisible by {factor}")
        skips = []
        x = self.stem(x)
        for down in self.downs:
            skips.append(x)
            x = down(x)
        return FeaturePack(tuple(skips), x)


class DomainClassifier(nn.Module):
    """Global average pool, then fully connected ReLU layers down to one logit."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        layers = []
        width = cfg.base_width * 2 ** DEPTH
        for hidden in cfg.classifier_hidden:
            layers += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        layers.append(nn.Linear(width, 1))
        self.mlp = nn.Sequential(*layers)

    def forward(self, bottleneck: torch.Tensor) -> torch.Tensor:
        return self.mlp(bottleneck.mean(dim=(2, 3))).squeeze(1)


class Decoder(nn.Module):
    """Four up stages with skip concatenation, then a 1x1 class head."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.base_width
        self.stages = nn.ModuleList(
            Up(w * 2 ** (k + 1), w * 2 ** k, w * 2 ** k, cfg.norm_groups)
            for k in reversed(range(DEPTH))
        )
        self.head = nn.Conv2d(w, cfg.out_classes, 1)

    def forward(self, pack: FeaturePack) -> torch.Tensor:
        if len(pack.skips) != DEPTH:
            raise ShapeError(f"expected {DEPTH} skips, got {len(pack.skips)}")
        x = pack.bottleneck
        for stage, skip in zip(self.stages, reversed(pack.skips)):
            if x.shape[-1] * 2 != skip.shape[-1] or x.shape[-2] * 2 != skip.shape[-2]:
                raise ShapeError(f"skip of shape {tuple(skip.shape)} does not match {tuple(x.shape)}")
            x = stage(x, skip)
        return self.head(x)

    def stage_parameters(self) -> list[list[nn.Parameter]]:
        """Parameters of the up stages W1..W4; the class head belongs to W4."""
        groups = [list(stage.parameters()) for stage in self.stages]
        groups[-1] += list(self.head.parameters())
        return groups


class MultiSourceNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.config = cfg
        n = cfg.n_sources
        self.encoders = nn.ModuleList(Encoder(cfg) for _ in range(n))
        self.classifiers = nn.ModuleList(DomainClassifier(cfg) for _ in range(n))
        self.source_decoders = nn.ModuleList(Decoder(cfg) for _ in range(n))
        self.target_decoder = Decoder(cfg)

    @property
    def n_sources(self) -> int:
        return len(self.encoders)

    # sub-network operations, ``i`` is 1-based like the source indices

    def encode(self, i: int, images: torch.Tensor) -> FeaturePack:
        return self.encoders[i - 1](images)

    def classify_domain(self, i: int, bottleneck: torch.Tensor, lambd: float | None = None) -> torch.Tensor:
        if lambd is None:
            return self.classifiers[i - 1](bottleneck)
        return self.classifiers[i - 1](grl(bottleneck, lambd))

    def decode_source(self, i: int, pack: FeaturePack) -> torch.Tensor:
        return self.source_decoders[i - 1](pack)

    def decode_target_fused(self, packs: Sequence[FeaturePack]) -> torch.Tensor:
        if len(packs) != self.n_sources:
            raise ShapeError(f"expected {self.n_sources} feature packs, got {len(packs)}")
        shapes = {p.shapes() for p in packs}
        if len(shapes) != 1:
            raise ShapeError("feature packs differ in shape")
        return self.target_decoder(sum_packs(packs))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Target logits from the fused encodings of all sub-networks."""
        return self.decode_target_fused([self.encode(i, images) for i in range(1, self.n_sources + 1)])

    def parameter_groups(self) -> dict[str, list]:
        """Theta split into per-source encoder/classifier/source-decoder sets and W1..W4."""
        return {
            "encoder": [list(m.parameters()) for m in self.encoders],
            "classifier": [list(m.parameters()) for m in self.classifiers],
            "source_decoder": [list(m.parameters()) for m in self.source_decoders],
            "target_decoder": self.target_decoder.stage_parameters(),
        }


def build_model(config: NetConfig, seed: int = 0) -> MultiSourceNet:
    if config.n_sources < 1:
        raise ValueError("n_sources must be at least 1")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MultiSourceNet(config)
    return model


@torch.no_grad()
def predict(model: MultiSourceNet, images: torch.Tensor) -> torch.Tensor:
    """Binary masks (N, H, W) via argmax of the fused target logits."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        if images.dim() == 3:
            images = images.unsqueeze(1)
        logits = model(images.to(dtype))
    finally:
        model.train(was_training)
    return logits.argmax(dim=1).to(torch.uint8)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# checkpoints


def _component_of(name: str) -> tuple[str, int, str]:
    head, _, rest = name.partition(".")
    if head == "target_decoder":
        return head, 0, rest
    idx, _, layer = rest.partition(".")
    return head, int(idx) + 1, layer


def save_checkpoint(path, model: MultiSourceNet, seed: int, extra: dict | None = None) -> Path:
    """Write a versioned archive keyed by ``component/source_index/layer``."""
    params = {}
    for name, tensor in model.state_dict().items():
        comp, idx, layer = _component_of(name)
        params[f"{comp}/{idx}/{layer}"] = tensor.detach().cpu().clone()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": seed,
        "params": params,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[MultiSourceNet, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = NetConfig.from_dict(payload["config"])
    model = MultiSourceNet(cfg)
    state = {}
    for key, tensor in payload["params"].items():
        comp, idx, layer = key.split("/", 2)
        idx = int(idx)
        name = f"{comp}.{layer}" if comp == "target_decoder" else f"{comp}.{idx - 1}.{layer}"
        state[name] = tensor
    model.load_state_dict(state)
    model.to(next(iter(state.values())).dtype)
    return model, payload
