"""Feature extractor F, HR decoder G, per-level discriminators D_j and classifier C."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from rainreid.errors import CheckpointError, InvalidArgumentError


@dataclass
class ModelConfig:
    num_identities: int
    height: int = 32
    width: int = 32
    num_blocks: int = 2
    stem_channels: int = 16
    channels: tuple[int, ...] = (16, 32)
    strides: tuple[int, ...] | None = None
    discriminator_levels: tuple[int, ...] = (1, 2)
    decoder_channels: int = 16
    discriminator_channels: int = 32

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.discriminator_levels = tuple(sorted({int(j) for j in self.discriminator_levels}))
        if self.strides is None:
            self.strides = (2,) * self.num_blocks
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) != self.num_blocks or len(self.strides) != self.num_blocks:
            raise InvalidArgumentError("channels and strides need one entry per block")
        if not self.discriminator_levels:
            raise InvalidArgumentError("discriminator_levels must be non-empty")
        bad = [j for j in self.discriminator_levels if not 1 <= j <= self.num_blocks]
        if bad:
            raise InvalidArgumentError(
                f"discriminator_levels {bad} outside 1..{self.num_blocks}"
            )
        if self.num_identities < 1:
            raise InvalidArgumentError("num_identities must be positive")

    @classmethod
    def paper_scale(cls, num_identities, height=256, width=128):
        """Five residual blocks with ResNet-50 stage widths; discriminators on levels 4 and 5."""
        return cls(
            num_identities=num_identities,
            height=height,
            width=width,
            num_blocks=5,
            stem_channels=64,
            channels=(64, 256, 512, 1024, 2048),
            strides=(2, 1, 2, 2, 2),
            discriminator_levels=(4, 5),
            decoder_channels=64,
            discriminator_channels=256,
        )

    def level_shapes(self):
        """(h, w, d) of every f_j."""
        h, w = self.height, self.width
        shapes = []
        for c, s in zip(self.channels, self.strides):
            h = math.ceil(h / s)
            w = math.ceil(w / s)
            shapes.append((h, w, c))
        return shapes

    @property
    def embedding_dim(self):
        return self.channels[-1]

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        d["discriminator_levels"] = list(self.discriminator_levels)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class FeaturePyramid(NamedTuple):
    """Per-block maps f_1..f_J (N, d, h, w) and the pooled embedding v (N, d)."""

    maps: list
    embedding: torch.Tensor


def pool_embedding(f_last):
    """Global average pooling over the spatial axes of an (N, d, h, w) map."""
    if f_last.dim() == 3:
        return f_last.mean(dim=(1, 2))
    return f_last.mean(dim=(2, 3))


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Extractor(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, config.stem_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(config.stem_channels),
            nn.ReLU(),
        )
        blocks = []
        in_ch = config.stem_channels
        for out_ch, stride in zip(config.channels, config.strides):
            blocks.append(ResidualBlock(in_ch, out_ch, stride))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        x = self.stem(x)
        maps = []
        for block in self.blocks:
            x = block(x)
            maps.append(x)
        return FeaturePyramid(maps, pool_embedding(x))


class Decoder(nn.Module):
    """(upsample x2, conv, ReLU) stages until the input resolution, then a 3-channel projection."""

    def __init__(self, config):
        super().__init__()
        h, w, d = config.level_shapes()[-1]
        self.out_size = (config.height, config.width)
        stages = []
        in_ch = d
        while h < config.height or w < config.width:
            stages += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(in_ch, config.decoder_channels, 3, padding=1),
                nn.ReLU(),
            ]
            in_ch = config.decoder_channels
            h, w = h * 2, w * 2
        stages.append(nn.Conv2d(in_ch, 3, 3, padding=1))
        self.net = nn.Sequential(*stages)

    def forward(self, f_last):
        out = self.net(f_last)
        if out.shape[-2:] != self.out_size:
            out = F.interpolate(out, size=self.out_size, mode="bilinear", align_corners=False)
        return out


class Discriminator(nn.Module):
    """Strided conv stack over one feature level, GAP, then a single logit."""

    def __init__(self, in_ch, spatial, width):
        super().__init__()
        layers = []
        ch = in_ch
        size = spatial
        # always at least one conv; stride while the map is larger than 4x4
        while True:
            stride = 2 if size > 4 else 1
            layers += [nn.Conv2d(ch, width, 3, stride=stride, padding=1), nn.LeakyReLU(0.2)]
            ch = width
            size = math.ceil(size / stride)
            if size <= 4:
                break
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(width, 1)

    def forward(self, f):
        return self.head(self.features(f).mean(dim=(2, 3))).squeeze(-1)


class Classifier(nn.Module):
    def __init__(self, dim, num_identities):
        super().__init__()
        self.fc = nn.Linear(dim, num_identities)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, v):
        return self.fc(v)


def _init_weights(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class RainModel(nn.Module):
    """Container for the four components; parameter name prefixes are disjoint."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.extractor = Extractor(config)
        self.decoder = Decoder(config)
        shapes = config.level_shapes()
        self.discriminators = nn.ModuleDict(
            {
                f"level{j}": Discriminator(
                    shapes[j - 1][2], max(shapes[j - 1][:2]), config.discriminator_channels
                )
                for j in config.discriminator_levels
            }
        )
        self.classifier = Classifier(config.embedding_dim, config.num_identities)
        _init_weights(self.extractor)
        _init_weights(self.decoder)
        _init_weights(self.discriminators)

    # parameter groups --------------------------------------------------------
    def generator_parameters(self):
        """Parameters of F, G and C (the minimizing side)."""
        for mod in (self.extractor, self.decoder, self.classifier):
            yield from mod.parameters()

    def discriminator_parameters(self):
        return self.discriminators.parameters()

    def parameter_groups(self):
        """Name sets of the four collections."""
        groups = {"extractor": set(), "decoder": set(), "discriminators": set(), "classifier": set()}
        for name, _ in self.named_parameters():
            groups[name.split(".", 1)[0]].add(name)
        return groups

    # operations --------------------------------------------------------------
    def _check_image(self, x):
        c = self.config
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, c.height, c.width):
            raise InvalidArgumentError(
                f"expected images of shape (N, 3, {c.height}, {c.width}), got {tuple(x.shape)}"
            )

    def extract(self, x):
        self._check_image(x)
        return self.extractor(x)

    def decode(self, f_last):
        h, w, d = self.config.level_shapes()[-1]
        if f_last.dim() != 4 or tuple(f_last.shape[1:]) != (d, h, w):
            raise InvalidArgumentError(
                f"decoder expects (N, {d}, {h}, {w}), got {tuple(f_last.shape)}"
            )
        return self.decoder(f_last)

    def discriminator_logit(self, level, f_j):
        key = f"level{level}"
        if key not in self.discriminators:
            raise InvalidArgumentError(
                f"no discriminator configured for level {level}; have {self.config.discriminator_levels}"
            )
        h, w, d = self.config.level_shapes()[level - 1]
        if f_j.dim() != 4 or tuple(f_j.shape[1:]) != (d, h, w):
            raise InvalidArgumentError(
                f"level {level} expects (N, {d}, {h}, {w}), got {tuple(f_j.shape)}"
            )
        return self.discriminators[key](f_j)

    def discriminate(self, level, f_j):
        """P(feature map came from an HR image)."""
        return torch.sigmoid(self.discriminator_logit(level, f_j))

    def classifier_logits(self, v):
        if v.dim() != 2 or v.shape[1] != self.config.embedding_dim:
            raise InvalidArgumentError(
                f"classifier expects (N, {self.config.embedding_dim}), got {tuple(v.shape)}"
            )
        return self.classifier(v)

    def classify(self, v):
        return torch.softmax(self.classifier_logits(v), dim=1)


def images_to_tensor(images, dtype=torch.float32):
    """Stack HxWx3 arrays into an (N, 3, H, W) tensor."""
    arr = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model, extra=None):
    """One archive: config JSON + state dict (+ optional training state)."""
    payload = {
        "format": "rainreid-checkpoint/1",
        "config": model.config.to_json(),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, config=None):
    """Rebuild the model from a checkpoint. A given ``config`` must match exactly."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "rainreid-checkpoint/1":
        raise CheckpointError(f"{path}: not a rainreid checkpoint")
    stored = ModelConfig.from_dict(json.loads(payload["config"]))
    cfg = config or stored
    model = RainModel(cfg)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    found = {k: tuple(v.shape) for k, v in payload["state_dict"].items()}
    problems = []
    for name in sorted(expected.keys() | found.keys()):
        if name not in found:
            problems.append(f"missing {name} {expected[name]}")
        elif name not in expected:
            problems.append(f"unexpected {name} {found[name]}")
        elif expected[name] != found[name]:
            problems.append(f"shape {name}: checkpoint {found[name]} vs config {expected[name]}")
    if config is not None and config.to_dict() != stored.to_dict():
        diffs = [
            f"{k}: checkpoint {stored.to_dict()[k]!r} vs config {v!r}"
            for k, v in config.to_dict().items()
            if stored.to_dict()[k] != v
        ]
        problems = diffs + problems
    if problems:
        raise CheckpointError("checkpoint/config mismatch:\n  " + "\n  ".join(problems))
    model.load_state_dict(payload["state_dict"])
    return model, payload
