"""Two-branch feature extractor, alignment crop, pooling heads and the prototype bank."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .schema import GROUPS, AttributeSchema

LOCAL_GROUPS = ("head", "upper_body", "lower_body")
GLOBAL_GROUPS = ("identity", "carrying")


@dataclass
class ModelConfig:
    backbone: str = "tiny"  # "tiny" or "resnet50"
    image_size: tuple[int, int] = (96, 32)
    channels: tuple[int, ...] = (16, 32, 64, 64)
    feat_dim: int = 64  # D
    embed_dim: int = 64  # d
    align: bool = True
    sigma: float = 5.0
    # band edges as fractions of the aligned map height (head, upper, lower)
    bands: tuple[float, ...] = (0.0, 1 / 3, 2 / 3, 1.0)
    pretrained: bool = False


def _conv_bn(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class TinyBackbone(nn.Module):
    """Stem plus four conv blocks (total stride 16); the last two blocks are duplicated per branch.

    96x32 inputs give 6x2 feature maps.
    """

    def __init__(self, channels=(16, 32, 64, 64), feat_dim=64):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.trunk = nn.Sequential(_conv_bn(3, c0, 2), _conv_bn(c0, c1, 2), _conv_bn(c1, c2, 2))
        branch = nn.Sequential(_conv_bn(c2, c3, 2), _conv_bn(c3, feat_dim, 1))
        self.global_branch = branch
        # identical starting weights for both branches
        self.local_branch = copy.deepcopy(branch)
        self.out_channels = feat_dim

    def forward(self, x):
        s = self.trunk(x)
        return self.global_branch(s), self.local_branch(s)


class ResNet50Backbone(nn.Module):
    """ResNet-50 shared up to the first conv4 block; the rest is duplicated, last stride set to 1."""

    def __init__(self, pretrained=False):
        super().__init__()
        import torchvision

        weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V1 if pretrained else None
        net = torchvision.models.resnet50(weights=weights)
        net.layer4[0].conv2.stride = (1, 1)
        net.layer4[0].downsample[0].stride = (1, 1)
        self.trunk = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3[0])
        branch = nn.Sequential(*net.layer3[1:], net.layer4)
        self.global_branch = branch
        self.local_branch = copy.deepcopy(branch)
        self.out_channels = 2048

    def forward(self, x):
        s = self.trunk(x)
        return self.global_branch(s), self.local_branch(s)


def build_backbone(cfg: ModelConfig) -> nn.Module:
    if cfg.backbone == "tiny":
        return TinyBackbone(tuple(cfg.channels), cfg.feat_dim)
    if cfg.backbone == "resnet50":
        return ResNet50Backbone(cfg.pretrained)
    raise ValueError(f"unknown backbone {cfg.backbone!r}")


@dataclass
class AlignmentResult:
    top: torch.Tensor  # (B,) long
    bottom: torch.Tensor  # (B,) long, inclusive
    heat: torch.Tensor  # (B, H) row scores
    heat_map: torch.Tensor  # (B, H, W)
    aligned: torch.Tensor  # (B, D, H, W)


def row_bounds(h: torch.Tensor, sigma: float) -> tuple[torch.Tensor, torch.Tensor]:
    """First and last row whose score exceeds sigma; the full range when none does."""
    H = h.shape[-1]
    above = h > sigma
    any_above = above.any(dim=-1)
    rows = torch.arange(H, device=h.device)
    top = torch.where(above, rows, H).min(dim=-1).values
    bottom = torch.where(above, rows, -1).max(dim=-1).values
    top = torch.where(any_above, top, torch.zeros_like(top))
    bottom = torch.where(any_above, bottom, torch.full_like(bottom, H - 1))
    return top, bottom


def align_crop(F_l: torch.Tensor, sigma: float) -> AlignmentResult:
    """Crop each local map to the rows where a person is likely and resize back to full height.

    ``F_l`` is (B, D, H, W). The heat map is the per-position L2 norm over
    channels, max-pooled along the width. No learnable parameters.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    B, D, H, W = F_l.shape
    heat_map = F_l.norm(dim=1)
    heat = heat_map.amax(dim=-1)
    top, bottom = row_bounds(heat.detach(), sigma)
    out = []
    for i in range(B):
        t, b = int(top[i]), int(bottom[i])
        if t == 0 and b == H - 1:
            out.append(F_l[i])
        else:
            crop = F_l[i : i + 1, :, t : b + 1]
            out.append(F.interpolate(crop, size=(H, W), mode="bilinear", align_corners=False)[0])
    return AlignmentResult(top, bottom, heat, heat_map, torch.stack(out))


def band_edges(H: int, bands) -> list[tuple[int, int]]:
    edges = [int(round(f * H)) for f in bands]
    return list(zip(edges[:-1], edges[1:]))


def part_pool(F_l: torch.Tensor, bands=(0.0, 1 / 3, 2 / 3, 1.0)) -> list[torch.Tensor]:
    """Average over each horizontal band of a (B, D, H, W) map -> list of (B, D)."""
    H = F_l.shape[2]
    out = []
    for a, b in band_edges(H, bands):
        if b <= a:
            raise ValueError(f"empty band [{a}, {b}) for map height {H}")
        out.append(F_l[:, :, a:b].mean(dim=(2, 3)))
    return out


class EmbeddingHead(nn.Module):
    """FC followed by batch norm; the normalised output is the representation used everywhere."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim)
        self.bn = nn.BatchNorm1d(out_dim)
        nn.init.kaiming_normal_(self.fc.weight, mode="fan_out")
        nn.init.zeros_(self.fc.bias)

    def forward(self, x):
        pre = self.fc(x)
        return pre, self.bn(pre)


class PrototypeBank(nn.Module):
    """Per group: one learnable prototype per SID and one residual basis vector per attribute-vector coordinate."""

    def __init__(self, schema: AttributeSchema, dim: int):
        super().__init__()
        self.dim = dim
        self.prototypes = nn.ParameterDict()
        self.bases = nn.ParameterDict()
        for g in schema:
            p = torch.empty(g.num_sids, dim)
            # fan_in is the prototype dimension
            nn.init.kaiming_normal_(p, mode="fan_in")
            self.prototypes[g.name] = nn.Parameter(p)
            self.bases[g.name] = nn.Parameter(torch.zeros(g.vector_length, dim))
            self.register_buffer(f"attr_{g.name}", torch.as_tensor(g.attribute_matrix, dtype=torch.float32))

    def prototype(self, group: str, sid: int) -> torch.Tensor:
        protos = self.prototypes[group]
        if not 0 <= sid < protos.shape[0]:
            raise IndexError(f"SID {sid} out of range for group {group!r} ({protos.shape[0]} SIDs)")
        return protos[sid]

    def residual_basis(self, group: str) -> torch.Tensor:
        return self.bases[group]

    def attributes(self, group: str) -> torch.Tensor:
        return getattr(self, f"attr_{group}")

    def snapshot(self) -> dict[str, np.ndarray]:
        return {g: p.detach().cpu().numpy().copy() for g, p in self.prototypes.items()}


@dataclass
class RepresentationSet:
    """Five per-group embeddings, stacked in canonical group order as (B, 5, d)."""
    pre: torch.Tensor
    post: torch.Tensor
    alignment: AlignmentResult | None = field(default=None, repr=False)

    def __getitem__(self, group: str) -> torch.Tensor:
        return self.post[:, GROUPS.index(group)]


class PersonEmbedder(nn.Module):
    def __init__(self, schema: AttributeSchema, cfg: ModelConfig, num_train_ids: int):
        super().__init__()
        self.cfg = cfg
        self.backbone = build_backbone(cfg)
        D = self.backbone.out_channels
        self.heads = nn.ModuleDict({g: EmbeddingHead(D, cfg.embed_dim) for g in GROUPS})
        self.classifiers = nn.ModuleDict({g: nn.Linear(cfg.embed_dim, num_train_ids, bias=False) for g in GROUPS})
        for c in self.classifiers.values():
            nn.init.normal_(c.weight, std=0.001)
        self.bank = PrototypeBank(schema, cfg.embed_dim)

    def feature_maps(self, images):
        return self.backbone(images)

    def forward(self, images, align: bool | None = None) -> RepresentationSet:
        align = self.cfg.align if align is None else align
        F_g, F_l = self.backbone(images)
        alignment = None
        if align:
            alignment = align_crop(F_l, self.cfg.sigma)
            F_l = alignment.aligned
        pooled = dict(zip(LOCAL_GROUPS, part_pool(F_l, self.cfg.bands)))
        g = F_g.mean(dim=(2, 3))
        pooled.update({k: g for k in GLOBAL_GROUPS})
        pre, post = zip(*(self.heads[k](pooled[k]) for k in GROUPS))
        return RepresentationSet(torch.stack(pre, 1), torch.stack(post, 1), alignment)

    def logits(self, reps: RepresentationSet) -> torch.Tensor:
        """(B, 5, num_train_ids) identity logits, one classifier per group."""
        return torch.stack([self.classifiers[g](reps.post[:, i]) for i, g in enumerate(GROUPS)], 1)


def to_tensor_images(images: np.ndarray) -> torch.Tensor:
    """(B, H, W, 3) floats in [0, 1] -> normalised (B, 3, H, W) tensor."""
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    return (x - mean) / std
