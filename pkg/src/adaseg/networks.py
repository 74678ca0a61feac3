"""The four parameterized modules: generator, two code generators, style
encoder, multi-head discriminator.

All normalization statistics are per-channel over the spatial extent with
biased variance.  Residual blocks are pre-activation (norm -> leaky ReLU ->
conv, twice) with the skip sum scaled by 1/sqrt(2); downsampling is average
pooling and upsampling nearest-neighbor, both inside the block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codespace import (
    LATENT_DIM,
    NUM_DOMAINS,
    STYLE_DIM,
    AdaInCodePair,
    Domain,
)
from .errors import ConfigError, ShapeError

LEAKY_SLOPE = 0.2


def _stat_dims(x: torch.Tensor):
    if x.dim() == 3:
        return (1, 2), (-1, 1, 1)
    if x.dim() == 4:
        return (2, 3), (-1, 1, 1)
    raise ShapeError(f"expected a CxHxW or NxCxHxW tensor, got shape {tuple(x.shape)}")


def instance_norm(x: torch.Tensor, eps: float) -> torch.Tensor:
    """(x - mean) / sqrt(var + eps), per channel over the spatial extent.

    Centering runs twice so constant inputs cancel to ~0 instead of leaving a
    mean-rounding residue amplified by 1/sqrt(eps).
    """
    dims, _ = _stat_dims(x)
    c = x - x.mean(dim=dims, keepdim=True)
    c = c - c.mean(dim=dims, keepdim=True)
    var = (c * c).mean(dim=dims, keepdim=True)
    return c / torch.sqrt(var + eps)


def adain_forward(x: torch.Tensor, f: torch.Tensor, g: torch.Tensor,
                  eps: float) -> torch.Tensor:
    """Scale the instance-normalized input by f and shift by g, per channel.

    ``f`` and ``g`` are (C,) vectors or (N, C) batches matching x's channels.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    dims, view = _stat_dims(x)
    channels = x.shape[-3]
    if f.shape[-1] != channels or g.shape[-1] != channels:
        raise ShapeError(
            f"code vectors of length {f.shape[-1]}/{g.shape[-1]} do not match "
            f"{channels} channels"
        )
    if x.dim() == 4 and f.dim() == 2:
        fv, gv = f[:, :, None, None], g[:, :, None, None]
    else:
        fv, gv = f.reshape(view), g.reshape(view)
    return fv * instance_norm(x, eps) + gv


@dataclass(frozen=True)
class NetConfig:
    """Widths and depths of every module; defaults are the full-scale model."""

    image_size: int = 256
    base_width: int = 64
    width_cap: int = 0  # 0 means 8 * base_width
    n_down: int = 4
    n_inter: int = 2
    latent_dim: int = LATENT_DIM
    style_dim: int = STYLE_DIM
    code_hidden: int = 512
    n_domains: int = NUM_DOMAINS
    eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % (2 ** self.n_down) != 0:
            raise ConfigError(
                f"image_size {self.image_size} must be a multiple of 2^n_down "
                f"= {2 ** self.n_down}"
            )
        if self.image_size < 8 or self.image_size & (self.image_size - 1):
            raise ConfigError("image_size must be a power of two >= 8")

    @property
    def cap(self) -> int:
        return self.width_cap or 8 * self.base_width

    def gen_widths(self) -> list[int]:
        """Channel schedule through the encoder: base doubling up to the cap."""
        return [min(self.base_width * 2 ** k, self.cap) for k in range(self.n_down + 1)]

    @property
    def trunk_blocks(self) -> int:
        # style encoder / discriminator trunks end at 4x4 before the 4x4 conv
        return int(math.log2(self.image_size)) - 2

    def trunk_widths(self) -> list[int]:
        return [min(self.base_width * 2 ** k, self.cap)
                for k in range(self.trunk_blocks + 1)]


class AdaInResBlock(nn.Module):
    """Residual block whose two normalizations consume external (f, g) codes."""

    def __init__(self, c_in: int, c_out: int, resample: str = "none"):
        super().__init__()
        assert resample in ("none", "down", "up")
        self.resample = resample
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, bias=False) if c_in != c_out else None
        self.widths = (c_in, c_out)

    def _resample(self, x):
        if self.resample == "down":
            return F.avg_pool2d(x, 2)
        if self.resample == "up":
            return F.interpolate(x, scale_factor=2, mode="nearest")
        return x

    def forward(self, x, codes, eps: float, plain_in: bool = False):
        """codes: ((f1, g1), (f2, g2)); plain_in swaps AdaIN for instance norm."""
        def norm(h, fg):
            if plain_in:
                return instance_norm(h, eps)
            return adain_forward(h, fg[0], fg[1], eps)

        h = F.leaky_relu(norm(x, codes[0]), LEAKY_SLOPE)
        if self.resample == "up":
            h = self._resample(h)
        h = self.conv1(h)
        if self.resample == "down":
            h = F.avg_pool2d(h, 2)
        h = F.leaky_relu(norm(h, codes[1]), LEAKY_SLOPE)
        h = self.conv2(h)

        s = x
        if self.resample == "up":
            s = self._resample(s)
        if self.skip is not None:
            s = self.skip(s)
        if self.resample == "down":
            s = F.avg_pool2d(s, 2)
        return (h + s) / math.sqrt(2)


class PlainResBlock(nn.Module):
    """Pre-activation residual block without normalization (trunk style)."""

    def __init__(self, c_in: int, c_out: int, down: bool = True):
        super().__init__()
        self.down = down
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, bias=False) if c_in != c_out else None

    def forward(self, x):
        h = self.conv1(F.leaky_relu(x, LEAKY_SLOPE))
        if self.down:
            h = F.avg_pool2d(h, 2)
        h = self.conv2(F.leaky_relu(h, LEAKY_SLOPE))
        s = self.skip(x) if self.skip is not None else x
        if self.down:
            s = F.avg_pool2d(s, 2)
        return (h + s) / math.sqrt(2)


class Generator(nn.Module):
    """Encoder/decoder of AdaIN residual blocks with two unshared output heads.

    The mask head emits 2-channel raw logits; the image head emits a
    1-channel tanh-squashed map shared by both image domains.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.gen_widths()
        self.from_image = nn.Conv2d(1, widths[0], 1)

        enc = [AdaInResBlock(widths[k], widths[k + 1], "down") for k in range(cfg.n_down)]
        enc += [AdaInResBlock(widths[-1], widths[-1], "none") for _ in range(cfg.n_inter)]
        self.encoder = nn.ModuleList(enc)

        dec = [AdaInResBlock(widths[-1], widths[-1], "none") for _ in range(cfg.n_inter)]
        dec += [AdaInResBlock(widths[cfg.n_down - k], widths[cfg.n_down - k - 1], "up")
                for k in range(cfg.n_down)]
        self.decoder = nn.ModuleList(dec)

        self.image_head = nn.Conv2d(widths[0], 1, 1)
        self.mask_head = nn.Conv2d(widths[0], 2, 1)

    def adain_layout(self) -> tuple[list[int], list[int]]:
        """Channel width of every normalization layer, encoder then decoder."""
        enc = [w for blk in self.encoder for w in blk.widths]
        dec = [w for blk in self.decoder for w in blk.widths]
        return enc, dec

    def _check_codes(self, codes: AdaInCodePair):
        enc_w, dec_w = self.adain_layout()
        for side_name, side, expected in (("encoder", codes.encoder_layers, enc_w),
                                          ("decoder", codes.decoder_layers, dec_w)):
            if len(side) != len(expected):
                raise ConfigError(
                    f"{side_name} codes have {len(side)} layers, generator has "
                    f"{len(expected)}"
                )
            for i, ((f, g), w) in enumerate(zip(side, expected)):
                if f.shape[-1] != w or g.shape[-1] != w:
                    raise ConfigError(
                        f"{side_name} code layer {i} has width "
                        f"{f.shape[-1]}/{g.shape[-1]}, expected {w}"
                    )

    def forward(self, image: torch.Tensor, codes: Optional[AdaInCodePair],
                head: Domain) -> torch.Tensor:
        """Run one translation; ``codes=None`` uses plain instance norm everywhere."""
        if head not in (Domain.INTRA, Domain.INTER, Domain.MASK):
            raise ConfigError(f"unknown head {head}")
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        if x.shape[1] != 1:
            raise ShapeError(f"generator expects 1-channel images, got {x.shape[1]}")
        if x.shape[-1] % (2 ** self.cfg.n_down) or x.shape[-2] % (2 ** self.cfg.n_down):
            raise ShapeError(
                f"spatial size {tuple(x.shape[-2:])} must be a multiple of "
                f"{2 ** self.cfg.n_down}"
            )
        plain = codes is None
        if not plain:
            self._check_codes(codes)
        enc_codes = iter(codes.encoder_layers) if not plain else None
        dec_codes = iter(codes.decoder_layers) if not plain else None
        dummy = ((None, None), (None, None))

        x = self.from_image(x)
        for blk in self.encoder:
            fg = dummy if plain else (next(enc_codes), next(enc_codes))
            x = blk(x, fg, self.cfg.eps, plain_in=plain)
        for blk in self.decoder:
            fg = dummy if plain else (next(dec_codes), next(dec_codes))
            x = blk(x, fg, self.cfg.eps, plain_in=plain)

        x = F.leaky_relu(instance_norm(x, self.cfg.eps), LEAKY_SLOPE)
        if head is Domain.MASK:
            out = self.mask_head(x)
        else:
            out = torch.tanh(self.image_head(x))
        return out.squeeze(0) if squeeze else out


class CodeGenerator(nn.Module):
    """Latent -> per-domain 16-dim code, plus per-layer affine expanders.

    The shared trunk is four ReLU linears from the 4-dim latent; each domain
    branch is three ReLU linears and a final projection to 16 dims.  The
    expanders map a 16-dim code to (f - 1, g) for each normalization layer on
    this generator side, so a zero code sits near the identity transform.
    """

    def __init__(self, layer_widths: Sequence[int], latent_dim: int = LATENT_DIM,
                 style_dim: int = STYLE_DIM, hidden: int = 512,
                 n_domains: int = NUM_DOMAINS):
        super().__init__()
        self.layer_widths = list(layer_widths)
        self.style_dim = style_dim
        self.shared = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
        )
        self.heads = nn.ModuleList()
        for _ in range(n_domains):
            self.heads.append(nn.Sequential(
                nn.Linear(hidden, hidden), nn.ReLU(),
                nn.Linear(hidden, hidden), nn.ReLU(),
                nn.Linear(hidden, hidden), nn.ReLU(),
                nn.Linear(hidden, style_dim),
            ))
        self.expanders = nn.ModuleList(
            [nn.Linear(style_dim, 2 * w) for w in self.layer_widths]
        )

    @property
    def dtype(self):
        return self.shared[0].weight.dtype

    def forward(self, z: torch.Tensor, domain: Domain) -> torch.Tensor:
        if z.shape[-1] != self.shared[0].in_features:
            raise ShapeError(f"latent must have {self.shared[0].in_features} entries")
        h = self.shared(z)
        return self.heads[domain.index](h)

    def expand(self, code: torch.Tensor):
        """16-dim code -> ((f, g), ...) over this side's layers; f = 1 + df."""
        out = []
        for w, proj in zip(self.layer_widths, self.expanders):
            h = proj(code)
            f = 1.0 + h[..., :w]
            g = h[..., w:]
            out.append((f, g))
        return tuple(out)


class _Trunk(nn.Module):
    """Shared conv trunk of the style encoder and discriminator.

    Ends with a valid 4x4 conv, so the output is a (N, C, 1, 1) feature map.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        widths = cfg.trunk_widths()
        self.blocks = nn.Sequential(
            *[PlainResBlock(widths[k], widths[k + 1]) for k in range(cfg.trunk_blocks)]
        )
        self.conv_out = nn.Conv2d(widths[-1], widths[-1], 4)
        self.out_width = widths[-1]

    def forward(self, x):
        h = self.blocks(x)
        h = F.leaky_relu(h, LEAKY_SLOPE)
        h = self.conv_out(h)
        return F.leaky_relu(h, LEAKY_SLOPE)


class StyleEncoder(nn.Module):
    """Image or mask -> 16-dim code per domain head.

    One unshared 1x1 input conv per input kind (1-channel image, 2-channel
    mask probability map), then a shared trunk and per-domain linear heads.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w0 = cfg.trunk_widths()[0]
        self.in_image = nn.Conv2d(1, w0, 1)
        self.in_mask = nn.Conv2d(2, w0, 1)
        self.trunk = _Trunk(cfg)
        self.heads = nn.ModuleList(
            [nn.Linear(self.trunk.out_width, cfg.style_dim) for _ in range(cfg.n_domains)]
        )

    def forward(self, x: torch.Tensor, domain: Domain) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] == 1:
            h = self.in_image(x)
        elif x.shape[1] == 2:
            h = self.in_mask(x)
        else:
            raise ShapeError(f"style encoder accepts 1 or 2 channels, got {x.shape[1]}")
        out = self.heads[domain.index](self.trunk(h).flatten(start_dim=1))
        return out.squeeze(0) if squeeze else out


class Discriminator(nn.Module):
    """Shared trunk with one scalar-logit 1x1 conv head per domain."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w0 = cfg.trunk_widths()[0]
        self.in_conv = nn.Conv2d(1, w0, 1)
        self.trunk = _Trunk(cfg)
        self.heads = nn.ModuleList(
            [nn.Conv2d(self.trunk.out_width, 1, 1) for _ in range(cfg.n_domains)]
        )

    def forward(self, x: torch.Tensor, domain: Domain) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != 1:
            raise ShapeError(f"discriminator expects 1-channel images, got {x.shape[1]}")
        h = self.trunk(self.in_conv(x))
        out = self.heads[domain.index](h).flatten(start_dim=1).squeeze(-1)
        return out.squeeze(0) if squeeze else out


@dataclass
class ModelBundle:
    """The five trainable modules of one experiment."""

    generator: Generator
    code_enc: CodeGenerator
    code_dec: CodeGenerator
    style_enc: StyleEncoder
    discriminator: Discriminator
    config: NetConfig

    def named_modules(self):
        return [("generator", self.generator), ("code_enc", self.code_enc),
                ("code_dec", self.code_dec), ("style_enc", self.style_enc),
                ("discriminator", self.discriminator)]

    def to_dtype(self, dtype) -> "ModelBundle":
        for _, m in self.named_modules():
            m.to(dtype)
        return self


def init_weights(module: nn.Module):
    """He fan-in init for conv/linear weights (leaky-ReLU gain), zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=LEAKY_SLOPE, mode="fan_in",
                                    nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_models(cfg: NetConfig, seed: int) -> ModelBundle:
    """Construct and initialize all modules deterministically from one seed."""
    torch.manual_seed(seed)
    gen = Generator(cfg)
    enc_w, dec_w = gen.adain_layout()
    fe = CodeGenerator(enc_w, cfg.latent_dim, cfg.style_dim, cfg.code_hidden,
                       cfg.n_domains)
    fd = CodeGenerator(dec_w, cfg.latent_dim, cfg.style_dim, cfg.code_hidden,
                       cfg.n_domains)
    s = StyleEncoder(cfg)
    d = Discriminator(cfg)
    bundle = ModelBundle(gen, fe, fd, s, d, cfg)
    for _, m in bundle.named_modules():
        init_weights(m)
    return bundle


def count_parameters(module: nn.Module) -> int:
    """Total trainable scalar parameters."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
