"""Pluggable image <-> latent mapping.

IDENTITY is the default: the grayscale image is reinterpreted as a
one-channel latent, bit-exactly, so the test suite carries no pretraining
dependency. STRIDED_AE is the optional latent mode: a small strided
convolutional autoencoder trained once on a reconstruction objective and
frozen before flow training. Decoding always clamps into [-1, 1].
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .errors import ParameterError, ShapeError


class CodecKind(str, Enum):
    IDENTITY = "identity"
    STRIDED_AE = "strided_ae"


@dataclass(frozen=True)
class CodecSpec:
    kind: CodecKind = CodecKind.IDENTITY
    spatial_factor: int = 1
    latent_channels: int = 1

    def __post_init__(self):
        if self.kind == CodecKind.IDENTITY:
            if self.spatial_factor != 1 or self.latent_channels != 1:
                raise ParameterError("IDENTITY codec requires spatial_factor=1, latent_channels=1")
        else:
            if self.spatial_factor < 2 or 2 ** int(math.log2(self.spatial_factor)) != self.spatial_factor:
                raise ParameterError(
                    f"STRIDED_AE spatial_factor must be a power of two >= 2, got {self.spatial_factor}"
                )
            if self.latent_channels < 1:
                raise ParameterError("latent_channels must be positive")


class StridedAutoencoder(nn.Module):
    """Tiny strided conv encoder/decoder pair, one stage per factor of two."""

    def __init__(self, spec, base_width=16):
        super().__init__()
        stages = int(math.log2(spec.spatial_factor))
        widths = [1] + [base_width * 2**i for i in range(stages)]
        enc = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            enc += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.SiLU()]
        enc.append(nn.Conv2d(widths[-1], spec.latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(spec.latent_channels, widths[-1], 3, padding=1), nn.SiLU()]
        for cin, cout in zip(widths[:0:-1], widths[-2::-1]):
            dec += [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)]
            if cout != 1:
                dec.append(nn.SiLU())
        self.decoder = nn.Sequential(*dec)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class Codec:
    """Frozen image <-> latent mapping configured by a CodecSpec."""

    def __init__(self, spec, ae=None):
        if spec.kind == CodecKind.STRIDED_AE and ae is None:
            raise ParameterError("STRIDED_AE codec needs a trained autoencoder")
        self.spec = spec
        self.ae = ae
        if ae is not None:
            ae.eval()
            for p in ae.parameters():
                p.requires_grad_(False)

    def _check_image(self, image):
        if image.ndim != 2:
            raise ShapeError(f"codec expects 2-D images, got ndim={image.ndim}")
        if image.shape[0] % self.spec.spatial_factor or image.shape[1] % self.spec.spatial_factor:
            raise ShapeError(
                f"image sides {image.shape} not divisible by factor {self.spec.spatial_factor}"
            )

    def encode(self, image):
        image = np.asarray(image)
        self._check_image(image)
        if self.spec.kind == CodecKind.IDENTITY:
            return image[None].copy()
        with torch.no_grad():
            t = torch.from_numpy(image.astype(np.float32))[None, None]
            return self.ae.encoder(t)[0].numpy()

    def decode(self, latent):
        latent = np.asarray(latent)
        if latent.ndim != 3 or latent.shape[0] != self.spec.latent_channels:
            raise ShapeError(
                f"latent shape {latent.shape} inconsistent with {self.spec.latent_channels} channels"
            )
        if self.spec.kind == CodecKind.IDENTITY:
            return np.clip(latent[0], -1.0, 1.0)
        with torch.no_grad():
            t = torch.from_numpy(latent.astype(np.float32))[None]
            out = self.ae.decoder(t)[0, 0].numpy()
        return np.clip(out, -1.0, 1.0)

    def encode_batch(self, images):
        """(B, 1, H, W) tensor -> (B, C, h, w) latent tensor."""
        if self.spec.kind == CodecKind.IDENTITY:
            return images
        with torch.no_grad():
            return self.ae.encoder(images)

    def decode_batch(self, latents):
        if self.spec.kind == CodecKind.IDENTITY:
            return latents.clamp(-1.0, 1.0)
        with torch.no_grad():
            return self.ae.decoder(latents).clamp(-1.0, 1.0)

    def latent_shape(self, image_side):
        f = self.spec.spatial_factor
        return (self.spec.latent_channels, image_side // f, image_side // f)


def train_autoencoder(images, spec, steps=400, batch_size=8, lr=1e-3, seed=0):
    """Pretrain a strided autoencoder on plain reconstruction and freeze it.

    Args:
        images: (n, H, W) array of images in [-1, 1].
        spec: STRIDED_AE codec spec.

    Returns:
        Codec wrapping the frozen autoencoder.
    """
    if spec.kind != CodecKind.STRIDED_AE:
        raise ParameterError("train_autoencoder only applies to STRIDED_AE specs")
    torch.manual_seed(seed)
    ae = StridedAutoencoder(spec)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    data = torch.from_numpy(np.asarray(images, dtype=np.float32)).unsqueeze(1)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.integers(0, data.shape[0], size=batch_size)
        batch = data[idx]
        recon = ae(batch)
        loss = ((recon - batch) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return Codec(spec, ae=ae)


def save_codec(path, codec):
    fields = {
        ckpt.FORMAT_FIELD: ckpt.CODEC_FORMAT,
        "kind": codec.spec.kind.value,
        "spatial_factor": str(codec.spec.spatial_factor),
        "latent_channels": str(codec.spec.latent_channels),
    }
    arrays = {}
    if codec.ae is not None:
        arrays = {name: t.detach().cpu().numpy() for name, t in codec.ae.state_dict().items()}
    return ckpt.save_archive(path, fields, arrays)


def load_codec(path):
    fields, arrays = ckpt.load_archive(path)
    if fields.get(ckpt.FORMAT_FIELD) != ckpt.CODEC_FORMAT:
        raise ShapeError(f"{path} is not a codec checkpoint")
    spec = CodecSpec(
        kind=CodecKind(fields["kind"]),
        spatial_factor=int(fields["spatial_factor"]),
        latent_channels=int(fields["latent_channels"]),
    )
    if spec.kind == CodecKind.IDENTITY:
        return Codec(spec)
    ae = StridedAutoencoder(spec)
    expected = {name: tuple(t.shape) for name, t in ae.state_dict().items()}
    for name, shape in expected.items():
        if name not in arrays or arrays[name].shape != shape:
            raise ShapeError(f"codec checkpoint array {name} missing or mis-shaped")
    ae.load_state_dict({name: torch.from_numpy(arrays[name]) for name in expected})
    return Codec(spec, ae=ae)
