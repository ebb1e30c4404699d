"""EgoWorld core: frame codec between uint8 RGB frames and per-token latents."""

from __future__ import annotations

from typing import List, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from tqdm import tqdm

from .errors import ConfigError, DataError

FrameArray = Union[np.ndarray, torch.Tensor]


class TinyAutoencoder(nn.Module):
    """Two-layer conv encoder/decoder with one stride-2 stage (one token per 2x2 patch)."""

    def __init__(self, latent_channels: int = 8, hidden: int = 32):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(3, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, latent_channels, 2, stride=2),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(latent_channels, hidden, 2, stride=2), nn.SiLU(),
            nn.Conv2d(hidden, 3, 3, padding=1), nn.Tanh(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


class FrameCodec(nn.Module):
    """Frames (..., H, W, 3) uint8 <-> latents (..., N, C).

    patch_linear is an invertible reshape of 2x2 patches plus the fixed affine x / 127.5 - 1,
    so its round trip is exact. tiny_ae routes through TinyAutoencoder and needs pretrain().
    """

    def __init__(self, mode: str = "patch_linear", resolution: int = 64, patch: int = 2, latent_channels: int = 8):
        super().__init__()
        if mode not in ("patch_linear", "tiny_ae"):
            raise ConfigError(f"Unknown codec mode '{mode}'.", field="model.codec")
        if resolution % patch:
            raise ConfigError(f"Resolution {resolution} is not a multiple of patch {patch}.", field="data.resolution")
        if mode == "tiny_ae" and patch != 2:
            raise ConfigError("tiny_ae codec only supports 2x2 patches.", field="model.patch")
        self.mode = mode
        self.resolution = int(resolution)
        self.patch = int(patch)
        self.latent_channels = int(latent_channels)
        self.ae: Optional[TinyAutoencoder] = TinyAutoencoder(latent_channels) if mode == "tiny_ae" else None

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    @property
    def tokens_per_frame(self) -> int:
        return self.grid * self.grid

    @property
    def latent_dim(self) -> int:
        return 3 * self.patch * self.patch if self.mode == "patch_linear" else self.latent_channels

    def _to_unit(self, frames: FrameArray) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(frames) if isinstance(frames, np.ndarray) else frames)
        if x.shape[-3:] != (self.resolution, self.resolution, 3):
            raise DataError(f"Frame shape {tuple(x.shape[-3:])} does not match codec resolution {self.resolution}.")
        return x.to(torch.get_default_dtype()) / 127.5 - 1.0

    def encode_frame(self, frames: FrameArray) -> torch.Tensor:
        x = self._to_unit(frames)
        lead = x.shape[:-3]
        x = x.reshape(-1, self.resolution, self.resolution, 3)
        if self.ae is None:
            z = rearrange(x, "b (h p1) (w p2) c -> b (h w) (p1 p2 c)", p1=self.patch, p2=self.patch)
        else:
            x = x.to(next(self.ae.parameters()).dtype)
            z = rearrange(self.ae.encoder(rearrange(x, "b h w c -> b c h w")), "b c h w -> b (h w) c")
        return z.reshape(*lead, self.tokens_per_frame, self.latent_dim)

    def decode_unit(self, latents: torch.Tensor) -> torch.Tensor:
        """Latents -> float frames in [-1, 1], shape (..., H, W, 3)."""
        if latents.shape[-2:] != (self.tokens_per_frame, self.latent_dim):
            raise DataError(f"Latent shape {tuple(latents.shape[-2:])} does not match codec "
                            f"({self.tokens_per_frame}, {self.latent_dim}).")
        lead = latents.shape[:-2]
        z = latents.reshape(-1, self.tokens_per_frame, self.latent_dim)
        if self.ae is None:
            x = rearrange(z, "b (h w) (p1 p2 c) -> b (h p1) (w p2) c", h=self.grid, p1=self.patch, p2=self.patch)
        else:
            grid = rearrange(z.to(next(self.ae.parameters()).dtype), "b (h w) c -> b c h w", h=self.grid)
            x = rearrange(self.ae.decoder(grid), "b c h w -> b h w c")
        return x.reshape(*lead, self.resolution, self.resolution, 3)

    def decode_frame(self, latents: torch.Tensor) -> np.ndarray:
        x = self.decode_unit(latents.detach())
        return ((x + 1.0) * 127.5).round().clamp(0, 255).to(torch.uint8).cpu().numpy()

    def latent_features(self, latents: torch.Tensor, fd_grid: int = 4) -> torch.Tensor:
        """Average-pool latents to an fd_grid x fd_grid token grid and flatten: (..., fd_grid^2 * C)."""
        lead = latents.shape[:-2]
        z = rearrange(latents.reshape(-1, self.tokens_per_frame, self.latent_dim), "b (h w) c -> b c h w", h=self.grid)
        pooled = F.adaptive_avg_pool2d(z, fd_grid)
        return rearrange(pooled, "b c h w -> b (h w c)").reshape(*lead, -1)

    def pretrain(self, frames: np.ndarray, steps: int = 500, batch_size: int = 32, lr: float = 2e-3,
                 seed: int = 0, progress: bool = False) -> List[float]:
        """Fit the autoencoder on uint8 frames (M, H, W, 3) by pixel MSE; returns the loss history."""
        if self.ae is None:
            return []
        if len(frames) == 0:
            raise DataError("Codec pretraining needs at least one frame.")
        gen = torch.Generator().manual_seed(int(seed))
        data = rearrange(self._to_unit(frames), "b h w c -> b c h w")
        opt = torch.optim.Adam(self.ae.parameters(), lr=lr)
        history: List[float] = []
        self.ae.train()
        for _ in tqdm(range(steps), desc="codec", disable=not progress, leave=False):
            idx = torch.randint(0, data.shape[0], (min(batch_size, data.shape[0]),), generator=gen)
            batch = data[idx]
            loss = F.mse_loss(self.ae(batch), batch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            history.append(float(loss.item()))
        self.ae.eval()
        return history

    def reconstruction_rmse(self, frames: np.ndarray) -> float:
        with torch.no_grad():
            x = self._to_unit(frames)
            return float(torch.sqrt(torch.mean((self.decode_unit(self.encode_frame(frames)) - x) ** 2)).item())
