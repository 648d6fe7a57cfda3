"""Key and value encoders.

The key encoder is siamese: the same weights embed memory and query frames,
so matching reduces to comparing image features. It also carries a separate
1x1 head for the local keys that drive intra-clip attention. The value
encoder sees the image together with the target object's mask and the union
of all other objects' masks (5 input channels), and is fused with the frame's
key features before producing the per-object memory value.

Stage layout at feature stride 4: two stride-2 stages then a stride-1 stage,
each a conv followed by a residual block. Wider strides add stride-2 stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import EncoderConfig
from .layers import Conv2d, Module, ResBlock
from .tensor import ShapeError, Tensor


@dataclass
class FrameFeatures:
    """Per-frame encoder outputs at feature resolution.

    k: [C_k, H, W] matching keys; k_intra: [C_k_intra, H, W] local keys;
    skips: higher-resolution features for the decoder, ordered fine-to-coarse
    (stride 2 first).
    """

    k: Tensor
    k_intra: Tensor
    skips: list


class KeyEncoder(Module):
    def __init__(self, rng, cfg: EncoderConfig, dtype=np.float32):
        n_stride2 = cfg.feature_stride.bit_length() - 1
        chans = cfg.stage_channels
        self.convs = []
        self.blocks = []
        in_ch = 3
        for i, ch in enumerate(chans):
            stride = 2 if i < n_stride2 else 1
            self.convs.append(Conv2d(rng, in_ch, ch, 3, stride=stride, dtype=dtype))
            self.blocks.append(ResBlock(rng, ch, dtype=dtype))
            in_ch = ch
        self.key_head = Conv2d(rng, in_ch, cfg.c_k, 1, dtype=dtype)
        self.intra_head = Conv2d(rng, in_ch, cfg.c_k_intra, 1, dtype=dtype)
        # local keys may instead tap the first stage (then downsampled by the
        # remaining strides through a light conv chain)
        self.intra_share_trunk = cfg.intra_share_trunk
        if not cfg.intra_share_trunk:
            self.intra_down = [Conv2d(rng, chans[0], chans[0], 3, stride=2, dtype=dtype)
                               for _ in range(max(n_stride2 - 1, 0))]
            self.intra_head = Conv2d(rng, chans[0], cfg.c_k_intra, 1, dtype=dtype)
        self.n_stride2 = n_stride2

    def __call__(self, frames: Tensor):
        """frames: [B, 3, H_img, W_img] -> (k, k_intra, skips) batched."""
        x = frames
        skips = []
        stage_outs = []
        for i, (conv, block) in enumerate(zip(self.convs, self.blocks)):
            x = block(T.relu(conv(x)))
            stage_outs.append(x)
            if i < self.n_stride2 - 1:
                skips.append(x)
        k = self.key_head(x)
        if self.intra_share_trunk:
            k_intra = self.intra_head(x)
        else:
            y = stage_outs[0]
            for conv in self.intra_down:
                y = T.relu(conv(y))
            k_intra = self.intra_head(y)
        return k, k_intra, skips


class ValueEncoder(Module):
    """Embeds (image, target mask, others mask) into per-object values."""

    def __init__(self, rng, cfg: EncoderConfig, dtype=np.float32):
        n_stride2 = cfg.feature_stride.bit_length() - 1
        chans = cfg.value_channels
        in_ch = 5 if cfg.use_others_mask else 4
        self.use_others_mask = cfg.use_others_mask
        self.convs = []
        self.blocks = []
        for i, ch in enumerate(chans):
            stride = 2 if i < n_stride2 else 1
            self.convs.append(Conv2d(rng, in_ch, ch, 3, stride=stride, dtype=dtype))
            self.blocks.append(ResBlock(rng, ch, dtype=dtype))
            in_ch = ch
        # extra stride-2 stages when the feature stride is deeper than the chain
        self.extra = [Conv2d(rng, in_ch, in_ch, 3, stride=2, dtype=dtype)
                      for _ in range(max(n_stride2 - len(chans), 0))]
        self.fuse = Conv2d(rng, in_ch + cfg.c_k, cfg.c_v, 1, dtype=dtype)
        self.fuse_block = ResBlock(rng, cfg.c_v, dtype=dtype)
        self.calls = 0

    def __call__(self, frames: Tensor, target: Tensor, others: Tensor, k: Tensor):
        """Batched: frames [B,3,H,W], masks [B,1,H,W], k [B,C_k,h,w] -> [B,C_v,h,w]."""
        self.calls += 1
        if frames.shape[-2:] != target.shape[-2:]:
            raise ShapeError(f"encode_value: mask {target.shape} does not match "
                             f"frame {frames.shape}")
        parts = [frames, target]
        if self.use_others_mask:
            parts.append(others)
        x = T.concat(parts, axis=1)
        for conv, block in zip(self.convs, self.blocks):
            x = block(T.relu(conv(x)))
        for conv in self.extra:
            x = T.relu(conv(x))
        x = T.concat([x, k], axis=1)
        return self.fuse_block(T.relu(self.fuse(x)))


def check_resolution(cfg: EncoderConfig, h: int, w: int) -> None:
    fs = cfg.feature_stride
    if h % fs or w % fs:
        raise ShapeError(f"input resolution {h}x{w} not divisible by feature stride {fs}; "
                         f"pad the frames to a multiple of {fs}")


def encode_key(encoder: KeyEncoder, cfg: EncoderConfig, frames: Tensor) -> list:
    """Encode a batch of frames into one FrameFeatures per frame."""
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"encode_key: expected [B, 3, H, W], got {frames.shape}")
    check_resolution(cfg, frames.shape[2], frames.shape[3])
    k, k_intra, skips = encoder(frames)
    out = []
    for i in range(frames.shape[0]):
        out.append(FrameFeatures(k=k[i], k_intra=k_intra[i],
                                 skips=[s[i] for s in skips]))
    return out


def encode_value(encoder: ValueEncoder, frame: Tensor, target_mask: Tensor,
                 others_mask: Tensor, key_feats: FrameFeatures) -> Tensor:
    """Per-object value features for one frame: [C_v, h, w].

    Masks are [H, W] in [0, 1] (soft masks are fine). A pure function of its
    arguments: other objects only enter through `others_mask`.
    """
    if frame.ndim == 3:
        frame = T.reshape(frame, (1,) + frame.shape)
    if target_mask.data.min() < 0 or target_mask.data.max() > 1:
        raise ValueError("encode_value: target mask values must lie in [0, 1]")
    tgt = T.reshape(target_mask, (1, 1) + target_mask.shape)
    oth = T.reshape(others_mask, (1, 1) + others_mask.shape)
    k = T.reshape(key_feats.k, (1,) + key_feats.k.shape)
    out = encoder(frame, tgt, oth, k)
    return out[0]
