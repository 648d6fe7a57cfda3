"""Intra-clip refinement: windowed self-attention over retrieved values.

A clip's retrieved values are propagated between its frames using local key
features: attention scores come from the local keys (dot product, scaled by
1/sqrt(d)), values travel along those scores, and a feed-forward block with
a residual finishes each layer. Locality is imposed with 3D windows over
(time, height, width); alternate layers shift the windows by half so
information crosses window borders over depth.

Window bookkeeping: the volume is cyclically shifted, zero-padded up to
window multiples, then partitioned. Each position carries a region id that
encodes which side of every wrap boundary it came from (-1 for padding);
attention is only allowed between positions with equal ids, which blocks
both padding and wrapped-around pairs.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor

_GEOMETRY_CACHE: dict = {}


def effective_window(clip_shape, window, shift):
    """Clamp windows to the clip extents; a full-extent axis never shifts."""
    win, shf = [], []
    for extent, w, s in zip(clip_shape, window, shift):
        w2 = min(w, extent)
        win.append(w2)
        shf.append(0 if w2 >= extent else s)
    return tuple(win), tuple(shf)


def _window_geometry(clip_shape, window, shift):
    """Padded dims, window counts, per-position region ids, pair mask."""
    key = (clip_shape, window, shift)
    got = _GEOMETRY_CACHE.get(key)
    if got is not None:
        return got
    dims = clip_shape
    padded = tuple(-(-d // w) * w for d, w in zip(dims, window))
    counts = tuple(p // w for p, w in zip(padded, window))

    bands = []
    for d, p, s in zip(dims, padded, shift):
        band = np.full(p, -1, dtype=np.int64)
        band[:d] = 0
        if s > 0:
            band[d - s:d] = 1
        bands.append(band)
    ids = (bands[0][:, None, None] * 4 + bands[1][None, :, None] * 2
           + bands[2][None, None, :])
    ids = np.where((bands[0][:, None, None] < 0) | (bands[1][None, :, None] < 0)
                   | (bands[2][None, None, :] < 0), -1, ids)
    nl, nh, nw = counts
    wt, wh, ww = window
    ids = ids.reshape(nl, wt, nh, wh, nw, ww).transpose(0, 2, 4, 1, 3, 5)
    ids = ids.reshape(nl * nh * nw, wt * wh * ww)

    same = ids[:, :, None] == ids[:, None, :]
    valid_key = ids[:, None, :] >= 0
    eye = np.eye(ids.shape[1], dtype=bool)[None]
    allowed = (same & valid_key) | eye

    out = (padded, counts, ids, allowed)
    _GEOMETRY_CACHE[key] = out
    return out


def window_partition(x: Tensor, window, shift=(0, 0, 0)):
    """Split a clip volume into attention windows.

    `x` is [L, H, W, C] (or [K, L, H, W, C] for a per-object batch). Returns
    `(windows, pad_mask)`: windows are [num_win, win_vol, C] (with a leading
    K when batched) and pad_mask is the [num_win, win_vol] region-id array,
    -1 at padded positions.
    """
    batched = x.ndim == 5
    if not batched and x.ndim != 4:
        raise ShapeError(f"window_partition: expected [L, H, W, C], got {x.shape}")
    dims = x.shape[1:4] if batched else x.shape[0:3]
    window, shift = tuple(window), tuple(shift)
    padded, counts, ids, _ = _window_geometry(dims, window, shift)

    axes = (1, 2, 3) if batched else (0, 1, 2)
    if any(shift):
        x = T.roll(x, tuple(-s for s in shift), axes)
    if padded != dims:
        pw = [(0, 0)] * x.ndim
        for ax, (d, p) in zip(axes, zip(dims, padded)):
            pw[ax] = (0, p - d)
        x = T.pad(x, pw)

    nl, nh, nw = counts
    wt, wh, ww = window
    c = x.shape[-1]
    if batched:
        k = x.shape[0]
        x = T.reshape(x, (k, nl, wt, nh, wh, nw, ww, c))
        x = T.permute(x, (0, 1, 3, 5, 2, 4, 6, 7))
        windows = T.reshape(x, (k, nl * nh * nw, wt * wh * ww, c))
    else:
        x = T.reshape(x, (nl, wt, nh, wh, nw, ww, c))
        x = T.permute(x, (0, 2, 4, 1, 3, 5, 6))
        windows = T.reshape(x, (nl * nh * nw, wt * wh * ww, c))
    return windows, ids


def window_reverse(windows: Tensor, clip_shape, window, shift=(0, 0, 0)) -> Tensor:
    """Inverse of `window_partition`: crop padding and undo the cyclic shift."""
    batched = windows.ndim == 4
    dims = tuple(clip_shape)
    window, shift = tuple(window), tuple(shift)
    padded, counts, _, _ = _window_geometry(dims, window, shift)
    nl, nh, nw = counts
    wt, wh, ww = window
    c = windows.shape[-1]

    if batched:
        k = windows.shape[0]
        x = T.reshape(windows, (k, nl, nh, nw, wt, wh, ww, c))
        x = T.permute(x, (0, 1, 4, 2, 5, 3, 6, 7))
        x = T.reshape(x, (k,) + padded + (c,))
        if padded != dims:
            x = x[:, :dims[0], :dims[1], :dims[2], :]
        axes = (1, 2, 3)
    else:
        x = T.reshape(windows, (nl, nh, nw, wt, wh, ww, c))
        x = T.permute(x, (0, 3, 1, 4, 2, 5, 6))
        x = T.reshape(x, padded + (c,))
        if padded != dims:
            x = x[:dims[0], :dims[1], :dims[2], :]
        axes = (0, 1, 2)
    if any(shift):
        x = T.roll(x, shift, axes)
    return x


class ICRBlock(Module):
    """One refinement layer: windowed attention over local keys, then FFN.

    phi (key path) and psi (value path) are layer-norm + linear projections;
    the attended values are projected back to the value width and summed
    onto the input, and the output is FFN(v_attn) + v_attn.
    """

    def __init__(self, rng, c_v, c_k_intra, cfg, dtype=np.float32):
        width = cfg.width
        self.heads = cfg.heads
        self.window = (cfg.temporal_window, cfg.spatial_window, cfg.spatial_window)
        self.ln_k = LayerNorm(c_k_intra, dtype=dtype)
        self.proj_k = Linear(rng, c_k_intra, width, dtype=dtype)
        self.ln_v = LayerNorm(c_v, dtype=dtype)
        self.proj_v = Linear(rng, c_v, width, dtype=dtype)
        self.out_proj = Linear(rng, width, c_v, dtype=dtype)
        hidden = cfg.ffn_hidden if cfg.ffn_hidden else 2 * c_v
        self.ffn1 = Linear(rng, c_v, hidden, dtype=dtype)
        self.ffn2 = Linear(rng, hidden, c_v, dtype=dtype)
        self.pos_bias = None
        if cfg.use_position_bias:
            wt, ws = cfg.temporal_window, cfg.spatial_window
            n = (2 * wt - 1) * (2 * ws - 1) * (2 * ws - 1)
            self.pos_bias = Tensor(np.zeros((n, cfg.heads), dtype=dtype), requires_grad=True)


def _relative_index(window, table_window) -> np.ndarray:
    """Flat relative-offset index for every position pair in one window.

    `window` is the (possibly clamped) window in use; the bias table is
    sized by the configured `table_window`, so offsets index into it.
    """
    wt, wh, ww = window
    tt, th, tw = table_window
    coords = np.stack(np.meshgrid(np.arange(wt), np.arange(wh), np.arange(ww),
                                  indexing="ij"), axis=-1).reshape(-1, 3)
    rel = coords[:, None, :] - coords[None, :, :]
    rel += np.array([tt - 1, th - 1, tw - 1])
    return (rel[..., 0] * (2 * th - 1) * (2 * tw - 1)
            + rel[..., 1] * (2 * tw - 1) + rel[..., 2])


def icr_layer(vq: Tensor, k_intra: Tensor, clip_shape, block: ICRBlock,
              shift_on: bool = False, return_attn: bool = False):
    """Apply one refinement layer.

    `vq` is [K, L*H*W, C_v] (retrieved values per object), `k_intra` is
    [L*H*W, C_k_intra] (local keys, shared by all objects), `clip_shape` is
    (L, H, W). The attention matrix is computed once from the keys and
    reused for every object.
    """
    l, h, w = clip_shape
    n = l * h * w
    if k_intra.ndim != 2 or k_intra.shape[0] != n:
        raise ShapeError(f"icr_layer: local keys {k_intra.shape} do not match clip "
                         f"geometry {clip_shape}")
    if vq.ndim != 3 or vq.shape[1] != n:
        raise ShapeError(f"icr_layer: values {vq.shape} do not match clip geometry {clip_shape}")

    requested = tuple(s // 2 for s in block.window) if shift_on else (0, 0, 0)
    window, shift = effective_window(clip_shape, block.window, requested)

    heads = block.heads
    width = block.proj_k.w.shape[1]
    d = width // heads
    scale = 1.0 / np.sqrt(d)

    q = block.proj_k(block.ln_k(k_intra))                       # [n, width]
    v = block.proj_v(block.ln_v(vq))                            # [K, n, width]

    q_win, ids = window_partition(T.reshape(q, (l, h, w, width)), window, shift)
    v_win, _ = window_partition(T.reshape(v, (vq.shape[0], l, h, w, width)), window, shift)
    nwin, tvol = q_win.shape[0], q_win.shape[1]

    _, _, _, allowed = _window_geometry(tuple(clip_shape), window, shift)

    if heads == 1:
        logits = T.mul(T.matmul(q_win, T.permute(q_win, (0, 2, 1))), scale)  # [nW, t, t]
        if block.pos_bias is not None:
            rel = _relative_index(window, block.window)
            bias = T.reshape(T.gather_rows(block.pos_bias, rel.reshape(-1)),
                             (tvol, tvol, heads))
            logits = T.add(logits, T.permute(bias, (2, 0, 1))[0])
        attn = T.masked_softmax(logits, allowed, axis=-1)
        out = T.matmul(attn, v_win)                                          # [K, nW, t, width]
    else:
        qh = T.permute(T.reshape(q_win, (nwin, tvol, heads, d)), (0, 2, 1, 3))
        logits = T.mul(T.matmul(qh, T.permute(qh, (0, 1, 3, 2))), scale)     # [nW, h, t, t]
        if block.pos_bias is not None:
            rel = _relative_index(window, block.window)
            bias = T.reshape(T.gather_rows(block.pos_bias, rel.reshape(-1)),
                             (tvol, tvol, heads))
            logits = T.add(logits, T.permute(bias, (2, 0, 1)))
        attn = T.masked_softmax(logits, allowed[:, None, :, :], axis=-1)
        vh = T.permute(T.reshape(v_win, (vq.shape[0], nwin, tvol, heads, d)), (0, 1, 3, 2, 4))
        out = T.matmul(attn, vh)                                             # [K, nW, h, t, d]
        out = T.reshape(T.permute(out, (0, 1, 3, 2, 4)), (vq.shape[0], nwin, tvol, width))

    vol = window_reverse(out, clip_shape, window, shift)                     # [K, L, H, W, width]
    propagated = block.out_proj(T.reshape(vol, (vq.shape[0], n, width)))
    v_attn = T.add(propagated, vq)
    result = T.add(block.ffn2(T.relu(block.ffn1(v_attn))), v_attn)
    if return_attn:
        return result, attn.data
    return result


def refine_clip(vq: Tensor, k_intra: Tensor, clip_shape, blocks) -> Tensor:
    """Stack refinement layers with alternating window shifts.

    Even layers are unshifted, odd layers shift by half a window. `blocks`
    may be empty, which passes values through untouched (internal hook; the
    config validator rejects num_layers == 0 for real runs).
    """
    out = vq
    for i, block in enumerate(blocks):
        out = icr_layer(out, k_intra, clip_shape, block, shift_on=(i % 2 == 1))
    return out
