"""Domain disentangled module.

Takes a source-style and a target-style feature map computed from the *same*
image, fuses them, splits out style-unique and style-invariant parts, and
returns refreshed feature maps of the original shape.

All functions work on batched maps ``[B, C, h, w]``; a single ``[C, h, w]`` map
is accepted and returned without the batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ChannelGates:
    v_s: torch.Tensor  # [B, C]
    v_t: torch.Tensor  # [B, C]


def _batched(*maps):
    squeeze = maps[0].dim() == 3
    out = []
    for m in maps:
        if m.dim() not in (3, 4):
            raise ValueError(f"feature maps must be [C, h, w] or [B, C, h, w], got {tuple(m.shape)}")
        out.append(m.unsqueeze(0) if m.dim() == 3 else m)
    return squeeze, out


def _same_shape(*maps):
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ValueError(f"feature map shapes differ: {tuple(shape)} vs {tuple(m.shape)}")


class DomainDisentangledModule(nn.Module):
    """Trainable parameters of the module plus its forward pass.

    Args:
        channels: feature channels C.
        reduction: ratio r of the squeeze layer, C -> max(1, C // r).
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels < 1 or reduction < 1:
            raise ValueError("channels and reduction must be positive")
        self.channels = channels
        self.reduction = reduction
        reduced = max(1, channels // reduction)
        self.reduce = nn.Linear(channels, reduced)
        self.expand_s = nn.Linear(reduced, channels)
        self.expand_t = nn.Linear(reduced, channels)
        self.fuse_conv = nn.Conv2d(channels, channels, kernel_size=3, stride=1, padding=1)
        self.project_s = nn.Conv2d(2 * channels, channels, kernel_size=1)
        self.project_t = nn.Conv2d(2 * channels, channels, kernel_size=1)

    def forward(self, f_s: torch.Tensor, f_t: torch.Tensor):
        return ddm_forward(f_s, f_t, self)

    def forward_parts(self, f_s: torch.Tensor, f_t: torch.Tensor) -> dict:
        return ddm_forward(f_s, f_t, self, return_parts=True)


def fuse(f_s: torch.Tensor, f_t: torch.Tensor, params: DomainDisentangledModule):
    """Fused prototype ``reduce(avg(F_S + F_T))`` and fused map ``fuse_conv(F_S + F_T)``."""
    _same_shape(f_s, f_t)
    squeeze, (f_s, f_t) = _batched(f_s, f_t)
    f_st = f_s + f_t
    z_st = params.reduce(f_st.mean(dim=(2, 3)))
    Z_st = params.fuse_conv(f_st)
    if squeeze:
        return z_st[0], Z_st[0]
    return z_st, Z_st


def unique_gates(z_st: torch.Tensor, params: DomainDisentangledModule) -> ChannelGates:
    """Two-way softmax between the source and target expansions of the prototype."""
    z_s = params.expand_s(z_st)
    z_t = params.expand_t(z_st)
    # max-subtracted two-way softmax; v_t computed as its own ratio, not 1 - v_s
    m = torch.maximum(z_s, z_t)
    e_s = torch.exp(z_s - m)
    e_t = torch.exp(z_t - m)
    denom = e_s + e_t
    return ChannelGates(v_s=e_s / denom, v_t=e_t / denom)


def apply_gates(f_s: torch.Tensor, f_t: torch.Tensor, gates: ChannelGates):
    """Scale channel i of each map by its gate scalar."""
    _same_shape(f_s, f_t)
    squeeze, (f_s, f_t) = _batched(f_s, f_t)
    v_s = gates.v_s if gates.v_s.dim() == 2 else gates.v_s.unsqueeze(0)
    v_t = gates.v_t if gates.v_t.dim() == 2 else gates.v_t.unsqueeze(0)
    c = f_s.shape[1]
    if v_s.shape[-1] != c or v_t.shape[-1] != c:
        raise ValueError(f"gate length {v_s.shape[-1]} does not match channel count {c}")
    u_s = f_s * v_s[:, :, None, None]
    u_t = f_t * v_t[:, :, None, None]
    if squeeze:
        return u_s[0], u_t[0]
    return u_s, u_t


def _relation(f: torch.Tensor, Z: torch.Tensor) -> torch.Tensor:
    # logits[b, j, i] = <F^i, Z^j> over flattened spatial positions; softmax over i
    b, c = f.shape[:2]
    logits = torch.bmm(Z.reshape(b, c, -1), f.reshape(b, c, -1).transpose(1, 2))
    logits = logits - logits.amax(dim=2, keepdim=True)
    e = torch.exp(logits)
    return e / e.sum(dim=2, keepdim=True)


def relation_masks(f_s: torch.Tensor, f_t: torch.Tensor, Z_st: torch.Tensor):
    """Row-stochastic channel relation masks ``M_S``, ``M_T`` and their mean ``M_ST``.

    Row j of ``M_S`` is the softmax over channels i of ``<F_S^i, Z_ST^j>``.
    """
    _same_shape(f_s, f_t, Z_st)
    squeeze, (f_s, f_t, Z_st) = _batched(f_s, f_t, Z_st)
    m_s = _relation(f_s, Z_st)
    m_t = _relation(f_t, Z_st)
    m_st = (m_s + m_t) / 2
    if squeeze:
        return m_s[0], m_t[0], m_st[0]
    return m_s, m_t, m_st


def invariant_features(f_s: torch.Tensor, f_t: torch.Tensor, m_st: torch.Tensor):
    """Output channel j is ``sum_i M_ST[j, i] * F^i`` for each input map."""
    _same_shape(f_s, f_t)
    squeeze, (f_s, f_t) = _batched(f_s, f_t)
    if m_st.dim() == 2:
        m_st = m_st.unsqueeze(0)
    b, c, h, w = f_s.shape
    if m_st.shape[-2:] != (c, c):
        raise ValueError(f"relation mask {tuple(m_st.shape)} does not match channel count {c}")
    m_st = m_st.expand(b, c, c)
    i_s = torch.bmm(m_st, f_s.reshape(b, c, -1)).reshape(b, c, h, w)
    i_t = torch.bmm(m_st, f_t.reshape(b, c, -1)).reshape(b, c, h, w)
    if squeeze:
        return i_s[0], i_t[0]
    return i_s, i_t


def ddm_forward(f_s: torch.Tensor, f_t: torch.Tensor, params: DomainDisentangledModule, return_parts: bool = False):
    """Full module: fuse, gate, relate, mix, concatenate and project back to C channels."""
    _same_shape(f_s, f_t)
    squeeze, (f_s, f_t) = _batched(f_s, f_t)
    if f_s.shape[1] != params.channels:
        raise ValueError(f"module expects {params.channels} channels, got {f_s.shape[1]}")
    z_st, Z_st = fuse(f_s, f_t, params)
    gates = unique_gates(z_st, params)
    u_s, u_t = apply_gates(f_s, f_t, gates)
    m_s, m_t, m_st = relation_masks(f_s, f_t, Z_st)
    i_s, i_t = invariant_features(f_s, f_t, m_st)
    out_s = params.project_s(torch.cat([u_s, i_s], dim=1))
    out_t = params.project_t(torch.cat([u_t, i_t], dim=1))
    if squeeze:
        out_s, out_t = out_s[0], out_t[0]
    if not return_parts:
        return out_s, out_t
    parts = dict(
        z_st=z_st, Z_st=Z_st, v_s=gates.v_s, v_t=gates.v_t, u_s=u_s, u_t=u_t,
        m_s=m_s, m_t=m_t, m_st=m_st, i_s=i_s, i_t=i_t, out_s=out_s, out_t=out_t,
    )
    if squeeze:
        parts = {k: (v if k in ("out_s", "out_t") else v[0]) for k, v in parts.items()}
    return parts
