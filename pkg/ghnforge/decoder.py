"""
Декодер: признак узла → тензор (C, C, S, S) → срез/тайлинг до формы слота
"""
import logging
from typing import Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import UnsupportedShape
from .models import GhnConfig

logger = logging.getLogger(__name__)


def channel_index(n: int, available: int, device=None) -> torch.Tensor:
    """Срез первых n каналов или тайлинг с усечением, если n больше доступного"""
    return torch.arange(n, device=device) % available


def spatial_start(k: int, spatial: int) -> int:
    return (spatial - k) // 2


def check_shape(target: Sequence[int], spatial: int) -> Tuple[int, ...]:
    """Проверяет, что форма выражается через декодированный тензор"""
    shape = tuple(int(v) for v in target)
    if len(shape) not in (1, 2, 4):
        raise UnsupportedShape(f"Parameter shape {shape} has unsupported rank {len(shape)}")
    if any(v < 1 for v in shape):
        raise UnsupportedShape(f"Parameter shape {shape} has non-positive dims")
    if len(shape) == 4 and (shape[2] > spatial or shape[3] > spatial):
        raise UnsupportedShape(f"Kernel {shape[2]}x{shape[3]} exceeds decoder extent {spatial}")
    return shape


def materialize(T: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
    """
    Форма слота из декодированного тензора T (C_out, C_in, S, S).
    Каналы: срез, при нехватке тайлинг и усечение. Пространство: окно
    со стартом (S - k)//2 для 4-D; для 2-D и 1-D берётся центр S//2,
    для 1-D ещё и входной канал 0.
    """
    c_out, c_in, s_h, s_w = T.shape
    shape = check_shape(target, min(s_h, s_w))
    rows = channel_index(shape[0], c_out, T.device)

    if len(shape) == 4:
        _, i, kh, kw = shape
        sh, sw = spatial_start(kh, s_h), spatial_start(kw, s_w)
        window = T[:, :, sh:sh + kh, sw:sw + kw]
        return window.index_select(0, rows).index_select(1, channel_index(i, c_in, T.device))

    center = T[:, :, s_h // 2, s_w // 2]
    if len(shape) == 2:
        return center.index_select(0, rows).index_select(1, channel_index(shape[1], c_in, T.device))
    return center[:, 0].index_select(0, rows)


class DecoderHead(nn.Module):
    """
    Двухслойный декодер: fc d → h·S·S с ReLU, затем общий для всех
    пространственных позиций слой h → C·C (свёртка 1×1).
    """

    def __init__(self, cfg: GhnConfig):
        super().__init__()
        self.channels = cfg.decoder_channels
        self.spatial = cfg.decoder_spatial
        self.width = cfg.decoder_width
        self.fc = nn.Linear(cfg.hidden, self.width * self.spatial * self.spatial)
        self.out = nn.Linear(self.width, self.channels * self.channels)

    @property
    def output_numel(self) -> int:
        return self.channels * self.channels * self.spatial * self.spatial

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """(N, d) → (N, C, C, S, S)"""
        n = h.shape[0]
        s = self.spatial
        z = F.relu(self.fc(h)).view(n, self.width, s, s)
        t = torch.einsum("rh,nhxy->nrxy", self.out.weight, z) + self.out.bias.view(1, -1, 1, 1)
        return t.reshape(n, self.channels, self.channels, s, s)

    def decode_for_shape(self, h: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
        """
        То же, что materialize(decode_node(h), target), но вычисляются
        только те элементы T, которые попадают в слот.
        """
        s = self.spatial
        c = self.channels
        shape = check_shape(target, s)
        device = h.device
        if len(shape) == 4:
            o, i, kh, kw = shape
            ys = torch.arange(spatial_start(kh, s), spatial_start(kh, s) + kh, device=device)
            xs = torch.arange(spatial_start(kw, s), spatial_start(kw, s) + kw, device=device)
        else:
            o, i = shape[0], (shape[1] if len(shape) == 2 else 1)
            kh = kw = 1
            ys = xs = torch.tensor([s // 2], device=device)

        positions = (ys.view(-1, 1) * s + xs.view(1, -1)).reshape(-1)
        hidden_rows = (torch.arange(self.width, device=device).view(-1, 1) * s * s
                       + positions.view(1, -1)).reshape(-1)
        z = F.relu(F.linear(h, self.fc.weight[hidden_rows], self.fc.bias[hidden_rows]))
        z = z.view(self.width, kh, kw)

        o_eff, i_eff = min(o, c), min(i, c)
        out_rows = (torch.arange(o_eff, device=device).view(-1, 1) * c
                    + torch.arange(i_eff, device=device).view(1, -1)).reshape(-1)
        t = torch.einsum("rh,hxy->rxy", self.out.weight[out_rows], z)
        t = (t + self.out.bias[out_rows].view(-1, 1, 1)).view(o_eff, i_eff, kh, kw)
        t = t.index_select(0, channel_index(o, o_eff, device))
        t = t.index_select(1, channel_index(i, i_eff, device))
        if len(shape) == 4:
            return t
        if len(shape) == 2:
            return t[:, :, 0, 0]
        return t[:, 0, 0, 0]


def decode_node(h: torch.Tensor, head: DecoderHead) -> torch.Tensor:
    """Полный декодированный тензор (C, C, S, S) для одного узла"""
    return head(h.view(1, -1))[0]
