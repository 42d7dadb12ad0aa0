"""
Графовый трансформер гиперсети: эмбеддинги узлов, смещение внимания по путям, слои
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .archgraph import ArchGraph, GraphFeatures
from .errors import NonFiniteActivation
from .models import OP_ORDER, BiasMode, GhnConfig

logger = logging.getLogger(__name__)


@dataclass
class EncoderInputs:
    """Индексы операций и структурные признаки в виде тензоров"""
    ops: torch.Tensor
    in_degree: torch.Tensor
    out_degree: torch.Tensor
    spd_fw: torch.Tensor
    spd_bw: torch.Tensor
    input_dist: torch.Tensor

    @classmethod
    def from_graph(cls, g: ArchGraph, feat: GraphFeatures, device=None) -> "EncoderInputs":
        def as_long(array) -> torch.Tensor:
            return torch.as_tensor(np.asarray(array), dtype=torch.long, device=device)

        return cls(
            ops=as_long([node.op.index for node in g.nodes]),
            in_degree=as_long(feat.in_degree),
            out_degree=as_long(feat.out_degree),
            spd_fw=as_long(feat.spd_fw),
            spd_bw=as_long(feat.spd_bw),
            input_dist=as_long(feat.input_dist),
        )

    def permuted(self, perm) -> "EncoderInputs":
        """Новый узел i соответствует старому perm[i]"""
        perm = torch.as_tensor(perm, dtype=torch.long)
        return EncoderInputs(
            ops=self.ops[perm],
            in_degree=self.in_degree[perm],
            out_degree=self.out_degree[perm],
            spd_fw=self.spd_fw[perm][:, perm],
            spd_bw=self.spd_bw[perm][:, perm],
            input_dist=self.input_dist[perm],
        )


class NodeEmbeddings(nn.Module):
    """Эмбеддинг операции + центральность + расстояние от входа"""

    def __init__(self, cfg: GhnConfig):
        super().__init__()
        self.cfg = cfg
        self.op_table = nn.Embedding(len(OP_ORDER), cfg.hidden)
        self.in_deg_table = nn.Embedding(cfg.max_deg + 1, cfg.hidden)
        self.out_deg_table = nn.Embedding(cfg.max_deg + 1, cfg.hidden)
        self.input_dist_table = nn.Embedding(cfg.max_dist + 2, cfg.hidden)

    def forward(self, inputs: EncoderInputs) -> torch.Tensor:
        h = self.op_table(inputs.ops)
        if self.cfg.use_centrality:
            top = self.cfg.max_deg
            h = h + self.in_deg_table(inputs.in_degree.clamp(max=top))
            h = h + self.out_deg_table(inputs.out_degree.clamp(max=top))
        if self.cfg.use_input_dist:
            h = h + self.input_dist_table(inputs.input_dist.clamp(max=self.cfg.max_dist + 1))
        return h


class EdgeBias(nn.Module):
    """Смещение логитов внимания по кратчайшим путям вперёд и назад"""

    def __init__(self, cfg: GhnConfig):
        super().__init__()
        k = cfg.heads
        self.max_bucket = cfg.max_dist + 1
        self.dist_table_fw = nn.Embedding(cfg.max_dist + 2, k)
        self.dist_table_bw = nn.Embedding(cfg.max_dist + 2, k)
        self.phi = nn.Sequential(
            nn.Linear(2 * k, cfg.phi_width),
            nn.ReLU(),
            nn.Linear(cfg.phi_width, k),
        )
        self.heads = k

    def forward(self, spd_fw: torch.Tensor, spd_bw: torch.Tensor, mode: BiasMode) -> torch.Tensor:
        n = spd_fw.shape[0]
        if mode == BiasMode.NONE:
            return self.dist_table_fw.weight.new_zeros(self.heads, n, n)
        e_fw = self.dist_table_fw(spd_fw.clamp(max=self.max_bucket))
        if mode == BiasMode.GRAPHORMER:
            return e_fw.permute(2, 0, 1)
        e_bw = self.dist_table_bw(spd_bw.clamp(max=self.max_bucket))
        return self.phi(torch.cat([e_fw, e_bw], dim=-1)).permute(2, 0, 1)


class MultiHeadSelfAttention(nn.Module):
    """Многоголовое self-attention с аддитивным смещением логитов"""

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.W_Q = nn.Linear(hidden, hidden)
        self.W_K = nn.Linear(hidden, hidden)
        self.W_V = nn.Linear(hidden, hidden)
        self.W_O = nn.Linear(hidden, hidden)

    def forward(self, h: torch.Tensor,
                bias: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        n = h.shape[0]

        def split(x: torch.Tensor) -> torch.Tensor:
            return x.view(n, self.heads, self.head_dim).transpose(0, 1)

        q, k, v = split(self.W_Q(h)), split(self.W_K(h)), split(self.W_V(h))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if bias is not None:
            scores = scores + bias
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(0, 1).reshape(n, -1)
        return self.W_O(out), weights


class GhnLayer(nn.Module):
    """Pre-norm блок: [LN → MSA → residual] → LN → MLP → residual"""

    def __init__(self, cfg: GhnConfig):
        super().__init__()
        d = cfg.hidden
        self.attn = MultiHeadSelfAttention(d, cfg.heads) if cfg.use_sa else None
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, cfg.mlp_ratio * d),
            nn.GELU(),
            nn.Linear(cfg.mlp_ratio * d, d),
        )

    def forward(self, h: torch.Tensor,
                bias: Optional[torch.Tensor]) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        weights = None
        if self.attn is not None:
            attended, weights = self.attn(self.norm1(h), bias)
            h = h + attended
        h = h + self.mlp(self.norm2(h))
        return h, weights


class GhnEncoder(nn.Module):
    """Стек из L слоёв поверх эмбеддингов узлов"""

    def __init__(self, cfg: GhnConfig):
        super().__init__()
        self.cfg = cfg
        self.embeddings = NodeEmbeddings(cfg)
        n_bias = cfg.layers if cfg.per_layer_bias else 1
        self.edge_bias = nn.ModuleList([EdgeBias(cfg) for _ in range(max(n_bias, 1))])
        self.layers = nn.ModuleList([GhnLayer(cfg) for _ in range(cfg.layers)])

    def forward(self, inputs: EncoderInputs,
                return_attention: bool = False) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        h = self.embeddings(inputs)
        attention: List[torch.Tensor] = []
        mode = self.cfg.bias_mode
        shared = None
        if self.cfg.use_sa and not self.cfg.per_layer_bias:
            shared = self.edge_bias[0](inputs.spd_fw, inputs.spd_bw, mode)
        for i, layer in enumerate(self.layers):
            bias = shared
            if self.cfg.use_sa and self.cfg.per_layer_bias:
                bias = self.edge_bias[i](inputs.spd_fw, inputs.spd_bw, mode)
            h, weights = layer(h, bias)
            if return_attention and weights is not None:
                attention.append(weights)
        if not torch.isfinite(h).all():
            bad = int((~torch.isfinite(h)).any(dim=1).nonzero()[0])
            raise NonFiniteActivation(bad, f"Non-finite encoder feature at node {bad}")
        return h, attention


def embed_nodes(g: ArchGraph, feat: GraphFeatures, emb: NodeEmbeddings) -> torch.Tensor:
    device = emb.op_table.weight.device
    return emb(EncoderInputs.from_graph(g, feat, device))


def attention_bias(feat: GraphFeatures, eb: EdgeBias, mode: BiasMode) -> torch.Tensor:
    """Смещение k×|V|×|V| для заданного режима"""
    device = eb.dist_table_fw.weight.device
    spd_fw = torch.as_tensor(feat.spd_fw, dtype=torch.long, device=device)
    spd_bw = torch.as_tensor(feat.spd_bw, dtype=torch.long, device=device)
    return eb(spd_fw, spd_bw, mode)


def encoder_forward(g: ArchGraph, feat: GraphFeatures, model: nn.Module) -> torch.Tensor:
    """Финальные признаки узлов H_L; принимает GhnModel или GhnEncoder"""
    encoder: GhnEncoder = getattr(model, "encoder", model)
    device = encoder.embeddings.op_table.weight.device
    h, _ = encoder(EncoderInputs.from_graph(g, feat, device))
    return h
