"""Student / teacher bundle wiring the encoders to every task head."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .autodiff import l2_normalize
from .encoders import AttentivePool, EncoderConfig, TextEncoder, VisionTransformer
from .objectives.dense import DepthHead, DepthHeadConfig, Prompter
from .objectives.ssl import ProjectionHead, TeacherState, frozen_copy
from .objectives.vl import VLParams


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prototypes: int = 256
    head_hidden: int = 128
    head_bottleneck: int = 64
    depth_width: int = 32
    vl_scale_init: float = 10.0
    vl_bias_init: float = 10.0


class StudentModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        e = cfg.encoder
        self.vision = VisionTransformer(e)
        self.pool = AttentivePool(e.width, e.heads, e.mlp_ratio)
        self.text = TextEncoder(e)
        self.dist_head = ProjectionHead(e.width, cfg.prototypes, cfg.head_hidden, cfg.head_bottleneck)
        self.mask_head = ProjectionHead(e.width, cfg.prototypes, cfg.head_hidden, cfg.head_bottleneck)
        self.prompter = Prompter(e.width, e.heads)
        self.depth_head = DepthHead(DepthHeadConfig(
            taps=e.tap_layers, width=cfg.depth_width, dim=e.width, grid=e.grid,
            image_size=e.image_size))
        self.vl = VLParams(cfg.vl_scale_init, cfg.vl_bias_init)
        self.ground = VLParams(cfg.vl_scale_init, cfg.vl_bias_init)

    def image_embedding(self, images: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.pool(self.vision(images).final))

    def text_embedding(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self.text(ids, lengths)


class TeacherModel(nn.Module):
    """Gradient-free EMA copy of the student's SSL path."""

    def __init__(self, student: StudentModel):
        super().__init__()
        self.vision = frozen_copy(student.vision)
        self.pool = frozen_copy(student.pool)
        self.dist_head = frozen_copy(student.dist_head)
        self.mask_head = frozen_copy(student.mask_head)

    def student_view(self, student: StudentModel) -> nn.Module:
        """Module with the student's matching submodules, same parameter names."""
        view = nn.Module()
        view.vision, view.pool = student.vision, student.pool
        view.dist_head, view.mask_head = student.dist_head, student.mask_head
        return view


class ModelBundle:
    def __init__(self, cfg: ModelConfig, ssl_state: TeacherState | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        torch.manual_seed(seed)
        self.cfg = cfg
        self.student = StudentModel(cfg).to(dtype)
        self.teacher = TeacherModel(self.student).to(dtype)
        self.state = ssl_state or TeacherState(prototypes=cfg.prototypes)
        self.state.centers = {k: v.to(dtype) for k, v in self.state.centers.items()}
        self.dtype = dtype
