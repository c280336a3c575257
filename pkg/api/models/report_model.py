"""
End-to-end report generator: vision backbone, projections into the decoder's
embedding space, residual prompting with context samples, and the decoder.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from ..errors import InvalidParameterError
from ..services.prompt_assembly import (
    RESIDUAL_STAGES,
    PromptTokens,
    Residuals,
    ResidualPrompt,
    assemble_prompt,
    compute_residuals,
    project_to_language_space,
)
from .lm_decoder import DecoderConfig, ReportDecoder, TrainingBatch
from .vision_backbone import BackboneConfig, GlobalFeature, VisionBackbone, global_pool, sequential_tokens

logger = logging.getLogger(__name__)


@dataclass
class ContextImages:
    positives: torch.Tensor  # (batch, n, C, H, W)
    negatives: torch.Tensor  # (batch, n, C, H, W)

    def __post_init__(self):
        if self.positives.shape != self.negatives.shape or self.positives.ndim != 5:
            raise InvalidParameterError(
                f"context images must be two (batch, n, C, H, W) tensors of equal shape, "
                f"got {tuple(self.positives.shape)} and {tuple(self.negatives.shape)}"
            )

    @property
    def n_pairs(self) -> int:
        return self.positives.shape[1]


class ReportGenerator(nn.Module):
    def __init__(
        self,
        backbone_config: BackboneConfig,
        decoder_config: DecoderConfig,
        prompt_tokens: PromptTokens,
        residual_stage: str = "after_projection_text",
        freeze_backbone: bool = False,
    ):
        super().__init__()
        if residual_stage not in RESIDUAL_STAGES:
            raise InvalidParameterError(f"unknown residual stage '{residual_stage}'")
        self.backbone = VisionBackbone(backbone_config)
        channels, width = self.backbone.out_channels, decoder_config.embed_dim
        self.global_proj = nn.Linear(channels, width)
        self.seq_proj = nn.Linear(channels, width)
        self.seq_norm = nn.LayerNorm(width)
        self.decoder = ReportDecoder(decoder_config)
        self.prompt_tokens = prompt_tokens
        self.residual_stage = residual_stage
        if freeze_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def _ids(self, ids: List[int]) -> torch.Tensor:
        return torch.tensor(ids, dtype=torch.long, device=self.decoder.embed.weight.device)

    def global_features(self, images: torch.Tensor) -> GlobalFeature:
        """Raw pooled features for a (..., C, H, W) stack of images."""
        lead = images.shape[:-3]
        pooled = global_pool(self.backbone(images.reshape(-1, *images.shape[-3:]))).vector
        return GlobalFeature(vector=pooled.reshape(*lead, -1), stage="raw")

    def _residuals(self, v_g_raw: GlobalFeature, context: ContextImages) -> Residuals:
        c_pos = self.global_features(context.positives)
        c_neg = self.global_features(context.negatives)
        disease = self.decoder.embed_tokens(self._ids(self.prompt_tokens.disease))
        if self.residual_stage == "before_projection":
            # visual differences taken in backbone space, then projected; text enters unchanged
            anchor = v_g_raw.vector.unsqueeze(-2)
            return Residuals(
                positive=self.global_proj(anchor - c_pos.vector),
                negative=self.global_proj(anchor - c_neg.vector),
                text=disease,
            )
        v_g = project_to_language_space(v_g_raw, self.global_proj)
        residuals = compute_residuals(
            v_g,
            project_to_language_space(c_pos, self.global_proj).vector,
            project_to_language_space(c_neg, self.global_proj).vector,
            disease,
        )
        if self.residual_stage == "after_projection":
            residuals.text = disease
        return residuals

    def build_prompt(self, images: torch.Tensor, context: Optional[ContextImages] = None) -> ResidualPrompt:
        fm = self.backbone(images)
        v_s = sequential_tokens(fm, self.seq_proj, self.seq_norm)
        with_context = context is not None and context.n_pairs > 0
        residuals = self._residuals(global_pool(fm), context) if with_context else None
        t_pre = self.decoder.embed_tokens(self._ids(self.prompt_tokens.pre(with_context)))
        t_post = self.decoder.embed_tokens(self._ids(self.prompt_tokens.post))
        return assemble_prompt(residuals, t_pre, v_s, t_post, self.prompt_tokens.layout)

    def forward(
        self, images: torch.Tensor, report_ids: torch.Tensor, context: Optional[ContextImages] = None
    ) -> Tuple[torch.Tensor, TrainingBatch]:
        prompt = self.build_prompt(images, context)
        return self.decoder(prompt.embeddings, report_ids)

    @torch.no_grad()
    def generate(
        self,
        images: torch.Tensor,
        context: Optional[ContextImages] = None,
        beam_width: int = 3,
        max_len: int = 60,
        length_penalty: float = 0.7,
    ) -> List[List[int]]:
        """Decode each image of the batch separately; width 1 uses greedy decoding."""
        prompt = self.build_prompt(images, context).embeddings
        outputs = []
        for i in range(prompt.shape[0]):
            single = prompt[i : i + 1]
            if beam_width == 1:
                outputs.append(self.decoder.greedy_decode(single, max_len))
            else:
                outputs.append(self.decoder.beam_search(single, beam_width, max_len, length_penalty))
        return outputs
