"""
Residual tokens and prompt assembly in the decoder's embedding space.

The assembled prompt is

    [R_t, R_v-, R_t, R_v+, R_t, T_pre, v_s, T_post]

where R_v+/R_v- are the query's projected global feature minus each positive /
negative context feature, R_t is the global feature minus each disease-prompt
token embedding, and T_pre/T_post are the instruction halves around the
sequential visual tokens v_s. A template's layout string may order the {R_t},
{R_v-}, {R_v+}, {T} and {v_s} slots differently.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn

from ..errors import InvalidParameterError, StageError
from ..models.vision_backbone import GlobalFeature, TokenSequence
from .text import Vocabulary

logger = logging.getLogger(__name__)

PLACEHOLDER = "{v_g}"
DEFAULT_LAYOUT = "{R_t} {R_v-} {R_t} {R_v+} {R_t} {T} {v_s} {T}"
RESIDUAL_SLOTS = {"{R_t}": "text_residual", "{R_v-}": "negative_residual", "{R_v+}": "positive_residual"}
SLOT_COUNTS = {"{R_t}": 3, "{R_v-}": 1, "{R_v+}": 1, "{T}": 2, "{v_s}": 1}
IMAGE_MARKER = "<Img V_G>"
TEMPLATE_FILE = Path(__file__).resolve().parents[2] / "templates" / "prompts.json"
ORIGINS = ("vision-global", "vision-seq", "text", "residual")
RESIDUAL_STAGES = ("after_projection_text", "after_projection", "before_projection")


@dataclass
class ProjectedToken:
    vectors: torch.Tensor  # (..., E)
    origin: str

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise InvalidParameterError(f"unknown token origin '{self.origin}'")
        if not torch.isfinite(self.vectors).all():
            raise InvalidParameterError(f"non-finite {self.origin} embedding")

    @property
    def width(self) -> int:
        return self.vectors.shape[-1]


def parse_layout(layout: str) -> Tuple[str, ...]:
    """
    Slot sequence of a prompt layout string such as DEFAULT_LAYOUT.

    Any order is accepted, but the slots must appear as often as in the
    default: three {R_t}, one {R_v-} and {R_v+}, two {T} (instruction, then
    response) and one {v_s}.
    """
    slots = tuple(layout.split())
    unknown = [s for s in slots if s not in SLOT_COUNTS]
    if unknown:
        raise InvalidParameterError(f"unknown prompt slots {unknown} in layout '{layout}'")
    counts = {slot: slots.count(slot) for slot in SLOT_COUNTS}
    if counts != SLOT_COUNTS:
        raise InvalidParameterError(f"layout '{layout}' has slot counts {counts}, expected {SLOT_COUNTS}")
    return slots


@dataclass
class PromptTemplate:
    name: str
    negative_caption: str
    positive_caption: str
    instruction: str
    negative_label: Optional[str] = None  # defaults to the caption text after {v_g}
    positive_label: Optional[str] = None
    layout: str = DEFAULT_LAYOUT
    human_prefix: str = "Human:"
    assistant_prefix: str = "Assistant:"

    def __post_init__(self):
        for caption in (self.negative_caption, self.positive_caption):
            if caption.count(PLACEHOLDER) != 1:
                raise InvalidParameterError(f"template '{self.name}': caption needs exactly one {PLACEHOLDER}: {caption!r}")
        if self.negative_label is None:
            self.negative_label = self._split(self.negative_caption)[1]
        if self.positive_label is None:
            self.positive_label = self._split(self.positive_caption)[1]
        if not self.negative_label.strip() or not self.positive_label.strip():
            raise InvalidParameterError(f"template '{self.name}': disease labels must not be empty")
        parse_layout(self.layout)

    @property
    def slots(self) -> Tuple[str, ...]:
        return parse_layout(self.layout)

    @staticmethod
    def _split(caption: str) -> Tuple[str, str]:
        head, tail = caption.split(PLACEHOLDER)
        return head.strip(), tail.strip().rstrip(".").strip()

    @property
    def disease_prompt(self) -> str:
        return f"{self.positive_label} {self.negative_label}"

    def render(self) -> str:
        """The human-readable row: captions with image markers, then the instruction."""
        captions = f"{self.negative_caption} {self.positive_caption}".replace(PLACEHOLDER, IMAGE_MARKER)
        return f"{captions} {self.instruction}"

    def instruction_text(self, with_context: bool = True) -> Tuple[str, str]:
        """(T_pre, T_post) as plain text; the captions appear only when context is used."""
        parts = [self.human_prefix]
        if with_context:
            for caption in (self.negative_caption, self.positive_caption):
                head, tail = self._split(caption)
                parts.append(f"{head} {tail}.")
        parts.append(self.instruction)
        return " ".join(parts), self.assistant_prefix

    def texts(self) -> List[str]:
        """Every string the vocabulary has to cover."""
        return [*self.instruction_text(with_context=True), self.disease_prompt]


def load_templates(path: Union[str, Path, None] = None) -> Tuple[Dict[str, PromptTemplate], str]:
    """Named templates and the default name from a JSON template file."""
    path = Path(path) if path else TEMPLATE_FILE
    payload = json.loads(path.read_text(encoding="utf-8"))
    templates = {name: PromptTemplate(name=name, **spec) for name, spec in payload["templates"].items()}
    default = payload.get("default", next(iter(templates)))
    if default not in templates:
        raise InvalidParameterError(f"default template '{default}' is not defined in {path}")
    logger.debug(f"Loaded {len(templates)} prompt templates from {path}")
    return templates, default


def get_template(name: Optional[str] = None, path: Union[str, Path, None] = None) -> PromptTemplate:
    templates, default = load_templates(path)
    name = name or default
    if name not in templates:
        raise InvalidParameterError(f"unknown prompt template '{name}' (available: {', '.join(templates)})")
    return templates[name]


def instruction_token_ids(template: PromptTemplate, vocab: Vocabulary, with_context: bool = True) -> Tuple[List[int], List[int]]:
    pre, post = template.instruction_text(with_context)
    return vocab.encode(pre), vocab.encode(post)


def disease_prompt_ids(template: PromptTemplate, vocab: Vocabulary) -> List[int]:
    return vocab.encode(template.disease_prompt)


def project_to_language_space(
    feature: Union[GlobalFeature, TokenSequence], proj: nn.Module
) -> Union[GlobalFeature, ProjectedToken]:
    """Map a raw global feature C->E (stage becomes 'projected') or a token sequence row by row."""
    if isinstance(feature, GlobalFeature):
        if feature.stage != "raw":
            raise StageError("global feature is already projected")
        return GlobalFeature(vector=proj(feature.vector), stage="projected")
    if isinstance(feature, TokenSequence):
        return ProjectedToken(vectors=proj(feature.tokens), origin="vision-seq")
    raise InvalidParameterError(f"cannot project a {type(feature).__name__}")


@dataclass
class Residuals:
    positive: torch.Tensor  # (..., n, E)
    negative: torch.Tensor  # (..., n, E)
    text: torch.Tensor  # (..., p, E)

    @property
    def n_pairs(self) -> int:
        return self.positive.shape[-2]

    @property
    def prompt_length(self) -> int:
        return self.text.shape[-2]


def _as_vectors(x: Union[torch.Tensor, GlobalFeature, ProjectedToken], require_projected: bool) -> torch.Tensor:
    if isinstance(x, GlobalFeature):
        if require_projected and x.stage != "projected":
            raise StageError("residuals need projected global features")
        return x.vector
    if isinstance(x, ProjectedToken):
        return x.vectors
    return x


def compute_residuals(
    v_g: Union[torch.Tensor, GlobalFeature],
    positives: Union[torch.Tensor, ProjectedToken],
    negatives: Union[torch.Tensor, ProjectedToken],
    disease_prompt: Union[torch.Tensor, ProjectedToken],
    require_projected: bool = True,
) -> Residuals:
    """
    R_v+ = v_g - c+_i, R_v- = v_g - c-_i, R_t = v_g - t_j.

    v_g is (E,) or (batch, E); the others are (k, E) or (batch, k, E).
    """
    v_g = _as_vectors(v_g, require_projected)
    pos = _as_vectors(positives, require_projected)
    neg = _as_vectors(negatives, require_projected)
    txt = _as_vectors(disease_prompt, require_projected)
    width = v_g.shape[-1]
    for name, t in (("positive", pos), ("negative", neg), ("disease prompt", txt)):
        if t.ndim < 2 or t.shape[-1] != width:
            raise InvalidParameterError(f"{name} embeddings {tuple(t.shape)} do not match width {width}")
    if pos.shape[-2] != neg.shape[-2]:
        raise InvalidParameterError(f"{pos.shape[-2]} positive vs {neg.shape[-2]} negative context embeddings")
    anchor = v_g.unsqueeze(-2)
    return Residuals(positive=anchor - pos, negative=anchor - neg, text=anchor - txt)


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int

    @property
    def length(self) -> int:
        return self.stop - self.start


@dataclass
class ResidualPrompt:
    embeddings: torch.Tensor  # (batch, length, E)
    segments: List[Segment] = field(default_factory=list)

    def __post_init__(self):
        cursor = 0
        for seg in self.segments:
            if seg.start != cursor or seg.stop < seg.start:
                raise InvalidParameterError(f"segment '{seg.name}' breaks the partition at {cursor}")
            cursor = seg.stop
        if cursor != self.embeddings.shape[1]:
            raise InvalidParameterError(f"segments cover {cursor} of {self.embeddings.shape[1]} positions")

    @property
    def length(self) -> int:
        return self.embeddings.shape[1]

    @property
    def batch_size(self) -> int:
        return self.embeddings.shape[0]

    def segment_names(self) -> List[str]:
        return [s.name for s in self.segments]

    def slice(self, name: str, occurrence: int = 0) -> torch.Tensor:
        matches = [s for s in self.segments if s.name == name]
        seg = matches[occurrence]
        return self.embeddings[:, seg.start : seg.stop]


def _batched(t: torch.Tensor, batch: int) -> torch.Tensor:
    if t.ndim == 2:
        return t.unsqueeze(0).expand(batch, -1, -1)
    if t.shape[0] != batch:
        raise InvalidParameterError(f"segment batch {t.shape[0]} does not match prompt batch {batch}")
    return t


def assemble_prompt(
    residuals: Optional[Residuals],
    t_pre: torch.Tensor,
    v_s: Union[TokenSequence, ProjectedToken, torch.Tensor],
    t_post: torch.Tensor,
    layout: str = DEFAULT_LAYOUT,
) -> ResidualPrompt:
    """Concatenate the segments in layout order; with residuals=None only the {T}, {v_s}, {T} slots remain."""
    slots = parse_layout(layout)
    visual = v_s.tokens if isinstance(v_s, TokenSequence) else _as_vectors(v_s, False)
    if visual.ndim == 2:
        visual = visual.unsqueeze(0)
    if visual.shape[1] == 0:
        raise InvalidParameterError("visual token sequence v_s is empty")
    batch, width = visual.shape[0], visual.shape[-1]

    if residuals is not None:
        tensors = {
            "{R_t}": _batched(residuals.text, batch),
            "{R_v-}": _batched(residuals.negative, batch),
            "{R_v+}": _batched(residuals.positive, batch),
        }
    texts = iter([("instruction", _batched(t_pre, batch)), ("response", _batched(t_post, batch))])

    parts: List[Tuple[str, torch.Tensor]] = []
    for slot in slots:
        if slot == "{T}":
            parts.append(next(texts))
        elif slot == "{v_s}":
            parts.append(("visual", visual))
        elif residuals is not None:
            parts.append((RESIDUAL_SLOTS[slot], tensors[slot]))

    segments, cursor = [], 0
    for name, tensor in parts:
        if tensor.shape[-1] != width:
            raise InvalidParameterError(f"segment '{name}' has width {tensor.shape[-1]}, expected {width}")
        segments.append(Segment(name, cursor, cursor + tensor.shape[1]))
        cursor += tensor.shape[1]
    return ResidualPrompt(embeddings=torch.cat([t for _, t in parts], dim=1), segments=segments)


def expected_prompt_length(n_pairs: int, p: int, pre: int, visual: int, post: int) -> int:
    return 3 * p + 2 * n_pairs + pre + visual + post if n_pairs > 0 else pre + visual + post


@dataclass
class PromptTokens:
    """Token ids of the fixed text segments for one template and vocabulary."""

    pre_context: List[int]
    pre_plain: List[int]
    post: List[int]
    disease: List[int]
    layout: str = DEFAULT_LAYOUT

    @classmethod
    def from_template(cls, template: PromptTemplate, vocab: Vocabulary) -> "PromptTokens":
        pre_context, post = instruction_token_ids(template, vocab, with_context=True)
        pre_plain, _ = instruction_token_ids(template, vocab, with_context=False)
        return cls(
            pre_context=pre_context,
            pre_plain=pre_plain,
            post=post,
            disease=disease_prompt_ids(template, vocab),
            layout=template.layout,
        )

    def pre(self, with_context: bool) -> List[int]:
        return self.pre_context if with_context else self.pre_plain
