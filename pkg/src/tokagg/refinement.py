"""Token refinement blocks, the projection head, and descriptor inference.

Each refinement block runs multi-head self-attention over the tokens
(relationship modeling) followed by token-to-feature cross-attention
(token enhancement). Both branches are layer-normalized and added
residually, so a block with zeroed branch weights is the identity.
The refined tokens are concatenated and projected to the final
d-dimensional global descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .aggregation import (
    AttentionMaps,
    FeatureMap,
    LfsaParams,
    TokenizerMode,
    TokenizerParams,
    TokenSet,
    init_lfsa,
    init_tokenizer,
    lfsa_forward,
    tokenize,
    tokenize_learned,
)
from .errors import ConfigurationError, ShapeMismatchError
from .tensor import Tensor

SQRT2 = math.sqrt(2.0)
DEFAULT_SCALES = (1.0 / SQRT2, 1.0, SQRT2)


@dataclass
class ModelConfig:
    """Hyperparameters of the aggregation model.

    Defaults follow the published training setup: 4 tokens, 2 refinement
    blocks, 1024-d descriptor, three evaluation scales. ``head_count``
    defaults to 8 and must divide ``channels``; desk-scale configs use 2.
    """

    channels: int
    token_count: int = 4
    descriptor_dim: int = 1024
    block_count: int = 2
    head_count: int = 8
    dropout_p: float = 0.1
    scales: tuple[float, ...] = DEFAULT_SCALES
    use_lfsa: bool = True
    tokenizer_mode: TokenizerMode = TokenizerMode.ATTEN_BASED
    scale_by_head_dim: bool = False  # False: 1/sqrt(C) as printed; True: 1/sqrt(C/heads)
    use_head_bias: bool = True

    def __post_init__(self):
        if isinstance(self.tokenizer_mode, str):
            self.tokenizer_mode = TokenizerMode(self.tokenizer_mode)
        self.scales = tuple(float(s) for s in self.scales)
        if self.block_count > 0 and self.channels % self.head_count != 0:
            raise ConfigurationError(
                f"head count {self.head_count} must divide channels {self.channels}"
            )
        if self.descriptor_dim < 1:
            raise ConfigurationError(f"descriptor dim must be >= 1, got {self.descriptor_dim}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, TokenizerMode):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        known = {f.name for f in fields(ModelConfig)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return ModelConfig(**data)


@dataclass
class RefinementBlockParams:
    self_wq: Tensor
    self_wk: Tensor
    self_wv: Tensor
    self_wm: Tensor
    self_ln_gain: Tensor
    self_ln_bias: Tensor
    cross_wq: Tensor  # applied to tokens
    cross_wk: Tensor  # applied to features
    cross_wv: Tensor
    cross_wm: Tensor
    cross_ln_gain: Tensor
    cross_ln_bias: Tensor
    head_count: int

    def __post_init__(self):
        c = self.self_wq.shape[0]
        if c % self.head_count != 0:
            raise ConfigurationError(
                f"head count {self.head_count} must divide channels {c}"
            )


@dataclass
class HeadParams:
    weight: Tensor  # (L*C) x d
    bias: Tensor | None = None


@dataclass
class ModelParams:
    """Every learnable tensor of the model, addressable by name."""

    config: ModelConfig
    lfsa: LfsaParams | None
    tokenizer: TokenizerParams
    blocks: list[RefinementBlockParams]
    head: HeadParams
    classifier: Tensor | None = None  # ArcFace class rows, num_classes x d

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.lfsa is not None:
            out += [
                ("lfsa.wq", self.lfsa.wq),
                ("lfsa.wk", self.lfsa.wk),
                ("lfsa.wv", self.lfsa.wv),
                ("lfsa.out_proj", self.lfsa.out_proj),
            ]
        out.append(("tokenizer.weight", self.tokenizer.weight))
        if self.tokenizer.learned_tokens is not None:
            out.append(("tokenizer.learned_tokens", self.tokenizer.learned_tokens))
        for i, blk in enumerate(self.blocks):
            for name in (
                "self_wq", "self_wk", "self_wv", "self_wm",
                "self_ln_gain", "self_ln_bias",
                "cross_wq", "cross_wk", "cross_wv", "cross_wm",
                "cross_ln_gain", "cross_ln_bias",
            ):
                out.append((f"block{i}.{name}", getattr(blk, name)))
        out.append(("head.weight", self.head.weight))
        if self.head.bias is not None:
            out.append(("head.bias", self.head.bias))
        if self.classifier is not None:
            out.append(("classifier.weight", self.classifier))
        return out

    def zero_grads(self):
        for _, t in self.named_tensors():
            t.zero_grad()


def init_block(channels: int, head_count: int, rng: np.random.Generator) -> RefinementBlockParams:
    std = 1.0 / math.sqrt(channels)

    def mat():
        return Tensor(rng.normal(0.0, std, (channels, channels)), requires_grad=True)

    return RefinementBlockParams(
        self_wq=mat(), self_wk=mat(), self_wv=mat(), self_wm=mat(),
        self_ln_gain=Tensor(np.ones(channels), requires_grad=True),
        self_ln_bias=Tensor(np.zeros(channels), requires_grad=True),
        cross_wq=mat(), cross_wk=mat(), cross_wv=mat(), cross_wm=mat(),
        cross_ln_gain=Tensor(np.ones(channels), requires_grad=True),
        cross_ln_bias=Tensor(np.zeros(channels), requires_grad=True),
        head_count=head_count,
    )


def init_model(config: ModelConfig, num_classes: int | None, seed: int) -> ModelParams:
    """Build a model with seeded Gaussian initialization.

    Projections use std 1/sqrt(C), the head uses std 1/sqrt(L*C), the
    LFSA output projection and head bias start at zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    c, L, d = config.channels, config.token_count, config.descriptor_dim
    lfsa = init_lfsa(c, rng) if config.use_lfsa else None
    tokenizer = init_tokenizer(L, c, rng, config.tokenizer_mode)
    blocks = [init_block(c, config.head_count, rng) for _ in range(config.block_count)]
    head = HeadParams(
        weight=Tensor(rng.normal(0.0, 1.0 / math.sqrt(L * c), (L * c, d)), requires_grad=True),
        bias=Tensor(np.zeros(d), requires_grad=True) if config.use_head_bias else None,
    )
    classifier = None
    if num_classes is not None:
        classifier = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(d), (num_classes, d)), requires_grad=True
        )
    return ModelParams(
        config=config, lfsa=lfsa, tokenizer=tokenizer,
        blocks=blocks, head=head, classifier=classifier,
    )


def _attention_scale(channels: int, head_count: int, by_head_dim: bool) -> float:
    dim = channels // head_count if by_head_dim else channels
    return 1.0 / math.sqrt(dim)


def _multi_head(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    fuse: Tensor,
    head_count: int,
    scale: float,
    dropout_p: float,
    rng,
    train_mode: bool,
) -> tuple[Tensor, list[Tensor]]:
    """Shared MHA core: per-head softmax(q kᵀ · scale) v, dropout, concat, fuse."""
    c = q.shape[1]
    dh = c // head_count
    outputs = []
    scores = []
    for h in range(head_count):
        qh = T.slice_axis(q, 1, h * dh, (h + 1) * dh)
        kh = T.slice_axis(k, 1, h * dh, (h + 1) * dh)
        vh = T.slice_axis(v, 1, h * dh, (h + 1) * dh)
        s = T.softmax_rows(T.scale(T.matmul(qh, T.transpose(kh)), scale))
        scores.append(s)
        outputs.append(T.dropout(T.matmul(s, vh), dropout_p, rng, train_mode))
    fused = T.matmul(outputs[0] if head_count == 1 else T.concat(outputs, axis=1), fuse)
    return fused, scores


def mha_self(
    tokens: TokenSet,
    params: RefinementBlockParams,
    train_mode: bool = False,
    dropout_p: float = 0.1,
    rng: np.random.Generator | None = None,
    scale_by_head_dim: bool = False,
) -> TokenSet:
    """Relationship modeling: residual multi-head self-attention over tokens."""
    tok = tokens.values
    c = tok.shape[1]
    if params.self_wq.shape != (c, c):
        raise ShapeMismatchError(
            f"self-attention projections are {params.self_wq.shape}, tokens have {c} channels"
        )
    q = T.matmul(tok, params.self_wq)
    k = T.matmul(tok, params.self_wk)
    v = T.matmul(tok, params.self_wv)
    scale = _attention_scale(c, params.head_count, scale_by_head_dim)
    fused, _ = _multi_head(
        q, k, v, params.self_wm, params.head_count, scale, dropout_p, rng, train_mode
    )
    branch = T.layer_norm_rows(fused, params.self_ln_gain, params.self_ln_bias)
    return TokenSet(T.add(tok, branch))


def mha_cross(
    tokens: TokenSet,
    fmap: FeatureMap,
    params: RefinementBlockParams,
    train_mode: bool = False,
    dropout_p: float = 0.1,
    rng: np.random.Generator | None = None,
    scale_by_head_dim: bool = False,
) -> tuple[TokenSet, AttentionMaps]:
    """Token enhancement: cross-attention from tokens to flattened features.

    Returns the updated tokens and the head-averaged L x H x W attention,
    the map that localizes each token in the image.
    """
    tok = tokens.values
    c, h, w = fmap.values.shape
    if tok.shape[1] != c:
        raise ShapeMismatchError(
            f"tokens have {tok.shape[1]} channels, feature map has {c}"
        )
    seq = fmap.as_sequence()  # HW x C
    q = T.matmul(tok, params.cross_wq)
    k = T.matmul(seq, params.cross_wk)
    v = T.matmul(seq, params.cross_wv)
    scale = _attention_scale(c, params.head_count, scale_by_head_dim)
    fused, scores = _multi_head(
        q, k, v, params.cross_wm, params.head_count, scale, dropout_p, rng, train_mode
    )
    branch = T.layer_norm_rows(fused, params.cross_ln_gain, params.cross_ln_bias)
    updated = TokenSet(T.add(tok, branch))

    mean_score = scores[0]
    for s in scores[1:]:
        mean_score = T.add(mean_score, s)
    mean_score = T.scale(mean_score, 1.0 / len(scores))
    maps = AttentionMaps(T.reshape(mean_score, (tok.shape[0], h, w)))
    return updated, maps


def refine_stack(
    tokens: TokenSet,
    fmap: FeatureMap,
    blocks: list[RefinementBlockParams],
    train_mode: bool = False,
    dropout_p: float = 0.1,
    rng: np.random.Generator | None = None,
    scale_by_head_dim: bool = False,
    maps_out: list | None = None,
) -> TokenSet:
    """Apply refinement blocks sequentially: self-attention then cross-attention.

    When ``maps_out`` is given, the cross-attention maps of every block are
    appended to it (the last entry is the one worth visualizing).
    """
    if not blocks:
        raise ConfigurationError("refine_stack requires at least one block")
    current = tokens
    for blk in blocks:
        current = mha_self(current, blk, train_mode, dropout_p, rng, scale_by_head_dim)
        current, maps = mha_cross(
            current, fmap, blk, train_mode, dropout_p, rng, scale_by_head_dim
        )
        if maps_out is not None:
            maps_out.append(maps)
    return current


def head_project(tokens: TokenSet, head: HeadParams) -> Tensor:
    """Concatenate tokens in index order and project to d dimensions.

    The result is not normalized here: the loss normalizes it inside the
    objective and inference normalizes per scale.
    """
    L, c = tokens.values.shape
    if head.weight.shape[0] != L * c:
        raise ShapeMismatchError(
            f"head weight is {head.weight.shape}, tokens concatenate to {L * c}"
        )
    flat = T.reshape(tokens.values, (1, L * c))
    projected = T.reshape(T.matmul(flat, head.weight), (head.weight.shape[1],))
    if head.bias is not None:
        projected = T.add(projected, head.bias)
    return projected


def forward_descriptor(
    fmap: FeatureMap,
    params: ModelParams,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    maps_out: list | None = None,
) -> Tensor:
    """Full single-scale forward pass to the unnormalized global descriptor."""
    cfg = params.config
    current = lfsa_forward(fmap, params.lfsa) if params.lfsa is not None else fmap
    if cfg.tokenizer_mode is TokenizerMode.LEARNED:
        tok_maps, tokens = tokenize_learned(current, params.tokenizer)
    else:
        tok_maps, tokens = tokenize(current, params.tokenizer)
    if maps_out is not None:
        maps_out.append(tok_maps)
    if params.blocks:
        tokens = refine_stack(
            tokens, current, params.blocks, train_mode,
            cfg.dropout_p, rng, cfg.scale_by_head_dim,
            maps_out=maps_out,
        )
    return head_project(tokens, params.head)


def multiscale_descriptor(maps: list[FeatureMap], params: ModelParams) -> np.ndarray:
    """Inference descriptor from one feature map per scale.

    Each scale runs the full forward in eval mode and is L2-normalized
    independently; the per-scale unit vectors are averaged and the
    average is normalized again.
    """
    if not maps:
        raise ConfigurationError("multiscale_descriptor requires at least one scale")
    acc = np.zeros(params.config.descriptor_dim)
    for fmap in maps:
        desc = forward_descriptor(fmap, params, train_mode=False)
        acc += T.l2_normalize(desc).data
    acc /= len(maps)
    norm = np.linalg.norm(acc)
    return acc / norm if norm > 1e-12 else acc
