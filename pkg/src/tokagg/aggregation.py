"""Local-feature contextualization and spatial-attention tokenization.

A feature map is a C x H x W grid of local descriptors. The tokenizer
scores every spatial position against L projection rows, softmaxes over
the rows, and aggregates positions into L tokens, each a convex
combination of local features. A non-local self-attention pass (LFSA)
contextualizes the features first; its output projection starts at zero
so the pass is the identity at initialization.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeMismatchError
from .tensor import Tensor

TOKEN_MASS_FLOOR = 1e-20


class TokenizerMode(enum.Enum):
    ATTEN_BASED = "atten"
    LEARNED = "learned"


@dataclass
class FeatureMap:
    """Dense grid of local features, laid out [C][H][W]."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeMismatchError(f"feature map must be 3-D, got shape {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def as_sequence(self) -> Tensor:
        """Flatten to an (H*W) x C sequence of local features (differentiable)."""
        c, h, w = self.values.shape
        return T.transpose(T.reshape(self.values, (c, h * w)))

    @staticmethod
    def from_array(values: np.ndarray) -> "FeatureMap":
        return FeatureMap(Tensor(values))


@dataclass
class AttentionMaps:
    """Per-token spatial attention, shape L x H x W.

    At every location the L values form a softmax, so they are in [0, 1]
    and sum to 1 across tokens.
    """

    values: Tensor

    @property
    def token_count(self) -> int:
        return self.values.shape[0]


@dataclass
class TokenSet:
    """L aggregated C-dimensional visual tokens."""

    values: Tensor

    @property
    def token_count(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class TokenizerParams:
    weight: Tensor  # L x C projection rows, one per token
    mode: TokenizerMode = TokenizerMode.ATTEN_BASED
    learned_tokens: Tensor | None = None

    @property
    def token_count(self) -> int:
        return self.weight.shape[0]


@dataclass
class LfsaParams:
    """Single-head non-local attention over spatial positions.

    The output projection is zero-initialized so the residual pass is the
    identity until training moves it.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    out_proj: Tensor


def init_lfsa(channels: int, rng: np.random.Generator) -> LfsaParams:
    std = 1.0 / math.sqrt(channels)
    return LfsaParams(
        wq=Tensor(rng.normal(0.0, std, (channels, channels)), requires_grad=True),
        wk=Tensor(rng.normal(0.0, std, (channels, channels)), requires_grad=True),
        wv=Tensor(rng.normal(0.0, std, (channels, channels)), requires_grad=True),
        out_proj=Tensor(np.zeros((channels, channels)), requires_grad=True),
    )


def init_tokenizer(
    token_count: int,
    channels: int,
    rng: np.random.Generator,
    mode: TokenizerMode = TokenizerMode.ATTEN_BASED,
) -> TokenizerParams:
    if token_count < 1:
        raise ConfigurationError(f"token count must be >= 1, got {token_count}")
    std = 1.0 / math.sqrt(channels)
    weight = Tensor(rng.normal(0.0, std, (token_count, channels)), requires_grad=True)
    learned = None
    if mode is TokenizerMode.LEARNED:
        learned = Tensor(rng.normal(0.0, std, (token_count, channels)), requires_grad=True)
    return TokenizerParams(weight=weight, mode=mode, learned_tokens=learned)


def lfsa_forward(fmap: FeatureMap, params: LfsaParams) -> FeatureMap:
    """Contextualize local features with residual non-local attention."""
    c, h, w = fmap.values.shape
    if params.wq.shape != (c, c):
        raise ShapeMismatchError(
            f"LFSA projections are {params.wq.shape}, feature map has {c} channels"
        )
    seq = fmap.as_sequence()  # HW x C
    q = T.matmul(seq, params.wq)
    k = T.matmul(seq, params.wk)
    v = T.matmul(seq, params.wv)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(c))
    attn = T.softmax_rows(scores)  # HW x HW
    context = T.matmul(T.matmul(attn, v), params.out_proj)
    out_seq = T.add(seq, context)
    return FeatureMap(T.reshape(T.transpose(out_seq), (c, h, w)))


def tokenize(fmap: FeatureMap, params: TokenizerParams) -> tuple[AttentionMaps, TokenSet]:
    """Spatial-attention tokenization.

    Each location's logit for token i is the dot product of projection row
    i with the local feature; attention is the softmax over tokens at that
    location, and token i is the attention-weighted average of all local
    features (weights renormalized by the token's total mass).
    """
    if params.mode is not TokenizerMode.ATTEN_BASED:
        raise ConfigurationError(f"tokenize requires AttenBased mode, got {params.mode}")
    c, h, w = fmap.values.shape
    L = params.token_count
    if params.weight.shape[1] != c:
        raise ShapeMismatchError(
            f"tokenizer weight is {params.weight.shape}, feature map has {c} channels"
        )
    seq = fmap.as_sequence()  # HW x C
    logits = T.matmul(seq, T.transpose(params.weight))  # HW x L
    attn = T.softmax_rows(logits)  # HW x L, rows sum to 1
    mass = T.sum_axis(attn, axis=0)  # L
    if float(mass.data.min()) < TOKEN_MASS_FLOOR:
        # A full softmax column cannot vanish at every position.
        raise AssertionError("token attention mass underflowed the softmax floor")
    weighted = T.matmul(T.transpose(attn), seq)  # L x C
    tokens = T.div(weighted, T.reshape(mass, (L, 1)))
    maps = T.reshape(T.transpose(attn), (L, h, w))
    return AttentionMaps(maps), TokenSet(tokens)


def tokenize_learned(fmap: FeatureMap, params: TokenizerParams) -> tuple[AttentionMaps, TokenSet]:
    """Tokenizer variant whose tokens are trained parameters.

    The returned tokens do not depend on the input image; the attention
    maps (token-vs-feature softmax) are produced for diagnostics only.
    """
    if params.mode is not TokenizerMode.LEARNED or params.learned_tokens is None:
        raise ConfigurationError("tokenize_learned requires Learned mode with learned tokens")
    c, h, w = fmap.values.shape
    L = params.learned_tokens.shape[0]
    seq = fmap.as_sequence()
    logits = T.matmul(seq, T.transpose(params.learned_tokens))
    attn = T.softmax_rows(logits)
    maps = T.reshape(T.transpose(attn), (L, h, w))
    return AttentionMaps(maps), TokenSet(params.learned_tokens)


def tokenize_gmm_oracle(
    fmap: FeatureMap, params: TokenizerParams
) -> tuple[AttentionMaps, TokenSet, np.ndarray]:
    """Mixture-model route to the same attention and tokens.

    Treats each projection row as a component mean with unit variance and
    a norm-derived prior: the posterior of assigning a local feature to
    component i is softmax over i of (||w_i||^2/2 - ||x - w_i||^2/2),
    computed in the log domain so no exponent overflows. Tokens are the
    posterior-weighted mean update. Numerically independent of
    ``tokenize``, which never forms distances.
    """
    if params.mode is not TokenizerMode.ATTEN_BASED:
        raise ConfigurationError(f"gmm oracle requires AttenBased mode, got {params.mode}")
    c, h, w = fmap.values.shape
    feats = fmap.values.data.reshape(c, h * w).T  # HW x C
    weight = params.weight.data  # L x C

    w_sq = (weight * weight).sum(axis=1)  # L
    diff = feats[:, None, :] - weight[None, :, :]  # HW x L x C
    dist_sq = (diff * diff).sum(axis=2)  # HW x L
    log_post = 0.5 * w_sq[None, :] - 0.5 * dist_sq
    log_post -= log_post.max(axis=1, keepdims=True)
    post = np.exp(log_post)
    post /= post.sum(axis=1, keepdims=True)  # HW x L

    mass = post.sum(axis=0)  # L
    tokens = (post.T @ feats) / mass[:, None]  # mixture mean update

    priors = np.exp(0.5 * (w_sq - w_sq.max()))
    priors /= priors.sum()

    maps = AttentionMaps(Tensor(post.T.reshape(params.token_count, h, w)))
    return maps, TokenSet(Tensor(tokens)), priors


def attention_entropy(maps: AttentionMaps) -> np.ndarray:
    """Shannon entropy of each token's spatially normalized attention map."""
    values = maps.values.data
    L = values.shape[0]
    flat = values.reshape(L, -1)
    mass = flat.sum(axis=1, keepdims=True)
    p = flat / mass
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)
