"""Angular-margin classification training and desk-scale synthetic data.

The objective normalizes both the descriptor and the classifier rows,
adds an angular margin to the ground-truth cosine, scales by gamma, and
takes softmax cross-entropy. Optimization is SGD with momentum, weight
decay, and a linearly decaying learning rate.

The synthetic corpus stands in for large-scale training data: each image
is a noise feature map with a handful of spatial patches carrying a
class prototype, so class evidence is regional and rewards attention
that localizes it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aggregation import FeatureMap
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    EvaluationError,
    ShapeMismatchError,
)
from .refinement import ModelConfig, ModelParams, forward_descriptor, init_model
from .retrieval import GroundTruth, QueryGroundTruth
from .tensor import Tensor


@dataclass
class ArcFaceParams:
    """Classifier rows plus margin/scale; rows are unit-normalized at each use."""

    weight: Tensor  # num_classes x d
    margin: float = 0.2
    scale: float = 32.0

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


def adjusted_cosine(s, c: int, m: float):
    """Cosine adjusted by an additive angular margin on the true class.

    For c=0 this is the identity in s; for c=1 it is cos(acos(s) + m)
    with s clamped away from +/-1 so the gradient stays bounded.
    Accepts a float or a scalar Tensor.
    """
    if c not in (0, 1):
        raise ConfigurationError(f"class indicator must be 0 or 1, got {c}")
    if isinstance(s, Tensor):
        if c == 0:
            return s
        return T.cos(T.add_const(T.acos_clamped(s), m))
    if c == 0:
        return float(s)
    clamped = min(max(float(s), -1.0 + T.ACOS_CLAMP), 1.0 - T.ACOS_CLAMP)
    return math.cos(math.acos(clamped) + m)


def arcface_loss(descriptor: Tensor, label: int, params: ArcFaceParams) -> Tensor:
    """Margin softmax loss on the normalized descriptor.

    Gradients flow into both the descriptor and the classifier rows
    (through their normalizations).
    """
    if float(np.linalg.norm(descriptor.data)) <= T.L2_NORM_EPS:
        raise DegenerateInputError("descriptor is the zero vector")
    n = params.num_classes
    if not 0 <= label < n:
        raise ConfigurationError(f"label {label} outside {n} classes")
    d = descriptor.shape[0]
    normalized = T.l2_normalize(descriptor)
    rows = T.l2_normalize_rows(params.weight)
    cosines = T.reshape(T.matmul(rows, T.reshape(normalized, (d, 1))), (n,))
    target = T.pick(cosines, label)
    adjusted = adjusted_cosine(target, 1, params.margin)
    onehot = np.zeros(n)
    onehot[label] = 1.0
    logits = T.scale(T.add(cosines, T.mul_const(T.sub(adjusted, target), onehot)), params.scale)
    return T.cross_entropy_with_index(logits, label)


@dataclass
class OptimizerState:
    """SGD with momentum, weight decay, and linear learning-rate decay to zero."""

    total_steps: int
    base_lr: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9
    step: int = 0
    buffers: dict = field(default_factory=dict)

    def lr(self, step: int | None = None) -> float:
        step = self.step if step is None else step
        return self.base_lr * max(0.0, 1.0 - step / self.total_steps)


def sgd_step(params: ModelParams, grads: dict, state: OptimizerState) -> None:
    """One in-place update: v <- momentum*v + (g + wd*theta); theta <- theta - lr*v."""
    lr = state.lr()
    for name, tensor in params.named_tensors():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        if grad.shape != tensor.data.shape:
            raise ShapeMismatchError(
                f"gradient shape {grad.shape} does not match parameter {name} {tensor.data.shape}"
            )
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(tensor.data)
        buf = state.momentum * buf + (grad + state.weight_decay * tensor.data)
        state.buffers[name] = buf
        tensor.data -= lr * buf
    state.step += 1


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SyntheticDatasetSpec:
    """Pure function of (fields, seed): identical spec yields identical corpora.

    Every class owns a few latent prototype vectors (its visual
    patterns); each image scatters patches cycling through those
    patterns over a noise background, so class evidence is regional.
    Hard database images carry fewer patches than easy ones; junk images
    are same-class items marked for exclusion from scoring.
    """

    num_classes: int = 8
    train_per_class: int = 25
    db_easy_per_class: int = 3
    db_hard_per_class: int = 1
    db_junk_per_class: int = 1
    queries_per_class: int = 2
    channels: int = 16
    height: int = 12
    width: int = 12
    patterns_per_class: int = 3
    patch_count: int = 8
    noise_std: float = 1.0
    jitter_std: float = 0.1
    prototype_scale: float = 1.5
    seed: int = 0

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "SyntheticDatasetSpec":
        from dataclasses import fields as dc_fields

        known = {f.name for f in dc_fields(SyntheticDatasetSpec)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown dataset spec keys: {sorted(unknown)}")
        return SyntheticDatasetSpec(**data)


@dataclass
class LabeledMap:
    item_id: str
    label: int
    values: np.ndarray  # C x H x W


@dataclass
class SyntheticCorpus:
    train: list[LabeledMap]
    database: list[LabeledMap]
    queries: list[LabeledMap]
    ground_truth: GroundTruth
    prototypes: np.ndarray


_SPLIT_STREAMS = {"train": 0, "easy": 1, "hard": 2, "junk": 3, "query": 4}


def _render_image(
    spec: SyntheticDatasetSpec,
    split: str,
    cls: int,
    index: int,
    prototypes: np.ndarray,
    patch_count: int,
    noise_std: float,
) -> np.ndarray:
    # Each image gets its own child stream, so one split's parameters
    # never perturb another split's pixels.
    rng = np.random.default_rng((spec.seed, _SPLIT_STREAMS[split], cls, index))
    c, h, w = spec.channels, spec.height, spec.width
    values = rng.normal(0.0, noise_std, (c, h, w))
    positions = rng.choice(h * w, size=min(patch_count, h * w), replace=False)
    for slot, pos in enumerate(positions):
        pattern = prototypes[slot % len(prototypes)]
        jitter = rng.normal(0.0, spec.jitter_std, c)
        values[:, pos // w, pos % w] = pattern + jitter
    return values


def synth_generate(spec: SyntheticDatasetSpec) -> SyntheticCorpus:
    """Generate the labeled corpus and its query/database/ground-truth split."""
    if spec.num_classes < 1:
        raise ConfigurationError("at least one class required")
    proto_rng = np.random.default_rng((spec.seed, 99))
    prototypes = proto_rng.normal(
        0.0, spec.prototype_scale,
        (spec.num_classes, spec.patterns_per_class, spec.channels))

    train: list[LabeledMap] = []
    database: list[LabeledMap] = []
    queries: list[LabeledMap] = []
    per_query_gt: list[QueryGroundTruth] = []
    easy_ids: dict[int, list[str]] = {}
    hard_ids: dict[int, list[str]] = {}
    junk_ids: dict[int, list[str]] = {}

    hard_patches = max(1, spec.patch_count // 2)
    junk_patches = max(1, spec.patch_count // 3)
    for cls in range(spec.num_classes):
        protos = prototypes[cls]
        for i in range(spec.train_per_class):
            item = f"train_{cls:02d}_{i:03d}"
            train.append(LabeledMap(item, cls, _render_image(
                spec, "train", cls, i, protos, spec.patch_count, spec.noise_std)))
        easy_ids[cls], hard_ids[cls], junk_ids[cls] = [], [], []
        for i in range(spec.db_easy_per_class):
            item = f"db_{cls:02d}_e{i:02d}"
            easy_ids[cls].append(item)
            database.append(LabeledMap(item, cls, _render_image(
                spec, "easy", cls, i, protos, spec.patch_count, spec.noise_std)))
        for i in range(spec.db_hard_per_class):
            item = f"db_{cls:02d}_h{i:02d}"
            hard_ids[cls].append(item)
            database.append(LabeledMap(item, cls, _render_image(
                spec, "hard", cls, i, protos, hard_patches, spec.noise_std)))
        for i in range(spec.db_junk_per_class):
            item = f"db_{cls:02d}_j{i:02d}"
            junk_ids[cls].append(item)
            database.append(LabeledMap(item, cls, _render_image(
                spec, "junk", cls, i, protos, junk_patches, spec.noise_std)))
        for i in range(spec.queries_per_class):
            item = f"q_{cls:02d}_{i:02d}"
            queries.append(LabeledMap(item, cls, _render_image(
                spec, "query", cls, i, protos, spec.patch_count, spec.noise_std)))
            per_query_gt.append(QueryGroundTruth(
                query_id=item,
                easy=set(easy_ids[cls]),
                hard=set(hard_ids[cls]),
                junk=set(junk_ids[cls]),
            ))

    return SyntheticCorpus(
        train=train,
        database=database,
        queries=queries,
        ground_truth=GroundTruth(per_query_gt),
        prototypes=prototypes,
    )


# ---------------------------------------------------------------------------
# gradient checking and the training loop
# ---------------------------------------------------------------------------

def grad_check_full_model(
    config: ModelConfig,
    seed: int,
    num_classes: int = 5,
    height: int = 5,
    width: int = 5,
    coords_per_tensor: int = 200,
    h: float = 1e-6,
) -> dict[str, float]:
    """Check the analytic gradient of the full loss against central differences.

    Builds a random input and label, runs the forward loss in eval mode,
    backprops once, then finite-differences a seeded subsample of at most
    ``coords_per_tensor`` coordinates per parameter tensor. Returns the
    max relative error per tensor name.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = init_model(config, num_classes, seed)
    features = rng.normal(0.0, 1.0, (config.channels, height, width))
    label = int(rng.integers(num_classes))
    arcface = ArcFaceParams(weight=params.classifier)

    def loss_value() -> Tensor:
        desc = forward_descriptor(FeatureMap.from_array(features), params, train_mode=False)
        return arcface_loss(desc, label, arcface)

    out = loss_value()
    if not np.isfinite(out.data).all():
        raise EvaluationError("loss is not finite")
    params.zero_grads()
    out.backward()

    report: dict[str, float] = {}
    for name, tensor in params.named_tensors():
        analytic = (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data))
        analytic = analytic.reshape(-1)
        size = tensor.data.size
        if size > coords_per_tensor:
            indices = np.sort(rng.choice(size, size=coords_per_tensor, replace=False)).tolist()
        else:
            indices = list(range(size))

        original = tensor.data

        def f(arr: np.ndarray) -> float:
            tensor.data = arr
            try:
                return loss_value().item()
            finally:
                tensor.data = original

        numeric = T.finite_difference_grad(f, original, h=h, indices=indices)
        report[name] = float(T.relative_error(analytic[indices], numeric).max())
    return report


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list[float]
    step_losses: list[float]
    val_losses: list[float]


def train(
    corpus: list[LabeledMap],
    config: ModelConfig,
    num_classes: int,
    max_steps: int,
    batch_size: int = 16,
    base_lr: float = 0.01,
    weight_decay: float = 1e-4,
    momentum: float = 0.9,
    margin: float = 0.2,
    loss_scale: float = 32.0,
    clip_norm: float | None = 10.0,
    seed: int = 0,
    val_fraction: float = 0.2,
    log=None,
) -> TrainResult:
    """Mini-batch SGD over a seeded shuffle of the corpus.

    Deterministic given the seed; aborts with the step index if the loss
    goes non-finite. Gradients are clipped to a global norm of
    ``clip_norm`` (attention logits otherwise blow up at desk batch
    sizes). The corpus is split 80/20 into train/validation and
    per-epoch mean losses for both are recorded.
    """
    for item in corpus:
        if not 0 <= item.label < num_classes:
            raise ConfigurationError(f"label {item.label} outside {num_classes} classes")
    seeds = np.random.SeedSequence(seed).spawn(3)
    params = init_model(config, num_classes, seed)
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])
    arcface = ArcFaceParams(weight=params.classifier, margin=margin, scale=loss_scale)
    state = OptimizerState(
        total_steps=max_steps, base_lr=base_lr,
        weight_decay=weight_decay, momentum=momentum,
    )

    order = shuffle_rng.permutation(len(corpus))
    val_count = int(len(corpus) * val_fraction)
    val_items = [corpus[i] for i in order[:val_count]]
    train_items = [corpus[i] for i in order[val_count:]]
    if not train_items:
        raise ConfigurationError("corpus too small for the validation split")

    step_losses: list[float] = []
    epoch_losses: list[float] = []
    val_losses: list[float] = []
    step = 0
    while step < max_steps:
        epoch_order = shuffle_rng.permutation(len(train_items))
        epoch_sum, epoch_count = 0.0, 0
        for start in range(0, len(epoch_order), batch_size):
            if step >= max_steps:
                break
            batch = epoch_order[start:start + batch_size]
            params.zero_grads()
            batch_loss = 0.0
            for idx in batch:  # fixed index order keeps gradient reduction deterministic
                item = train_items[idx]
                desc = forward_descriptor(
                    FeatureMap.from_array(item.values), params,
                    train_mode=True, rng=dropout_rng,
                )
                loss = arcface_loss(desc, item.label, arcface)
                value = loss.item()
                if not math.isfinite(value):
                    raise EvaluationError(f"non-finite loss at step {step}")
                batch_loss += value
                loss.backward()
            grads = {
                name: t.grad / len(batch)
                for name, t in params.named_tensors()
                if t.grad is not None
            }
            if clip_norm is not None:
                total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if total > clip_norm:
                    factor = clip_norm / total
                    grads = {name: g * factor for name, g in grads.items()}
            sgd_step(params, grads, state)
            mean_loss = batch_loss / len(batch)
            step_losses.append(mean_loss)
            epoch_sum += batch_loss
            epoch_count += len(batch)
            step += 1
        if epoch_count:
            epoch_losses.append(epoch_sum / epoch_count)
            val_losses.append(_mean_loss(val_items, params, arcface))
            if log is not None:
                log(
                    f"epoch {len(epoch_losses)}: train loss {epoch_losses[-1]:.4f}"
                    f" val loss {val_losses[-1]:.4f} (step {step})"
                )
    return TrainResult(params, epoch_losses, step_losses, val_losses)


def _mean_loss(items: list[LabeledMap], params: ModelParams, arcface: ArcFaceParams) -> float:
    if not items:
        return float("nan")
    total = 0.0
    for item in items:
        desc = forward_descriptor(FeatureMap.from_array(item.values), params, train_mode=False)
        total += arcface_loss(desc, item.label, arcface).item()
    return total / len(items)
