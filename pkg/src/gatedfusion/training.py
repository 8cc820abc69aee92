"""Linear classifier heads over fused features, and their training loop.

The head is a single affine layer followed by softmax cross-entropy; the
point of the artifact is the fusion mechanism, so the head stays as simple
as possible.  Four fusion kinds are supported:

* ``clip-only`` -- head over the clip feature alone.
* ``concat``    -- head over the raw concatenation of clip and object
                   features (the unstable baseline).
* ``gfa-a``     -- head over the gated concatenation.
* ``gfa-b``     -- head over the gated clip feature.

Training is SGD with momentum, mini-batch gradients averaged over the
batch, and everything (init, shuffling) drawn from one seeded generator,
so a run is bitwise reproducible from its config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bank import AggregationConfig, FeatureBank, aggregate_object_feature
from .errors import ShapeError, ValidationError
from .gfa import (GfaCache, GfaParams, ScaleMode, gfa_backward, gfa_forward,
                  init_gfa_params)
from .tensor import affine, affine_vjp, concat, split

__all__ = [
    "FUSION_KINDS",
    "Head",
    "Model",
    "ModelSpec",
    "TrainConfig",
    "Checkpoint",
    "softmax",
    "cross_entropy",
    "forward_model",
    "model_backward",
    "loss_and_grads",
    "sgd_momentum_step",
    "init_model",
    "param_groups",
    "with_params",
    "train",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]

FUSION_KINDS = ("clip-only", "concat", "gfa-a", "gfa-b")

_PROB_FLOOR = 1e-12


@dataclass
class Head:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        if self.W.ndim != 2 or self.b.ndim != 1:
            raise ShapeError("head: W must be 2-D and b 1-D")
        if self.W.shape[0] != self.b.shape[0]:
            raise ShapeError(
                f"head: W has {self.W.shape[0]} rows but b has dim {self.b.shape[0]}")


@dataclass
class Model:
    fusion_kind: str
    head: Head
    gfa: GfaParams | None = None

    def __post_init__(self) -> None:
        if self.fusion_kind not in FUSION_KINDS:
            raise ValidationError(
                f"fusion kind {self.fusion_kind!r} not one of {FUSION_KINDS}")
        needs_gfa = self.fusion_kind in ("gfa-a", "gfa-b")
        if needs_gfa and self.gfa is None:
            raise ValidationError(f"fusion kind {self.fusion_kind!r} requires gfa params")
        if not needs_gfa and self.gfa is not None:
            raise ValidationError(f"fusion kind {self.fusion_kind!r} must not carry gfa params")
        if self.gfa is not None:
            expected = "a" if self.fusion_kind == "gfa-a" else "b"
            if self.gfa.variant != expected:
                raise ValidationError(
                    f"fusion kind {self.fusion_kind!r} needs variant {expected!r} params, "
                    f"got {self.gfa.variant!r}")


@dataclass(frozen=True)
class ModelSpec:
    """What to build before training: fusion kind, scaling, aggregation."""

    fusion: str = "gfa-b"
    scale: ScaleMode = field(default_factory=ScaleMode.none)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)

    def __post_init__(self) -> None:
        if self.fusion not in FUSION_KINDS:
            raise ValidationError(f"fusion kind {self.fusion!r} not one of {FUSION_KINDS}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch size must be >= 1, got {self.batch_size}")


def softmax(scores: np.ndarray) -> np.ndarray:
    """Stable softmax: positive entries summing to one."""
    shifted = scores - np.max(scores)
    e = np.exp(shifted)
    return e / np.sum(e)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-log(probs[label]), floored so certainty-adjacent values stay finite."""
    if not 0 <= label < probs.shape[0]:
        raise ValidationError(
            f"label {label} out of range for {probs.shape[0]} classes")
    return float(-np.log(max(float(probs[label]), _PROB_FLOOR)))


@dataclass
class ModelCache:
    v: np.ndarray
    o: np.ndarray
    feature: np.ndarray
    gfa_cache: GfaCache | None = None


def forward_model(model: Model, v: np.ndarray,
                  o_agg: np.ndarray) -> tuple[np.ndarray, ModelCache]:
    """Class scores (pre-softmax) for one segment's features."""
    kind = model.fusion_kind
    gfa_cache = None
    if kind == "clip-only":
        feature = v
    elif kind == "concat":
        feature = concat(v, o_agg)
    else:
        feature, gfa_cache = gfa_forward(v, o_agg, model.gfa)
    scores = affine(feature, model.head.W, model.head.b)
    return scores, ModelCache(v=v, o=o_agg, feature=feature, gfa_cache=gfa_cache)


def model_backward(model: Model, cache: ModelCache,
                   dscores: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every parameter group plus both inputs, keyed by name."""
    dfeat, dW_head, db_head = affine_vjp(cache.feature, model.head.W,
                                         model.head.b, dscores)
    grads = {"head.W": dW_head, "head.b": db_head}
    kind = model.fusion_kind
    if kind == "clip-only":
        grads["v"] = dfeat
        grads["o"] = np.zeros_like(cache.o)
    elif kind == "concat":
        grads["v"], grads["o"] = split(dfeat, cache.v.shape[0])
    else:
        dv, do, dW, db = gfa_backward(cache.gfa_cache, model.gfa, dfeat)
        grads["v"] = dv
        grads["o"] = do
        grads["gfa.W"] = dW
        grads["gfa.b"] = db
    return grads


def loss_and_grads(model: Model, v: np.ndarray, o_agg: np.ndarray,
                   label: int) -> tuple[float, dict[str, np.ndarray]]:
    scores, cache = forward_model(model, v, o_agg)
    probs = softmax(scores)
    loss = cross_entropy(probs, label)
    dscores = probs.copy()
    dscores[label] -= 1.0
    return loss, model_backward(model, cache, dscores)


def sgd_momentum_step(params: np.ndarray, grads: np.ndarray, velocity: np.ndarray,
                      lr: float, momentum: float) -> tuple[np.ndarray, np.ndarray]:
    """velocity' = momentum * velocity + grads; params' = params - lr * velocity'."""
    if params.shape != grads.shape or params.shape != velocity.shape:
        raise ShapeError(
            f"sgd step: shapes disagree, params {params.shape}, grads {grads.shape}, "
            f"velocity {velocity.shape}")
    new_velocity = momentum * velocity + grads
    return params - lr * new_velocity, new_velocity


def _feature_dim(fusion: str, dim_v: int, dim_o: int) -> int:
    return dim_v if fusion in ("clip-only", "gfa-b") else dim_v + dim_o


def init_model(fusion: str, dim_v: int, dim_o: int, classes: int,
               scale: ScaleMode | None = None,
               rng: np.random.Generator | None = None) -> Model:
    """Fresh model; gate params (if any) are drawn before the head so the
    stream of random numbers is fixed per fusion kind."""
    rng = rng if rng is not None else np.random.default_rng()
    if fusion not in FUSION_KINDS:
        raise ValidationError(f"fusion kind {fusion!r} not one of {FUSION_KINDS}")
    gfa = None
    if fusion == "gfa-a":
        gfa = init_gfa_params(dim_v, dim_o, "a", scale=scale, rng=rng)
    elif fusion == "gfa-b":
        gfa = init_gfa_params(dim_v, dim_o, "b", scale=scale, rng=rng)
    feat_dim = _feature_dim(fusion, dim_v, dim_o)
    bound = 1.0 / np.sqrt(feat_dim)
    head = Head(W=rng.uniform(-bound, bound, size=(classes, feat_dim)),
                b=np.zeros(classes))
    return Model(fusion_kind=fusion, head=head, gfa=gfa)


def param_groups(model: Model) -> dict[str, np.ndarray]:
    groups = {"head.W": model.head.W, "head.b": model.head.b}
    if model.gfa is not None:
        groups["gfa.W"] = model.gfa.W
        groups["gfa.b"] = model.gfa.b
    return groups


def with_params(model: Model, groups: dict[str, np.ndarray]) -> Model:
    """Copy of the model with the given parameter arrays swapped in."""
    head = Head(W=groups["head.W"], b=groups["head.b"])
    gfa = None
    if model.gfa is not None:
        gfa = GfaParams(variant=model.gfa.variant, W=groups["gfa.W"],
                        b=groups["gfa.b"], scale=model.gfa.scale)
    return Model(fusion_kind=model.fusion_kind, head=head, gfa=gfa)


def _bank_features(bank: FeatureBank, cfg: AggregationConfig) -> tuple[np.ndarray, np.ndarray]:
    V = np.stack([r.clip_feature for r in bank.records])
    O = np.stack([aggregate_object_feature(r, cfg, bank.dim_o) for r in bank.records])
    return V, O


def _bank_labels(bank: FeatureBank, target: str) -> np.ndarray:
    if target not in ("verb", "noun"):
        raise ValidationError(f"target must be 'verb' or 'noun', got {target!r}")
    labels = []
    for rec in bank.records:
        label = rec.verb_label if target == "verb" else rec.noun_label
        if label is None:
            raise ValidationError(
                f"record {rec.segment_id!r} has no {target} label")
        labels.append(label)
    return np.array(labels, dtype=np.int64)


def _top1_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    # argmax takes the lowest index among ties, matching the pessimistic
    # tie rule of the metrics module at k=1.
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def train(bank: FeatureBank, target: str, spec: ModelSpec, cfg: TrainConfig,
          val_bank: FeatureBank | None = None) -> tuple[Model, list[dict]]:
    """Train one head (and gate, if any) for ``target`` on ``bank``.

    Returns the trained model and a per-epoch history of mean loss, mean
    gradient norm, and validation top-1 when ``val_bank`` is given.
    Deterministic given (bank, spec, cfg).
    """
    if not bank.records:
        raise ValidationError("cannot train on an empty bank")
    labels = _bank_labels(bank, target)
    classes = bank.verb_vocab_size if target == "verb" else bank.noun_vocab_size
    V, O = _bank_features(bank, spec.aggregation)
    val_data = None
    if val_bank is not None:
        if (val_bank.dim_v, val_bank.dim_o) != (bank.dim_v, bank.dim_o):
            raise ValidationError(
                f"validation bank dims ({val_bank.dim_v}, {val_bank.dim_o}) differ from "
                f"training bank ({bank.dim_v}, {bank.dim_o})")
        val_data = (*_bank_features(val_bank, spec.aggregation),
                    _bank_labels(val_bank, target))

    rng = np.random.default_rng(cfg.seed)
    model = init_model(spec.fusion, bank.dim_v, bank.dim_o, classes,
                       scale=spec.scale, rng=rng)
    params = param_groups(model)
    velocity = {name: np.zeros_like(arr) for name, arr in params.items()}

    n = len(bank.records)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses: list[float] = []
        batch_gnorms: list[float] = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            sums: dict[str, np.ndarray] = {name: np.zeros_like(arr)
                                           for name, arr in params.items()}
            loss_sum = 0.0
            for i in idx:
                loss, grads = loss_and_grads(model, V[i], O[i], int(labels[i]))
                loss_sum += loss
                for name in sums:
                    sums[name] += grads[name]
            scale = 1.0 / len(idx)
            means = {name: g * scale for name, g in sums.items()}
            batch_losses.append(loss_sum * scale)
            batch_gnorms.append(float(np.sqrt(
                sum(float(np.sum(g * g)) for g in means.values()))))
            for name in params:
                params[name], velocity[name] = sgd_momentum_step(
                    params[name], means[name], velocity[name],
                    cfg.learning_rate, cfg.momentum)
            model = with_params(model, params)
        entry = {
            "epoch": epoch,
            "mean_loss": float(np.mean(batch_losses)),
            "mean_grad_norm": float(np.mean(batch_gnorms)),
        }
        if val_data is not None:
            Vv, Ov, val_labels = val_data
            val_scores = np.stack([forward_model(model, Vv[i], Ov[i])[0]
                                   for i in range(len(val_labels))])
            entry["val_top1"] = _top1_accuracy(val_scores, val_labels)
        history.append(entry)
    return model, history


def grad_check(model: Model, v: np.ndarray, o_agg: np.ndarray, label: int,
               step: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Compare the analytic end-to-end gradient of the loss against central
    finite differences, for every parameter group and both inputs.

    Returns (max relative error, per-group max relative error), with the
    relative error denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not step > 0:
        raise ValidationError(f"step must be positive, got {step}")
    _, analytic = loss_and_grads(model, v, o_agg, label)

    def loss_with(groups: dict[str, np.ndarray], vv: np.ndarray, oo: np.ndarray) -> float:
        m = with_params(model, groups)
        scores, _ = forward_model(m, vv, oo)
        return cross_entropy(softmax(scores), label)

    base = dict(param_groups(model))
    targets: dict[str, np.ndarray] = dict(base)
    targets["v"] = v
    targets["o"] = o_agg

    per_group: dict[str, float] = {}
    for name, arr in targets.items():
        worst = 0.0
        flat = arr.ravel()
        for j in range(flat.shape[0]):
            orig = flat[j]
            perturbed = arr.copy()
            pflat = perturbed.ravel()

            def eval_at(value: float) -> float:
                pflat[j] = value
                if name == "v":
                    return loss_with(base, perturbed, o_agg)
                if name == "o":
                    return loss_with(base, v, perturbed)
                groups = dict(base)
                groups[name] = perturbed
                return loss_with(groups, v, o_agg)

            plus = eval_at(orig + step)
            minus = eval_at(orig - step)
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic[name].ravel()[j])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        per_group[name] = worst
    return max(per_group.values()), per_group


# --- checkpoints ----------------------------------------------------------------

_CHECKPOINT_FORMAT = "gatedfusion-checkpoint-v1"


@dataclass
class Checkpoint:
    """A trained model plus everything needed to evaluate it consistently."""

    model: Model
    target: str
    dim_v: int
    dim_o: int
    classes: int
    aggregation: AggregationConfig
    train_config: TrainConfig


def _matrix_obj(W: np.ndarray) -> dict:
    return {"rows": W.shape[0], "cols": W.shape[1], "data": W.ravel().tolist()}


def _matrix_from_obj(obj: dict, name: str) -> np.ndarray:
    try:
        rows, cols, data = obj["rows"], obj["cols"], obj["data"]
    except (KeyError, TypeError):
        raise ValidationError(f"checkpoint: {name} must declare rows, cols, data") from None
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != rows * cols:
        raise ValidationError(
            f"checkpoint: {name} declares {rows}x{cols} but carries {arr.shape[0]} values")
    return arr.reshape(rows, cols)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    obj = {
        "format": _CHECKPOINT_FORMAT,
        "fusion_kind": ckpt.model.fusion_kind,
        "target": ckpt.target,
        "dim_v": ckpt.dim_v,
        "dim_o": ckpt.dim_o,
        "classes": ckpt.classes,
        "aggregation": {"k": ckpt.aggregation.k, "window": ckpt.aggregation.window},
        "train_config": {
            "learning_rate": ckpt.train_config.learning_rate,
            "momentum": ckpt.train_config.momentum,
            "epochs": ckpt.train_config.epochs,
            "batch_size": ckpt.train_config.batch_size,
            "seed": ckpt.train_config.seed,
        },
        "head": {"W": _matrix_obj(ckpt.model.head.W), "b": ckpt.model.head.b.tolist()},
        "gfa": None,
    }
    if ckpt.model.gfa is not None:
        g = ckpt.model.gfa
        obj["gfa"] = {
            "variant": g.variant,
            "scale": {"kind": g.scale.kind, "s": g.scale.s, "epsilon": g.scale.epsilon},
            "W": _matrix_obj(g.W),
            "b": g.b.tolist(),
        }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint; shape-inconsistent files are rejected."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(obj, dict) or obj.get("format") != _CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a {_CHECKPOINT_FORMAT} file")
    try:
        fusion = obj["fusion_kind"]
        target = obj["target"]
        dim_v, dim_o, classes = obj["dim_v"], obj["dim_o"], obj["classes"]
        agg = AggregationConfig(k=obj["aggregation"]["k"],
                                window=obj["aggregation"]["window"])
        tc = obj["train_config"]
        train_config = TrainConfig(learning_rate=tc["learning_rate"],
                                   momentum=tc["momentum"], epochs=tc["epochs"],
                                   batch_size=tc["batch_size"], seed=tc["seed"])
        head_obj = obj["head"]
        gfa_obj = obj["gfa"]
    except (KeyError, TypeError):
        raise ValidationError(f"{path}: missing checkpoint fields") from None

    head_W = _matrix_from_obj(head_obj["W"], "head.W")
    head_b = np.array(head_obj["b"], dtype=np.float64)
    feat_dim = _feature_dim(fusion, dim_v, dim_o)
    if head_W.shape != (classes, feat_dim):
        raise ValidationError(
            f"{path}: head.W is {head_W.shape[0]}x{head_W.shape[1]}, expected "
            f"{classes}x{feat_dim} for fusion {fusion!r}")
    if head_b.shape != (classes,):
        raise ValidationError(f"{path}: head.b has dim {head_b.shape[0]}, expected {classes}")

    gfa = None
    if gfa_obj is not None:
        scale_obj = gfa_obj.get("scale", {})
        scale = ScaleMode(kind=scale_obj.get("kind", "none"),
                          s=scale_obj.get("s", 1.0),
                          epsilon=scale_obj.get("epsilon", 1e-8))
        gfa_W = _matrix_from_obj(gfa_obj["W"], "gfa.W")
        gfa_b = np.array(gfa_obj["b"], dtype=np.float64)
        variant = gfa_obj.get("variant")
        expected = (dim_v + dim_o, dim_v + dim_o) if variant == "a" else (dim_v, dim_o)
        if gfa_W.shape != expected:
            raise ValidationError(
                f"{path}: gfa.W is {gfa_W.shape[0]}x{gfa_W.shape[1]}, expected "
                f"{expected[0]}x{expected[1]} for variant {variant!r}")
        if gfa_b.shape != (gfa_W.shape[0],):
            raise ValidationError(
                f"{path}: gfa.b has dim {gfa_b.shape[0]}, expected {gfa_W.shape[0]}")
        gfa = GfaParams(variant=variant, W=gfa_W, b=gfa_b, scale=scale)

    model = Model(fusion_kind=fusion, head=Head(W=head_W, b=head_b), gfa=gfa)
    return Checkpoint(model=model, target=target, dim_v=dim_v, dim_o=dim_o,
                      classes=classes, aggregation=agg, train_config=train_config)
