"""Minimal differentiable text classifier used as the compression substrate.

The model is an embedding table, a stack of residual tanh layers, and a
decoder that takes a softmax-weighted (layer attention) combination of the
layer outputs through a linear head. Every parameter tensor carries a freeze
flag so candidate models can be fine-tuned on junction layers only. All
arithmetic is float64 and fully deterministic given a seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataFormatError, InputError, TrainingDivergence

# A probability vector over the label space: nonnegative, sums to 1 (1e-6).
ProbDist = np.ndarray

_MAGIC = b"PWLSTACK"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Example:
    """One input: token indices, an optional label, and how many leading
    token positions carry their own prediction (1 = whole-sequence)."""

    tokens: tuple[int, ...]
    label: int | None = None
    positions: int = 1

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise InputError("example has no tokens")
        if self.positions < 1 or self.positions > len(self.tokens):
            raise InputError(
                f"positions must be in [1, {len(self.tokens)}], got {self.positions}"
            )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"  # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be > 0")
        if self.batch_size <= 0:
            raise InputError("batch_size must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        if self.weight_decay < 0:
            raise InputError("weight_decay must be >= 0")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


@dataclass
class LayerStackModel:
    """Classifier with explicit per-tensor freezing and removable layers.

    ``active_layers`` holds the surviving original layer indices (1-based)
    in stack order; parameter tensors keep their original-index names so a
    compressed copy still refers to ``layer3.weight`` even after layer 2 is
    gone. ``freeze_mask[name]`` is True when the tensor is frozen.
    """

    vocab_size: int
    dim: int
    n_classes: int
    active_layers: tuple[int, ...]
    params: dict[str, np.ndarray]
    freeze_mask: dict[str, bool]
    loss_trace: list[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        expected = set(tensor_names(self.active_layers))
        if set(self.params) != expected:
            raise InputError("params do not match the expected tensor set")
        if set(self.freeze_mask) != expected:
            raise InputError("freeze_mask must cover every parameter tensor exactly once")
        if self.params["decoder.attention"].shape != (len(self.active_layers),):
            raise InputError("decoder attention length must equal the active layer count")

    @property
    def n_layers(self) -> int:
        return len(self.active_layers)

    def trainable_names(self) -> list[str]:
        return [n for n in tensor_names(self.active_layers) if not self.freeze_mask[n]]

    def copy(self) -> "LayerStackModel":
        return LayerStackModel(
            vocab_size=self.vocab_size,
            dim=self.dim,
            n_classes=self.n_classes,
            active_layers=self.active_layers,
            params={k: v.copy() for k, v in self.params.items()},
            freeze_mask=dict(self.freeze_mask),
        )


def tensor_names(active_layers: tuple[int, ...]) -> list[str]:
    """Canonical tensor order used for serialization and freeze bitsets."""
    names = ["embedding"]
    for i in active_layers:
        names.append(f"layer{i}.weight")
        names.append(f"layer{i}.bias")
    names.extend(["decoder.attention", "decoder.weight", "decoder.bias"])
    return names


def init_model(
    vocab_size: int,
    dim: int,
    n_classes: int,
    n_layers: int,
    seed: int = 0,
    embed_scale: float = 0.5,
) -> LayerStackModel:
    """Seed-reproducible random initialization with K layers (indices 1..K)."""
    if vocab_size < 1 or dim < 1 or n_classes < 2 or n_layers < 1:
        raise InputError("model dimensions must be positive (n_classes >= 2)")
    rng = np.random.default_rng(seed)
    active = tuple(range(1, n_layers + 1))
    params: dict[str, np.ndarray] = {
        "embedding": rng.normal(0.0, embed_scale, size=(vocab_size, dim))
    }
    w_scale = 1.0 / np.sqrt(dim)
    for i in active:
        params[f"layer{i}.weight"] = rng.normal(0.0, w_scale, size=(dim, dim))
        params[f"layer{i}.bias"] = np.zeros(dim)
    params["decoder.attention"] = np.zeros(n_layers)  # softmax -> uniform
    params["decoder.weight"] = rng.normal(0.0, w_scale, size=(n_classes, dim))
    params["decoder.bias"] = np.zeros(n_classes)
    freeze = {name: False for name in tensor_names(active)}
    return LayerStackModel(vocab_size, dim, n_classes, active, params, freeze)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def validate_prob_dist(p: np.ndarray, n_classes: int | None = None) -> None:
    if n_classes is not None and p.shape != (n_classes,):
        raise InputError(f"expected a length-{n_classes} distribution, got shape {p.shape}")
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-6:
        raise InputError("not a probability distribution")


def _check_tokens(model: LayerStackModel, x: Example) -> None:
    for t in x.tokens:
        if t < 0 or t >= model.vocab_size:
            raise InputError(f"token index {t} outside vocabulary of size {model.vocab_size}")


def _token_arrays(examples) -> list[np.ndarray]:
    return [np.asarray(ex.tokens, dtype=np.int64) for ex in examples]


def _pooled_inputs(embedding: np.ndarray, token_arrays: list[np.ndarray]):
    """Mean-pooled embedding rows per example, plus the flat index used for
    the embedding gradient scatter."""
    lengths = np.fromiter((a.size for a in token_arrays), dtype=np.int64, count=len(token_arrays))
    flat = np.concatenate(token_arrays)
    offsets = np.zeros(len(token_arrays), dtype=np.int64)
    np.cumsum(lengths[:-1], out=offsets[1:])
    pooled = np.add.reduceat(embedding[flat], offsets, axis=0) / lengths[:, None]
    return pooled, flat, lengths


def _stack_forward(model: LayerStackModel, h0: np.ndarray):
    """Run the residual stack and decoder on a (B, d) input matrix.

    Returns class probabilities plus the per-layer caches backward needs.
    """
    p = model.params
    hs = [h0]
    tanhs = []
    h = h0
    for i in model.active_layers:
        t = np.tanh(h @ p[f"layer{i}.weight"].T + p[f"layer{i}.bias"])
        h = h + t
        hs.append(h)
        tanhs.append(t)
    alpha = softmax(p["decoder.attention"])
    combined = np.tensordot(alpha, hs[1:], axes=(0, 0)) if model.n_layers > 0 else h0
    logits = combined @ p["decoder.weight"].T + p["decoder.bias"]
    probs = softmax(logits, axis=1)
    return probs, hs, tanhs, alpha, combined


def forward(model: LayerStackModel, x: Example) -> ProbDist:
    """Class probabilities for one example.

    Single-prediction examples pool token embeddings by mean; an example
    with ``positions = P > 1`` predicts from each of its first P token
    embeddings independently and returns a (P, L) array of distributions.
    """
    _check_tokens(model, x)
    emb = model.params["embedding"]
    if x.positions == 1:
        h0 = emb[np.asarray(x.tokens, dtype=np.int64)].mean(axis=0)[None, :]
    else:
        h0 = emb[np.asarray(x.tokens[: x.positions], dtype=np.int64)]
    probs = _stack_forward(model, h0)[0]
    return probs[0] if x.positions == 1 else probs


def predict_proba(model: LayerStackModel, examples) -> np.ndarray:
    """Batched forward pass for single-prediction examples, shape (N, L)."""
    if len(examples) == 0:
        raise InputError("empty example list")
    for ex in examples:
        if ex.positions != 1:
            raise InputError("predict_proba handles single-prediction examples only")
        _check_tokens(model, ex)
    pooled, _, _ = _pooled_inputs(model.params["embedding"], _token_arrays(examples))
    return _stack_forward(model, pooled)[0]


def _loss_and_grads_arrays(
    model: LayerStackModel,
    token_arrays: list[np.ndarray],
    labels: np.ndarray,
    trainable: set[str],
):
    p = model.params
    n = len(token_arrays)
    pooled, flat, lengths = _pooled_inputs(p["embedding"], token_arrays)
    probs, hs, tanhs, alpha, combined = _stack_forward(model, pooled)

    rows = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(probs[rows, labels], 1e-300))))

    grads: dict[str, np.ndarray] = {}
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n

    if "decoder.weight" in trainable:
        grads["decoder.weight"] = dlogits.T @ combined
    if "decoder.bias" in trainable:
        grads["decoder.bias"] = dlogits.sum(axis=0)
    dcombined = dlogits @ p["decoder.weight"]

    if "decoder.attention" in trainable:
        dalpha = np.array([np.sum(dcombined * h) for h in hs[1:]])
        grads["decoder.attention"] = alpha * (dalpha - float(alpha @ dalpha))

    dhs = [np.zeros_like(pooled) for _ in range(len(hs))]
    for j in range(1, len(hs)):
        dhs[j] += alpha[j - 1] * dcombined
    for k in range(model.n_layers, 0, -1):
        i = model.active_layers[k - 1]
        dt = dhs[k] * (1.0 - tanhs[k - 1] ** 2)
        if f"layer{i}.weight" in trainable:
            grads[f"layer{i}.weight"] = dt.T @ hs[k - 1]
        if f"layer{i}.bias" in trainable:
            grads[f"layer{i}.bias"] = dt.sum(axis=0)
        dhs[k - 1] += dhs[k] + dt @ p[f"layer{i}.weight"]

    if "embedding" in trainable:
        demb = np.zeros_like(p["embedding"])
        per_row = np.repeat(dhs[0] / lengths[:, None], lengths, axis=0)
        np.add.at(demb, flat, per_row)
        grads["embedding"] = demb

    return loss, grads


def loss_and_grads(model: LayerStackModel, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and gradients for trainable tensors.

    Frozen tensors get no gradient entry at all.
    """
    if len(batch) == 0:
        raise InputError("empty batch")
    labels = []
    for ex in batch:
        if ex.label is None:
            raise InputError("loss requires labeled examples")
        if ex.positions != 1:
            raise InputError("multi-position examples are not trainable here")
        if ex.label < 0 or ex.label >= model.n_classes:
            raise InputError(f"label {ex.label} outside [0, {model.n_classes})")
        _check_tokens(model, ex)
        labels.append(ex.label)
    return _loss_and_grads_arrays(
        model,
        _token_arrays(batch),
        np.asarray(labels, dtype=np.int64),
        set(model.trainable_names()),
    )


class _Optimizer:
    """Adam (decoupled weight decay) or plain SGD with L2, fresh state."""

    def __init__(self, config: TrainConfig, names: list[str], params: dict[str, np.ndarray]):
        self.cfg = config
        self.t = 0
        if config.optimizer == "adam":
            self.m = {n: np.zeros_like(params[n]) for n in names}
            self.v = {n: np.zeros_like(params[n]) for n in names}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        if cfg.optimizer == "sgd":
            for n, g in grads.items():
                params[n] -= cfg.learning_rate * (g + cfg.weight_decay * params[n])
            return
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for n, g in grads.items():
            m = self.m[n]
            v = self.v[n]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay > 0:
                update = update + cfg.weight_decay * params[n]
            params[n] -= cfg.learning_rate * update


def train(
    model: LayerStackModel,
    labeled_data,
    config: TrainConfig,
    eval_data=None,
    patience: int | None = None,
) -> LayerStackModel:
    """Mini-batch training of the trainable tensors; returns a new model.

    Frozen tensors come back bit-identical. The per-epoch mean loss trace is
    stored on the returned model's ``loss_trace``. With ``eval_data`` and
    ``patience`` set, stops after ``patience`` epochs without accuracy
    improvement on ``eval_data`` and returns the best snapshot.
    """
    if len(labeled_data) == 0:
        raise InputError("no training data")
    out = model.copy()
    trainable = set(out.trainable_names())
    labels = []
    for ex in labeled_data:
        if ex.label is None:
            raise InputError("train requires labeled examples")
        if ex.positions != 1:
            raise InputError("multi-position examples are not trainable here")
        _check_tokens(model, ex)
        labels.append(ex.label)
    labels = np.asarray(labels, dtype=np.int64)
    arrays = _token_arrays(labeled_data)

    if config.epochs == 0 or not trainable:
        out.loss_trace = []
        return out

    rng = np.random.default_rng(config.seed)
    opt = _Optimizer(config, sorted(trainable), out.params)
    trace: list[float] = []
    best_params = None
    best_acc = -1.0
    since_best = 0
    step = 0
    n = len(labeled_data)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            loss, grads = _loss_and_grads_arrays(
                out, [arrays[i] for i in idx], labels[idx], trainable
            )
            if not np.isfinite(loss):
                raise TrainingDivergence(step)
            opt.step(out.params, grads)
            epoch_losses.append(loss)
            step += 1
        trace.append(float(np.mean(epoch_losses)))
        if eval_data is not None and patience is not None:
            acc = evaluate_accuracy(out, eval_data)
            if acc > best_acc:
                best_acc = acc
                best_params = {k: v.copy() for k, v in out.params.items()}
                since_best = 0
            else:
                since_best += 1
                if since_best >= patience:
                    break
    if best_params is not None:
        out.params = best_params
    out.loss_trace = trace
    return out


def _predictions(model: LayerStackModel, labeled_data) -> tuple[np.ndarray, np.ndarray]:
    golds = []
    for ex in labeled_data:
        if ex.label is None:
            raise InputError("evaluation requires labeled examples")
        golds.append(ex.label)
    preds = np.argmax(predict_proba(model, labeled_data), axis=1)
    return np.asarray(golds, dtype=np.int64), preds


def evaluate_accuracy(model: LayerStackModel, labeled_data) -> float:
    gold, pred = _predictions(model, labeled_data)
    return float(np.mean(gold == pred))


def macro_f1(gold: np.ndarray, pred: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over the full label space; a class
    with zero precision+recall denominator contributes F1 = 0."""
    gold = np.asarray(gold)
    pred = np.asarray(pred)
    f1s = np.zeros(n_classes)
    for c in range(n_classes):
        tp = int(np.sum((gold == c) & (pred == c)))
        fp = int(np.sum((gold != c) & (pred == c)))
        fn = int(np.sum((gold == c) & (pred != c)))
        denom = 2 * tp + fp + fn
        f1s[c] = (2 * tp / denom) if denom > 0 else 0.0
    return float(f1s.mean())


def evaluate_macro_f1(model: LayerStackModel, labeled_data) -> float:
    if len(labeled_data) == 0:
        raise InputError("empty evaluation set")
    gold, pred = _predictions(model, labeled_data)
    return macro_f1(gold, pred, model.n_classes)


def serialize(model: LayerStackModel) -> bytes:
    """Versioned little-endian binary: header, dims, active layers, freeze
    bitset, then raw float64 tensors in canonical order."""
    names = tensor_names(model.active_layers)
    parts = [
        struct.pack(
            "<8sIIIII",
            _MAGIC,
            _FORMAT_VERSION,
            model.vocab_size,
            model.dim,
            model.n_classes,
            len(model.active_layers),
        )
    ]
    parts.append(struct.pack(f"<{len(model.active_layers)}I", *model.active_layers))
    bits = 0
    for pos, name in enumerate(names):
        if model.freeze_mask[name]:
            bits |= 1 << pos
    n_bytes = (len(names) + 7) // 8
    parts.append(struct.pack("<I", len(names)))
    parts.append(bits.to_bytes(n_bytes, "little"))
    for name in names:
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    return b"".join(parts)


def _tensor_shapes(vocab_size, dim, n_classes, active):
    shapes = {"embedding": (vocab_size, dim)}
    for i in active:
        shapes[f"layer{i}.weight"] = (dim, dim)
        shapes[f"layer{i}.bias"] = (dim,)
    shapes["decoder.attention"] = (len(active),)
    shapes["decoder.weight"] = (n_classes, dim)
    shapes["decoder.bias"] = (n_classes,)
    return shapes


def deserialize(data: bytes) -> LayerStackModel:
    header_size = struct.calcsize("<8sIIIII")
    if len(data) < header_size:
        raise DataFormatError("model file truncated in header")
    magic, version, vocab_size, dim, n_classes, n_active = struct.unpack_from(
        "<8sIIIII", data, 0
    )
    if magic != _MAGIC:
        raise DataFormatError("bad magic bytes, not a model file")
    if version != _FORMAT_VERSION:
        raise DataFormatError(f"unsupported model format version {version}")
    offset = header_size
    try:
        active = struct.unpack_from(f"<{n_active}I", data, offset)
        offset += 4 * n_active
        (n_tensors,) = struct.unpack_from("<I", data, offset)
        offset += 4
    except struct.error as exc:
        raise DataFormatError("model file truncated in layer table") from exc
    names = tensor_names(active)
    if n_tensors != len(names):
        raise DataFormatError("tensor count does not match the layer table")
    n_bytes = (n_tensors + 7) // 8
    if len(data) < offset + n_bytes:
        raise DataFormatError("model file truncated in freeze bitset")
    bits = int.from_bytes(data[offset : offset + n_bytes], "little")
    offset += n_bytes
    shapes = _tensor_shapes(vocab_size, dim, n_classes, active)
    params = {}
    freeze = {}
    for pos, name in enumerate(names):
        shape = shapes[name]
        nbytes = 8 * int(np.prod(shape))
        if len(data) < offset + nbytes:
            raise DataFormatError(f"model file truncated in tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=int(np.prod(shape)), offset=offset)
        params[name] = arr.reshape(shape).astype(np.float64, copy=True)
        freeze[name] = bool(bits >> pos & 1)
        offset += nbytes
    if offset != len(data):
        raise DataFormatError("trailing bytes after model payload")
    return LayerStackModel(vocab_size, dim, n_classes, active, params, freeze)


def save_model(model: LayerStackModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load_model(path) -> LayerStackModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def models_equal(a: LayerStackModel, b: LayerStackModel) -> bool:
    """Bit-exact equality of dims, layers, freeze masks, and all tensors."""
    if (a.vocab_size, a.dim, a.n_classes, a.active_layers) != (
        b.vocab_size,
        b.dim,
        b.n_classes,
        b.active_layers,
    ):
        return False
    if a.freeze_mask != b.freeze_mask:
        return False
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
