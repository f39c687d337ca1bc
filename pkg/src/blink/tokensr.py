"""Token super-resolution amplifier: a per-layer three-convolution refiner
(kernel sizes 5, 3, 1) with a distillation-style training loop against
quadrant-crop teacher features. The backbone stays frozen throughout; only
the amplifier parameters receive gradients, which are hand-derived and
validated against central finite differences."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CropSample
from .model import ToyMLLM, weights_hash
from .numerics import conv2d, conv2d_backward, finite_diff_gradient
from .optim import AdamW, MomentumSGD, cosine_warmup_lr
from .sequence import Role, Segment, TokenSequence

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b")
KERNEL_SIZES = (5, 3, 1)


class ConfigurationError(RuntimeError):
    pass


@dataclass
class TokenSRWeights:
    """Amplifier parameters for one decoder layer.

    `identity` marks a module that is forced to the exact identity map
    (bitwise pass-through), used for the interpolation-only variant checks.
    """

    params: dict[str, np.ndarray]
    identity: bool = False

    @classmethod
    def init(cls, d: int, seed: int = 0, c1: int | None = None, c2: int | None = None,
             dtype: str = "float32") -> "TokenSRWeights":
        c1 = c1 if c1 is not None else d // 2
        c2 = c2 if c2 is not None else d // 4
        rng = np.random.default_rng(seed)
        dt = np.dtype(dtype)

        def he(cout, cin, f):
            scale = np.sqrt(2.0 / (cin * f * f))
            return (rng.standard_normal((cout, cin, f, f)) * scale).astype(dt)

        params = {
            "conv1_w": he(c1, d, 5),
            "conv1_b": np.zeros(c1, dtype=dt),
            "conv2_w": he(c2, c1, 3),
            "conv2_b": np.zeros(c2, dtype=dt),
            "conv3_w": he(d, c2, 1),
            "conv3_b": np.zeros(d, dtype=dt),
        }
        return cls(params=params)

    @classmethod
    def identity_map(cls) -> "TokenSRWeights":
        return cls(params={}, identity=True)

    @property
    def d(self) -> int:
        return self.params["conv1_w"].shape[1]


def amplify(tokens: np.ndarray, weights: TokenSRWeights) -> np.ndarray:
    """conv5 -> ReLU -> conv3 -> ReLU -> conv1 over an (H, W, d) token grid."""
    out, _ = amplify_forward(tokens, weights)
    return out


def amplify_forward(tokens: np.ndarray, weights: TokenSRWeights):
    tokens = np.asarray(tokens)
    if tokens.ndim != 3:
        raise ValueError(f"amplify: expected (H, W, d) tokens, got shape {tokens.shape}")
    if weights.identity:
        return tokens.copy(), None
    if tokens.shape[2] != weights.d:
        raise ValueError(
            f"amplify: channel mismatch, tokens have {tokens.shape[2]}, module expects {weights.d}"
        )
    p = weights.params
    z1 = conv2d(tokens, p["conv1_w"], p["conv1_b"])
    a1 = np.maximum(z1, 0)
    z2 = conv2d(a1, p["conv2_w"], p["conv2_b"])
    a2 = np.maximum(z2, 0)
    out = conv2d(a2, p["conv3_w"], p["conv3_b"])
    cache = (tokens, z1, a1, z2, a2)
    return out, cache


def amplify_backward(cache, weights: TokenSRWeights, d_out: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients of the conv stack given d_out at its output."""
    tokens, z1, a1, z2, a2 = cache
    p = weights.params
    d_a2, d_w3, d_b3 = conv2d_backward(a2, p["conv3_w"], d_out)
    d_z2 = d_a2 * (z2 > 0)
    d_a1, d_w2, d_b2 = conv2d_backward(a1, p["conv2_w"], d_z2)
    d_z1 = d_a1 * (z1 > 0)
    _, d_w1, d_b1 = conv2d_backward(tokens, p["conv1_w"], d_z1)
    return {
        "conv1_w": d_w1, "conv1_b": d_b1,
        "conv2_w": d_w2, "conv2_b": d_b2,
        "conv3_w": d_w3, "conv3_b": d_b3,
    }


# -- loss ------------------------------------------------------------------


def _channel_softmax(x: np.ndarray, temperature: float) -> np.ndarray:
    z = x / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def tokensr_loss(
    student: np.ndarray,
    teacher: np.ndarray,
    temperature: float = 1.0,
    direction: str = "teacher_student",
) -> float:
    loss, _ = tokensr_loss_and_grad(student, teacher, temperature, direction)
    return loss


def tokensr_loss_and_grad(
    student: np.ndarray,
    teacher: np.ndarray,
    temperature: float = 1.0,
    direction: str = "teacher_student",
) -> tuple[float, np.ndarray]:
    """Per-token channel-softmax KL between teacher and student hidden grids.

    Both inputs are (H, W, d). Each token's hidden vector is softmaxed over
    channels at the given temperature; KL is averaged over the H*W tokens.
    Returns the loss and its gradient w.r.t. the student hidden states.
    """
    student = np.asarray(student)
    teacher = np.asarray(teacher)
    if student.shape != teacher.shape or student.ndim != 3:
        raise ValueError(f"tokensr_loss: shape mismatch {student.shape} vs {teacher.shape}")
    n_tokens = student.shape[0] * student.shape[1]
    s = _channel_softmax(student, temperature)
    t = _channel_softmax(teacher, temperature)
    eps = 1e-12
    if direction == "teacher_student":
        per_token = np.sum(t * (np.log(t + eps) - np.log(s + eps)), axis=-1)
        d_student = (s - t) / (n_tokens * temperature)
    elif direction == "student_teacher":
        log_ratio = np.log(s + eps) - np.log(t + eps)
        per_token = np.sum(s * log_ratio, axis=-1)
        d_student = s * (log_ratio - per_token[..., None]) / (n_tokens * temperature)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    loss = float(per_token.sum() / n_tokens)
    return loss, d_student.astype(student.dtype)


# -- training --------------------------------------------------------------


@dataclass
class TrainRecipe:
    learning_rate: float = 1e-4
    warmup_ratio: float = 0.03
    batch_size: int = 8
    epochs: int = 1
    optimizer: str = "adamw"  # or "sgd"
    seed: int = 0
    kl_temperature: float = 1.0
    kl_direction: str = "teacher_student"

    def __post_init__(self):
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigurationError("warmup_ratio must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigurationError("batch_size and epochs must be positive")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.kl_direction not in ("teacher_student", "student_teacher"):
            raise ConfigurationError(f"unknown KL direction {self.kl_direction!r}")
        if self.kl_temperature <= 0:
            raise ConfigurationError("kl_temperature must be positive")


@dataclass
class TokenSRTrainReport:
    initial_loss: dict[int, float]
    final_loss: dict[int, float]
    loss_curve: list[tuple[int, int, float, float]]  # (layer, step, lr, loss)
    backbone_hash_before: str = ""
    backbone_hash_after: str = ""


def capture_visual_hidden(model: ToyMLLM, image: np.ndarray, layers: list[int]) -> dict[int, np.ndarray]:
    """Hook-site visual hidden states per requested layer, as (g, g, d) grids.

    Causality makes text tokens irrelevant to visual states, so the forward
    runs on [System, Visual] only.
    """
    g = model.config.grid_side
    seq = TokenSequence([
        Segment(Role.SYSTEM, model.weights["sys_embed"].copy()),
        Segment(Role.VISUAL, model.encode_image(image)),
    ])
    result = model.forward_prefill(seq, capture_hidden=True)
    vis = seq.slices()[Role.VISUAL]
    out = {}
    for layer in layers:
        out[layer] = result.hook_site_hidden[layer][vis].reshape(g, g, -1)
    return out


def _quadrant_grid(full_hidden: np.ndarray, crop: CropSample) -> np.ndarray:
    r0, r1 = crop.token_rows
    c0, c1 = crop.token_cols
    return full_hidden[r0:r1, c0:c1, :]


def train_tokensr(
    model: ToyMLLM,
    pairs: list[CropSample],
    layers_sel: list[int],
    recipe: TrainRecipe,
) -> tuple[dict[int, TokenSRWeights], TokenSRTrainReport]:
    """Distill quadrant-crop teacher features into per-layer amplifiers.

    For every (full image, crop) pair: take the quadrant's tokens from the
    full-image forward at layer L, upsample them to the full grid, amplify,
    and match the crop-only forward's visual hidden states at the same layer.
    """
    from .numerics import bilinear_resize  # local to avoid cycle at import time

    for layer in layers_sel:
        if not 0 <= layer < model.config.n_layers:
            raise ConfigurationError(f"layer {layer} outside backbone depth")
    c = model.config
    g = c.grid_side
    hash_before = weights_hash(model.weights)

    # Backbone is frozen, so teacher/student inputs can be precomputed once.
    student_in: dict[int, list[np.ndarray]] = {L: [] for L in layers_sel}
    teacher: dict[int, list[np.ndarray]] = {L: [] for L in layers_sel}
    full_cache: dict[int, dict[int, np.ndarray]] = {}
    for pair in pairs:
        key = id(pair.full_image)
        if key not in full_cache:
            full_cache[key] = capture_visual_hidden(model, pair.full_image, layers_sel)
        crop_hidden = capture_visual_hidden(model, pair.crop_image, layers_sel)
        for L in layers_sel:
            quad = _quadrant_grid(full_cache[key][L], pair)
            student_in[L].append(bilinear_resize(quad, (g, g)))
            teacher[L].append(crop_hidden[L])

    modules = {
        L: TokenSRWeights.init(c.d_model, seed=recipe.seed + 1000 * L) for L in layers_sel
    }

    def mean_loss(L: int) -> float:
        losses = []
        for sin, t in zip(student_in[L], teacher[L]):
            out = amplify(sin, modules[L])
            losses.append(tokensr_loss(out, t, recipe.kl_temperature, recipe.kl_direction))
        return float(np.mean(losses))

    initial = {L: mean_loss(L) for L in layers_sel}

    n = len(pairs)
    steps_per_epoch = max(1, n // recipe.batch_size)
    total_steps = steps_per_epoch * recipe.epochs
    curve: list[tuple[int, int, float, float]] = []
    rng = np.random.default_rng(recipe.seed)
    order_base = np.arange(n)

    for L in layers_sel:
        params = modules[L].params
        if recipe.optimizer == "adamw":
            opt = AdamW(params, lr=recipe.learning_rate)
        elif recipe.optimizer == "sgd":
            opt = MomentumSGD(params, lr=recipe.learning_rate)
        else:
            raise ConfigurationError(f"unknown optimizer {recipe.optimizer!r}")
        step = 0
        layer_rng = np.random.default_rng(recipe.seed + L)
        for _epoch in range(recipe.epochs):
            order = layer_rng.permutation(order_base)
            for b in range(steps_per_epoch):
                batch = order[b * recipe.batch_size : (b + 1) * recipe.batch_size]
                lr = cosine_warmup_lr(step, total_steps, recipe.learning_rate, recipe.warmup_ratio)
                grads = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
                batch_loss = 0.0
                for idx in batch:
                    out, cache = amplify_forward(student_in[L][idx], modules[L])
                    loss, d_out = tokensr_loss_and_grad(
                        out, teacher[L][idx], recipe.kl_temperature, recipe.kl_direction
                    )
                    batch_loss += loss
                    for k, v in amplify_backward(cache, modules[L], d_out).items():
                        grads[k] += v
                inv = 1.0 / max(1, len(batch))
                for k in grads:
                    grads[k] *= inv
                opt.step(grads, lr=lr)
                curve.append((L, step, lr, batch_loss * inv))
                step += 1

    final = {L: mean_loss(L) for L in layers_sel}
    report = TokenSRTrainReport(
        initial_loss=initial,
        final_loss=final,
        loss_curve=curve,
        backbone_hash_before=hash_before,
        backbone_hash_after=weights_hash(model.weights),
    )
    _ = rng
    return modules, report


def loss_curve_to_csv(curve: list[tuple[int, int, float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "step", "lr", "loss"])
        for layer, step, lr, loss in curve:
            writer.writerow([layer, step, f"{lr:.12g}", f"{loss:.9f}"])


# -- checkpointing ---------------------------------------------------------


def tokensr_to_tensors(modules: dict[int, TokenSRWeights]) -> dict[str, np.ndarray]:
    out = {}
    for layer, mod in modules.items():
        for k_idx, (wname, bname) in enumerate(
            (("conv1_w", "conv1_b"), ("conv2_w", "conv2_b"), ("conv3_w", "conv3_b")), start=1
        ):
            out[f"tokensr.L{layer}.conv{k_idx}.weight"] = mod.params[wname]
            out[f"tokensr.L{layer}.conv{k_idx}.bias"] = mod.params[bname]
    return out


def tokensr_from_tensors(tensors: dict[str, np.ndarray]) -> dict[int, TokenSRWeights]:
    layers: dict[int, dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        if not name.startswith("tokensr.L"):
            continue
        rest = name[len("tokensr.L"):]
        layer_s, conv, kind = rest.split(".")
        k = int(conv[len("conv"):])
        pname = f"conv{k}_w" if kind == "weight" else f"conv{k}_b"
        layers.setdefault(int(layer_s), {})[pname] = arr.copy()
    out = {}
    for layer, params in layers.items():
        missing = [n for n in PARAM_NAMES if n not in params]
        if missing:
            raise ConfigurationError(f"tokensr layer {layer} missing tensors: {missing}")
        out[layer] = TokenSRWeights(params=params)
    return out


# -- verification ----------------------------------------------------------


def _pack(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[n].ravel() for n in PARAM_NAMES]).astype(np.float64)


def _unpack(vec: np.ndarray, ref: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    for n in PARAM_NAMES:
        size = ref[n].size
        out[n] = vec[pos : pos + size].reshape(ref[n].shape)
        pos += size
    return out


def gradient_check(
    d: int = 8, side: int = 4, seed: int = 0, step: float = 1e-5
) -> float:
    """Max relative error of analytic amplifier gradients vs finite differences.

    Runs in float64 on a small random instance.
    """
    rng = np.random.default_rng(seed)
    weights = TokenSRWeights.init(d, seed=seed, dtype="float64")
    # nonzero biases so their gradients are exercised away from the origin
    for bname in ("conv1_b", "conv2_b", "conv3_b"):
        weights.params[bname] += rng.standard_normal(weights.params[bname].shape) * 0.1
    tokens = rng.standard_normal((side, side, d))
    teacher = rng.standard_normal((side, side, d))

    out, cache = amplify_forward(tokens, weights)
    _, d_out = tokensr_loss_and_grad(out, teacher)
    analytic = amplify_backward(cache, weights, d_out)
    analytic_vec = _pack(analytic)

    ref = {n: weights.params[n] for n in PARAM_NAMES}

    def f(theta: np.ndarray) -> float:
        trial = TokenSRWeights(params=_unpack(theta, ref))
        return tokensr_loss(amplify(tokens, trial), teacher)

    numeric = finite_diff_gradient(f, _pack(weights.params), step=step)
    # guarded relative error: near-zero coordinates compare absolutely
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic_vec)), 1e-2)
    return float(np.max(np.abs(analytic_vec - numeric) / denom))
