"""L-infinity PGD attacks against small differentiable models.

Models see a 64x64 area-downsampled luma plane. Every model here is affine
in that plane, so ``gradient_wrt_input`` is the exact adjoint of the forward
chain (luma weights, row and column area matrices, weight matrix).
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional, Protocol, Sequence, Union, runtime_checkable

import numpy as np
from scipy import optimize, special

from ._errors import ContractViolation, DegenerateDataError, ModelError
from .core import LUMA_WEIGHTS, ImageBuffer, PathLike, Rng

logger = logging.getLogger(__name__)

FEATURE_SIZE = 64
EMBEDDING_EPSILONS = (2 / 255, 4 / 255, 6 / 255, 8 / 255)
EMBEDDING_STEP_FRACTION = 0.05
EMBEDDING_ITERATIONS = 200
SURROGATE_STEP_FRACTION = 0.01
SURROGATE_ITERATIONS = 50
GRADIENT_TOLERANCE = 1e-4
PROJECTION_SLACK = 2.0**-23
MIN_SURROGATE_ACCURACY = 0.6
TARGET_SURROGATE_ACCURACY = 0.99

_CHECKPOINT_MAGIC = b"WMBM"
_CHECKPOINT_VERSION = 1

ImageLike = Union[ImageBuffer, np.ndarray]


def _as_array(image: ImageLike) -> np.ndarray:
    arr = image.data if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


@lru_cache(maxsize=32)
def area_matrix(n_in: int, n_out: int = FEATURE_SIZE) -> np.ndarray:
    """
    ``(n_out, n_in)`` box-filter resampling matrix.

    Row ``i`` averages the input interval ``[i * n_in / n_out, (i + 1) * n_in / n_out)``
    weighted by overlap, so each row sums to one.
    """
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = edges[:-1, None]
    hi = edges[1:, None]
    pixel_lo = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, pixel_lo + 1) - np.maximum(lo, pixel_lo), 0.0, None)
    matrix = overlap / (n_in / n_out)
    matrix.flags.writeable = False
    return matrix


def _luma_weights(channels: int) -> np.ndarray:
    return np.ones(1) if channels == 1 else LUMA_WEIGHTS


def downsample_luma(image: ImageLike) -> np.ndarray:
    """64x64 area-downsampled luma plane."""
    arr = _as_array(image)
    luma = arr @ _luma_weights(arr.shape[2])
    return area_matrix(arr.shape[0]) @ luma @ area_matrix(arr.shape[1]).T


@runtime_checkable
class DifferentiableModel(Protocol):
    """Anything PGD can attack."""

    def forward(self, image: ImageLike) -> np.ndarray:
        """Feature vector or class logits."""
        ...  # pylint: disable=unnecessary-ellipsis

    def gradient_wrt_input(self, image: ImageLike, upstream: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product ``upstream^T dF/dx`` shaped like the image."""
        ...  # pylint: disable=unnecessary-ellipsis


@dataclass(eq=False)
class LinearFeatureModel:
    """``f(x) = W @ vec(downsample64(luma(x))) + b``."""

    weight: np.ndarray
    bias: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[1] != FEATURE_SIZE * FEATURE_SIZE:
            raise ContractViolation(f"Weight must be (k, {FEATURE_SIZE**2}), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ContractViolation(f"Bias must be ({self.weight.shape[0]},), got {self.bias.shape}")
        self.weight.flags.writeable = False
        self.bias.flags.writeable = False

    @property
    def output_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, image: ImageLike) -> np.ndarray:
        return self.weight @ downsample_luma(image).ravel() + self.bias

    def gradient_wrt_input(self, image: ImageLike, upstream: np.ndarray) -> np.ndarray:
        arr = _as_array(image)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (self.output_dim,):
            raise ContractViolation(f"Upstream must be ({self.output_dim},), got {upstream.shape}")
        grad_features = (self.weight.T @ upstream).reshape(FEATURE_SIZE, FEATURE_SIZE)
        grad_luma = area_matrix(arr.shape[0]).T @ grad_features @ area_matrix(arr.shape[1])
        return grad_luma[:, :, None] * _luma_weights(arr.shape[2])[None, None, :]

    def save(self, path: PathLike) -> Path:
        """Write a flat binary checkpoint: magic, version, JSON header, weight, bias."""
        header = dict(self.metadata)
        header.update(
            {
                "model": type(self).__name__,
                "output_dim": self.output_dim,
                "feature_size": FEATURE_SIZE,
            }
        )
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            fh.write(_CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", _CHECKPOINT_VERSION, len(header_bytes)))
            fh.write(header_bytes)
            fh.write(self.weight.astype("<f8").tobytes())
            fh.write(self.bias.astype("<f8").tobytes())
        return path

    @staticmethod
    def load(path: PathLike) -> "LinearFeatureModel":
        """Read a checkpoint written by :meth:`save`."""
        raw = Path(path).read_bytes()
        if raw[:4] != _CHECKPOINT_MAGIC:
            raise ModelError(f"{path} is not a wmbench model checkpoint")
        version, header_len = struct.unpack_from("<II", raw, 4)
        if version != _CHECKPOINT_VERSION:
            raise ModelError(f"Unsupported checkpoint version {version}")
        offset = 12 + header_len
        header = json.loads(raw[12:offset].decode("utf-8"))
        k = int(header["output_dim"])
        n_features = int(header["feature_size"]) ** 2
        arrays = np.frombuffer(raw, dtype="<f8", offset=offset)
        if arrays.size != k * n_features + k:
            raise ModelError(f"Checkpoint {path} is truncated")
        weight = arrays[: k * n_features].reshape(k, n_features)
        bias = arrays[k * n_features :]
        metadata = {
            key: value
            for key, value in header.items()
            if key not in ("model", "output_dim", "feature_size")
        }
        cls = SurrogateModel if header.get("model") == "SurrogateModel" else LinearFeatureModel
        return cls(weight.astype(np.float64), bias.astype(np.float64), metadata)


class SurrogateModel(LinearFeatureModel):
    """Two-class logistic surrogate detector; class 1 is the watermarked class."""

    def predict(self, image: ImageLike) -> int:
        logits = self.forward(image)
        return int(logits[1] > logits[0])

    def probability_watermarked(self, image: ImageLike) -> float:
        logits = self.forward(image)
        return float(special.expit(logits[1] - logits[0]))


def toy_encoder(seed: int, output_dim: int) -> LinearFeatureModel:
    """
    Seeded Gaussian linear encoder over the 64x64 luma plane.

    Raises:
        ContractViolation: If ``output_dim < 1``.
    """
    if output_dim < 1:
        raise ContractViolation(f"Output dim must be >= 1, got {output_dim}")
    n_features = FEATURE_SIZE * FEATURE_SIZE
    rng = Rng(seed, "adversarial/toy-encoder")
    weight = rng.generator.normal(0.0, 1.0 / math.sqrt(n_features), size=(output_dim, n_features))
    return LinearFeatureModel(
        weight, np.zeros(output_dim), {"seed": int(seed), "kind": "toy-encoder"}
    )


def check_gradient(
    model: DifferentiableModel,
    image: ImageLike,
    rng: Rng,
    probes: int = 100,
    step: float = 1e-4,
    tolerance: float = GRADIENT_TOLERANCE,
) -> float:
    """
    Compare ``gradient_wrt_input`` with central finite differences.

    Each probe draws a random upstream vector and a random direction and
    compares the directional derivative of ``upstream . forward(x)``.

    Returns:
        The largest relative error observed.

    Raises:
        ModelError: If any probe exceeds ``tolerance``.
    """
    x = _as_array(image)
    out_dim = np.asarray(model.forward(x)).shape[0]
    worst = 0.0
    for _ in range(probes):
        upstream = rng.generator.standard_normal(out_dim)
        direction = rng.generator.standard_normal(x.shape)
        plus = upstream @ model.forward(x + step * direction)
        minus = upstream @ model.forward(x - step * direction)
        numeric = (plus - minus) / (2 * step)
        analytic = float(np.sum(model.gradient_wrt_input(x, upstream) * direction))
        scale = max(abs(numeric), abs(analytic), 1e-12)
        worst = max(worst, abs(numeric - analytic) / scale)
    if worst > tolerance:
        raise ModelError(
            f"{type(model).__name__} gradient differs from finite differences "
            f"(relative error {worst:.3g} > {tolerance:g})"
        )
    return worst


class PgdObjective(str, Enum):
    """What the attack optimizes."""

    MAXIMIZE_EMBEDDING_DISTANCE = "MaximizeEmbeddingDistance"
    TARGETED_CLASSIFICATION = "TargetedClassification"


@dataclass(frozen=True)
class PgdConfig:
    """Budget, step and objective of one PGD run."""

    epsilon: float
    step_size: float
    iterations: int
    objective: PgdObjective
    target_label: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractViolation(f"Epsilon must lie in [0, 1], got {self.epsilon}")
        if self.step_size < 0 or self.iterations < 0:
            raise ContractViolation("Step size and iterations must be non-negative")

    @classmethod
    def embedding(
        cls, epsilon: float, iterations: int = EMBEDDING_ITERATIONS
    ) -> "PgdConfig":
        """Embedding-distance attack defaults for ``epsilon``."""
        return cls(
            epsilon,
            EMBEDDING_STEP_FRACTION * epsilon,
            iterations,
            PgdObjective.MAXIMIZE_EMBEDDING_DISTANCE,
        )

    @classmethod
    def surrogate(
        cls, epsilon: float, target_label: int, iterations: int = SURROGATE_ITERATIONS
    ) -> "PgdConfig":
        """Targeted surrogate-classifier attack defaults for ``epsilon``."""
        return cls(
            epsilon,
            SURROGATE_STEP_FRACTION * epsilon,
            iterations,
            PgdObjective.TARGETED_CLASSIFICATION,
            target_label,
        )


def project(x: np.ndarray, origin: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the L-infinity ball around ``origin`` intersected with ``[0, 1]``."""
    return np.clip(np.clip(x, origin - epsilon, origin + epsilon), 0.0, 1.0)


def _checked_gradient(model: DifferentiableModel, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    grad = np.asarray(model.gradient_wrt_input(x, upstream), dtype=np.float64)
    if grad.shape != x.shape or not np.all(np.isfinite(grad)):
        raise ModelError(f"{type(model).__name__} returned an invalid gradient")
    return grad


def _checked_output(x: np.ndarray, origin: np.ndarray, epsilon: float) -> ImageBuffer:
    if np.max(np.abs(x - origin)) > epsilon + PROJECTION_SLACK or x.min() < 0.0 or x.max() > 1.0:
        raise ModelError("PGD iterate left the projection set")
    return ImageBuffer(x)


def cross_entropy(logits: np.ndarray, target: int) -> float:
    """Softmax cross-entropy of ``logits`` against class ``target``."""
    return float(-special.log_softmax(logits)[target])


def pgd_embedding_attack(
    x: ImageBuffer,
    model: DifferentiableModel,
    cfg: PgdConfig,
    rng: Rng,
    trace: Optional[list[tuple[int, float]]] = None,
) -> ImageBuffer:
    """
    Push ``model``'s features of ``x`` away from their clean value.

    Starts from a uniform perturbation in ``[-eps/2, eps/2]`` and ascends
    ``||f(x_t) - f(x_0)||_2`` with signed steps, projecting after each step.

    Args:
        x: Clean (watermarked) image.
        model: Encoder under attack.
        cfg: Configuration with the embedding-distance objective.
        rng: Random stream for the initial perturbation.
        trace: When given, receives ``(iteration, objective)`` after each step.

    Raises:
        ContractViolation: If ``cfg`` has another objective.
        ModelError: If the model returns a non-finite or misshapen gradient.
    """
    if cfg.objective is not PgdObjective.MAXIMIZE_EMBEDDING_DISTANCE:
        raise ContractViolation(f"Expected the embedding objective, got {cfg.objective.value}")
    origin = x.data
    clean_features = np.asarray(model.forward(origin))
    half = cfg.epsilon / 2.0
    adv = project(origin + rng.generator.uniform(-half, half, size=origin.shape), origin, cfg.epsilon)

    for iteration in range(1, cfg.iterations + 1):
        diff = np.asarray(model.forward(adv)) - clean_features
        norm = float(np.linalg.norm(diff))
        if norm > 0:
            grad = _checked_gradient(model, adv, diff / norm)
            adv = project(adv + cfg.step_size * np.sign(grad), origin, cfg.epsilon)
        if trace is not None:
            trace.append(
                (iteration, float(np.linalg.norm(np.asarray(model.forward(adv)) - clean_features)))
            )
    return _checked_output(adv, origin, cfg.epsilon)


def pgd_targeted_attack(
    x: ImageBuffer,
    model: DifferentiableModel,
    cfg: PgdConfig,
    trace: Optional[list[tuple[int, float]]] = None,
) -> ImageBuffer:
    """
    Descend the cross-entropy of ``model``'s logits toward ``cfg.target_label``.

    Raises:
        ContractViolation: If ``cfg`` is not a targeted configuration.
        ModelError: If the model returns a non-finite or misshapen gradient.
    """
    if cfg.objective is not PgdObjective.TARGETED_CLASSIFICATION or cfg.target_label is None:
        raise ContractViolation("Targeted attack needs the targeted objective and a target label")
    origin = x.data
    adv = origin.copy()
    target = cfg.target_label
    for iteration in range(1, cfg.iterations + 1):
        logits = np.asarray(model.forward(adv))
        upstream = special.softmax(logits)
        upstream[target] -= 1.0
        grad = _checked_gradient(model, adv, upstream)
        adv = project(adv - cfg.step_size * np.sign(grad), origin, cfg.epsilon)
        if trace is not None:
            trace.append((iteration, cross_entropy(np.asarray(model.forward(adv)), target)))
    return _checked_output(adv, origin, cfg.epsilon)


class SurrogateTrainingSetting(str, Enum):
    """Which two image populations the adversary's classifier separates.

    Class 1 always holds images carrying the test-time watermark message;
    class 0 holds clean generated images, real images, or images carrying a
    second message.
    """

    UNWM_VS_WM = "UnWMvsWM"
    REAL_VS_WM = "RealVsWM"
    WM1_VS_WM2 = "WM1vsWM2"

    @property
    def attack_id(self) -> str:
        return {
            SurrogateTrainingSetting.UNWM_VS_WM: "AdvCls-UnWM&WM",
            SurrogateTrainingSetting.REAL_VS_WM: "AdvCls-Real&WM",
            SurrogateTrainingSetting.WM1_VS_WM2: "AdvCls-WM1&WM2",
        }[self]


# Removal pushes every image toward the class without the test-time message
REMOVAL_TARGET = 0


def _split(n: int, fraction: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    order = rng.generator.permutation(n)
    n_val = min(int(math.floor(fraction * n)), n - 1)
    return order[n_val:], order[:n_val]


def train_surrogate(
    setting: SurrogateTrainingSetting,
    negatives: Sequence[ImageBuffer],
    positives: Sequence[ImageBuffer],
    rng: Rng,
    max_epochs: int = 500,
    l2: float = 1e-4,
    validation_fraction: float = 0.2,
) -> SurrogateModel:
    """
    Fit an L2-regularized logistic regression on 64x64 luma features.

    Args:
        setting: Which populations ``negatives`` (class 0) and ``positives``
            (class 1) come from.
        negatives: Class-0 images.
        positives: Class-1 images, carrying the test-time message.
        rng: Random stream for the train/validation split.
        max_epochs: L-BFGS iteration cap.
        l2: Weight decay on the standardized features.
        validation_fraction: Share of each class held out for validation.

    Returns:
        The trained model with ``train_accuracy`` and ``validation_accuracy``
        in its metadata.

    Raises:
        ContractViolation: If a class is empty or image sizes differ.
        DegenerateDataError: If training accuracy does not exceed 60%.
    """
    if not negatives or not positives:
        raise ContractViolation("Both surrogate classes need at least one image")
    shapes = {img.shape for img in (*negatives, *positives)}
    if len(shapes) != 1:
        raise ContractViolation(f"Surrogate images must share one size, got {sorted(shapes)}")

    features = np.stack([downsample_luma(img).ravel() for img in (*negatives, *positives)])
    labels = np.concatenate([np.zeros(len(negatives)), np.ones(len(positives))])

    train_neg, val_neg = _split(len(negatives), validation_fraction, rng.child("split", 0))
    train_pos, val_pos = _split(len(positives), validation_fraction, rng.child("split", 1))
    train_idx = np.concatenate([train_neg, train_pos + len(negatives)])
    val_idx = np.concatenate([val_neg, val_pos + len(negatives)])

    x_train = features[train_idx]
    y_train = labels[train_idx]
    mean = x_train.mean(axis=0)
    scale = float(x_train.std()) or 1.0
    z_train = (x_train - mean) / scale
    n = len(y_train)

    def loss_and_grad(params: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = params[:-1], params[-1]
        s = z_train @ w + b
        residual = special.expit(s) - y_train
        loss = float(np.mean(np.logaddexp(0.0, s) - y_train * s) + 0.5 * l2 * w @ w)
        grad = np.empty_like(params)
        grad[:-1] = z_train.T @ residual / n + l2 * w
        grad[-1] = residual.mean()
        return loss, grad

    result = optimize.minimize(
        loss_and_grad,
        np.zeros(features.shape[1] + 1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_epochs},
    )
    w = result.x[:-1] / scale
    b = result.x[-1] - w @ mean

    def accuracy(idx: np.ndarray) -> Optional[float]:
        if idx.size == 0:
            return None
        predicted = (features[idx] @ w + b) > 0
        return float(np.mean(predicted == (labels[idx] == 1)))

    train_accuracy = accuracy(train_idx)
    validation_accuracy = accuracy(val_idx)
    logger.info(
        "Trained %s surrogate: train accuracy %.3f, validation accuracy %s, %d iterations",
        setting.value,
        train_accuracy,
        "n/a" if validation_accuracy is None else f"{validation_accuracy:.3f}",
        result.nit,
    )
    if train_accuracy is None or train_accuracy <= MIN_SURROGATE_ACCURACY:
        raise DegenerateDataError(
            f"{setting.value} surrogate reached only {train_accuracy:.3f} training accuracy"
        )
    if train_accuracy < TARGET_SURROGATE_ACCURACY:
        logger.warning(
            "%s surrogate stopped at %.3f training accuracy", setting.value, train_accuracy
        )

    weight = np.stack([-w / 2.0, w / 2.0])
    bias = np.array([-b / 2.0, b / 2.0])
    return SurrogateModel(
        weight,
        bias,
        {
            "kind": "surrogate",
            "setting": setting.value,
            "seed": rng.seed,
            "train_accuracy": train_accuracy,
            "validation_accuracy": validation_accuracy,
        },
    )
