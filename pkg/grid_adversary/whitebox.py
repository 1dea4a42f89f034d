import dataclasses
import pathlib
from collections.abc import Sequence

import numpy as np
import pandas as pd
from loguru import logger

from grid_adversary.config import AttackConfig, WhiteboxAttackName
from grid_adversary.dataset import NormalizationParams, windows_to_frame
from grid_adversary.models import GradientsUnavailableError, StabilityClassifier, input_gradient

GRADIENT_ATTACKS: tuple[WhiteboxAttackName, ...] = ("fgsm", "bim", "pgd")


class AttackError(ValueError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class AdversarialBatch:
    attack: str
    epsilon: float
    original: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    success: np.ndarray
    accuracy: float

    @property
    def max_perturbation(self) -> float:
        return float(np.max(np.abs(self.perturbed - self.original))) if self.original.size else 0.0

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success))


@dataclasses.dataclass(frozen=True)
class SweepPoint:
    epsilon: float
    attack: str
    model: str
    accuracy: float


def _as_batch(windows: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(windows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)

    if values.ndim != 3 or len(values) == 0:
        raise AttackError(f"Expected a non-empty batch of windows, got shape {values.shape}")

    if labels.shape != (len(values),):
        raise AttackError(f"Expected {len(values)} labels, got shape {labels.shape}")

    return values, labels


def _check_epsilon(epsilon: float) -> None:
    if epsilon <= 0:
        raise AttackError(f"epsilon must be positive, got {epsilon}")


def _require_gradients(classifier: StabilityClassifier, attack: str) -> None:
    if not classifier.differentiable:
        raise GradientsUnavailableError(
            f"Gradients unavailable: {attack} needs a differentiable classifier, {classifier.kind} is not"
        )


def _finish(
    attack: str,
    classifier: StabilityClassifier,
    epsilon: float,
    original: np.ndarray,
    perturbed: np.ndarray,
    labels: np.ndarray,
    success: np.ndarray | None = None,
) -> AdversarialBatch:
    predicted = classifier.predict(perturbed)

    # fooled = the prediction no longer matches the ground truth
    if success is None:
        success = predicted != labels

    batch = AdversarialBatch(
        attack=attack,
        epsilon=epsilon,
        original=original,
        perturbed=perturbed,
        labels=labels,
        success=np.asarray(success, dtype=bool),
        accuracy=float(np.mean(predicted == labels)),
    )

    logger.info(
        f"{attack} (epsilon={epsilon:g}) against {classifier.kind}: post-attack accuracy {batch.accuracy:.4f} "
        f"on {len(labels)} windows"
    )

    return batch


def fgsm(classifier: StabilityClassifier, windows: np.ndarray, labels: np.ndarray, epsilon: float) -> AdversarialBatch:
    _check_epsilon(epsilon)
    _require_gradients(classifier, "fgsm")
    original, labels = _as_batch(windows, labels)

    gradient = input_gradient(classifier, original, labels)
    perturbed = np.clip(original + epsilon * np.sign(gradient), 0.0, 1.0)

    return _finish("fgsm", classifier, epsilon, original, perturbed, labels)


def _signed_gradient_steps(
    classifier: StabilityClassifier,
    original: np.ndarray,
    start: np.ndarray,
    labels: np.ndarray,
    config: AttackConfig,
) -> np.ndarray:
    epsilon = config.epsilon
    step_size = config.resolved_step_size
    adversarial = start

    for _ in range(config.iterations):
        gradient = input_gradient(classifier, adversarial, labels)
        adversarial = adversarial + step_size * np.sign(gradient)
        # projection: back into the epsilon ball, then into the valid feature range
        adversarial = np.clip(adversarial, original - epsilon, original + epsilon)
        adversarial = np.clip(adversarial, 0.0, 1.0)

    return adversarial


def bim(
    classifier: StabilityClassifier,
    windows: np.ndarray,
    labels: np.ndarray,
    config: AttackConfig,
) -> AdversarialBatch:
    _require_gradients(classifier, "bim")
    original, labels = _as_batch(windows, labels)

    if config.resolved_step_size * config.iterations < config.epsilon:
        logger.warning(
            f"bim: step_size * iterations ({config.resolved_step_size * config.iterations:g}) "
            f"cannot reach epsilon ({config.epsilon:g})"
        )

    perturbed = _signed_gradient_steps(classifier, original, original, labels, config)

    return _finish("bim", classifier, config.epsilon, original, perturbed, labels)


def pgd(
    classifier: StabilityClassifier,
    windows: np.ndarray,
    labels: np.ndarray,
    config: AttackConfig,
) -> AdversarialBatch:
    _require_gradients(classifier, "pgd")
    original, labels = _as_batch(windows, labels)

    start = original
    if config.random_start:
        rng = np.random.default_rng(config.seed)
        start = np.clip(original + rng.uniform(-config.epsilon, config.epsilon, size=original.shape), 0.0, 1.0)

    perturbed = _signed_gradient_steps(classifier, original, start, labels, config)

    return _finish("pgd", classifier, config.epsilon, original, perturbed, labels)


def random_noise_attack(
    classifier: StabilityClassifier,
    windows: np.ndarray,
    labels: np.ndarray,
    epsilon: float,
    attempts: int = 50,
    *,
    seed: int = 0,
    project: bool = False,
) -> AdversarialBatch:
    _check_epsilon(epsilon)

    if attempts < 0:
        raise AttackError(f"attempts must be >= 0, got {attempts}")

    original, labels = _as_batch(windows, labels)
    rng = np.random.default_rng(seed)

    clean_predictions = classifier.predict(original)
    perturbed = original.copy()
    flipped = np.zeros(len(original), dtype=bool)
    eligible = clean_predictions == labels

    # one full-batch draw per attempt, so a larger budget extends the same random stream
    for attempt in range(attempts):
        noise = epsilon * rng.standard_normal(original.shape)

        # candidates are only clipped to [0, 1] unless the epsilon-ball projection is asked for
        if project:
            noise = np.clip(noise, -epsilon, epsilon)

        pending = np.flatnonzero(eligible & ~flipped)

        if len(pending) == 0:
            logger.debug(f"random_noise: every eligible window flipped after {attempt} attempts")
            break

        candidates = np.clip(original[pending] + noise[pending], 0.0, 1.0)
        newly_flipped = classifier.predict(candidates) != clean_predictions[pending]

        perturbed[pending[newly_flipped]] = candidates[newly_flipped]
        flipped[pending[newly_flipped]] = True

    return _finish("random_noise", classifier, epsilon, original, perturbed, labels, success=flipped)


def run_attack(
    name: WhiteboxAttackName,
    classifier: StabilityClassifier,
    windows: np.ndarray,
    labels: np.ndarray,
    config: AttackConfig,
) -> AdversarialBatch:
    match name:
        case "fgsm":
            return fgsm(classifier, windows, labels, config.epsilon)
        case "bim":
            return bim(classifier, windows, labels, config)
        case "pgd":
            return pgd(classifier, windows, labels, config)
        case "random_noise":
            return random_noise_attack(
                classifier,
                windows,
                labels,
                config.epsilon,
                config.noise_attempts,
                seed=config.seed,
                project=config.noise_projection,
            )
        case _:
            raise AttackError(f"Unknown attack '{name}', must be one of fgsm, bim, pgd, random_noise")


def epsilon_sweep(
    classifier: StabilityClassifier,
    windows: np.ndarray,
    labels: np.ndarray,
    attack: WhiteboxAttackName,
    epsilons: Sequence[float],
    config: AttackConfig | None = None,
) -> list[SweepPoint]:
    if not epsilons:
        raise AttackError("The epsilon sweep needs at least one epsilon")

    if list(epsilons) != sorted(epsilons):
        raise AttackError(f"Epsilons must be sorted ascending, got {list(epsilons)}")

    config = config or AttackConfig()

    logger.info(f"Sweeping {attack} against {classifier.kind} over {len(epsilons)} epsilon values")

    points = []
    for epsilon in epsilons:
        batch = run_attack(attack, classifier, windows, labels, config.model_copy(update={"epsilon": epsilon}))
        points.append(
            SweepPoint(epsilon=float(epsilon), attack=attack, model=str(classifier.kind), accuracy=batch.accuracy)
        )

    return points


def sweep_to_frame(points: Sequence[SweepPoint]) -> pd.DataFrame:
    return pd.DataFrame(
        [dataclasses.astuple(point) for point in points],
        columns=["epsilon", "attack", "model", "accuracy"],
    )


def write_sweep_csv(points: Sequence[SweepPoint], path: pathlib.Path) -> pathlib.Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    sweep_to_frame(points).to_csv(path, index=False)

    logger.info(f"Wrote {len(points)} sweep points to {path}")

    return path


def adversarial_to_frame(batch: AdversarialBatch, params: NormalizationParams) -> pd.DataFrame:
    return windows_to_frame(batch.perturbed, params, batch.labels, {"success": batch.success})
