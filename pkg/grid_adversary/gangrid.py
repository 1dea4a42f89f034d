import collections
import pathlib
import time
from collections.abc import Sequence
from typing import Protocol

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from loguru import logger
from pydantic import BaseModel, Field
from torch import nn

from grid_adversary.config import RLConfig
from grid_adversary.dataset import LABEL_ENCODING, N_FEATURES, NormalizationParams, windows_to_frame
from grid_adversary.oracle import OracleUnavailableError
from grid_adversary.utils import append_jsonl, read_json, write_json

GENERATOR_HIDDEN_UNITS: tuple[int, int] = (128, 256)
GENERATOR_PAYLOAD_NAME = "generator.pt"
GENERATOR_METADATA_NAME = "generator.json"

STABLE_CODE = LABEL_ENCODING["stable"]
UNSTABLE_CODE = LABEL_ENCODING["unstable"]

# Exemplars kept per class for the episode-end surrogate, in batches
EXEMPLAR_POOL_BATCHES = 8


class GanGridError(RuntimeError):
    pass


class GanGridAborted(GanGridError):
    def __init__(self, message: str, traces: list["EpisodeTrace"]) -> None:
        super().__init__(message)
        self.traces = traces


class Oracle(Protocol):
    def score_batch(self, windows: np.ndarray) -> np.ndarray: ...

    def predict_labels(self, windows: np.ndarray) -> list[str]: ...


class Generator(nn.Module):
    def __init__(self, latent_dim: int, window_size: int, seed: int = 0) -> None:
        super().__init__()
        self.latent_dim = latent_dim
        self.window_size = window_size
        self.seed = seed

        first, second = GENERATOR_HIDDEN_UNITS
        self.layers = nn.Sequential(
            nn.Linear(latent_dim, first),
            nn.ReLU(),
            nn.Linear(first, second),
            nn.ReLU(),
            nn.Linear(second, window_size * N_FEATURES),
            # every generated value is a normalized feature in [0, 1]
            nn.Sigmoid(),
        )

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return self.layers(latent).view(-1, self.window_size, N_FEATURES)

    def sample(self, latent: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            windows = self(torch.as_tensor(latent, dtype=torch.float32))

        return windows.numpy().astype(np.float64)


class EpisodeTrace(BaseModel):
    episode: int = Field(ge=0)
    rewards: list[float] = Field(default_factory=list)
    cumulative_rewards: list[float] = Field(default_factory=list)
    td_errors: list[float] = Field(default_factory=list)
    scales: list[float] = Field(default_factory=list)
    batches: int = 0
    probe_batches: int = 0
    # BCE between the oracle scores of the final batch and the targets
    loss_before_update: float | None = None
    surrogate_loss: float | None = None
    # surrogate BCE of the same latent once the generator has been updated
    loss: float | None = None
    exploring_windows: int = 0
    probe_asr: float | None = None
    converged: bool = False
    elapsed_seconds: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.rewards)


class ASRResult(BaseModel):
    batches_sent: int = Field(ge=1)
    batches_fooling: int = Field(ge=0)
    asr: float = Field(ge=0.0, le=1.0)
    window_stable_rate: float = Field(ge=0.0, le=1.0)


class CampaignEstimate(BaseModel):
    batches: int
    probe_batches: int
    episodes: int
    cadence_seconds: float
    estimated_seconds: float
    compute_seconds: float

    @property
    def estimated_minutes(self) -> float:
        return self.estimated_seconds / 60


def init_generator(latent_dim: int, window_size: int, seed: int = 0) -> Generator:
    if latent_dim < 1:
        raise GanGridError(f"latent_dim must be >= 1, got {latent_dim}")

    if window_size < 1:
        raise GanGridError(f"window_size must be >= 1, got {window_size}")

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        generator = Generator(latent_dim, window_size, seed)

    return generator


def compute_asr(batch_labels: Sequence[Sequence[str]]) -> ASRResult:
    # a batch fools the oracle only when every one of its windows is labelled stable
    if len(batch_labels) == 0:
        raise GanGridError("ASR is undefined when no batches were sent")

    batches_fooling = sum(1 for labels in batch_labels if len(labels) > 0 and all(x == "stable" for x in labels))
    n_windows = sum(len(labels) for labels in batch_labels)
    n_stable = sum(1 for labels in batch_labels for label in labels if label == "stable")

    return ASRResult(
        batches_sent=len(batch_labels),
        batches_fooling=batches_fooling,
        asr=batches_fooling / len(batch_labels),
        window_stable_rate=n_stable / n_windows if n_windows else 0.0,
    )


def _episode_targets(config: RLConfig, rng: np.random.Generator) -> np.ndarray:
    if config.target_mode == "random":
        return rng.integers(0, 2, size=config.batch_size).astype(np.float64)

    return np.full(config.batch_size, float(STABLE_CODE))


def _reward(scores: np.ndarray, targets: np.ndarray) -> float:
    # mean agreement with the targets: the stable fraction for hard labels and all-stable targets
    return float(np.mean(1.0 - np.abs(scores - targets)))


def _surrogate_targets(
    windows: np.ndarray,
    scores: np.ndarray,
    targets: np.ndarray,
    pools: dict[int, collections.deque[np.ndarray]],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Target window for every generated window and the mask of windows sent exploring.

    Windows the oracle already scores on target are their own target. The others are pulled towards
    a random exemplar of their target class. While a class has never been seen, all of its windows
    are pulled towards one shared random anchor, which moves the whole batch somewhere new.
    """

    surrogate = windows.copy()
    exploring = np.zeros(len(windows), dtype=bool)
    anchors: dict[int, np.ndarray] = {}

    for i, (score, target) in enumerate(zip(scores, targets, strict=True)):
        if abs(score - target) < 0.5:
            continue

        target_class = int(target)
        pool = pools[target_class]

        if pool:
            surrogate[i] = pool[int(rng.integers(len(pool)))]
            continue

        if target_class not in anchors:
            anchors[target_class] = rng.uniform(0.0, 1.0, size=windows.shape[1:])

        surrogate[i] = anchors[target_class]
        exploring[i] = True

    return surrogate, exploring


def _remember(pools: dict[int, collections.deque[np.ndarray]], windows: np.ndarray, scores: np.ndarray) -> None:
    for window, score in zip(windows, scores, strict=True):
        pools[STABLE_CODE if score >= 0.5 else UNSTABLE_CODE].append(window)


def _probe(
    generator: Generator,
    oracle: Oracle,
    config: RLConfig,
    rng: np.random.Generator,
) -> ASRResult:
    batch_labels = []

    for _ in range(config.probe_batches):
        latent = rng.standard_normal((config.batch_size, generator.latent_dim))
        batch_labels.append(oracle.predict_labels(generator.sample(latent)))

    return compute_asr(batch_labels)


def train_gangrid(
    generator: Generator,
    oracle: Oracle,
    config: RLConfig,
    *,
    trace_path: pathlib.Path | None = None,
) -> tuple[Generator, list[EpisodeTrace]]:
    if generator.window_size != config.window_size:
        raise GanGridError(
            f"The generator emits windows of {generator.window_size} rows, the config expects {config.window_size}"
        )

    latent_seed, probe_seed, target_seed = np.random.SeedSequence(config.seed).spawn(3)
    latent_rng = np.random.default_rng(latent_seed)
    probe_rng = np.random.default_rng(probe_seed)
    target_rng = np.random.default_rng(target_seed)

    optimizer = torch.optim.Adam(generator.parameters(), lr=config.generator_learning_rate)
    pool_size = EXEMPLAR_POOL_BATCHES * config.batch_size
    pools: dict[int, collections.deque[np.ndarray]] = {
        STABLE_CODE: collections.deque(maxlen=pool_size),
        UNSTABLE_CODE: collections.deque(maxlen=pool_size),
    }

    traces: list[EpisodeTrace] = []

    logger.info(
        f"Training the generator for up to {config.episodes} episodes of {config.max_episode_length} steps "
        f"(batch size {config.batch_size}, alpha={config.alpha}, gamma={config.gamma}, "
        f"{config.latent_update} latent update, {config.target_mode} targets)"
    )

    for episode in range(config.episodes):
        started_at = time.perf_counter()
        trace = EpisodeTrace(episode=episode)
        # every episode starts from a fresh latent draw
        latent = latent_rng.standard_normal((config.batch_size, generator.latent_dim))
        targets = _episode_targets(config, target_rng)
        cumulative_reward = 0.0

        try:
            for step in range(config.max_episode_length):
                windows = generator.sample(latent)
                scores = oracle.score_batch(windows)
                trace.batches += 1
                _remember(pools, windows, scores)

                reward = _reward(scores, targets)
                td_error = reward - cumulative_reward
                scale = config.alpha * td_error * config.gamma**step
                cumulative_reward += reward

                trace.rewards.append(reward)
                trace.cumulative_rewards.append(cumulative_reward)
                trace.td_errors.append(td_error)
                trace.scales.append(scale)

                if trace_path is not None:
                    append_jsonl(
                        trace_path,
                        {
                            "event": "step",
                            "episode": episode,
                            "step": step,
                            "reward": reward,
                            "cumulative_reward": cumulative_reward,
                            "td_error": td_error,
                            "scale": scale,
                            "batches": trace.batches,
                        },
                    )

                # terminal state: the whole batch already matches the targets
                if reward >= 1.0:
                    break

                if config.latent_update == "additive":
                    latent = latent + scale * latent_rng.standard_normal(latent.shape)
                else:
                    latent = scale * latent

            generated = generator(torch.as_tensor(latent, dtype=torch.float32))
            final_windows = generated.detach().numpy().astype(np.float64)
            scores = oracle.score_batch(final_windows)
            trace.batches += 1
            _remember(pools, final_windows, scores)

            trace.loss_before_update = float(
                F.binary_cross_entropy(torch.as_tensor(scores, dtype=torch.float64), torch.as_tensor(targets))
            )

            surrogate, exploring = _surrogate_targets(final_windows, scores, targets, pools, target_rng)
            surrogate_tensor = torch.as_tensor(surrogate, dtype=torch.float32)
            surrogate_loss = F.binary_cross_entropy(generated, surrogate_tensor)

            if not torch.isfinite(surrogate_loss):
                raise GanGridError(
                    f"Non-finite generator loss {surrogate_loss.item()} at episode {episode} "
                    f"(oracle loss {trace.loss_before_update:.4f}, {int(exploring.sum())} windows exploring, "
                    f"latent range [{latent.min():.4f}, {latent.max():.4f}])"
                )

            if exploring.any():
                logger.debug(f"Episode {episode}: {int(exploring.sum())} windows pulled towards an exploration anchor")

            optimizer.zero_grad()
            surrogate_loss.backward()
            optimizer.step()

            with torch.no_grad():
                updated = generator(torch.as_tensor(latent, dtype=torch.float32))
                trace.loss = float(F.binary_cross_entropy(updated, surrogate_tensor))

            trace.surrogate_loss = float(surrogate_loss.item())
            trace.exploring_windows = int(exploring.sum())

            probe = _probe(generator, oracle, config, probe_rng)
            trace.probe_batches = probe.batches_sent
            trace.probe_asr = probe.asr
            trace.converged = probe.asr >= config.convergence_threshold
        except OracleUnavailableError as exc:
            trace.elapsed_seconds = time.perf_counter() - started_at
            traces.append(trace)

            if trace_path is not None:
                append_jsonl(trace_path, {"event": "aborted", "episode": episode, "reason": str(exc)})

            raise GanGridAborted(f"Oracle unreachable during episode {episode}: {exc}", traces) from exc

        trace.elapsed_seconds = time.perf_counter() - started_at
        traces.append(trace)

        if trace_path is not None:
            append_jsonl(
                trace_path,
                {
                    "event": "episode_end",
                    "episode": episode,
                    "loss_before_update": trace.loss_before_update,
                    "surrogate_loss": trace.surrogate_loss,
                    "loss": trace.loss,
                    "exploring_windows": trace.exploring_windows,
                    "batches": trace.batches,
                    "probe_batches": trace.probe_batches,
                    "probe_asr": trace.probe_asr,
                    "converged": trace.converged,
                },
            )

        logger.info(
            f"Episode {episode}: {trace.steps} steps, reward {trace.rewards[-1]:.3f}, loss {trace.loss:.4f}, "
            f"probe ASR {trace.probe_asr:.3f}"
        )

        if trace.converged:
            logger.info(
                f"Converged after {episode + 1} episodes and {sum(t.batches for t in traces)} training batches"
            )
            break
    else:
        logger.warning(f"No convergence within {config.episodes} episodes")

    return generator, traces


def generate_batches(generator: Generator, count: int, seed: int, batch_size: int = 32) -> list[np.ndarray]:
    if count <= 0:
        raise GanGridError(f"count must be positive, got {count}")

    rng = np.random.default_rng(seed)

    return [generator.sample(rng.standard_normal((batch_size, generator.latent_dim))) for _ in range(count)]


def evaluate_generator(
    generator: Generator,
    oracle: Oracle,
    count: int,
    seed: int,
    batch_size: int = 32,
) -> tuple[ASRResult, list[np.ndarray]]:
    batches = generate_batches(generator, count, seed, batch_size)
    result = compute_asr([oracle.predict_labels(batch) for batch in batches])

    logger.info(
        f"Generated {count} batches: ASR {result.asr:.4f} ({result.batches_fooling}/{result.batches_sent}), "
        f"window-level stable rate {result.window_stable_rate:.4f}"
    )

    return result, batches


def estimate_campaign_time(traces: Sequence[EpisodeTrace], cadence_seconds: float = 16.0) -> CampaignEstimate:
    # the campaign counts training queries only, probes are reported separately
    if not traces:
        raise GanGridError("Cannot estimate a campaign from empty traces")

    batches = sum(trace.batches for trace in traces)

    if batches == 0:
        raise GanGridError("Cannot estimate a campaign from traces without oracle batches")

    return CampaignEstimate(
        batches=batches,
        probe_batches=sum(trace.probe_batches for trace in traces),
        episodes=len(traces),
        cadence_seconds=cadence_seconds,
        estimated_seconds=batches * cadence_seconds,
        compute_seconds=sum(trace.elapsed_seconds for trace in traces),
    )


def traces_to_frame(traces: Sequence[EpisodeTrace]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "episode": trace.episode,
                "steps": trace.steps,
                "final_reward": trace.rewards[-1] if trace.rewards else None,
                "batches": trace.batches,
                "probe_batches": trace.probe_batches,
                "loss_before_update": trace.loss_before_update,
                "surrogate_loss": trace.surrogate_loss,
                "loss": trace.loss,
                "exploring_windows": trace.exploring_windows,
                "probe_asr": trace.probe_asr,
                "converged": trace.converged,
            }
            for trace in traces
        ]
    )


def generated_to_frame(batches: Sequence[np.ndarray], params: NormalizationParams) -> pd.DataFrame:
    """Generated windows de-normalized into the dataset CSV schema; ``stabf`` holds the target class."""

    windows = np.concatenate(batches)

    batch_index = np.repeat(np.arange(len(batches)), [len(batch) for batch in batches])

    return windows_to_frame(windows, params, np.full(len(windows), STABLE_CODE), {"batch": batch_index})


def save_generator(generator: Generator, directory: pathlib.Path) -> pathlib.Path:
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(generator.state_dict(), directory / GENERATOR_PAYLOAD_NAME)
    write_json(
        directory / GENERATOR_METADATA_NAME,
        {"latent_dim": generator.latent_dim, "window_size": generator.window_size, "seed": generator.seed},
    )

    logger.info(f"Saved generator to {directory}")

    return directory


def load_generator(directory: pathlib.Path) -> Generator:
    metadata_path = directory / GENERATOR_METADATA_NAME

    if not metadata_path.is_file():
        raise GanGridError(f"No generator metadata found at {metadata_path}")

    metadata = read_json(metadata_path)
    generator = Generator(metadata["latent_dim"], metadata["window_size"], metadata["seed"])
    generator.load_state_dict(torch.load(directory / GENERATOR_PAYLOAD_NAME, weights_only=True))

    return generator
