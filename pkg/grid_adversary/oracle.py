import contextlib
import dataclasses
import datetime
import pathlib
import socket
import threading
import time
from collections.abc import Callable, Iterator
from typing import Any, Literal

import httpx
import numpy as np
import uvicorn
from fastapi import FastAPI, HTTPException, Request
from loguru import logger
from pydantic import BaseModel

from grid_adversary.config import OracleConfig
from grid_adversary.dataset import LABEL_ENCODING, N_FEATURES
from grid_adversary.models import ModelError, StabilityClassifier, load_classifier, predict
from grid_adversary.utils import append_jsonl

LabelName = Literal["stable", "unstable"]


class OracleError(RuntimeError):
    pass


class OracleRequestError(OracleError):
    def __init__(self, status_code: int, detail: str) -> None:
        super().__init__(f"Oracle rejected the request ({status_code}): {detail}")
        self.status_code = status_code
        self.detail = detail


class OracleUnavailableError(OracleError):
    pass


class PredictRequest(BaseModel):
    windows: list[list[list[float]]]


class PredictResponse(BaseModel):
    labels: list[LabelName]
    probabilities: list[float] | None = None


class HealthResponse(BaseModel):
    status: str
    model: str


class QueryLedger:
    def __init__(self, log_path: pathlib.Path | None = None) -> None:
        self.log_path = log_path
        self._lock = threading.Lock()
        self.total_requests = 0
        self.total_windows = 0
        self.requests_per_client: dict[str, int] = {}
        self.windows_per_client: dict[str, int] = {}
        self.timestamps: list[float] = []

    def record(self, client: str, n_windows: int) -> None:
        with self._lock:
            now = time.time()
            self.total_requests += 1
            self.total_windows += n_windows
            self.requests_per_client[client] = self.requests_per_client.get(client, 0) + 1
            self.windows_per_client[client] = self.windows_per_client.get(client, 0) + n_windows
            self.timestamps.append(now)

            if self.log_path is not None:
                append_jsonl(
                    self.log_path,
                    {
                        "timestamp": datetime.datetime.fromtimestamp(now, tz=datetime.UTC).isoformat(),
                        "client": client,
                        "windows": n_windows,
                    },
                )

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            return {
                "total_requests": self.total_requests,
                "total_windows": self.total_windows,
                "requests_per_client": dict(self.requests_per_client),
                "windows_per_client": dict(self.windows_per_client),
            }


class CadenceThrottle:
    def __init__(
        self,
        cadence_seconds: float,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.cadence_seconds = cadence_seconds
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._last_response_at: float | None = None

    @contextlib.contextmanager
    def slot(self) -> Iterator[None]:
        with self._lock:
            if self._last_response_at is not None:
                remaining = self.cadence_seconds - (self._clock() - self._last_response_at)

                if remaining > 0:
                    logger.debug(f"Cadence simulation: delaying the response by {remaining:.2f}s")
                    self._sleep(remaining)

            try:
                yield
            finally:
                self._last_response_at = self._clock()


def _validate_windows(windows: Any, window_size: int) -> np.ndarray:
    try:
        values = np.asarray(windows, dtype=np.float64)
    except ValueError as exc:
        raise OracleRequestError(400, "malformed batch: windows must be equally shaped numeric arrays") from exc

    if values.ndim >= 1 and len(values) == 0:
        raise OracleRequestError(400, "empty batch")

    if values.ndim != 3 or values.shape[1:] != (window_size, N_FEATURES):
        raise OracleRequestError(
            400, f"malformed batch: expected windows of shape ({window_size}, {N_FEATURES}), got {values.shape}"
        )

    if not np.isfinite(values).all() or values.min() < 0.0 or values.max() > 1.0:
        raise OracleRequestError(400, "malformed batch: window values must be finite and within [0, 1]")

    return values


def score_windows(classifier: StabilityClassifier, windows: Any, *, labels_only: bool) -> PredictResponse:
    values = _validate_windows(windows, classifier.window_size)

    try:
        prediction = predict(classifier, values)
    except ModelError as exc:
        raise OracleRequestError(400, str(exc)) from exc

    return PredictResponse(
        labels=prediction.label_names,  # type: ignore[arg-type]
        probabilities=None if labels_only else prediction.probabilities.tolist(),
    )


def create_app(
    classifier: StabilityClassifier,
    config: OracleConfig,
    ledger: QueryLedger | None = None,
    throttle: CadenceThrottle | None = None,
) -> FastAPI:
    ledger = ledger if ledger is not None else QueryLedger(config.query_log)

    if throttle is None and config.simulate_cadence:
        throttle = CadenceThrottle(config.cadence_seconds)

    app = FastAPI(title="grid-adversary stability oracle")
    app.state.ledger = ledger
    app.state.config = config

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", model=str(classifier.kind))

    # a sync endpoint runs in the threadpool, so concurrent requests are served concurrently
    @app.post("/predict", response_model=PredictResponse, response_model_exclude_none=True)
    def predict_endpoint(payload: PredictRequest, request: Request) -> PredictResponse:
        client = request.client.host if request.client is not None else "unknown"

        with throttle.slot() if throttle is not None else contextlib.nullcontext():
            try:
                response = score_windows(classifier, payload.windows, labels_only=config.labels_only)
            except OracleRequestError as exc:
                ledger.record(client, 0)
                logger.warning(f"Rejected prediction request from {client}: {exc.detail}")
                raise HTTPException(status_code=exc.status_code, detail=exc.detail) from exc

        ledger.record(client, len(response.labels))
        logger.debug(f"Scored {len(response.labels)} windows for {client}")

        return response

    return app


@dataclasses.dataclass
class OracleService:
    server: uvicorn.Server
    thread: threading.Thread
    host: str
    port: int
    ledger: QueryLedger

    @property
    def endpoint(self) -> str:
        return f"http://{self.host}:{self.port}"

    def shutdown(self, timeout: float = 10.0) -> None:
        logger.info(f"Stopping oracle at {self.endpoint}")
        self.server.should_exit = True
        self.thread.join(timeout)

    def wait(self) -> None:
        try:
            while self.thread.is_alive():
                self.thread.join(0.5)
        finally:
            self.shutdown()


def serve(
    classifier: StabilityClassifier | None,
    config: OracleConfig,
    *,
    startup_timeout: float = 10.0,
) -> OracleService:
    if classifier is None:
        if config.model_dir is None:
            raise OracleError("No classifier given and oracle.model_dir is not set")

        try:
            classifier = load_classifier(config.model_dir)
        except (ModelError, OSError) as exc:
            raise OracleError(f"Failed to load the model artifact from {config.model_dir}: {exc}") from exc

    ledger = QueryLedger(config.query_log)
    app = create_app(classifier, config, ledger)

    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)

    try:
        sock.bind((config.host, config.port))
    except OSError as exc:
        sock.close()
        raise OracleError(f"Failed to bind the oracle to {config.host}:{config.port}: {exc}") from exc

    host, port = sock.getsockname()[:2]
    # log_config=None keeps uvicorn from replacing the handlers installed by configure_logging
    server = uvicorn.Server(uvicorn.Config(app, log_level="warning", log_config=None))
    thread = threading.Thread(target=server.run, kwargs={"sockets": [sock]}, name="oracle-server", daemon=True)
    thread.start()

    deadline = time.monotonic() + startup_timeout
    while not server.started:
        if not thread.is_alive() or time.monotonic() > deadline:
            server.should_exit = True
            raise OracleError(f"Oracle failed to start on {host}:{port}")

        time.sleep(0.05)

    logger.info(
        f"Serving {classifier.kind} oracle at http://{host}:{port} "
        f"(labels_only={config.labels_only}, simulate_cadence={config.simulate_cadence})"
    )

    return OracleService(server=server, thread=thread, host=host, port=port, ledger=ledger)


def _scores_from_labels(labels: list[str]) -> np.ndarray:
    return np.asarray([LABEL_ENCODING[label] for label in labels], dtype=np.float64)


class LocalOracle:
    def __init__(
        self,
        classifier: StabilityClassifier,
        *,
        labels_only: bool = True,
        ledger: QueryLedger | None = None,
        client_id: str = "local",
    ) -> None:
        self._classifier = classifier
        self.labels_only = labels_only
        self.ledger = ledger
        self.client_id = client_id
        self.batches_sent = 0

    @property
    def window_size(self) -> int:
        return self._classifier.window_size

    def _query(self, windows: np.ndarray) -> PredictResponse:
        response = score_windows(self._classifier, windows, labels_only=self.labels_only)
        self.batches_sent += 1

        if self.ledger is not None:
            self.ledger.record(self.client_id, len(response.labels))

        return response

    def predict_labels(self, windows: np.ndarray) -> list[str]:
        return list(self._query(windows).labels)

    def score_batch(self, windows: np.ndarray) -> np.ndarray:
        response = self._query(windows)

        if response.probabilities is not None:
            return np.asarray(response.probabilities, dtype=np.float64)

        return _scores_from_labels(list(response.labels))


class OracleClient:
    """HTTP client for the oracle; retries idempotently on transport errors and 5xx responses."""

    def __init__(
        self,
        endpoint: str | None = None,
        *,
        http_client: httpx.Client | None = None,
        timeout_seconds: float = 30.0,
        max_retries: int = 3,
        backoff_seconds: float = 0.5,
    ) -> None:
        if http_client is None:
            if endpoint is None:
                raise OracleError("Either an endpoint or an http_client is required")

            http_client = httpx.Client(base_url=endpoint, timeout=timeout_seconds)

        self._client = http_client
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self.batches_sent = 0

    def __enter__(self) -> "OracleClient":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def close(self) -> None:
        self._client.close()

    def _request(self, method: str, path: str, **kwargs: Any) -> Any:
        for attempt in range(self.max_retries + 1):
            is_last_attempt = attempt == self.max_retries

            try:
                response = self._client.request(method, path, **kwargs)
            except httpx.TransportError as exc:
                if is_last_attempt:
                    raise OracleUnavailableError(f"Oracle unavailable after {attempt + 1} attempts: {exc}") from exc

                logger.warning(f"Oracle transport error ({exc}), retrying ({attempt + 1}/{self.max_retries})")
                time.sleep(self.backoff_seconds * 2**attempt)
                continue

            if response.status_code >= 500 and not is_last_attempt:
                logger.warning(
                    f"Oracle answered {response.status_code}, retrying ({attempt + 1}/{self.max_retries})"
                )
                time.sleep(self.backoff_seconds * 2**attempt)
                continue

            if 400 <= response.status_code < 500:
                try:
                    detail = response.json().get("detail", response.text)
                except ValueError:
                    detail = response.text

                raise OracleRequestError(response.status_code, str(detail))

            if response.status_code >= 500:
                raise OracleUnavailableError(f"Oracle answered {response.status_code}: {response.text}")

            return response.json()

        raise RuntimeError("invalid branch")

    def health(self) -> dict[str, str]:
        return self._request("GET", "/health")

    def _predict(self, windows: np.ndarray) -> PredictResponse:
        payload = {"windows": np.asarray(windows, dtype=np.float64).tolist()}
        response = PredictResponse.model_validate(self._request("POST", "/predict", json=payload))
        self.batches_sent += 1

        return response

    def predict_labels(self, windows: np.ndarray) -> list[str]:
        return list(self._predict(windows).labels)

    def score_batch(self, windows: np.ndarray) -> np.ndarray:
        """Stable scores per window: probabilities if the oracle exposes them, labels cast to {0, 1} otherwise."""

        response = self._predict(windows)

        if response.probabilities is not None:
            return np.asarray(response.probabilities, dtype=np.float64)

        return _scores_from_labels(list(response.labels))


def predict_remote(endpoint: str, windows: np.ndarray, *, max_retries: int = 3) -> list[str]:
    with OracleClient(endpoint, max_retries=max_retries) as client:
        return client.predict_labels(windows)
