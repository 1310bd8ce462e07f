"""Elastic asynchronous reward service.

Decode and scoring run as separate worker pools in a producer-consumer
pipeline: decode of item k+1 overlaps scoring of item k, hand-off through a
bounded channel. Enqueue returns a fresh UUID immediately; results are polled.
Multiple scorers for one item run concurrently. A crashed task is marked error
and the service keeps going.

Built-in stand-in scorers and their ranges:
  brightness   -> visual_quality in [-max(target, 1-target), 0]; 0 = on target
  motion       -> motion_quality in (-inf, 0]; negative mean squared
                  second temporal difference (0 = perfectly smooth)
  checkerboard -> text_alignment in [-1, 1]; correlation of the mean frame
                  with a checkerboard pattern
"""
from __future__ import annotations

import json
import os
import queue
import threading
import uuid as uuid_mod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

AXES = ("text_alignment", "motion_quality", "visual_quality")


class TaskStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    ERROR = "error"


def breakdown(**axes) -> dict[str, float]:
    out = {axis: float(axes.get(axis, 0.0)) for axis in AXES}
    out["sum"] = float(sum(out[a] for a in AXES))
    return out


def _merge_axes(parts: Sequence[dict[str, float]]) -> dict[str, float]:
    merged = {axis: 0.0 for axis in AXES}
    for part in parts:
        for axis, value in part.items():
            if axis not in merged:
                raise ValueError(f"unknown reward axis {axis!r}")
            merged[axis] += float(value)
    return breakdown(**merged)


# -- built-in scorers: video (T, C, H, W) -> partial axis dict ----------------


def brightness_scorer(target: float = 0.7) -> Callable[[np.ndarray], dict]:
    def score(video: np.ndarray) -> dict:
        return {"visual_quality": -abs(float(video.mean()) - target)}

    return score


def motion_scorer(video: np.ndarray) -> dict:
    if video.shape[0] < 3:
        return {"motion_quality": 0.0}
    accel = np.diff(video, n=2, axis=0)
    return {"motion_quality": -float((accel ** 2).mean())}


def checkerboard_scorer(video: np.ndarray) -> dict:
    mean_frame = video.mean(axis=(0, 1))
    hh, ww = mean_frame.shape
    yy, xx = np.meshgrid(np.arange(hh), np.arange(ww), indexing="ij")
    pattern = ((yy + xx) % 2 * 2 - 1).astype(np.float64)
    centered = mean_frame - mean_frame.mean()
    denom = np.linalg.norm(centered) * np.linalg.norm(pattern)
    corr = 0.0 if denom == 0 else float((centered * pattern).sum() / denom)
    return {"text_alignment": corr}


def default_scorers() -> dict[str, Callable[[np.ndarray], dict]]:
    return {
        "brightness": brightness_scorer(),
        "motion": motion_scorer,
        "checkerboard": checkerboard_scorer,
    }


@dataclass
class RewardTask:
    uuid: str
    payload: list
    reward_types: list[str]
    status: TaskStatus = TaskStatus.PENDING
    results: list[dict] | None = None
    error: str | None = None
    _decoded: list = field(default_factory=list, repr=False)


class RewardService:
    """In-process pipelined service; `decode_fn` maps one raw payload item to a
    (T, C, H, W) video array."""

    def __init__(self, decode_fn: Callable | None = None,
                 scorers: dict[str, Callable] | None = None,
                 decode_workers: int = 1, score_workers: int = 2,
                 channel_capacity: int = 8, result_dir: str | None = None):
        self.decode_fn = decode_fn or (lambda item: np.asarray(item, dtype=np.float32))
        self.scorers = scorers if scorers is not None else default_scorers()
        self._intake: queue.Queue = queue.Queue()  # unbounded task backlog
        self._decoded: queue.Queue = queue.Queue(maxsize=channel_capacity)
        self._tasks: dict[str, RewardTask] = {}
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._result_dir = Path(result_dir) if result_dir else None
        if self._result_dir:
            self._result_dir.mkdir(parents=True, exist_ok=True)
        threads = int(os.environ.get("WORLDFLOW_THREADS", "0"))
        if threads > 0:
            decode_workers = min(decode_workers, threads)
            score_workers = min(score_workers, threads)
        self._score_pool = ThreadPoolExecutor(max_workers=max(2, score_workers),
                                              thread_name_prefix="score-fan")
        self._workers = [
            threading.Thread(target=self._decode_loop, daemon=True, name=f"decode-{i}")
            for i in range(decode_workers)
        ] + [
            threading.Thread(target=self._score_loop, daemon=True, name=f"score-{i}")
            for i in range(score_workers)
        ]
        for w in self._workers:
            w.start()

    # -- public API -----------------------------------------------------------

    def enqueue(self, payload: Sequence, reward_types: Sequence[str]) -> str:
        """Register a batch task and return its UUID immediately."""
        reward_types = list(reward_types)
        if not reward_types:
            raise ValueError("reward_types must not be empty")
        unknown = [r for r in reward_types if r not in self.scorers]
        if unknown:
            raise ValueError(f"unknown reward types: {unknown}")
        if self._stop.is_set():
            raise RuntimeError("service is shut down")
        task = RewardTask(uuid=str(uuid_mod.uuid4()), payload=list(payload),
                          reward_types=reward_types)
        with self._lock:
            self._tasks[task.uuid] = task
        self._intake.put(task.uuid)
        return task.uuid

    def poll(self, uuid: str):
        """Non-blocking status read; results are immutable once done."""
        with self._lock:
            task = self._tasks.get(uuid)
            if task is None:
                raise KeyError(f"unknown task uuid {uuid!r}")
            if task.status == TaskStatus.DONE:
                return task.status.value, task.results
            if task.status == TaskStatus.ERROR:
                return task.status.value, task.error
            return task.status.value, None

    def drain(self, timeout: float = 30.0) -> None:
        """Block until every accepted task reaches done or error."""
        import time

        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                busy = [t for t in self._tasks.values()
                        if t.status in (TaskStatus.PENDING, TaskStatus.RUNNING)]
            if not busy:
                return
            time.sleep(0.002)
        raise TimeoutError("tasks still pending at drain timeout")

    def shutdown(self, drain: bool = True) -> None:
        if drain:
            self.drain()
        self._stop.set()
        for _ in self._workers:
            self._intake.put(None)
            try:
                self._decoded.put_nowait(None)
            except queue.Full:
                pass
        self._score_pool.shutdown(wait=False)

    # -- pipeline stages -------------------------------------------------------

    def _decode_loop(self) -> None:
        while not self._stop.is_set():
            uid = self._intake.get()
            if uid is None:
                return
            with self._lock:
                task = self._tasks[uid]
                task.status = TaskStatus.RUNNING
            try:
                task._decoded = [self.decode_fn(item) for item in task.payload]
            except Exception as exc:  # poisoned item: isolate, keep serving
                self._fail(task, f"decode failed: {exc}")
                continue
            self._decoded.put(uid)

    def _score_loop(self) -> None:
        while not self._stop.is_set():
            uid = self._decoded.get()
            if uid is None:
                return
            with self._lock:
                task = self._tasks[uid]
            try:
                results = []
                for video in task._decoded:
                    futures = [self._score_pool.submit(self.scorers[name], video)
                               for name in task.reward_types]
                    results.append(_merge_axes([f.result() for f in futures]))
            except Exception as exc:
                self._fail(task, f"scoring failed: {exc}")
                continue
            with self._lock:
                task.results = results
                task.status = TaskStatus.DONE
                task._decoded = []
            self._persist(task)

    def _fail(self, task: RewardTask, message: str) -> None:
        with self._lock:
            task.error = message
            task.status = TaskStatus.ERROR
            task._decoded = []
        self._persist(task)

    def _persist(self, task: RewardTask) -> None:
        if self._result_dir is None:
            return
        record = {"uuid": task.uuid, "status": task.status.value,
                  "results": task.results, "error": task.error}
        (self._result_dir / f"{task.uuid}.json").write_text(json.dumps(record))


class LocalRewardClient:
    """Adapter giving grpo the enqueue/poll surface over an in-process service."""

    def __init__(self, service: RewardService, reward_types: Sequence[str]):
        self.service = service
        self.default_types = list(reward_types)

    def enqueue(self, videos, reward_types=None) -> str:
        return self.service.enqueue(videos, reward_types or self.default_types)

    def poll(self, uuid: str):
        return self.service.poll(uuid)


class HttpRewardClient:
    """Same surface over the HTTP wire protocol."""

    def __init__(self, base_url: str, reward_types: Sequence[str]):
        self.base_url = base_url.rstrip("/")
        self.default_types = list(reward_types)

    def enqueue(self, videos, reward_types=None) -> str:
        import requests

        from .tensorio import pack_b64

        items = [pack_b64(np.asarray(v, dtype=np.float32)) for v in videos]
        resp = requests.post(f"{self.base_url}/v1/tasks",
                             json={"items": items,
                                   "reward_types": list(reward_types or self.default_types)})
        resp.raise_for_status()
        return resp.json()["uuid"]

    def poll(self, uuid: str):
        import requests

        resp = requests.get(f"{self.base_url}/v1/tasks/{uuid}")
        resp.raise_for_status()
        body = resp.json()
        if body["status"] == "error":
            return body["status"], body.get("error")
        return body["status"], body.get("results")


def build_app(service: RewardService):
    """FastAPI wrapper exposing the wire protocol."""
    from fastapi import FastAPI, HTTPException
    from pydantic import BaseModel

    from .tensorio import load_item

    class TaskRequest(BaseModel):
        items: list[str]
        reward_types: list[str]

    app = FastAPI(title="worldflow reward service")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/v1/tasks")
    def create_task(req: TaskRequest):
        try:
            uid = service.enqueue([load_item(i) for i in req.items], req.reward_types)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"uuid": uid}

    @app.get("/v1/tasks/{uuid}")
    def get_task(uuid: str):
        try:
            status, payload = service.poll(uuid)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown task uuid")
        body = {"uuid": uuid, "status": status}
        if status == "done":
            body["results"] = payload
        elif status == "error":
            body["error"] = payload
        return body

    return app


def serve(port: int, workers: int, decode_fn=None, result_dir=None) -> None:
    import uvicorn

    service = RewardService(decode_fn=decode_fn, decode_workers=max(1, workers // 2),
                            score_workers=max(1, workers - workers // 2),
                            result_dir=result_dir)
    uvicorn.run(build_app(service), host="127.0.0.1", port=port, log_level="warning")
