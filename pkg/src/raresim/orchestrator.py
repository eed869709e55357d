"""Run rollout batches on a pool of workers connected over local TCP sockets.

The controller listens on an endpoint; workers (threads, child processes, or
processes started elsewhere with ``raresim worker``) connect to it. Each new
connection is pinged and must answer with the controller's scenario hash
before it receives work. Scheduling is pull-based: a worker holds at most one
task, and its result frame doubles as the request for the next one.

A worker that disconnects while holding a task has that task requeued, at
most ``max_retries`` times. Results land in a slot indexed by task id, so the
returned list is the same for any worker count or completion order.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import os
import selectors
import socket
import threading
import time
from collections import deque

import numpy as np

from . import protocol as P
from ._seeding import derive_seed
from .ce import RolloutError
from .protocol import FrameType, Task, TaskResult

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "RARESIM_ENDPOINT"
WORKERS_ENV = "RARESIM_WORKERS"


class PoolUnavailable(RuntimeError):
    pass


class BatchFailed(RolloutError):
    def __init__(self, results):
        bad = [r for r in results if not r.ok]
        super().__init__(f"{len(bad)} task(s) failed; first: task {bad[0].task_id}: {bad[0].error}")
        self.results = results


def parse_endpoint(text):
    host, _, port = str(text).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {text!r}")
    return host, int(port)


def worker_loop(endpoint, runner):
    """Serve tasks from the controller at ``endpoint`` until it sends shutdown.

    Returns the number of tasks executed.
    """
    sock = socket.create_connection(endpoint)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    done = 0
    try:
        while True:
            try:
                ftype, payload = P.read_frame(sock)
            except ConnectionError:
                return done
            if ftype == FrameType.SHUTDOWN:
                return done
            if ftype == FrameType.PING:
                sock.sendall(P.encode_pong(P.decode_ping(payload), runner.scenario_hash))
            elif ftype == FrameType.TASK:
                task = P.decode_task(payload)
                if task.scenario_hash != runner.scenario_hash:
                    sock.sendall(P.encode_mismatch(task.task_id, runner.scenario_hash))
                    continue
                sock.sendall(P.encode_result(run_task(runner, task)))
                done += 1
            else:
                raise P.ProtocolError(f"worker received unexpected {ftype.name} frame")
    finally:
        sock.close()


def run_task(runner, task: Task) -> TaskResult:
    try:
        return TaskResult(task.task_id, runner.run(task.sample, task.seed))
    except Exception as exc:  # reported in the task's slot, never fatal to the worker
        return TaskResult(task.task_id, error=f"{type(exc).__name__}: {exc}")


def run_serial(tasks, runner):
    """In-process reference implementation of :meth:`WorkerPool.run_batch`."""
    out = []
    for t in tasks:
        if t.scenario_hash != runner.scenario_hash:
            out.append(TaskResult(t.task_id, error="scenario hash mismatch"))
        else:
            out.append(run_task(runner, t))
    return sorted(out, key=lambda r: r.task_id)


def _process_main(endpoint, runner):
    worker_loop(endpoint, runner)


class _SerializedRunner:
    # Shares one lock between worker threads for runners that are not thread safe.
    def __init__(self, runner):
        self._runner = runner
        self._lock = threading.Lock()
        self.scenario_hash = runner.scenario_hash

    def run(self, sample, seed):
        with self._lock:
            return self._runner.run(sample, seed)


class _Conn:
    __slots__ = ("sock", "nonce", "ready", "task")

    def __init__(self, sock, nonce):
        self.sock = sock
        self.nonce = nonce
        self.ready = False
        self.task = None


class WorkerPool:
    """Controller plus ``workers`` locally launched workers.

    ``mode`` is ``"process"`` or ``"thread"``. With ``workers=0`` no worker is
    launched and the pool only serves externally started ones. Use as a
    context manager, or call :meth:`close`.
    """

    def __init__(self, runner, workers=1, mode="process", endpoint=("127.0.0.1", 0),
                 max_retries=2, max_respawns=None, connect_timeout=120.0, start_method="spawn"):
        if workers < 0:
            raise ValueError("workers must be >= 0")
        if mode not in ("process", "thread"):
            raise ValueError("mode must be 'process' or 'thread'")
        self.runner = runner
        self.scenario_hash = runner.scenario_hash
        self.workers = workers
        self.mode = mode
        self.max_retries = max_retries
        self.max_respawns = 2 * workers + 4 if max_respawns is None else max_respawns
        self.connect_timeout = connect_timeout
        self._ctx = mp.get_context(start_method)
        self._listener = socket.create_server(endpoint)
        self._listener.setblocking(False)
        self.endpoint = self._listener.getsockname()[:2]
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._listener, selectors.EVENT_READ, None)
        self._conns: list[_Conn] = []
        self._children = []
        self._respawns = 0
        self._nonce = 0
        self._closed = False
        self._worker_runner = runner
        if mode == "thread" and not getattr(runner, "concurrent_safe", True):
            self._worker_runner = _SerializedRunner(runner)
        for _ in range(workers):
            self._launch()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _launch(self):
        if self.mode == "thread":
            t = threading.Thread(target=self._thread_main, daemon=True)
        else:
            t = self._ctx.Process(target=_process_main, args=(self.endpoint, self.runner), daemon=True)
        t.start()
        self._children.append(t)

    def _thread_main(self):
        try:
            worker_loop(self.endpoint, self._worker_runner)
        except OSError:
            # A pool closed before this thread connected is not an error.
            if not self._closed:
                raise

    def _maybe_respawn(self):
        if self.workers == 0 or self.mode == "thread":
            return
        self._children = [c for c in self._children if c.is_alive()]
        if len(self._children) < self.workers and self._respawns < self.max_respawns:
            self._respawns += 1
            logger.warning("respawning a worker process (%d so far)", self._respawns)
            self._launch()

    def _accept(self):
        while True:
            try:
                sock, _ = self._listener.accept()
            except BlockingIOError:
                return
            sock.setblocking(True)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._nonce += 1
            conn = _Conn(sock, self._nonce)
            self._conns.append(conn)
            self._sel.register(sock, selectors.EVENT_READ, conn)
            sock.sendall(P.encode_ping(conn.nonce))

    def _drop(self, conn, shutdown=False):
        self._sel.unregister(conn.sock)
        if shutdown:
            try:
                conn.sock.sendall(P.encode_shutdown())
            except OSError:
                pass
        conn.sock.close()
        self._conns.remove(conn)

    def ping(self):
        """Number of workers that passed the handshake so far."""
        self._pump(0.0)
        return sum(c.ready for c in self._conns)

    def wait_ready(self, n=None, timeout=None):
        n = self.workers if n is None else n
        deadline = time.monotonic() + (self.connect_timeout if timeout is None else timeout)
        while sum(c.ready for c in self._conns) < n:
            if time.monotonic() > deadline:
                raise PoolUnavailable(f"only {sum(c.ready for c in self._conns)} of {n} workers connected")
            self._pump(0.05)

    def _pump(self, timeout, on_frame=None, on_lost=None):
        for key, _ in self._sel.select(timeout):
            if key.data is None:
                self._accept()
                continue
            conn = key.data
            try:
                ftype, payload = P.read_frame(conn.sock)
            except (ConnectionError, OSError, P.ProtocolError) as exc:
                logger.info("worker connection lost: %s", exc)
                task = conn.task
                self._drop(conn)
                if task is not None and on_lost is not None:
                    on_lost(task)
                self._maybe_respawn()
                continue
            if ftype == FrameType.PONG:
                nonce, digest = P.decode_pong(payload)
                if nonce != conn.nonce or digest != self.scenario_hash:
                    logger.error("worker rejected: scenario hash %s does not match", digest.hex()[:16])
                    self._drop(conn, shutdown=True)
                else:
                    conn.ready = True
            elif on_frame is not None:
                on_frame(conn, ftype, payload)
            else:
                logger.error("unexpected %s frame outside a batch", ftype.name)
                self._drop(conn, shutdown=True)

    def run_batch(self, tasks):
        """Execute ``tasks`` and return one :class:`TaskResult` per task, sorted by id."""
        if self._closed:
            raise PoolUnavailable("pool is closed")
        tasks = list(tasks)
        if not tasks:
            return []
        index = {t.task_id: i for i, t in enumerate(tasks)}
        if len(index) != len(tasks):
            raise ValueError("task ids must be unique within a batch")
        slots = [None] * len(tasks)
        attempts = [0] * len(tasks)
        pending = deque(range(len(tasks)))
        remaining = len(tasks)
        frames = [None] * len(tasks)
        idle_since = time.monotonic()

        def fill(i, tr):
            nonlocal remaining
            if slots[i] is None:
                slots[i] = tr
                remaining -= 1

        def on_lost(i):
            attempts[i] += 1
            if attempts[i] > self.max_retries:
                fill(i, TaskResult(tasks[i].task_id, error=f"worker died {attempts[i]} times running this task"))
            else:
                pending.appendleft(i)

        def on_frame(conn, ftype, payload):
            i = conn.task
            conn.task = None
            if ftype == FrameType.RESULT:
                tr = P.decode_result(payload)
                if i is None or tasks[i].task_id != tr.task_id:
                    raise P.ProtocolError(f"unexpected result for task {tr.task_id}")
                fill(i, tr)
            elif ftype == FrameType.MISMATCH:
                _, digest = P.decode_mismatch(payload)
                logger.error("worker refused task: scenario hash %s", digest.hex()[:16])
                if i is not None:
                    fill(i, TaskResult(tasks[i].task_id, error="scenario hash mismatch"))
                self._drop(conn, shutdown=True)
            else:
                raise P.ProtocolError(f"unexpected {ftype.name} frame from worker")

        while remaining:
            for conn in list(self._conns):
                if not pending:
                    break
                if conn.ready and conn.task is None:
                    i = pending.popleft()
                    if frames[i] is None:
                        frames[i] = P.encode_task(tasks[i])
                    conn.task = i
                    try:
                        conn.sock.sendall(frames[i])
                    except OSError:
                        conn.task = None
                        pending.appendleft(i)
            busy = any(c.task is not None for c in self._conns)
            if busy or any(c.ready for c in self._conns):
                idle_since = time.monotonic()
            elif not self._alive_children() and self.workers and self._respawns >= self.max_respawns:
                raise PoolUnavailable("all workers are gone and the respawn budget is spent")
            elif time.monotonic() - idle_since > self.connect_timeout:
                raise PoolUnavailable(f"no worker available for {self.connect_timeout:g} s")
            self._pump(0.5, on_frame, on_lost)
            if self.mode == "process" and self.workers:
                self._maybe_respawn()
        return sorted(slots, key=lambda r: r.task_id)

    def _alive_children(self):
        return any(c.is_alive() for c in self._children)

    def close(self):
        if self._closed:
            return
        self._closed = True
        for conn in list(self._conns):
            self._drop(conn, shutdown=True)
        self._sel.close()
        self._listener.close()
        for c in self._children:
            c.join(timeout=10)
            if self.mode == "process" and c.is_alive():
                c.terminate()
                c.join(timeout=5)


def make_tasks(samples, batch_seed, scenario_hash):
    """One task per row; the seed of task ``i`` is ``derive_seed(batch_seed, i)``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    return [Task(i, samples[i], derive_seed(batch_seed, i), scenario_hash) for i in range(samples.shape[0])]


def run_batch(tasks, workers, runner, mode="process", **pool_kw):
    """One-shot convenience wrapper: ``workers=0`` runs in-process."""
    tasks = list(tasks)
    if workers == 0:
        return run_serial(tasks, runner)
    if not tasks:
        return []
    with WorkerPool(runner, workers, mode, **pool_kw) as pool:
        return pool.run_batch(tasks)


class RolloutProvider:
    """Adapter from a runner (serial) or pool to the ``provider(samples, batch_seed)`` callable.

    ``results`` keeps the full :class:`RolloutResult` list of the last batch.
    """

    def __init__(self, runner, pool=None):
        self.runner = runner
        self.pool = pool
        self.results = []

    def __call__(self, samples, batch_seed):
        tasks = make_tasks(samples, batch_seed, self.runner.scenario_hash)
        out = self.pool.run_batch(tasks) if self.pool is not None else run_serial(tasks, self.runner)
        if not all(r.ok for r in out):
            raise BatchFailed(out)
        self.results = [r.result for r in out]
        return np.array([r.min_ttc for r in self.results])


def default_workers():
    raw = os.environ.get(WORKERS_ENV)
    return int(raw) if raw else 0


def default_endpoint():
    raw = os.environ.get(ENDPOINT_ENV)
    return parse_endpoint(raw) if raw else ("127.0.0.1", 0)
