"""Execution runtimes: a deterministic virtual-time event loop and a
wall-clock thread runtime with the same surface.

Worker logic is written as coroutines that ``await`` futures produced by the
parameter API.  Under :class:`SimRuntime` everything runs single-threaded on
a virtual clock, so a seeded run replays bit-for-bit.  Under
:class:`ThreadRuntime` each worker coroutine is driven by a real thread that
blocks on unresolved futures, which is what the socket transport needs.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Any, Callable, Coroutine


class Future:
    """Single-assignment result container awaitable from worker coroutines.

    The default is single-threaded (simulated runtime).  ``threadsafe=True``
    adds a lock and a wakeup event so resolver and waiter may be different
    threads (thread runtime)."""

    __slots__ = ("_done", "_result", "_callbacks", "_event", "_lock")

    def __init__(self, threadsafe: bool = False):
        self._done = False
        self._result = None
        self._callbacks: list[Callable[[Future], None]] = []
        self._lock = threading.Lock() if threadsafe else None
        self._event = threading.Event() if threadsafe else None

    @property
    def threadsafe(self) -> bool:
        return self._lock is not None

    def done(self) -> bool:
        return self._done

    def result(self):
        if not self._done:
            raise RuntimeError("future is not resolved")
        if isinstance(self._result, BaseException):
            raise self._result
        return self._result

    def set_result(self, value=None) -> None:
        if self._lock is None:
            if self._done:
                raise RuntimeError("future already resolved")
            self._result = value
            self._done = True
            callbacks, self._callbacks = self._callbacks, []
        else:
            with self._lock:
                if self._done:
                    raise RuntimeError("future already resolved")
                self._result = value
                self._done = True
                callbacks, self._callbacks = self._callbacks, []
            self._event.set()
        for cb in callbacks:
            cb(self)

    def set_exception(self, exc: BaseException) -> None:
        self.set_result(exc)

    def add_done_callback(self, cb: Callable[[Future], None]) -> None:
        if self._lock is None:
            if self._done:
                cb(self)
            else:
                self._callbacks.append(cb)
            return
        with self._lock:
            if not self._done:
                self._callbacks.append(cb)
                return
        cb(self)

    def wait(self, timeout: float | None = None):
        """Block a real thread until resolved (thread runtime only)."""
        if self._done:
            return self.result()
        if self._event is None:
            raise RuntimeError("future is not thread-safe")
        if not self._event.wait(timeout):
            raise TimeoutError("timed out waiting for future")
        return self.result()

    def __await__(self):
        if not self._done:
            yield self
        if isinstance(self._result, BaseException):
            raise self._result
        return self._result


def resolved(value=None) -> Future:
    fut = Future()
    fut.set_result(value)
    return fut


def gather(futures: list[Future]) -> Future:
    """Future resolving with the list of results once every input resolves;
    thread-safe whenever any input is."""
    out = Future(threadsafe=any(f.threadsafe for f in futures))
    if not futures:
        out.set_result([])
        return out
    lock = threading.Lock() if out.threadsafe else None
    remaining = [len(futures)]
    results: list[Any] = [None] * len(futures)

    def _make(i):
        def _cb(f: Future):
            results[i] = f.result()
            if lock is None:
                remaining[0] -= 1
                last = remaining[0] == 0
            else:
                with lock:
                    remaining[0] -= 1
                    last = remaining[0] == 0
            if last:
                out.set_result(results)

        return _cb

    for i, f in enumerate(futures):
        f.add_done_callback(_make(i))
    return out


class Task:
    """Drives a coroutine over futures; used by both runtimes via subclassing."""

    def __init__(self, coro: Coroutine):
        self._coro = coro
        self.future = Future()

    def start(self) -> None:
        self._step(None)

    def _step(self, value) -> None:
        while True:
            try:
                fut = self._coro.send(value)
            except StopIteration as stop:
                self.future.set_result(stop.value)
                return
            if fut.done():
                try:
                    value = fut.result()
                except BaseException as exc:  # propagate into the coroutine
                    self._throw(exc)
                    return
                continue
            fut.add_done_callback(self._on_resolved)
            return

    def _on_resolved(self, fut: Future) -> None:
        try:
            value = fut.result()
        except BaseException as exc:
            self._throw(exc)
            return
        self._step(value)

    def _throw(self, exc: BaseException) -> None:
        try:
            self._coro.throw(exc)
        except StopIteration as stop:
            self.future.set_result(stop.value)
        except BaseException as err:
            self.future.set_exception(err)
        else:
            # Coroutine swallowed the error and suspended again; keep driving.
            pass


class TimerHandle:
    __slots__ = ("when", "seq", "fn", "cancelled")

    def __init__(self, when: float, seq: int, fn: Callable[[], None]):
        self.when = when
        self.seq = seq
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def __lt__(self, other: "TimerHandle") -> bool:
        return (self.when, self.seq) < (other.when, other.seq)


class SimRuntime:
    """Deterministic single-threaded event loop over virtual microseconds."""

    def __init__(self):
        self._now = 0.0
        self._queue: list[TimerHandle] = []
        self._seq = itertools.count()

    def now_us(self) -> float:
        return self._now

    def call_at(self, when: float, fn: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle(max(when, self._now), next(self._seq), fn)
        heapq.heappush(self._queue, handle)
        return handle

    def call_later(self, delay_us: float, fn: Callable[[], None]) -> TimerHandle:
        return self.call_at(self._now + max(delay_us, 0.0), fn)

    def call_soon(self, fn: Callable[[], None]) -> TimerHandle:
        return self.call_at(self._now, fn)

    def create_future(self) -> Future:
        return Future()

    def sleep(self, delay_us: float) -> Future:
        fut = Future()
        self.call_later(delay_us, fut.set_result)
        return fut

    def spawn(self, coro: Coroutine) -> Task:
        task = Task(coro)
        self.call_soon(task.start)
        return task

    def run_until_idle(self, max_events: int = 100_000_000) -> int:
        """Process events until the queue drains; returns the event count."""
        processed = 0
        while self._queue:
            handle = heapq.heappop(self._queue)
            if handle.cancelled:
                continue
            if processed >= max_events:
                raise RuntimeError("event budget exhausted; likely a livelock")
            self._now = max(self._now, handle.when)
            handle.fn()
            processed += 1
        return processed

    def run_until(self, fut: Future, max_events: int = 100_000_000) -> Any:
        processed = 0
        while not fut.done():
            if not self._queue:
                raise RuntimeError("event queue drained but future unresolved")
            handle = heapq.heappop(self._queue)
            if handle.cancelled:
                continue
            if processed >= max_events:
                raise RuntimeError("event budget exhausted; likely a livelock")
            self._now = max(self._now, handle.when)
            handle.fn()
            processed += 1
        return fut.result()


class ThreadRuntime:
    """Wall-clock runtime: timers on a dedicated thread, workers on threads."""

    def __init__(self):
        self._t0 = time.monotonic()
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._queue: list[TimerHandle] = []
        self._seq = itertools.count()
        self._closed = False
        self._timer_thread = threading.Thread(target=self._timer_loop, daemon=True)
        self._timer_thread.start()
        self._worker_threads: list[threading.Thread] = []

    def now_us(self) -> float:
        return (time.monotonic() - self._t0) * 1e6

    def call_later(self, delay_us: float, fn: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle(self.now_us() + max(delay_us, 0.0), next(self._seq), fn)
        with self._cond:
            heapq.heappush(self._queue, handle)
            self._cond.notify()
        return handle

    def call_at(self, when: float, fn: Callable[[], None]) -> TimerHandle:
        return self.call_later(when - self.now_us(), fn)

    def call_soon(self, fn: Callable[[], None]) -> TimerHandle:
        return self.call_later(0.0, fn)

    def create_future(self) -> Future:
        return Future(threadsafe=True)

    def sleep(self, delay_us: float) -> Future:
        fut = self.create_future()
        self.call_later(delay_us, fut.set_result)
        return fut

    def spawn(self, coro: Coroutine) -> Future:
        done = self.create_future()

        def _drive():
            value = None
            try:
                while True:
                    try:
                        fut = coro.send(value)
                    except StopIteration as stop:
                        done.set_result(stop.value)
                        return
                    value = fut.wait() if not fut.done() else fut.result()
            except BaseException as exc:
                done.set_exception(exc)

        thread = threading.Thread(target=_drive, daemon=True)
        self._worker_threads.append(thread)
        thread.start()
        return done

    def _timer_loop(self) -> None:
        while True:
            with self._cond:
                while not self._closed and (
                    not self._queue or self._queue[0].when > self.now_us()
                ):
                    if self._closed:
                        break
                    timeout = None
                    if self._queue:
                        timeout = max(self._queue[0].when - self.now_us(), 0.0) / 1e6
                    self._cond.wait(timeout)
                if self._closed:
                    return
                handle = heapq.heappop(self._queue)
            if not handle.cancelled:
                handle.fn()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
