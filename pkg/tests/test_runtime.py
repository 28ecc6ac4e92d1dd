import threading

import pytest

from skewps.runtime import Future, SimRuntime, ThreadRuntime, gather, resolved


class TestSimRuntime:
    def test_virtual_time_ordering(self):
        rt = SimRuntime()
        order = []
        rt.call_later(30.0, lambda: order.append("c"))
        rt.call_later(10.0, lambda: order.append("a"))
        rt.call_later(20.0, lambda: order.append("b"))
        rt.run_until_idle()
        assert order == ["a", "b", "c"]
        assert rt.now_us() == 30.0

    def test_same_time_fifo(self):
        rt = SimRuntime()
        order = []
        for i in range(5):
            rt.call_at(7.0, lambda i=i: order.append(i))
        rt.run_until_idle()
        assert order == [0, 1, 2, 3, 4]

    def test_cancel(self):
        rt = SimRuntime()
        fired = []
        handle = rt.call_later(5.0, lambda: fired.append(1))
        handle.cancel()
        rt.run_until_idle()
        assert not fired

    def test_coroutine_awaits_future(self):
        rt = SimRuntime()
        fut = rt.create_future()

        async def body():
            value = await fut
            return value + 1

        task = rt.spawn(body())
        rt.call_later(10.0, lambda: fut.set_result(41))
        assert rt.run_until(task.future) == 42

    def test_resolved_future_fast_path_no_suspension(self):
        rt = SimRuntime()

        async def body():
            total = 0
            for i in range(10):
                total += await resolved(i)
            return total

        task = rt.spawn(body())
        rt.run_until_idle()
        assert task.future.result() == 45

    def test_sleep_advances_clock(self):
        rt = SimRuntime()

        async def body():
            await rt.sleep(100.0)
            return rt.now_us()

        task = rt.spawn(body())
        assert rt.run_until(task.future) == 100.0

    def test_gather_collects_in_order(self):
        rt = SimRuntime()
        futs = [rt.create_future() for _ in range(3)]

        async def body():
            return await gather(futs)

        task = rt.spawn(body())
        rt.call_later(3.0, lambda: futs[2].set_result("c"))
        rt.call_later(1.0, lambda: futs[0].set_result("a"))
        rt.call_later(2.0, lambda: futs[1].set_result("b"))
        assert rt.run_until(task.future) == ["a", "b", "c"]

    def test_exception_propagates_into_coroutine(self):
        rt = SimRuntime()
        fut = rt.create_future()

        async def body():
            try:
                await fut
            except RuntimeError as exc:
                return f"caught {exc}"

        task = rt.spawn(body())
        rt.call_later(1.0, lambda: fut.set_exception(RuntimeError("boom")))
        assert rt.run_until(task.future) == "caught boom"

    def test_run_until_idle_detects_livelock(self):
        rt = SimRuntime()

        def respawn():
            rt.call_soon(respawn)

        rt.call_soon(respawn)
        with pytest.raises(RuntimeError):
            rt.run_until_idle(max_events=1000)

    def test_future_single_assignment(self):
        fut = Future()
        fut.set_result(1)
        with pytest.raises(RuntimeError):
            fut.set_result(2)


class TestThreadRuntime:
    def test_spawn_drives_coroutine_with_blocking_waits(self):
        rt = ThreadRuntime()
        try:
            fut = rt.create_future()

            async def body():
                return await fut + 1

            done = rt.spawn(body())
            threading.Timer(0.02, lambda: fut.set_result(9)).start()
            assert done.wait(5.0) == 10
        finally:
            rt.close()

    def test_timers_fire(self):
        rt = ThreadRuntime()
        try:
            event = threading.Event()
            rt.call_later(10_000.0, event.set)  # 10 ms
            assert event.wait(5.0)
        finally:
            rt.close()

    def test_exception_surfaces(self):
        rt = ThreadRuntime()
        try:

            async def body():
                raise ValueError("bad")

            done = rt.spawn(body())
            with pytest.raises(ValueError):
                done.wait(5.0)
        finally:
            rt.close()
