"""
Worker orchestra.

Background threads fed through queue.Queue:

- Prefetcher: one producer thread runs ahead of the consumer (batch assembly
  and negative sampling while the optimizer steps), bounded by the queue size.
- run_parallel: a pool of workers drains a task queue (per-user retrieval over
  a read-only model) and results come back in input order.
"""

import logging
import queue
import threading

logger = logging.getLogger(__name__)

# --- CONFIG ---
MAX_WORKERS = 32
_DONE = object()


class Prefetcher:
    """
    Iterate `produce(i)` for i in range(n) with up to `depth` results computed ahead.

    Exceptions raised by the producer are re-raised in the consumer.
    """

    def __init__(self, produce, n, depth=4):
        if depth < 1:
            raise ValueError(f"prefetch depth must be >= 1, got {depth}")
        self.produce = produce
        self.n = n
        self.queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._worker, name="prefetch", daemon=True)
        self._thread.start()

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _worker(self):
        try:
            for i in range(self.n):
                if not self._put(("ok", self.produce(i))):
                    return
        except BaseException as e:  # noqa: BLE001 - handed to the consumer
            self._put(("error", e))
            return
        self._put(("ok", _DONE))

    def __iter__(self):
        try:
            while True:
                kind, payload = self.queue.get()
                if kind == "error":
                    raise payload
                if payload is _DONE:
                    return
                yield payload
        finally:
            self.close()

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)


def run_parallel(fn, items, workers=1):
    """
    Apply fn to every item on `workers` threads.

    Returns:
        list: fn(item) in the order of `items`.

    Raises:
        The first exception any worker hit (remaining tasks are skipped).
    """
    items = list(items)
    workers = max(1, min(workers, MAX_WORKERS, len(items) or 1))
    if workers == 1:
        return [fn(item) for item in items]

    tasks = queue.Queue()
    for index, item in enumerate(items):
        tasks.put((index, item))
    results = [None] * len(items)
    errors = []
    lock = threading.Lock()

    def worker():
        while not errors:
            try:
                index, item = tasks.get_nowait()
            except queue.Empty:
                return
            try:
                results[index] = fn(item)
            except Exception as e:  # noqa: BLE001 - re-raised by the caller thread
                with lock:
                    errors.append(e)
            finally:
                tasks.task_done()

    logger.debug("Starting %d workers for %d tasks", workers, len(items))
    threads = [threading.Thread(target=worker, name=f"worker-{i + 1}", daemon=True) for i in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results
