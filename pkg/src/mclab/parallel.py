# -*- coding: utf-8 -*-

"""Order preserving process pool with log forwarding."""

import enum
import logging
import logging.handlers
import multiprocessing as mp
import threading
from collections.abc import Callable, Iterable
from typing import Any, TypeVar

log = logging.getLogger(__name__)
ctx = mp.get_context()


A = TypeVar("A")
B = TypeVar("B")


class Control(enum.Enum):
    """Internally used control messages."""

    eol = enum.auto()


# some good reads:
#   Why threads must not be mixed with forked processes:
#     - https://rachelbythebay.com/w/2011/06/07/forked/
#     - https://pythonspeed.com/articles/python-multiprocessing/


def _init_worker(q: mp.Queue, level: int):
    # replace inherited handlers; records travel to the parent
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)

    root.addHandler(logging.handlers.QueueHandler(q))
    root.setLevel(level)


class _LogThread:
    """
    Handle worker log records in the main process.

    Logging is not multiprocess-, but thread-safe. Workers put their
    records into a queue and this thread hands them to the loggers of
    the main process.

    """

    def __init__(self):
        self.q = ctx.Queue()

    def _run(self):
        while True:
            record = self.q.get()
            if record == Control.eol:
                break

            logging.getLogger(record.name).handle(record)

    def start(self):
        self._t = threading.Thread(target=self._run, daemon=True)
        self._t.start()

    def join(self):
        self.q.put(Control.eol)
        self._t.join()


def pmap(
    fn: Callable[[A], B],
    items: Iterable[A],
    threads: int = 1,
    chunksize: int = 1,
) -> list[B]:
    """
    Map a function over items using a process pool.

    The result order always follows the input order so that parallel
    and serial execution produce identical results. With threads <= 1
    (or a single item) everything runs in the calling process.

    Parameters
    ----------
    fn : Callable[[A], B]
        A picklable (module level) function
    items : Iterable[A]
        Picklable arguments
    threads : int
        Number of worker processes
    chunksize : int
        Items handed to a worker at once

    Returns
    -------
    list[B]
        fn applied to each item, in order

    Examples
    --------
    >>> from mclab.parallel import pmap
    >>> pmap(abs, [-1, -2, 3], threads=2)
    [1, 2, 3]

    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    threads = min(threads, len(items))
    log.info(f"pmap: distributing {len(items)} items over {threads} processes")

    logthread = _LogThread()
    level = logging.getLogger().getEffectiveLevel()

    # processes MUST be started before any threads (when forked)
    pool = ctx.Pool(
        processes=threads,
        initializer=_init_worker,
        initargs=(logthread.q, level),
    )

    logthread.start()

    try:
        with pool:
            results: list[Any] = pool.map(fn, items, chunksize=chunksize)
    finally:
        logthread.join()

    return results
