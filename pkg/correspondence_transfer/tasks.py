# correspondence_transfer/tasks.py

import asyncio
import logging
from typing import Callable, List, Sequence, TypeVar

log = logging.getLogger(__name__)

T = TypeVar("T")


async def _bounded(semaphore: asyncio.Semaphore, index: int, job: Callable[[], T]) -> T:
    async with semaphore:
        log.debug(f"Job {index} started")
        result = await asyncio.to_thread(job)
        log.debug(f"Job {index} finished")
        return result


async def gather_jobs(jobs: Sequence[Callable[[], T]], threads: int) -> List[T]:
    """Run blocking jobs on worker threads, at most `threads` at a time; results keep job order."""
    semaphore = asyncio.Semaphore(max(1, threads))
    return list(await asyncio.gather(*(_bounded(semaphore, i, job) for i, job in enumerate(jobs))))


def run_jobs(jobs: Sequence[Callable[[], T]], threads: int = 1) -> List[T]:
    if threads <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    log.info(f"Running {len(jobs)} jobs on up to {threads} threads")
    return asyncio.run(gather_jobs(jobs, threads))
