import asyncio
import logging
from typing import Callable, List, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")


async def gather_in_order(funcs: Sequence[Callable[[], T]], jobs: int) -> List[T]:
    """Runs blocking callables on worker threads, at most ``jobs`` at a time."""
    semaphore = asyncio.Semaphore(max(1, jobs))

    async def run(fn: Callable[[], T]) -> T:
        async with semaphore:
            return await asyncio.to_thread(fn)

    # gather keeps submission order, so merged results are deterministic
    return await asyncio.gather(*(run(fn) for fn in funcs))


def run_ordered(funcs: Sequence[Callable[[], T]], jobs: int = 1) -> List[T]:
    if jobs <= 1 or len(funcs) <= 1:
        return [fn() for fn in funcs]
    logger.info(f"Dispatching {len(funcs)} independent jobs on {jobs} workers")
    return asyncio.run(gather_in_order(funcs, jobs))
