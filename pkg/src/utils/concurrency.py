import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

logger = logging.getLogger(__name__)

I = TypeVar("I")
R = TypeVar("R")


async def _gather(fn: Callable[[I], R], items: Sequence[I], workers: int) -> List[R]:
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        tasks = [loop.run_in_executor(pool, fn, item) for item in items]
        return list(await asyncio.gather(*tasks))


def map_in_threads(fn: Callable[[I], R], items: Sequence[I], workers: int = 1) -> List[R]:
    """Apply ``fn`` to every item; results keep item order for any worker count."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    logger.debug(f"Fanning out {len(items)} items over {workers} threads")
    return asyncio.run(_gather(fn, items, workers))
