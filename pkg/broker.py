import asyncio
import os

from taskiq import InMemoryBroker, TaskiqEvents, TaskiqState

from memsim.core.logging import attack_logger
from memsim.schemas.machine import MachineConfig
from memsim.schemas.reports import StrategyReport
from memsim.services.eviction import EvictionStrategy, evaluate_strategy_on_clone, rank_reports


# Каждая задача строит собственную машину, поэтому синхронные задачи можно гонять в пуле потоков
broker = InMemoryBroker(sync_tasks_pool_size=os.cpu_count() or 1)


@broker.on_event(TaskiqEvents.WORKER_STARTUP)
async def startup(state: TaskiqState) -> None:
    attack_logger.debug("Strategy broker started")


@broker.task
def evaluate_strategy(config: dict, strategy: dict, trials: int, seed: int) -> dict:
    report = evaluate_strategy_on_clone(
        MachineConfig.model_validate(config), EvictionStrategy.model_validate(strategy), trials, seed)
    return report.model_dump()


async def explore_parallel(config: MachineConfig, strategies: list[EvictionStrategy], trials: int,
                           seed: int, workers: int) -> list[StrategyReport]:
    """Веерная оценка стратегий; итог упорядочен так же, как при последовательном прогоне."""
    semaphore = asyncio.Semaphore(max(1, workers))
    payload = config.model_dump(mode="json")

    async def evaluate(strategy: EvictionStrategy) -> StrategyReport:
        async with semaphore:
            task = await evaluate_strategy.kiq(payload, strategy.model_dump(), trials, seed)
            result = await task.wait_result()
        if result.is_err:
            attack_logger.error(f"Strategy {strategy.name} failed", error=str(result.error))
            raise result.error
        return StrategyReport.model_validate(result.return_value)

    await broker.startup()
    try:
        attack_logger.info(f"Exploring {len(strategies)} eviction strategies", machine=config.name,
                           trials=trials, workers=workers)
        reports = await asyncio.gather(*(evaluate(strategy) for strategy in strategies))
    finally:
        await broker.shutdown()
    return rank_reports(list(reports))


def explore_with_broker(config: MachineConfig, strategies: list[EvictionStrategy], trials: int, seed: int,
                        workers: int = 2) -> list[StrategyReport]:
    return asyncio.run(explore_parallel(config, strategies, trials, seed, workers))
