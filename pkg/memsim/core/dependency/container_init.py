from memsim.core.config import settings
from memsim.core.dependency.container import DependencyContainer
from memsim.services.experiments import Explorer


# Кэшируем, чтобы не пересоздавался при каждом вызове в рамках одного процесса
_container: DependencyContainer | None = None


def init_container(reuse: bool = True, explorer: Explorer | None = None) -> DependencyContainer:
    global _container
    if _container is not None and reuse:
        return _container

    _container = DependencyContainer(settings=settings, explorer=explorer)
    return _container
