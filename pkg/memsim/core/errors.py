class SimulationError(Exception):
    """Базовая ошибка симулятора."""

    def __init__(self, message: str = "Simulation error"):
        self.message = message
        super().__init__(self.message)


class ConfigError(SimulationError):
    """Некорректная конфигурация машины или сценария."""


class CheckFailed(SimulationError):
    """Не выполнено приемочное условие эксперимента (--check)."""
