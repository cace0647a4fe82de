import logging
import sys

import structlog

from memsim.core.config import settings


def setup_logging(debug: bool | None = None, level: str | None = None):
    """Настройка базового логгирования через structlog.

    Args:
        debug: Человекочитаемый вывод вместо JSON (по умолчанию из настроек)
        level: Уровень логирования (по умолчанию из настроек)
    """
    debug = settings.logging.debug if debug is None else debug
    level_no = logging.getLevelName((level or settings.logging.level).upper())
    if not isinstance(level_no, int):
        level_no = logging.INFO

    # Логи пишем в stderr: stdout занят отчетами CLI
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=level_no,
    )

    processors = [
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.stdlib.add_log_level,
        # Добавляет имя логгера ("sim", "attack", "report")
        structlog.stdlib.add_logger_name,
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
        structlog.processors.UnicodeDecoder(),
        structlog.dev.ConsoleRenderer() if debug else structlog.processors.JSONRenderer(),
    ]

    structlog.configure(
        processors=processors,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.make_filtering_bound_logger(level_no),
        cache_logger_on_first_use=True,
    )


# Ленивые прокси: конфигурация из setup_logging применяется при первом вызове
# События модели железа и планировщика
sim_logger = structlog.get_logger("sim", event_type="simulation")

# События атак и защит
attack_logger = structlog.get_logger("attack", event_type="attack")

# Отчеты и CLI
report_logger = structlog.get_logger("report", event_type="report")
