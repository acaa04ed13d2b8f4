import sys
from loguru import logger
from app.config.config import settings

logger.remove()
if settings.LOG_DIR:
    logger.add(settings.LOG_DIR, level=settings.LOG_LEVEL)
logger.add(sys.stderr, level=settings.LOG_LEVEL)
