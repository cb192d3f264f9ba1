"""Console logging for the ``dualflow`` command line."""

import logging

from rich.logging import RichHandler

# PIL logs every PNG chunk at DEBUG
QUIET_LOGGERS = ("PIL",)


def setup_logging(level: str = "INFO", verbose: bool = False) -> None:
    """Route every record through one Rich handler on stderr.

    ``verbose`` switches to DEBUG and shows the emitting module, which is
    where the per-step training and per-unit analysis records live.
    """
    if verbose:
        level = "DEBUG"

    handler = RichHandler(
        rich_tracebacks=True,
        markup=False,  # unit names and checkpoint paths contain brackets
        show_path=verbose,
        show_time=True,
        log_time_format="[%X]",
    )
    # replaces whatever handlers a launched DBOS runtime installed
    logging.basicConfig(level=level, format="%(message)s", handlers=[handler], force=True)

    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)
    logging.getLogger("dbos").setLevel(logging.NOTSET if verbose else logging.WARNING)
