import os

from dbos import DBOS, DBOSConfig

DBOS_URL_ENV = "DUALFLOW_DBOS_URL"


def get_dbos_config() -> DBOSConfig:
    return {
        "name": "dualflow-ablation",
        "system_database_url": os.environ.get(DBOS_URL_ENV, "sqlite:///dualflow-dbos.sqlite"),
        "log_level": "WARNING",
    }


def configure_dbos() -> None:
    """Configure DBOS without launching it."""
    DBOS(config=get_dbos_config())


def launch_dbos() -> None:
    """Launch the runtime; workflow modules must be imported first."""
    DBOS.launch()
