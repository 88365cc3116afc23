import logging

LOG_FORMAT = "%(asctime)s - %(filename)s:%(lineno)d - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def verbosity_level(verbosity):
    if verbosity is None or verbosity <= 0:
        return logging.WARNING
    if verbosity == 1:
        return logging.INFO
    return logging.DEBUG


def setup_logging(verbosity, log_file=None):
    logging_level = verbosity_level(verbosity)

    # Clear existing handlers (if any) to avoid duplicate logs
    for handler in logging.root.handlers[:]:
        logging.root.removeHandler(handler)

    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=logging_level,
        format=LOG_FORMAT,
        datefmt=DATE_FORMAT,
        handlers=handlers,
    )

    # Solver and numpy warnings end up in the same stream
    logging.captureWarnings(True)


def init_worker_logging(logging_level):
    """Initializer for pool workers, which do not inherit the parent's handlers under spawn."""
    if logging.root.handlers:
        logging.root.setLevel(logging_level)
        return
    logging.basicConfig(level=logging_level, format=LOG_FORMAT, datefmt=DATE_FORMAT)
    logging.captureWarnings(True)
