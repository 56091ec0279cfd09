from .settings import EXIT_DATA, EXIT_MODEL, EXIT_USAGE


class TestselError(Exception):
    __test__ = False
    exit_code = EXIT_DATA


class UsageError(TestselError):
    exit_code = EXIT_USAGE


class DataError(TestselError, ValueError):
    exit_code = EXIT_DATA


class ModelError(TestselError, RuntimeError):
    exit_code = EXIT_MODEL


def exit_code_for(exc):
    if isinstance(exc, TestselError):
        return exc.exit_code
    if isinstance(exc, (OSError, ValueError)):
        return EXIT_DATA
    return EXIT_MODEL
