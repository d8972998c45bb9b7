class MDRNError(Exception):
    exit_code = 1


class ConfigError(MDRNError, ValueError):
    exit_code = 2


class DataError(MDRNError):
    exit_code = 3


class NonFiniteLossError(MDRNError, FloatingPointError):
    exit_code = 4
