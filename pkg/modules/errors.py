from typing import Optional

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENV_FAULT = 3


class PolgradError(Exception):
    exit_code = 1


class ShapeError(PolgradError, ValueError):
    exit_code = 2


class ContractError(PolgradError, ValueError):
    exit_code = 2


class ConfigError(PolgradError, ValueError):
    exit_code = EXIT_CONFIG


class CheckpointError(PolgradError):
    exit_code = EXIT_CONFIG


class CurveError(PolgradError):
    exit_code = EXIT_CONFIG


class NumericalError(PolgradError, ArithmeticError):
    """Non-finite values in an iterative solver or a factor that is not PSD."""


class EnvironmentFault(PolgradError, RuntimeError):
    exit_code = EXIT_ENV_FAULT

    def __init__(self, message: str, step_index: Optional[int] = None):
        if step_index is not None:
            message = f"{message} (at step {step_index})"
        super().__init__(message)
        self.step_index = step_index


class ProtocolError(EnvironmentFault):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


class RemoteEnvError(EnvironmentFault):
    """An ERROR frame returned by an envlink server."""

    def __init__(self, code: int, message: str):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.remote_message = message


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, PolgradError):
        return exc.exit_code
    return 1
