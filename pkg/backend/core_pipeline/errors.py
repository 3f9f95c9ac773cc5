# errors.py - Exception hierarchy shared by every pipeline stage
#
# Each error carries the process exit code the CLI reports for it:
# 0 ok, 1 usage/config, 2 data, 3 numeric.


class TokenwalkError(Exception):
    exit_code = 1


class InputError(TokenwalkError):
    """Malformed or missing input data (files, node ids, targets)."""
    exit_code = 2


class MissingArtifactError(InputError):
    """A prerequisite artifact is absent; the message names the command to run."""

    def __init__(self, artifact, command):
        super().__init__(f"Missing artifact {artifact}: run `tokenwalk {command}` first.")
        self.artifact = artifact
        self.command = command


class ConfigError(TokenwalkError):
    exit_code = 1


class LogicError(TokenwalkError):
    """An internal contract was violated by the caller (bad edge, shape mismatch)."""
    exit_code = 1


class NumericError(TokenwalkError):
    exit_code = 3


class TrainingDiverged(NumericError):
    """Loss became non-finite; `state` holds the last good parameters."""

    def __init__(self, message, state=None, history=None):
        super().__init__(message)
        self.state = state
        self.history = history or []


class LockError(TokenwalkError):
    exit_code = 1
