# settings.py - Base config model and process-level knobs

import os

from pydantic import BaseModel, ConfigDict, ValidationError

from .errors import ConfigError

THREADS_ENV = "TOKENWALK_THREADS"


class StrictModel(BaseModel):
    """Config section: unknown keys rejected, immutable after validation."""
    model_config = ConfigDict(extra="forbid", frozen=True)


def validate_model(model_cls, data):
    """Validate `data` into `model_cls`, converting pydantic errors to a ConfigError
    that lists every violation."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        lines = []
        for err in e.errors():
            where = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"  - {where}: {err['msg']}")
        raise ConfigError(f"Invalid {model_cls.__name__} ({len(lines)} violations):\n" + "\n".join(lines)) from None


def worker_count(requested=None):
    """Worker pool size, capped by TOKENWALK_THREADS."""
    cap = os.environ.get(THREADS_ENV)
    n = requested or os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)
