class DeskRecError(Exception):
    """
    Base class for every error raised by deskrec
    """
    exit_code = 1


class ConfigError(DeskRecError):
    """
    Invalid configuration or experiment plan
    """
    exit_code = 2


class InvariantViolation(DeskRecError):
    """
    A data invariant was broken (signals a simulator or pipeline bug)
    """
    exit_code = 3


class UnknownEntityError(InvariantViolation):
    """
    An event referenced a user or item that was never registered
    """


class TrainingDivergence(DeskRecError):
    """
    Training produced a non-finite loss
    """

    def __init__(self, model: str, day: int, batch: int, loss: float, norms: dict):
        self.model, self.day, self.batch, self.loss, self.norms = model, day, batch, loss, norms
        worst = ", ".join(f"{k}={v:.3g}" for k, v in sorted(norms.items()))
        super().__init__(f"{model} diverged on day {day}, batch {batch}: loss={loss} ({worst})")


class MissingTeacherError(DeskRecError):
    """
    Distillation was requested for a sample with no logged teacher prediction
    """
