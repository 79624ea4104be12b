"""Exception hierarchy shared across the package."""


class Llm4tsError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(Llm4tsError, ValueError):
    """Invalid parameters or configuration documents."""


class StepAfterTermination(Llm4tsError):
    """The environment was stepped after the participant disengaged."""


class NumericalError(Llm4tsError, ArithmeticError):
    """A covariance matrix failed its factorization or inversion."""


class ParseError(Llm4tsError):
    """A structured document could not be parsed."""


class ValidationError(Llm4tsError, ValueError):
    """A document parsed but violates its content rules."""


class TemplateError(Llm4tsError):
    """A prompt template references an unknown placeholder or is malformed."""


class EmptyInput(Llm4tsError, ValueError):
    """An aggregation was requested over no data."""


class GenerationStalled(Llm4tsError):
    """Corpus generation stopped producing new unique descriptions."""


class EndpointError(Llm4tsError):
    """Base class for inference-server failures."""


class Timeout(EndpointError):
    """The inference server did not answer within the configured timeout."""


class HttpError(EndpointError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        self.body = body[:200]
        super().__init__(f"HTTP {status}: {self.body}")


class MalformedResponse(EndpointError):
    """The server answered 2xx but without usable choices/content."""
