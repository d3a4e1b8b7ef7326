class BridgeGraphError(Exception):
    exit_code = 1


class ConfigError(BridgeGraphError):
    """Malformed or invalid pipeline configuration."""

    exit_code = 2


class MissingArtifactError(BridgeGraphError):
    """A stage was requested but a predecessor's output file is absent."""

    exit_code = 3

    def __init__(self, path, stage: str | None = None):
        self.path = path
        self.stage = stage
        where = f" (needed by stage '{stage}')" if stage else ""
        super().__init__(f"missing artifact: {path}{where}")


class NetworkError(BridgeGraphError):
    """Overpass or LLM endpoint unreachable and nothing cached."""

    exit_code = 4
