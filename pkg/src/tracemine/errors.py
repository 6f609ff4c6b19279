"""Exception hierarchy shared by all pipeline stages."""


class TraceMineError(Exception):
    """Base class. ``exit_code`` is what the CLI returns for it."""

    exit_code = 3


class ConfigError(TraceMineError):
    exit_code = 1


class DataError(TraceMineError):
    exit_code = 2


class IngestError(DataError):
    pass


class MissingArtifactError(DataError):
    def __init__(self, path, producer):
        self.path = path
        self.producer = producer
        super().__init__(
            f"missing artifact {path}; run the `{producer}` subcommand first"
        )


class CycleError(DataError):
    def __init__(self, nodes):
        self.nodes = sorted(nodes)
        super().__init__(f"graph has a cycle through nodes {self.nodes}")


class InvariantError(TraceMineError):
    exit_code = 3


class TrainingDiverged(InvariantError):
    pass
