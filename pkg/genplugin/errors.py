"""Exception hierarchy. Everything a user can fix derives from GenPluginError."""


class GenPluginError(Exception):
    """Base class for user-facing failures (CLI exit code 1)."""


class ConfigError(GenPluginError, ValueError):
    pass


class CorpusError(GenPluginError, ValueError):
    pass


class MissingArtifactError(GenPluginError):
    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"required stage '{stage}' has not been run"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


class StaleCacheError(GenPluginError):
    def __init__(self, expected: str, found: str):
        super().__init__(
            f"stale cache: built for checkpoint {found[:12]}, current checkpoint is {expected[:12]}"
        )


class TrainingDivergence(GenPluginError):
    def __init__(self, term: str, value: float):
        self.term = term
        super().__init__(f"loss term '{term}' is non-finite ({value})")
