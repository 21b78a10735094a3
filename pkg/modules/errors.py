"""Exception hierarchy shared by every Themagator module.

Each error carries the CLI exit code it maps to:
1 usage/config, 2 data, 3 backend failure after retries.
"""

from __future__ import annotations


class ThemagatorError(Exception):
    exit_code = 1


class ConfigError(ThemagatorError):
    exit_code = 1


class RunLockedError(ConfigError):
    pass


class DataError(ThemagatorError):
    exit_code = 2


class CorpusFormatError(DataError):
    def __init__(self, path, record, message):
        self.path = str(path)
        self.record = record
        super().__init__(f"{self.path}: record {record}: {message}")


class DuplicatePostError(DataError):
    def __init__(self, ids):
        self.ids = sorted(set(ids))
        super().__init__(f"duplicate post id(s): {', '.join(self.ids)}")


class KeywordRuleError(ConfigError):
    pass


class SamplingError(DataError):
    pass


class CodebookError(DataError):
    def __init__(self, findings):
        self.findings = list(findings)
        detail = "; ".join(str(f) for f in self.findings)
        super().__init__(f"invalid codebook: {detail}")


class GoldLabelError(DataError):
    pass


class PromptError(DataError):
    pass


class IdMismatchError(DataError):
    def __init__(self, only_gold, only_pred):
        self.only_gold = sorted(only_gold)
        self.only_pred = sorted(only_pred)
        super().__init__(
            "gold/prediction post ids differ: "
            f"only in gold={self.only_gold}, only in predictions={self.only_pred}"
        )


class EmptyStoreError(DataError):
    pass


class BackendError(ThemagatorError):
    exit_code = 3


class CredentialError(BackendError):
    pass


class TransportError(BackendError):
    def __init__(self, message, status=None):
        self.status = status
        super().__init__(message if status is None else f"{message} (last status {status})")


class ClassificationFailure(BackendError):
    """Raised when no attempt produced a parseable answer."""

    def __init__(self, failure, result):
        self.failure = failure
        self.result = result
        super().__init__(
            f"classification failed after {result.attempts} attempt(s): "
            f"{failure.reason} ({failure.detail})"
        )

    @property
    def raw_attempts(self):
        return self.result.raw_attempts
