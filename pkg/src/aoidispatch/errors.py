"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is out of range or malformed."""


class ContractViolation(RuntimeError):
    """An operation was called outside its documented contract."""


class AccountingError(RuntimeError):
    """A result row failed the reward = throughput - cost * queries identity."""
