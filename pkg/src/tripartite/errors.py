"""Exception types. CLI exit codes map onto these (see ``tripartite.cli``)."""


class ConfigError(ValueError):
    """Invalid configuration or mismatched shapes/dimensions."""


class DumpFormatError(ValueError):
    """Malformed ``ltr-dump`` file; ``lineno`` is 1-based."""

    def __init__(self, message, lineno=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if lineno is not None:
            where += f"{lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.lineno = lineno
        self.path = path


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, last_finite_epoch, step=None):
        msg = f"non-finite loss at epoch {epoch}"
        if step is not None:
            msg += f" (step {step})"
        msg += f"; last finite-loss epoch: {last_finite_epoch}"
        super().__init__(msg)
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch


class SlotUninitialized(LookupError):
    """The memory-bank slot of a sample's own class has never been written.

    Per-sample contrastive losses raise this so callers can skip the sample;
    batch reductions count such samples as contributing zero.
    """
