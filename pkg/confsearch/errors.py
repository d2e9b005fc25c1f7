class ConfigurationError(ValueError):
    """A run was set up in a way the search cannot carry out, e.g. a budget too small for its neighbourhood."""
