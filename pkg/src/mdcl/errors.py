"""Exception types shared across the package."""


class MDCLError(Exception):
    pass


class ShapeError(MDCLError, ValueError):
    pass


class ContractError(MDCLError, ValueError):
    pass


class ConfigError(MDCLError, ValueError):
    pass


class StateError(MDCLError, RuntimeError):
    pass


class SelectionError(MDCLError, ValueError):
    pass


class ParseError(MDCLError, ValueError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


class TrainingError(MDCLError, RuntimeError):
    pass
